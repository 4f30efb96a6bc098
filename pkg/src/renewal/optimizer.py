"""Renewal-offer optimization: single-period efficient frontier, boundary
solutions and multi-period plans with competitiveness feedback.

Every problem is separable over policies once the churn caps are priced
by Lagrange multipliers, so each policy picks its own best action (or
action path) and only the multipliers couple the portfolio.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .portfolio import Portfolio, SynthConfig, TreatmentGrid, true_churn_probability
from .propensity import PropensityModel
from .response import LinearLogisticDR, PooledLogisticModel, conditional_response_matrix

log = logging.getLogger(__name__)

DISCRETE_MEDIANS = "discrete_medians"
CONTINUOUS_GRID = "continuous_grid"
CHURN_TOL = 1e-6
BRACKET_TOL = 1e-12
FEEDBACK_NOTE = ("competitiveness feedback is a modelling assumption: competitor prices are held "
                 "fixed while the own premium compounds, comp' = (1 + comp) / (1 + t) - 1")


class Infeasible(ValueError):
    pass


# ---------------------------------------------------------------------------
# action sets


@dataclass(frozen=True)
class ActionSet:
    kind: str
    actions: tuple
    step: Optional[float] = None

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=float)
        if a.ndim != 1 or len(a) == 0:
            raise ValueError("an action set needs at least one action")
        if np.any(np.diff(a) <= 0):
            raise ValueError("actions must be strictly increasing")
        object.__setattr__(self, "actions", tuple(float(v) for v in a))

    @classmethod
    def discrete(cls, grid: TreatmentGrid) -> "ActionSet":
        return cls(DISCRETE_MEDIANS, grid.medians)

    @classmethod
    def continuous(cls, lower: float, upper: float, step: float = 0.001) -> "ActionSet":
        if not upper > lower or step <= 0:
            raise ValueError("need lower < upper and a positive step")
        k = int(math.floor((upper - lower) / step + 1e-9))
        a = lower + step * np.arange(k + 1)
        if upper - a[-1] > 1e-12:
            a = np.append(a, upper)
        return cls(CONTINUOUS_GRID, tuple(a), step)

    def refined(self) -> "ActionSet":
        """The same range at half the step (continuous grids only)."""
        if self.kind != CONTINUOUS_GRID:
            raise TypeError("only continuous grids can be refined")
        return ActionSet.continuous(self.actions[0], self.actions[-1], self.step / 2)

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.actions)

    def __len__(self) -> int:
        return len(self.actions)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "actions": list(self.actions), "step": self.step}


# ---------------------------------------------------------------------------
# churn evaluators
#
# An evaluator answers "churn probability of each policy at rate change t
# and competitiveness comp".  ``matrix`` gives all actions at once.


class ChurnResponse:
    uses_competitiveness = True
    n: int

    def at(self, t, comp=None) -> np.ndarray:
        raise NotImplementedError

    def matrix(self, actions, comp=None) -> np.ndarray:
        return np.column_stack([self.at(np.full(self.n, a), comp) for a in np.asarray(actions, float)])

    def take(self, idx) -> "ChurnResponse":
        raise NotImplementedError


class FunctionResponse(ChurnResponse):
    """Wraps ``fn(t, comp, idx) -> churn`` on per-policy arrays; ``idx`` are policy positions."""

    def __init__(self, fn: Callable, comp, uses_competitiveness: bool = True, idx=None):
        self.fn = fn
        self.comp = np.asarray(comp, dtype=float)
        self.n = len(self.comp)
        self.idx = np.arange(self.n) if idx is None else np.asarray(idx)
        self.uses_competitiveness = uses_competitiveness

    def at(self, t, comp=None):
        comp = self.comp if comp is None else np.asarray(comp, float)
        return np.asarray(self.fn(np.broadcast_to(np.asarray(t, float), (self.n,)), comp, self.idx), float)

    def take(self, idx):
        idx = np.asarray(idx)
        return FunctionResponse(self.fn, self.comp[idx], self.uses_competitiveness, self.idx[idx])


class TableResponse(ChurnResponse):
    """Fixed N x A churn table over an action set; competitiveness is ignored."""

    uses_competitiveness = False

    def __init__(self, table, actions):
        self.table = np.asarray(table, dtype=float)
        self.actions = np.asarray(actions, dtype=float)
        self.n = self.table.shape[0]

    def at(self, t, comp=None):
        t = np.broadcast_to(np.asarray(t, float), (self.n,))
        j = np.abs(t[:, None] - self.actions[None, :]).argmin(axis=1)
        if np.any(np.abs(self.actions[j] - t) > 1e-12):
            raise ValueError("rate change not in the table's action set")
        return self.table[np.arange(self.n), j]

    def matrix(self, actions, comp=None):
        a = np.asarray(actions, float)
        j = np.abs(a[:, None] - self.actions[None, :]).argmin(axis=1)
        if np.any(np.abs(self.actions[j] - a) > 1e-12):
            raise ValueError("action not in the table's action set")
        return self.table[:, j]

    def take(self, idx):
        return TableResponse(self.table[np.asarray(idx)], self.actions)


class TrueResponse(ChurnResponse):
    """Ground-truth churn of a synthetic portfolio."""

    def __init__(self, cfg: SynthConfig, data: Portfolio):
        self.cfg = cfg
        self.data = data
        self.n = data.n

    def at(self, t, comp=None):
        comp = self.data.competitiveness if comp is None else comp
        return true_churn_probability(self.cfg, np.broadcast_to(np.asarray(t, float), (self.n,)), comp,
                                      self.data.risk_level, self.data.policy_type)

    def take(self, idx):
        return TrueResponse(self.cfg, self.data.subset(idx))


class PooledResponse(ChurnResponse):
    """Discrete arm: the pooled churn model, one column per rate-change category.

    Actions are matched to categories through the grid medians; any other
    rate change is mapped to the category containing it.
    """

    def __init__(self, model: PooledLogisticModel, data: Portfolio, grid: TreatmentGrid):
        if model.design.n_categories != grid.n_intervals:
            raise ValueError("model and grid disagree on the number of categories")
        self.model = model
        self.data = data
        self.grid = grid
        self.n = data.n

    def _categories(self, t):
        t = np.asarray(t, float)
        med = np.asarray(self.grid.medians)
        hit = np.abs(t[..., None] - med).argmin(axis=-1)
        exact = np.abs(med[hit] - t) <= 1e-12
        clipped = np.clip(t, self.grid.lower, self.grid.upper)
        return np.where(exact, hit, self.grid.category_of(clipped))

    def at(self, t, comp=None):
        cat = self._categories(np.broadcast_to(np.asarray(t, float), (self.n,)))
        return self.model.predict(self.data, cat, comp)

    def matrix(self, actions, comp=None):
        cats = self._categories(np.asarray(actions, float))
        return np.column_stack([self.model.predict(self.data, int(c), comp) for c in cats])

    def take(self, idx):
        return PooledResponse(self.model, self.data.subset(idx), self.grid)


class DoseResponse(ChurnResponse):
    """Continuous arm: a dose-response model evaluated at (t, GPS(t, X)).

    The conditional response depends on the covariates only through the
    GPS, so competitiveness has no effect here.
    """

    uses_competitiveness = False

    def __init__(self, model, ps: PropensityModel, X):
        self.model = model
        self.ps = ps
        self.X = np.asarray(X, dtype=float)
        self.n = len(self.X)

    def _clip(self, t):
        return np.clip(np.asarray(t, float), self.ps.bounds.lower, self.ps.bounds.upper)

    def at(self, t, comp=None):
        t = self._clip(np.broadcast_to(np.asarray(t, float), (self.n,)))
        if isinstance(self.model, LinearLogisticDR):
            return self.model.predict_x(t, self.X)
        return self.model.predict(t, self.ps.gps(t, self.X))

    def matrix(self, actions, comp=None):
        a = self._clip(actions)
        if isinstance(self.model, LinearLogisticDR):
            return np.column_stack([self.model.predict_x(v, self.X) for v in a])
        return conditional_response_matrix(self.model, self.X, self.ps, a)

    def take(self, idx):
        return DoseResponse(self.model, self.ps, self.X[np.asarray(idx)])


# ---------------------------------------------------------------------------
# single-period frontier


@dataclass
class FrontierPoint:
    alpha: float
    expected_profit: float
    expected_churn: float
    plan: np.ndarray            # chosen rate change per policy
    dual_gap: float
    feasible: bool = True
    multiplier: float = 0.0
    choice: Optional[np.ndarray] = None   # chosen action index per policy

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "expected_profit": self.expected_profit,
                "expected_churn": self.expected_churn, "dual_gap": self.dual_gap,
                "feasible": self.feasible, "multiplier": self.multiplier,
                "plan": [float(v) for v in self.plan]}


def margins(premium_old, expenses, actions) -> np.ndarray:
    """N x A margins P_old (1 + t) - E."""
    P = np.asarray(premium_old, float)[:, None] * (1.0 + np.asarray(actions, float)[None, :])
    return P - np.asarray(expenses, float)[:, None]


def _pick(R, Y, mu):
    """Per-policy argmax of R - mu Y; ties go to lower churn, then lower index."""
    s = R - mu * Y
    best = s.max(axis=1, keepdims=True)
    return np.where(s == best, Y, np.inf).argmin(axis=1)


class _Lagrangian:
    """Shared machinery for one churn-priced choice problem."""

    def __init__(self, R, Y):
        self.R = np.asarray(R, float)
        self.Y = np.asarray(Y, float)
        self.n = self.R.shape[0]
        self.rows = np.arange(self.n)

    def plan(self, mu):
        a = _pick(self.R, self.Y, mu)
        return a, self.R[self.rows, a].sum(), self.Y[self.rows, a].sum()

    def value(self, mu):
        """sum_i max_a (R - mu Y); the dual function without its mu * cap term."""
        return (self.R - mu * self.Y).max(axis=1).sum()

    def min_churn_plan(self):
        # lowest churn per policy, ties to the higher profit
        Ymin = self.Y.min(axis=1, keepdims=True)
        return np.where(self.Y == Ymin, self.R, -np.inf).argmax(axis=1)

    def upper_mu(self, ok):
        """A multiplier whose plan satisfies ``ok(profit, churn)``."""
        mu = max(1.0, float(np.abs(self.R).max()))
        for _ in range(200):
            a, p, c = self.plan(mu)
            if ok(p, c):
                return mu
            mu *= 2.0
        raise RuntimeError("no finite multiplier reaches the target")


def solve_cap(R, Y, alpha: float, actions=None) -> FrontierPoint:
    """Maximize sum R[i, a_i] subject to mean Y[i, a_i] <= alpha.

    Bisection on the churn price mu until the plan's churn is within
    1e-6 of the cap or the bracket is narrower than 1e-12 (relative);
    then policies that differ between the two bracket plans are switched
    to the higher-profit action in order of profit gained per unit of
    churn while the cap holds.  ``dual_gap`` bounds the distance to the
    true optimum: best dual value minus the returned profit.
    """
    L = _Lagrangian(R, Y)
    n = L.n
    cap = alpha * n
    slack = 1e-12 * max(1.0, cap)
    actions = np.arange(R.shape[1]) if actions is None else np.asarray(actions, float)

    def point(a, gap, feasible=True, mu=0.0):
        return FrontierPoint(float(alpha), float(R[L.rows, a].sum()), float(Y[L.rows, a].mean()),
                             actions[a], float(max(gap, 0.0)), feasible, float(mu), a)

    a0, p0, c0 = L.plan(0.0)
    if c0 <= cap + slack:
        return point(a0, 0.0)
    amin = L.min_churn_plan()
    if Y[L.rows, amin].sum() > cap + slack:
        return point(amin, math.nan, feasible=False, mu=math.inf)

    lo, hi = 0.0, L.upper_mu(lambda p, c: c <= cap + slack)
    dual = min(L.value(lo) + lo * cap, L.value(hi) + hi * cap)
    a_hi, _, c_hi = L.plan(hi)
    while cap - c_hi > CHURN_TOL * n and hi - lo > BRACKET_TOL * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        a, p, c = L.plan(mid)
        dual = min(dual, L.value(mid) + mid * cap)
        if c <= cap + slack:
            hi, a_hi, c_hi = mid, a, c
        else:
            lo = mid
    a_lo, _, _ = L.plan(lo)
    a = _fill(L, a_hi, a_lo, lambda p, c: c <= cap + slack, by_gain=True)
    return point(a, dual - R[L.rows, a].sum(), mu=hi)


def _fill(L: _Lagrangian, base, other, ok, by_gain: bool):
    """Greedy switches from plan ``base`` towards ``other`` while ``ok`` holds.

    by_gain: order by profit gained per unit of extra churn (frontier);
    otherwise by churn saved per unit of profit lost (minimum-churn plan).
    """
    a = base.copy()
    diff = np.flatnonzero(base != other)
    if len(diff) == 0:
        return a
    dR = L.R[diff, other[diff]] - L.R[diff, base[diff]]
    dY = L.Y[diff, other[diff]] - L.Y[diff, base[diff]]
    if by_gain:
        ratio = np.where(dY > 0, dR / np.where(dY > 0, dY, 1.0), np.inf)
        order = np.lexsort((diff, -ratio))
    else:
        ratio = np.where(dR < 0, -dY / np.where(dR < 0, -dR, 1.0), np.inf)
        order = np.lexsort((diff, -ratio))
    p = L.R[L.rows, a].sum()
    c = L.Y[L.rows, a].sum()
    for k in order:
        i = diff[k]
        p2, c2 = p + dR[k], c + dY[k]
        better = (dR[k] > 0) if by_gain else (dY[k] < 0)
        if better and ok(p2, c2):
            a[i] = other[i]
            p, c = p2, c2
    return a


def frontier_from_matrices(Y, premium_old, expenses, actions, alphas) -> list[FrontierPoint]:
    """Frontier points for ascending ``alphas`` given an N x A churn table."""
    alphas = np.asarray(alphas, dtype=float)
    if np.any(np.diff(alphas) < 0):
        raise ValueError("alpha grid must be ascending")
    Y = np.asarray(Y, float)
    R = (1.0 - Y) * margins(premium_old, expenses, actions)
    out = []
    for alpha in alphas:
        pt = solve_cap(R, Y, float(alpha), actions)
        if not pt.feasible:
            log.warning("churn cap %.6g is below the minimum achievable churn", alpha)
        elif out and out[-1].feasible and pt.expected_profit < out[-1].expected_profit:
            # a looser cap can always reuse the tighter plan
            prev = out[-1]
            bound = pt.expected_profit + pt.dual_gap
            pt = FrontierPoint(float(alpha), prev.expected_profit, prev.expected_churn, prev.plan,
                               max(bound - prev.expected_profit, 0.0), True, pt.multiplier, prev.choice)
        out.append(pt)
    return out


def frontier(portfolio: Portfolio, response: ChurnResponse, actions: ActionSet,
             alpha_grid) -> list[FrontierPoint]:
    """Efficient frontier: best expected profit for each cap on expected churn."""
    Y = response.matrix(actions.values)
    return frontier_from_matrices(Y, portfolio.premium_old, portfolio.expenses, actions.values, alpha_grid)


def frontier_tsv(points: Sequence[FrontierPoint]) -> str:
    lines = ["alpha\texpected_profit\texpected_churn\tdual_gap\tfeasible"]
    for p in points:
        lines.append(f"{float(p.alpha)!r}\t{float(p.expected_profit)!r}\t{float(p.expected_churn)!r}\t"
                     f"{float(p.dual_gap)!r}\t{int(p.feasible)}")
    return "\n".join(lines) + "\n"


def plan_json(point: FrontierPoint, ids, **meta) -> str:
    doc = {"format": "renewal.plan", "version": 1, **meta, **{k: v for k, v in point.to_dict().items()
                                                            if k != "plan"}}
    doc["ids"] = [int(v) for v in ids]
    doc["rate_change"] = [float(v) for v in point.plan]
    return json.dumps(doc, sort_keys=True)


def refinement_change(portfolio: Portfolio, response: ChurnResponse, actions: ActionSet,
                      alpha: float) -> float:
    """Relative change of the frontier objective when the grid step is halved."""
    a = frontier(portfolio, response, actions, [alpha])[0]
    b = frontier(portfolio, response, actions.refined(), [alpha])[0]
    return abs(b.expected_profit - a.expected_profit) / max(abs(a.expected_profit), 1e-300)


# ---------------------------------------------------------------------------
# realized reference and boundary solutions


def expected_outcome(portfolio: Portfolio, response: ChurnResponse, t) -> tuple[float, float]:
    """(expected profit, expected churn) of a single-period plan ``t``."""
    t = np.broadcast_to(np.asarray(t, float), (portfolio.n,))
    y = response.at(t)
    m = portfolio.premium_old * (1.0 + t) - portfolio.expenses
    return float(((1.0 - y) * m).sum()), float(y.mean())


def realized_outcome(portfolio: Portfolio, response: Optional[ChurnResponse] = None,
                     source: str = "model") -> tuple[float, float]:
    """Profit and churn of the observed renewal offers.

    ``source="model"`` evaluates the observed offers with the response
    model (expected values); ``"observed"`` uses the recorded churn.
    """
    if source == "observed":
        m = portfolio.premium_old * (1.0 + portfolio.rate_change) - portfolio.expenses
        y = portfolio.churn
        return float(((1 - y) * m).sum()), float(y.mean())
    if source != "model":
        raise ValueError("source must be 'model' or 'observed'")
    if response is None:
        raise ValueError("model-based reference needs a response")
    return expected_outcome(portfolio, response, portfolio.rate_change)


@dataclass
class BoundarySolutions:
    A: FrontierPoint
    B: FrontierPoint
    reference_profit: float
    reference_churn: float
    B_churn_gap: float

    def to_dict(self) -> dict:
        return {"reference_profit": self.reference_profit, "reference_churn": self.reference_churn,
                "A": {k: v for k, v in self.A.to_dict().items() if k != "plan"},
                "B": {k: v for k, v in self.B.to_dict().items() if k != "plan"},
                "B_churn_gap": self.B_churn_gap}

    def to_tsv(self) -> str:
        lines = ["solution\texpected_profit\texpected_churn\tdual_gap\tfeasible"]
        for name, p in (("realized", None), ("A", self.A), ("B", self.B)):
            if p is None:
                lines.append(f"realized\t{float(self.reference_profit)!r}\t{float(self.reference_churn)!r}\t0.0\t1")
            else:
                lines.append(f"{name}\t{float(p.expected_profit)!r}\t{float(p.expected_churn)!r}\t"
                             f"{float(p.dual_gap)!r}\t{int(p.feasible)}")
        return "\n".join(lines) + "\n"


def solve_profit_floor(R, Y, floor: float, actions=None) -> tuple[FrontierPoint, float]:
    """Minimize mean churn subject to sum R >= floor.

    Uses the same churn-priced choices as :func:`solve_cap`: the plan at
    price mu minimizes churn among plans with at least its profit, so the
    largest mu whose plan meets the floor is bisected for.  Returns the
    point (its ``dual_gap`` in profit units against the frontier at the
    achieved churn) and the gap in mean-churn units.
    """
    L = _Lagrangian(R, Y)
    n = L.n
    actions = np.arange(R.shape[1]) if actions is None else np.asarray(actions, float)
    slack = 1e-12 * max(1.0, abs(floor))
    ok = lambda p, c: p >= floor - slack  # noqa: E731

    def point(a, feasible, mu, churn_bound):
        churn = Y[L.rows, a].sum()
        profit = R[L.rows, a].sum()
        # upper bound on the best profit at this churn level, over the prices tried
        dual = min(L.value(m) + m * churn for m in mus)
        gap_c = (churn - churn_bound) / n if feasible else math.nan
        return FrontierPoint(float(churn / n), float(profit), float(churn / n), actions[a],
                             float(max(dual - profit, 0.0)) if feasible else math.nan,
                             feasible, float(mu), a), float(max(gap_c, 0.0)) if feasible else math.nan

    mus = [0.0]
    a0, p0, _ = L.plan(0.0)
    if not ok(p0, 0):
        return point(a0, False, 0.0, 0.0)
    amin = L.min_churn_plan()
    if ok(R[L.rows, amin].sum(), 0):
        return point(amin, True, math.inf, Y[L.rows, amin].sum())

    # lower bound on churn: for mu > 0, min churn >= (sum max(R - mu Y) ... ) rearranged
    def churn_lb(mu):
        return (floor - L.value(mu)) / mu if mu > 0 else -math.inf

    lo = 0.0
    mu_big = max(1.0, float(np.abs(R).max()))
    hi = mu_big
    while ok(L.plan(hi)[1], 0):
        lo = hi
        hi *= 2.0
        if hi > 1e300:
            break
    mus += [lo, hi]
    bound = max(churn_lb(lo), churn_lb(hi))
    a_lo, p_lo, c_lo = L.plan(lo)
    while hi - lo > BRACKET_TOL * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        a, p, c = L.plan(mid)
        mus.append(mid)
        bound = max(bound, churn_lb(mid))
        if ok(p, c):
            lo, a_lo, p_lo, c_lo = mid, a, p, c
            if p - floor <= CHURN_TOL * max(1.0, abs(floor)):
                break
        else:
            hi = mid
    a_hi, _, _ = L.plan(hi)
    a = _fill(L, a_lo, a_hi, ok, by_gain=False)
    return point(a, True, lo, bound)


def boundary_solutions(portfolio: Portfolio, response: ChurnResponse, actions: ActionSet,
                       reference: str = "model") -> BoundarySolutions:
    """A: most profit at no more than the realized churn; B: least churn at no less than the realized profit."""
    ref_profit, ref_churn = realized_outcome(portfolio, response, reference)
    Y = response.matrix(actions.values)
    R = (1.0 - Y) * margins(portfolio.premium_old, portfolio.expenses, actions.values)
    A = solve_cap(R, Y, ref_churn, actions.values)
    B, gap_c = solve_profit_floor(R, Y, ref_profit, actions.values)
    if not A.feasible:
        log.warning("boundary solution A is infeasible")
    if not B.feasible:
        log.warning("boundary solution B is infeasible")
    return BoundarySolutions(A, B, ref_profit, ref_churn, gap_c)


# ---------------------------------------------------------------------------
# multi-period plans


def price_competitiveness(comp, t):
    """Competitiveness after an own rate change t with competitor prices fixed."""
    return (1.0 + np.asarray(comp, float)) / (1.0 + np.asarray(t, float)) - 1.0


def frozen_competitiveness(comp, t):
    return np.broadcast_to(np.asarray(comp, float), np.broadcast(comp, t).shape).copy()


@dataclass
class RenewalPlan:
    ids: np.ndarray
    rates: np.ndarray           # N x tau
    churn_by_year: np.ndarray   # expected mean churn per year
    profit_by_year: np.ndarray  # expected survival-weighted profit per year
    alphas: np.ndarray
    objective: float
    dual_gap: float
    feasible: bool
    converged: bool
    iterations: int
    assumptions: list = field(default_factory=lambda: [FEEDBACK_NOTE])

    @property
    def tau(self) -> int:
        return self.rates.shape[1]

    def to_dict(self) -> dict:
        return {"format": "renewal.multiperiod", "version": 1, "tau": self.tau,
                "alphas": self.alphas.tolist(), "objective": self.objective,
                "dual_gap": self.dual_gap, "feasible": self.feasible, "converged": self.converged,
                "iterations": self.iterations, "churn_by_year": self.churn_by_year.tolist(),
                "profit_by_year": self.profit_by_year.tolist(), "assumptions": list(self.assumptions),
                "ids": [int(v) for v in self.ids], "rates": self.rates.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_tsv(self) -> str:
        lines = ["year\talpha\texpected_churn\texpected_profit"]
        for j in range(self.tau):
            lines.append(f"{j + 1}\t{float(self.alphas[j])!r}\t{float(self.churn_by_year[j])!r}\t"
                         f"{float(self.profit_by_year[j])!r}")
        lines.append("# " + "; ".join(self.assumptions))
        return "\n".join(lines) + "\n"


def path_outcomes(response: ChurnResponse, premium_old, expenses, comp0, rates,
                  feedback=price_competitiveness, compound: bool = True):
    """Churn and margin per policy and year along given rate paths (N x tau).

    Returns (Y, M): churn in year j and margin P_j - E of year j.
    """
    rates = np.asarray(rates, float)
    n, tau = rates.shape
    comp = np.asarray(comp0, float)
    g = np.ones(n)
    Y = np.empty((n, tau))
    M = np.empty((n, tau))
    for j in range(tau):
        t = rates[:, j]
        Y[:, j] = response.at(t, comp)
        g = g * (1.0 + t) if compound else 1.0 + t
        M[:, j] = np.asarray(premium_old, float) * g - np.asarray(expenses, float)
        comp = feedback(comp, t)
    return Y, M


def _path_value(Y, M, weights: str):
    if weights == "cumulative":
        S = np.cumprod(1.0 - Y, axis=-1)
    elif weights == "per_year":
        S = 1.0 - Y
    else:
        raise ValueError("weights must be 'cumulative' or 'per_year'")
    return S * M


def expected_outcomes(rates, portfolio: Portfolio, response: ChurnResponse,
                      feedback=price_competitiveness, compound: bool = True,
                      weights: str = "cumulative") -> tuple[np.ndarray, np.ndarray]:
    """Expected profit and mean churn per year of a plan (N or N x tau rate changes)."""
    rates = np.asarray(rates, float)
    if rates.ndim == 1:
        rates = rates[:, None]
    if rates.shape[0] != portfolio.n:
        raise ValueError("plan and portfolio sizes differ")
    Y, M = path_outcomes(response, portfolio.premium_old, portfolio.expenses, portfolio.competitiveness,
                         rates, feedback, compound)
    return _path_value(Y, M, weights).sum(axis=0), Y.mean(axis=0)


def _enumerate_paths(response: ChurnResponse, premium_old, expenses, comp0, actions, tau,
                     feedback, compound, weights):
    """Per-policy value and yearly churn of every action path (the full action tree).

    Prefix nodes share their churn evaluations; a response that ignores
    competitiveness is evaluated once per action.
    """
    actions = np.asarray(actions, float)
    A = len(actions)
    n = len(np.asarray(premium_old))
    paths = np.array(list(itertools.product(range(A), repeat=tau)), dtype=np.int64)
    P = len(paths)
    Yp = np.empty((n, P, tau))
    # node churn level by level; node index = path prefix in base-A
    comp_nodes = [np.asarray(comp0, float)]
    base_matrix = None
    for j in range(tau):
        level = np.empty((n, A ** (j + 1)))
        next_comp = []
        for k, comp in enumerate(comp_nodes):
            if response.uses_competitiveness or base_matrix is None:
                Ymat = response.matrix(actions, comp)
                if not response.uses_competitiveness:
                    base_matrix = Ymat
            else:
                Ymat = base_matrix
            level[:, k * A:(k + 1) * A] = Ymat
            if j + 1 < tau and response.uses_competitiveness:
                next_comp.extend(feedback(comp, a) for a in actions)
        if j + 1 < tau:
            comp_nodes = next_comp if response.uses_competitiveness else [None] * (A ** (j + 1))
        prefix = np.zeros(P, dtype=np.int64)
        for h in range(j + 1):
            prefix = prefix * A + paths[:, h]
        Yp[:, :, j] = level[:, prefix]
    t_path = actions[paths]                                 # P x tau
    g = np.cumprod(1.0 + t_path, axis=1) if compound else 1.0 + t_path
    Mp = np.asarray(premium_old, float)[:, None, None] * g[None] - np.asarray(expenses, float)[:, None, None]
    V = _path_value(Yp, Mp, weights).sum(axis=2)
    return paths, V, Yp


def _repair(V, Yp, mu, cap, rows, scale):
    """Raise the prices of violated years until their caps hold.

    Each pass bisects a step along the violated years and re-prices the
    plan; returns (selection, feasible).
    """
    tol = 1e-12 * np.maximum(1.0, cap)

    def plan(m):
        sel = (V - Yp @ m).argmax(axis=1)
        return sel, Yp[rows, sel].sum(axis=0)

    sel, load = plan(mu)
    for _ in range(2 * len(cap) + 2):
        over = load - cap > tol
        if not np.any(over):
            return sel, True
        w = over.astype(float)
        hi = 1e-3 * scale
        while True:
            s_hi, l_hi = plan(mu + hi * w)
            if np.all(l_hi[over] <= cap[over] + tol[over]) or hi > 1e12 * scale:
                break
            hi *= 2.0
        lo = 0.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            s_mid, l_mid = plan(mu + mid * w)
            if np.all(l_mid[over] <= cap[over] + tol[over]):
                hi, s_hi, l_hi = mid, s_mid, l_mid
            else:
                lo = mid
        mu = mu + hi * w
        sel, load = s_hi, l_hi
    return sel, bool(np.all(load - cap <= tol))


def _repair_greedy(V, Yp, sel, cap, rows):
    """Single-policy moves that cut cap violations at the least profit per unit churn saved."""
    tol = 1e-12 * np.maximum(1.0, cap)
    for _ in range(10 * len(sel) + 10):
        cur = Yp[rows, sel]
        over = cur.sum(axis=0) - cap
        if np.all(over <= tol):
            return sel, True
        saved = ((cur[:, None, :] - Yp) * (over > 0)).sum(axis=2)
        lost = V[rows, sel][:, None] - V
        score = np.where(saved > 1e-15, saved / np.maximum(lost, 1e-300), -np.inf)
        j = int(score.argmax())
        if not np.isfinite(score.flat[j]):
            return sel, False
        sel[j // V.shape[1]] = j % V.shape[1]
    return sel, False


def _improve(V, Yp, sel, cap, rows, rounds: int = 5):
    """First-improvement moves that raise the objective and keep every cap."""
    for _ in range(rounds):
        load = Yp[rows, sel].sum(axis=0)
        delta = V - V[rows, sel][:, None]
        fits = np.all(Yp - Yp[rows, sel][:, None, :] <= (cap - load)[None, None, :] + 1e-12, axis=2)
        cand = np.where(fits & (delta > 0), delta, -np.inf)
        best = cand.argmax(axis=1)
        gain = cand[rows, best]
        movers = np.flatnonzero(np.isfinite(gain))
        if len(movers) == 0:
            break
        changed = False
        for i in movers[np.argsort(-gain[movers], kind="stable")]:
            new = best[i]
            d = Yp[i, new] - Yp[i, sel[i]]
            if np.all(load + d <= cap + 1e-12 * np.maximum(1.0, cap)):
                load = load + d
                sel[i] = new
                changed = True
        if not changed:
            break
    return sel


def _improve_pairs(V, Yp, sel, cap, rows, max_pairs_cells: int = 2_000_000):
    """Best joint move of two policies; only when the pair neighbourhood is small."""
    n, P, tau = Yp.shape
    if n * (n - 1) // 2 * P * P * tau > max_pairs_cells:
        return sel
    tol = 1e-12 * np.maximum(1.0, cap)
    for _ in range(50):
        load = Yp[rows, sel].sum(axis=0)
        dV = V - V[rows, sel][:, None]
        dY = Yp - Yp[rows, sel][:, None, :]
        best, move = 1e-12 * max(1.0, float(np.abs(V[rows, sel]).sum())), None
        for i in range(n):
            for k in range(i + 1, n):
                gain = dV[i][:, None] + dV[k][None, :]
                fits = np.all(load + dY[i][:, None, :] + dY[k][None, :, :] <= cap + tol, axis=2)
                gain = np.where(fits, gain, -np.inf)
                j = int(gain.argmax())
                if gain.flat[j] > best:
                    best, move = gain.flat[j], (i, k, j // P, j % P)
        if move is None:
            break
        i, k, p, q = move
        sel[i], sel[k] = p, q
    return sel


def solve_paths(V, Yp, alphas, max_iter: int = 500, tol: float = 1e-7):
    """Maximize sum V[i, p_i] s.t. mean_i Yp[i, p_i, j] <= alpha_j for every year j.

    Projected subgradient descent on the tau-dimensional dual with Polyak
    steps.  Iterates are made feasible by raising the prices of violated
    years (small problems also try greedy single-policy repairs), then
    improved by single-policy moves; the best few feasible plans are
    polished with two-policy moves when that neighbourhood is small.
    Returns (selection, objective, dual bound, feasible, converged,
    iterations); converged means the gap closed or the dual stopped
    improving.
    """
    n, P, tau = Yp.shape
    alphas = np.asarray(alphas, float)
    cap = alphas * n
    rows = np.arange(n)
    scale = max(float(np.abs(V).max()), 1.0)
    mu = np.zeros(tau)
    best_sel, best_obj = None, -math.inf
    best_dual = math.inf
    theta, stall = 1.0, 0
    converged = False
    it = 0
    last = None
    pool = []

    def consider(m, raw=None):
        if raw is not None:
            sel, ok = _repair_greedy(V, Yp, raw.copy(), cap, rows)
            if ok:
                keep(sel)
        sel, ok = _repair(V, Yp, m, cap, rows, scale)
        if ok:
            keep(sel)

    def keep(sel):
        nonlocal best_sel, best_obj
        sel = _improve(V, Yp, sel, cap, rows)
        obj = V[rows, sel].sum()
        if not any(np.array_equal(sel, c) for _, c in pool):
            pool.append((obj, sel.copy()))
            pool.sort(key=lambda x: -x[0])
            del pool[20 if small else 3:]
        if obj > best_obj:
            best_sel, best_obj = sel.copy(), obj

    small = n <= 20 and n * P <= 20_000
    consider(mu)
    for it in range(1, max_iter + 1):
        s = V - Yp @ mu
        sel = s.argmax(axis=1)
        dual = s[rows, sel].sum() + mu @ cap
        if dual < best_dual - 1e-12 * abs(best_dual if np.isfinite(best_dual) else 1.0):
            best_dual, stall = dual, 0
        else:
            stall += 1
            if stall >= 10:
                theta, stall = theta / 2, 0
        # repairs are cheap on small problems; on large ones ration them
        if (small or it % 10 == 1) and (last is None or not np.array_equal(sel, last)):
            consider(mu, sel if small else None)
            last = sel
        if best_sel is not None and best_dual - best_obj <= tol * max(abs(best_obj), 1.0):
            converged = True
            break
        if theta < 1e-8:
            converged = best_sel is not None
            break
        g = cap - Yp[rows, sel].sum(axis=0)
        gg = float(g @ g)
        if gg == 0:
            converged = best_sel is not None
            break
        target = best_obj if best_sel is not None else dual - 0.05 * abs(dual) - 1.0
        step = theta * max(dual - target, 1e-12 * scale) / gg
        mu = np.maximum(0.0, mu - step * g)
    # polish the best few distinct plans with joint two-policy moves
    for _, cand in pool:
        cand = _improve_pairs(V, Yp, cand.copy(), cap, rows)
        obj = V[rows, cand].sum()
        if obj > best_obj:
            best_sel, best_obj = cand, obj
    return best_sel, best_obj, best_dual, best_sel is not None, converged, it


def default_alphas(portfolio: Portfolio, response: ChurnResponse, tau: int,
                   feedback=price_competitiveness, compound: bool = True) -> np.ndarray:
    """Model-implied yearly churn of the observed offers, repeated every year."""
    rates = np.repeat(np.asarray(portfolio.rate_change, float)[:, None], tau, axis=1)
    Y, _ = path_outcomes(response, portfolio.premium_old, portfolio.expenses, portfolio.competitiveness,
                         rates, feedback, compound)
    return Y.mean(axis=0)


def multiperiod(portfolio: Portfolio, response: ChurnResponse, actions: ActionSet, tau: int,
                alpha_list=None, feedback: Optional[Callable] = price_competitiveness, *,
                min_tenure: Optional[int] = None, compound: bool = True, weights: str = "cumulative",
                max_iter: int = 500, max_cells: int = 50_000_000) -> RenewalPlan:
    """Multi-period renewal plan under yearly churn caps.

    ``feedback(comp, t)`` gives next year's competitiveness; ``None``
    freezes it.  Policies with tenure below ``min_tenure`` (default tau)
    are left out.  With tau = 1 the single-period frontier solver is used.
    """
    if tau < 1:
        raise ValueError("tau must be at least 1")
    feedback = feedback or frozen_competitiveness
    keep = np.flatnonzero(portfolio.tenure >= (tau if min_tenure is None else min_tenure))
    if len(keep) == 0:
        raise ValueError("no policies with enough renewals")
    if len(keep) < portfolio.n:
        portfolio = portfolio.subset(keep)
        response = response.take(keep)
    if alpha_list is None:
        alpha_list = default_alphas(portfolio, response, tau, feedback, compound)
    alphas = np.asarray(alpha_list, dtype=float)
    if alphas.shape != (tau,):
        raise ValueError(f"need {tau} yearly churn caps")
    a = actions.values
    n = portfolio.n
    if tau == 1 and weights == "cumulative":
        Y1 = response.matrix(a)
        R1 = (1.0 - Y1) * margins(portfolio.premium_old, portfolio.expenses, a)
        pt = solve_cap(R1, Y1, float(alphas[0]), a)
        rates = pt.plan[:, None]
        obj, gap, feasible, conv, its = pt.expected_profit, pt.dual_gap, pt.feasible, True, 0
    else:
        cells = n * len(a) ** tau * tau
        if cells > max_cells:
            raise ValueError(f"{len(a)} actions over {tau} years for {n} policies is too large; "
                             "use a coarser action set")
        paths, V, Yp = _enumerate_paths(response, portfolio.premium_old, portfolio.expenses,
                                        portfolio.competitiveness, a, tau, feedback, compound, weights)
        sel, obj, dual, feasible, conv, its = solve_paths(V, Yp, alphas, max_iter=max_iter)
        if not feasible:
            log.warning("no plan meets every yearly churn cap")
            sel = (V - 1e3 * max(np.abs(V).max(), 1.0) * Yp.sum(axis=2)).argmax(axis=1)
            obj, gap = float(V[np.arange(n), sel].sum()), math.nan
        else:
            gap = max(dual - obj, 0.0)
            if not conv:
                log.warning("multiplier search did not converge; returning the best feasible plan "
                            "(dual gap %.6g)", gap)
        rates = a[paths[sel]]
    Y, M = path_outcomes(response, portfolio.premium_old, portfolio.expenses, portfolio.competitiveness,
                         rates, feedback, compound)
    profit = _path_value(Y, M, weights).sum(axis=0)
    notes = [FEEDBACK_NOTE] if feedback is price_competitiveness else ["competitiveness frozen"]
    return RenewalPlan(np.asarray(portfolio.id), rates, Y.mean(axis=0), profit, alphas, float(obj),
                       float(gap), bool(feasible), bool(conv), int(its), notes)
