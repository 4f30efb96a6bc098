"""Policy renewal records: schema, CSV I/O, trimming, treatment grids and a
seeded synthetic portfolio generator."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import truncnorm

RISK_LEVELS = ("VeryLow", "Low", "Medium", "High")
POLICY_TYPES = ("Regular", "Employee", "SecondCar")
CATEGORICAL = {"risk_level": RISK_LEVELS, "policy_type": POLICY_TYPES}
# columns used as confounders in the treatment-assignment models
NUMERIC_COVARIATES = ("premium_new_base", "undershooting_1", "undershooting_2")

FLOAT_FIELDS = ("rate_change", "expenses", "competitiveness", "premium_old",
                "premium_new_base", "undershooting_1", "undershooting_2")
COLUMNS = ("id", "churn") + FLOAT_FIELDS + ("risk_level", "policy_type", "tenure")


class PortfolioError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyRecord:
    id: int
    churn: int
    rate_change: float
    expenses: float
    competitiveness: float
    premium_old: float
    premium_new_base: float
    undershooting_1: float
    undershooting_2: float
    risk_level: str
    policy_type: str
    tenure: int = 1

    def __post_init__(self):
        _check_values(self.churn, self.expenses, self.premium_old, self.premium_new_base,
                      self.undershooting_1, self.undershooting_2, self.rate_change,
                      self.competitiveness, self.tenure)
        if self.risk_level not in RISK_LEVELS:
            raise PortfolioError(f"unknown risk_level {self.risk_level!r}")
        if self.policy_type not in POLICY_TYPES:
            raise PortfolioError(f"unknown policy_type {self.policy_type!r}")


def _check_values(churn, expenses, premium_old, premium_new_base, u1, u2, rate_change, comp, tenure):
    if churn not in (0, 1):
        raise PortfolioError(f"churn must be 0 or 1, got {churn!r}")
    for name, v in (("rate_change", rate_change), ("competitiveness", comp),
                    ("expenses", expenses), ("undershooting_1", u1), ("undershooting_2", u2)):
        if not math.isfinite(v):
            raise PortfolioError(f"{name} must be finite")
    for name, v in (("expenses", expenses), ("undershooting_1", u1), ("undershooting_2", u2)):
        if v < 0:
            raise PortfolioError(f"{name} must be non-negative")
    for name, v in (("premium_old", premium_old), ("premium_new_base", premium_new_base)):
        if not (math.isfinite(v) and v > 0):
            raise PortfolioError(f"{name} must be positive")
    if tenure < 1:
        raise PortfolioError("tenure must be at least 1")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Portfolio:
    """Column store of policy records.

    Categorical fields are held as integer level codes.  Arrays are
    read-only so a portfolio can be shared freely.
    """

    id: np.ndarray
    churn: np.ndarray
    rate_change: np.ndarray
    expenses: np.ndarray
    competitiveness: np.ndarray
    premium_old: np.ndarray
    premium_new_base: np.ndarray
    undershooting_1: np.ndarray
    undershooting_2: np.ndarray
    risk_level: np.ndarray
    policy_type: np.ndarray
    tenure: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.id)
        for f in fields(self):
            if f.name == "meta":
                continue
            col = np.asarray(getattr(self, f.name))
            if f.name in ("id", "churn", "risk_level", "policy_type", "tenure"):
                col = col.astype(np.int64)
            else:
                col = col.astype(float)
            if col.shape != (n,):
                raise PortfolioError(f"column {f.name} has shape {col.shape}, expected ({n},)")
            object.__setattr__(self, f.name, _frozen(col))
        if len(np.unique(self.id)) != n:
            raise PortfolioError("policy ids must be unique")
        if n:
            if not np.all(np.isin(self.churn, (0, 1))):
                raise PortfolioError("churn must be 0 or 1")
            for name in FLOAT_FIELDS:
                if not np.all(np.isfinite(getattr(self, name))):
                    raise PortfolioError(f"{name} must be finite")
            for name in ("expenses", "undershooting_1", "undershooting_2"):
                if np.any(getattr(self, name) < 0):
                    raise PortfolioError(f"{name} must be non-negative")
            for name in ("premium_old", "premium_new_base"):
                if np.any(getattr(self, name) <= 0):
                    raise PortfolioError(f"{name} must be positive")
            if self.risk_level.min() < 0 or self.risk_level.max() >= len(RISK_LEVELS):
                raise PortfolioError("risk_level code out of range")
            if self.policy_type.min() < 0 or self.policy_type.max() >= len(POLICY_TYPES):
                raise PortfolioError("policy_type code out of range")
            if self.tenure.min() < 1:
                raise PortfolioError("tenure must be at least 1")

    def __len__(self) -> int:
        return len(self.id)

    @property
    def n(self) -> int:
        return len(self.id)

    @classmethod
    def from_records(cls, records: Iterable[PolicyRecord], meta: Optional[dict] = None) -> "Portfolio":
        recs = list(records)
        cols = {name: [getattr(r, name) for r in recs] for name in COLUMNS}
        cols["risk_level"] = [RISK_LEVELS.index(v) for v in cols["risk_level"]]
        cols["policy_type"] = [POLICY_TYPES.index(v) for v in cols["policy_type"]]
        return cls(**{k: np.asarray(v) for k, v in cols.items()}, meta=dict(meta or {}))

    @property
    def records(self) -> list[PolicyRecord]:
        out = []
        for i in range(self.n):
            out.append(PolicyRecord(
                id=int(self.id[i]), churn=int(self.churn[i]),
                **{name: float(getattr(self, name)[i]) for name in FLOAT_FIELDS},
                risk_level=RISK_LEVELS[self.risk_level[i]],
                policy_type=POLICY_TYPES[self.policy_type[i]],
                tenure=int(self.tenure[i])))
        return out

    def subset(self, mask_or_index) -> "Portfolio":
        idx = np.asarray(mask_or_index)
        cols = {f.name: getattr(self, f.name)[idx] for f in fields(self) if f.name != "meta"}
        return Portfolio(**cols, meta=dict(self.meta))

    def with_columns(self, **cols) -> "Portfolio":
        return replace(self, **cols)

    @property
    def covariate_names(self) -> list[str]:
        return covariate_names()

    def covariates(self) -> np.ndarray:
        """N x K confounder matrix: numeric risk factors then one indicator per level."""
        blocks = [np.column_stack([getattr(self, name) for name in NUMERIC_COVARIATES])]
        for name, levels in CATEGORICAL.items():
            codes = getattr(self, name)
            blocks.append((codes[:, None] == np.arange(len(levels))[None, :]).astype(float))
        return np.hstack(blocks)

    def equals(self, other: "Portfolio") -> bool:
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name))
                   for f in fields(self) if f.name != "meta")


def covariate_names() -> list[str]:
    names = list(NUMERIC_COVARIATES)
    for name, levels in CATEGORICAL.items():
        names += [f"{name}={lv}" for lv in levels]
    return names


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, schema: Optional[Mapping[str, str]] = None) -> Portfolio:
    """Read a portfolio CSV.

    ``schema`` maps record field names to CSV header names; fields that are
    not mentioned use their own name.  ``tenure`` is optional and defaults
    to 1.  Errors name the 1-based data row.
    """
    schema = dict(schema or {})
    unknown = set(schema) - set(COLUMNS)
    if unknown:
        raise PortfolioError(f"schema names unknown fields: {sorted(unknown)}")
    header_of = {name: schema.get(name, name) for name in COLUMNS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PortfolioError(f"{path}: empty file") from None
        pos = {h.strip(): i for i, h in enumerate(header)}
        missing = [header_of[c] for c in COLUMNS if c != "tenure" and header_of[c] not in pos]
        if missing:
            raise PortfolioError(f"{path}: missing column(s) {', '.join(missing)}")
        cols: dict[str, list] = {c: [] for c in COLUMNS}
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise PortfolioError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            try:
                rec = _parse_row(row, pos, header_of)
            except (ValueError, PortfolioError) as exc:
                raise PortfolioError(f"row {row_no}: {exc}") from None
            for c in COLUMNS:
                cols[c].append(rec[c])
    if len(set(cols["id"])) != len(cols["id"]):
        seen = set()
        for i, v in enumerate(cols["id"], start=1):
            if v in seen:
                raise PortfolioError(f"row {i}: duplicate id {v}")
            seen.add(v)
    return Portfolio(**{c: np.asarray(v) for c, v in cols.items()})


def _parse_int(text: str, name: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise PortfolioError(f"{name}: cannot parse {text!r} as an integer") from None


def _parse_float(text: str, name: str) -> float:
    try:
        v = float(text.strip())
    except ValueError:
        raise PortfolioError(f"{name}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise PortfolioError(f"{name}: non-finite value {text!r}")
    return v


def _parse_row(row, pos, header_of) -> dict:
    get = lambda name: row[pos[header_of[name]]]
    rec = {"id": _parse_int(get("id"), "id"), "churn": _parse_int(get("churn"), "churn")}
    for name in FLOAT_FIELDS:
        rec[name] = _parse_float(get(name), name)
    for name, levels in CATEGORICAL.items():
        value = get(name).strip()
        if value not in levels:
            raise PortfolioError(f"{name}: unknown level {value!r}")
        rec[name] = levels.index(value)
    rec["tenure"] = _parse_int(get("tenure"), "tenure") if header_of["tenure"] in pos else 1
    _check_values(rec["churn"], rec["expenses"], rec["premium_old"], rec["premium_new_base"],
                  rec["undershooting_1"], rec["undershooting_2"], rec["rate_change"],
                  rec["competitiveness"], rec["tenure"])
    return rec


def save_csv(portfolio: Portfolio, path, write_meta: bool = True) -> None:
    """Write a portfolio with round-trip exact numbers; metadata goes to a sidecar."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for i in range(portfolio.n):
            w.writerow([int(portfolio.id[i]), int(portfolio.churn[i])]
                       + [repr(float(getattr(portfolio, name)[i])) for name in FLOAT_FIELDS]
                       + [RISK_LEVELS[portfolio.risk_level[i]], POLICY_TYPES[portfolio.policy_type[i]],
                          int(portfolio.tenure[i])])
    if write_meta and portfolio.meta:
        with open(meta_path(path), "w") as fh:
            json.dump(portfolio.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def meta_path(path) -> str:
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".meta.json"


def load_meta(path) -> dict:
    with open(meta_path(path)) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# derived covariates and trimming


def derive_covariates(A, B, C, D1, D2):
    """Competitiveness and undershooting from raw offers.

    A is the own offer before rate changes, B the cheapest competitor, C the
    base renewal offer, D1/D2 the cheapest and second-cheapest competitors.
    """
    A = np.asarray(A, dtype=float)
    if np.any(A <= 0):
        raise ValueError("offer before changes A must be positive")
    comp = (np.asarray(B, dtype=float) - A) / A
    u1 = np.maximum(np.asarray(D1, dtype=float) - C, 0.0)
    u2 = np.maximum(np.asarray(D2, dtype=float) - C, 0.0)
    unwrap = lambda v: float(v) if np.ndim(v) == 0 else v
    return unwrap(comp), unwrap(u1), unwrap(u2)


@dataclass
class TrimReport:
    n_before: int
    n_retained: int
    fences: dict
    ranges: dict
    passes: int = 1

    @property
    def share_retained(self) -> float:
        return self.n_retained / self.n_before if self.n_before else 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["share_retained"] = self.share_retained
        return json.dumps(d, indent=2, sort_keys=True)


def iqr_fences(values, k: float = 1.5) -> tuple[float, float]:
    q1, q3 = np.quantile(np.asarray(values, dtype=float), [0.25, 0.75])
    iqr = q3 - q1
    return float(q1 - k * iqr), float(q3 + k * iqr)


def trim_outliers(portfolio: Portfolio, fields: Sequence[str] = ("rate_change", "competitiveness"),
                  k: float = 1.5, iterate: bool = False) -> tuple[Portfolio, TrimReport]:
    """Drop records outside the Tukey fences of any listed field.

    Fences come from each field's marginal distribution.  A single pass is
    the usual boxplot rule; with ``iterate`` the rule is reapplied until no
    record is dropped, which makes the operation idempotent.
    """
    if portfolio.n < 4:
        raise PortfolioError("trimming needs at least 4 records")
    current = portfolio
    passes = 0
    while True:
        passes += 1
        keep = np.ones(current.n, dtype=bool)
        fences = {}
        for name in fields:
            col = getattr(current, name)
            lo, hi = iqr_fences(col, k)
            fences[name] = [lo, hi]
            keep &= (col >= lo) & (col <= hi)
        dropped = not keep.all()
        current = current.subset(keep)
        if not (iterate and dropped and current.n >= 4):
            break
    ranges = {name: ([float(getattr(current, name).min()), float(getattr(current, name).max())]
                     if current.n else [None, None]) for name in fields}
    return current, TrimReport(portfolio.n, current.n, fences, ranges, passes)


# ---------------------------------------------------------------------------
# treatment grid


@dataclass(frozen=True)
class TreatmentGrid:
    boundaries: tuple
    medians: tuple

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        if b.ndim != 1 or len(b) < 3:
            raise ValueError("a treatment grid needs at least two intervals")
        if not np.all(np.diff(b) > 0):
            raise ValueError("grid boundaries must be strictly increasing")
        if len(self.medians) != len(b) - 1:
            raise ValueError("need one median per interval")
        object.__setattr__(self, "boundaries", tuple(float(v) for v in b))
        object.__setattr__(self, "medians", tuple(float(v) for v in self.medians))

    @property
    def n_intervals(self) -> int:
        return len(self.medians)

    @property
    def lower(self) -> float:
        return self.boundaries[0]

    @property
    def upper(self) -> float:
        return self.boundaries[-1]

    def category_of(self, t):
        """0-based interval index; the first interval is closed, the rest are (a, b]."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < self.lower) or np.any(t_arr > self.upper) or np.any(np.isnan(t_arr)):
            raise ValueError("rate change outside the grid range")
        idx = np.searchsorted(np.asarray(self.boundaries[1:-1]), t_arr, side="left")
        return int(idx) if idx.ndim == 0 else idx

    def labels(self) -> list[str]:
        out = []
        for c in range(self.n_intervals):
            lo, hi = self.boundaries[c], self.boundaries[c + 1]
            out.append(f"{'[' if c == 0 else '('}{lo:.2%}, {hi:.2%}]")
        return out

    def to_dict(self) -> dict:
        return {"boundaries": [repr(float(v)) for v in self.boundaries],
                "medians": [repr(float(v)) for v in self.medians]}

    @classmethod
    def from_dict(cls, d: dict) -> "TreatmentGrid":
        return cls(tuple(float(v) for v in d["boundaries"]), tuple(float(v) for v in d["medians"]))


def type7_quantiles(values, C: int) -> np.ndarray:
    """The 0, 1/C, ..., 1 quantiles with linear interpolation of order statistics.

    Same definition as ``np.quantile``'s default, but the fractional order
    statistic (n - 1) * c / C is formed in integer arithmetic so that exact
    positions are not rounded down onto the previous value.
    """
    x = np.sort(np.asarray(values, dtype=float))
    n = len(x)
    out = np.empty(C + 1)
    for c in range(C + 1):
        j, rem = divmod((n - 1) * c, C)
        out[c] = x[j] if rem == 0 else x[j] + (rem / C) * (x[j + 1] - x[j])
    return out


def quantile_grid(rate_changes, C: int) -> TreatmentGrid:
    """Equal-probability intervals from type-7 empirical quantiles."""
    t = np.asarray(rate_changes, dtype=float)
    if C < 2:
        raise ValueError("need at least two intervals")
    if len(np.unique(t)) < C:
        raise ValueError(f"too few distinct rate changes for {C} intervals")
    b = type7_quantiles(t, C)
    if not np.all(np.diff(b) > 0):
        raise ValueError(f"too few distinct rate changes for {C} nonempty intervals")
    idx = np.searchsorted(b[1:-1], t, side="left")
    medians = []
    for c in range(C):
        members = t[idx == c]
        if members.size == 0:
            raise ValueError(f"interval {c} is empty")
        medians.append(float(np.median(members)))
    return TreatmentGrid(tuple(b), tuple(medians))


# ---------------------------------------------------------------------------
# synthetic portfolios


@dataclass
class SynthConfig:
    """Parameters of the synthetic renewal portfolio.

    Treatment assignment depends only on the risk factors (base renewal
    offer, undershooting, risk level, policy type); churn depends on the
    rate change, competitiveness, risk level and policy type.  Given the
    risk factors the two noise sources are independent, so assignment is
    unconfounded by construction.
    """

    n: int = 20_000
    confounding: float = 1.0
    risk_probs: tuple = (0.50, 0.28, 0.16, 0.06)
    type_probs: tuple = (0.86, 0.06, 0.08)
    tenure_p: float = 0.35
    outlier_rate: float = 0.0
    # premiums and market
    log_premium_mean: float = 6.2
    log_premium_sd: float = 0.35
    risk_load: tuple = (0.85, 1.0, 1.25, 1.7)
    type_load: tuple = (1.0, 0.85, 0.9)
    auto_mean: tuple = (-0.02, 0.0, 0.03, 0.08)
    auto_sd: float = 0.03
    comp_mean: float = -0.05
    comp_sd: float = 0.22
    comp_bounds: tuple = (-0.7308, 0.5948)
    second_gap_mean: float = 0.08
    expense_ratio: tuple = (0.70, 0.78, 0.85, 0.92)
    expense_sd: float = 0.05
    # treatment assignment
    t_bounds: tuple = (-0.0928, 0.2701)
    t_base: float = 0.07
    t_sd: float = 0.055
    t_risk: tuple = (-0.03, -0.005, 0.02, 0.05)
    t_type: tuple = (0.0, -0.02, 0.03)
    t_auto: float = 0.8
    t_undershoot: float = 0.25
    t_log_premium: float = -0.03
    # churn
    churn_intercept: float = -1.75
    churn_t: float = 6.0
    bump_height: float = 0.6
    bump_center: float = 0.015
    bump_width: float = 0.012
    churn_comp: float = 1.2
    churn_comp2: float = 0.8
    churn_risk: tuple = (0.3, 0.0, 0.1, 0.5)
    churn_risk_t: tuple = (2.0, 0.0, 1.0, 3.0)
    churn_type: tuple = (0.0, -0.4, 0.2)

    def validate(self) -> None:
        if self.n <= 0:
            raise ValueError("n must be positive")
        for name in ("risk_probs", "type_probs"):
            p = np.asarray(getattr(self, name), dtype=float)
            if np.any(p < 0) or np.any(p > 1) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
                raise ValueError(f"{name} must be probabilities summing to 1")
        if len(self.risk_probs) != len(RISK_LEVELS) or len(self.type_probs) != len(POLICY_TYPES):
            raise ValueError("one probability per categorical level is required")
        for name in ("tenure_p", "outlier_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.tenure_p == 0:
            raise ValueError("tenure_p must be positive")
        if self.confounding < 0:
            raise ValueError("confounding strength must be non-negative")
        if not self.t_bounds[0] < self.t_bounds[1] or not self.comp_bounds[0] < self.comp_bounds[1]:
            raise ValueError("bounds must be increasing")
        if self.t_sd <= 0 or self.comp_sd <= 0 or self.bump_width <= 0:
            raise ValueError("scales must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def true_dose_mean(cfg: SynthConfig, premium_new_base, undershooting_1, risk_level, policy_type,
                   auto=None):
    """Untruncated mean of the rate-change distribution given the risk factors."""
    C = np.asarray(premium_new_base, dtype=float)
    r = np.asarray(risk_level)
    p = np.asarray(policy_type)
    if auto is None:
        auto = np.asarray(cfg.auto_mean)[r]
    shift = (np.asarray(cfg.t_risk)[r] + np.asarray(cfg.t_type)[p] + cfg.t_auto * auto
             + cfg.t_undershoot * np.asarray(undershooting_1) / C
             + cfg.t_log_premium * (np.log(C) - cfg.log_premium_mean))
    return cfg.t_base + cfg.confounding * shift


def true_churn_logit(cfg: SynthConfig, t, competitiveness, risk_level, policy_type):
    t = np.asarray(t, dtype=float)
    comp = np.asarray(competitiveness, dtype=float)
    r = np.asarray(risk_level)
    z = (t - cfg.bump_center) / cfg.bump_width
    return (cfg.churn_intercept + cfg.churn_t * t + cfg.bump_height * np.exp(-0.5 * z * z)
            + cfg.churn_comp * comp + cfg.churn_comp2 * comp * comp
            + np.asarray(cfg.churn_risk)[r] + np.asarray(cfg.churn_risk_t)[r] * t
            + np.asarray(cfg.churn_type)[np.asarray(policy_type)])


def true_churn_probability(cfg: SynthConfig, t, competitiveness, risk_level, policy_type):
    return 1.0 / (1.0 + np.exp(-true_churn_logit(cfg, t, competitiveness, risk_level, policy_type)))


def true_churn_for(portfolio: Portfolio, cfg: SynthConfig, t=None):
    """True churn probabilities of the portfolio's policies at rate changes ``t``."""
    t = portfolio.rate_change if t is None else t
    return true_churn_probability(cfg, t, portfolio.competitiveness, portfolio.risk_level,
                                  portfolio.policy_type)


def inflection_region(cfg: SynthConfig) -> tuple[float, float]:
    """Rate changes around the small-change churn bump; outside it churn is monotone."""
    return cfg.bump_center - 3 * cfg.bump_width, cfg.bump_center + 3 * cfg.bump_width


def _truncated_normal(rng, mean, sd, lo, hi):
    """Rejection sampler with an inverse-cdf fallback for means far outside [lo, hi]."""
    mean = np.asarray(mean, dtype=float)
    out = np.empty_like(mean)
    todo = np.arange(mean.size)
    for _ in range(200):
        draw = mean[todo] + sd * rng.standard_normal(todo.size)
        ok = (draw >= lo) & (draw <= hi)
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
        if todo.size == 0:
            return out
    m = mean[todo]
    u = rng.uniform(size=todo.size)
    out[todo] = np.clip(truncnorm.ppf(u, (lo - m) / sd, (hi - m) / sd, loc=m, scale=sd), lo, hi)
    return out


def synth_generate(config: SynthConfig, seed: int) -> Portfolio:
    """Deterministic synthetic portfolio; ground truth goes into ``meta``."""
    cfg = config
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    n = cfg.n
    risk = rng.choice(len(RISK_LEVELS), size=n, p=np.asarray(cfg.risk_probs))
    ptype = rng.choice(len(POLICY_TYPES), size=n, p=np.asarray(cfg.type_probs))
    tenure = rng.geometric(cfg.tenure_p, size=n)
    base = np.exp(cfg.log_premium_mean + cfg.log_premium_sd * rng.standard_normal(n))
    premium_old = base * np.asarray(cfg.risk_load)[risk] * np.asarray(cfg.type_load)[ptype]
    A = premium_old
    auto = np.asarray(cfg.auto_mean)[risk] + cfg.auto_sd * rng.standard_normal(n)
    C = A * (1.0 + auto)
    comp = _truncated_normal(rng, np.full(n, cfg.comp_mean), cfg.comp_sd, *cfg.comp_bounds)
    B = A * (1.0 + comp)
    D2 = B * (1.0 + rng.exponential(cfg.second_gap_mean, size=n))
    comp, u1, u2 = derive_covariates(A, B, C, B, D2)
    ratio = np.asarray(cfg.expense_ratio)[risk] + cfg.expense_sd * rng.standard_normal(n)
    expenses = C * np.maximum(ratio, 0.05)

    mu = true_dose_mean(cfg, C, u1, risk, ptype, auto=auto)
    t = _truncated_normal(rng, mu, cfg.t_sd, *cfg.t_bounds)
    if cfg.outlier_rate > 0:
        wild = rng.uniform(size=n) < cfg.outlier_rate
        t = np.where(wild, cfg.t_base + 4 * cfg.t_sd * rng.standard_t(3, size=n), t)
        comp = np.where(wild & (rng.uniform(size=n) < 0.5),
                        cfg.comp_mean + 3 * cfg.comp_sd * rng.standard_t(3, size=n), comp)
        comp = np.maximum(comp, -0.99)
    p = true_churn_probability(cfg, t, comp, risk, ptype)
    churn = (rng.uniform(size=n) < p).astype(np.int64)

    meta = {
        "generator": "renewal.synth",
        "seed": int(seed),
        "config": cfg.to_dict(),
        "truth": {
            "dose": {"model": "truncated_normal", "sd": cfg.t_sd, "bounds": list(cfg.t_bounds),
                     "mean": "t_base + confounding * (t_risk[risk] + t_type[type] + t_auto*auto"
                             " + t_undershoot*u1/C + t_log_premium*(log C - log_premium_mean))"},
            "churn": {"model": "logistic",
                      "logit": "churn_intercept + churn_t*t + bump_height*exp(-z^2/2)"
                               " + churn_comp*comp + churn_comp2*comp^2 + churn_risk[risk]"
                               " + churn_risk_t[risk]*t + churn_type[type]",
                      "inflection_region": list(inflection_region(cfg))},
            "realized_churn_rate": float(churn.mean()),
        },
    }
    return Portfolio(id=np.arange(1, n + 1), churn=churn, rate_change=t, expenses=expenses,
                     competitiveness=comp, premium_old=premium_old, premium_new_base=C,
                     undershooting_1=u1, undershooting_2=u2, risk_level=risk, policy_type=ptype,
                     tenure=tenure, meta=meta)
