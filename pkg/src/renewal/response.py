"""Outcome models: pooled LASSO logistic regression over imputed responses,
the quadratic dose-response on the generalized propensity score, and a
boosted conditional dose-response."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import qr
from scipy.special import expit

from . import boosting
from .boosting import BoostConfig, Ensemble
from .losses import BernoulliLoss
from .matching import ImputedResponseSet, PooledEstimate, rubin_combine
from .portfolio import NUMERIC_COVARIATES, POLICY_TYPES, RISK_LEVELS, Portfolio, TreatmentGrid
from .propensity import CONTINUOUS, PropensityModel, gps_density

log = logging.getLogger(__name__)

POOLED_LOGISTIC = "pooled_logistic"
QUADRATIC_DR = "quadratic_dr"
BOOSTED_DR = "boosted_dr"


def full_penalty_grid() -> np.ndarray:
    """exp(x) for x = 5, 4.99, ..., -20 (descending)."""
    return np.exp(np.round(np.arange(500, -2001, -1) / 100.0, 2))


def default_penalty_grid(step: float = 0.25) -> np.ndarray:
    """Same range as :func:`full_penalty_grid` on a coarser log step."""
    n = int(round(25.0 / step))
    return np.exp(np.linspace(5.0, -20.0, n + 1))


def _parallel_map(fn, items, threads: int = 1):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# design


@dataclass(frozen=True)
class DesignSpec:
    """Regressors for the pooled churn model.

    Rate-change indicators (one per category except ``reference``),
    competitiveness and its square, numeric risk factors and their squares,
    and level indicators for risk level and policy type (first level
    omitted); plus interactions of the rate-change indicators and of
    competitiveness with the risk factors.  The intercept is kept separately.
    """
    n_categories: int
    reference: int

    @classmethod
    def for_grid(cls, grid: TreatmentGrid) -> "DesignSpec":
        return cls(grid.n_intervals, (grid.n_intervals - 1) // 2)

    def __post_init__(self):
        if self.n_categories < 2 or not 0 <= self.reference < self.n_categories:
            raise ValueError("bad category count or reference category")

    def _columns(self, data: Portfolio, cat, comp=None) -> dict:
        n = data.n
        cat = np.broadcast_to(np.asarray(cat), (n,))
        comp = data.competitiveness if comp is None else np.broadcast_to(np.asarray(comp, float), (n,))
        treat = {f"rate_change=t{c}": (cat == c).astype(float)
                 for c in range(self.n_categories) if c != self.reference}
        num = {name: np.asarray(getattr(data, name), float) for name in NUMERIC_COVARIATES}
        num2 = {f"{name}^2": v * v for name, v in num.items()}
        levels = {f"risk_level={lv}": (data.risk_level == i).astype(float)
                  for i, lv in enumerate(RISK_LEVELS) if i > 0}
        levels.update({f"policy_type={lv}": (data.policy_type == i).astype(float)
                       for i, lv in enumerate(POLICY_TYPES) if i > 0})
        comp2 = comp * comp
        cols = {"competitiveness": comp, "competitiveness^2": comp2}
        cols.update(treat)
        cols.update(num)
        cols.update(num2)
        cols.update(levels)
        for name, v in {**treat, **num, **levels}.items():
            cols[f"competitiveness:{name}"] = comp * v
        for name, v in {**treat, **levels}.items():
            cols[f"competitiveness^2:{name}"] = comp2 * v
        for tname, tv in treat.items():
            for name, v in {**num, **num2, **levels}.items():
                cols[f"{tname}:{name}"] = tv * v
        return cols

    def names(self) -> list[str]:
        """Sorted column names; the intercept is not included."""
        return sorted(self._unsorted_names())

    def _unsorted_names(self):
        treat = [f"rate_change=t{c}" for c in range(self.n_categories) if c != self.reference]
        num = list(NUMERIC_COVARIATES)
        num2 = [f"{x}^2" for x in num]
        levels = ([f"risk_level={lv}" for lv in RISK_LEVELS[1:]]
                  + [f"policy_type={lv}" for lv in POLICY_TYPES[1:]])
        out = ["competitiveness", "competitiveness^2"] + treat + num + num2 + levels
        out += [f"competitiveness:{x}" for x in treat + num + levels]
        out += [f"competitiveness^2:{x}" for x in treat + levels]
        out += [f"{t}:{x}" for t in treat for x in num + num2 + levels]
        return out

    def matrix(self, data: Portfolio, cat, comp=None) -> np.ndarray:
        """N x p regressor matrix (no intercept) with every unit assigned category ``cat``."""
        cols = self._columns(data, cat, comp)
        return np.column_stack([cols[name] for name in self.names()])

    def stacked(self, data: Portfolio) -> np.ndarray:
        """(C*N) x p matrix: the portfolio repeated once per category, category-major."""
        return np.vstack([self.matrix(data, c) for c in range(self.n_categories)])

    def to_dict(self) -> dict:
        return {"n_categories": self.n_categories, "reference": self.reference}


def stack_responses(draws_or_avg: np.ndarray) -> np.ndarray:
    """N x C responses to the category-major order of :meth:`DesignSpec.stacked`."""
    return np.asarray(draws_or_avg).T.ravel()


# ---------------------------------------------------------------------------
# penalised logistic regression


class LassoConvergenceError(RuntimeError):
    def __init__(self, msg, beta=None, change=None):
        super().__init__(msg)
        self.beta = beta
        self.change = change


def _soft(x, t):
    return math.copysign(max(abs(x) - t, 0.0), x)


def _active_set_solution(Q, b, beta, lam):
    """Exact minimiser on the current active set and signs, or None if the
    KKT conditions fail there."""
    A = np.flatnonzero((beta != 0) | (lam == 0))
    s = np.sign(beta[A])
    try:
        xA = np.linalg.solve(Q[np.ix_(A, A)], b[A] - lam[A] * s)
    except np.linalg.LinAlgError:
        return None
    pen = lam[A] > 0
    if np.any(np.sign(xA[pen]) != s[pen]):
        return None
    x = np.zeros_like(beta)
    x[A] = xA
    r = b - Q @ x
    inactive = np.ones(len(b), dtype=bool)
    inactive[A] = False
    if np.any(np.abs(r[inactive]) > lam[inactive] * (1 + 1e-9) + 1e-13):
        return None
    return x


def _cd_quadratic(Q, b, beta, lam, tol=1e-12, max_sweeps=10_000):
    """Minimise 0.5 x'Qx - b'x + sum lam_j |x_j| by coordinate descent.

    Every few sweeps the active set and signs are frozen and the stationary
    point solved for exactly; it is accepted when it satisfies the KKT
    conditions.
    """
    p = len(b)
    diag = np.diag(Q).copy()
    grad = Q @ beta - b
    for sweep in range(max_sweeps):
        biggest = 0.0
        for j in range(p):
            if diag[j] <= 0:
                continue
            old = beta[j]
            r = diag[j] * old - grad[j]
            new = _soft(r, lam[j]) / diag[j] if lam[j] > 0 else r / diag[j]
            if new != old:
                d = new - old
                beta[j] = new
                grad += Q[:, j] * d
                biggest = max(biggest, abs(d) * math.sqrt(diag[j]))
        if biggest < tol:
            return beta
        if sweep % 3 == 2:
            x = _active_set_solution(Q, b, beta, lam)
            if x is not None:
                return x
    raise LassoConvergenceError("coordinate descent did not converge", beta)


def _neg_loglik(eta, y, w):
    return float(np.sum(w * (np.logaddexp(0.0, eta) - y * eta)))


@dataclass
class _Standardized:
    X: np.ndarray           # with leading column of ones
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def of(cls, X, w):
        X = np.asarray(X, dtype=float)
        wn = w / w.sum()
        mean = wn @ X
        scale = np.sqrt(wn @ (X - mean) ** 2)
        scale = np.where(scale > 0, scale, 1.0)
        Xs = np.empty((X.shape[0], X.shape[1] + 1))
        Xs[:, 0] = 1.0
        Xs[:, 1:] = (X - mean) / scale
        return cls(Xs, mean, scale)

    def apply(self, X):
        X = np.asarray(X, dtype=float)
        out = np.empty((X.shape[0], X.shape[1] + 1))
        out[:, 0] = 1.0
        out[:, 1:] = (X - self.mean) / self.scale
        return out

    def unscale(self, beta_s):
        """Standardised coefficients (intercept first) to the original scale."""
        beta = np.empty_like(beta_s)
        beta[1:] = beta_s[1:] / self.scale
        beta[0] = beta_s[0] - self.mean @ beta[1:]
        return beta

    def rescale(self, beta):
        beta_s = np.empty_like(beta)
        beta_s[1:] = beta[1:] * self.scale
        beta_s[0] = beta[0] + self.mean @ beta[1:]
        return beta_s


def _lasso_std(Xs, y, w, lam, beta, tol=1e-10, max_iter=200):
    """Penalised logistic fit on standardised columns; objective
    (1/sum w) * negative log-likelihood + lam * sum_{j>0} |beta_j|."""
    n = w.sum()
    p = Xs.shape[1]
    lam_vec = np.full(p, lam)
    lam_vec[0] = 0.0
    beta = beta.copy()
    eta = Xs @ beta

    def objective(e, b):
        return _neg_loglik(e, y, w) / n + lam * np.abs(b[1:]).sum()

    obj = objective(eta, beta)
    for it in range(max_iter):
        prob = expit(eta)
        hw = w * prob * (1.0 - prob) / n
        g = Xs.T @ (w * (prob - y)) / n
        H = Xs.T @ (Xs * hw[:, None])
        H[np.diag_indices(p)] += 1e-12
        target = _cd_quadratic(H, H @ beta - g, beta.copy(), lam_vec)
        step = target - beta
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            e = Xs @ cand
            o = objective(e, cand)
            if o <= obj + 1e-15 * max(1.0, abs(obj)):
                break
            t *= 0.5
        change = float(np.max(np.abs(cand - beta)))
        beta, eta, obj = cand, e, o
        if change < tol:
            return beta
    raise LassoConvergenceError(f"penalised logistic fit did not converge in {max_iter} iterations "
                                f"(last max coefficient change {change:.3g}, objective {obj:.10g})",
                                beta, change)


def _lambda_max(Xs, y, w):
    ybar = float(w @ y / w.sum())
    return float(np.max(np.abs(Xs[:, 1:].T @ (w * (y - ybar))) / w.sum())) if Xs.shape[1] > 1 else 0.0


def _null_beta(Xs, y, w):
    ybar = float(w @ y / w.sum())
    ybar = min(max(ybar, 1e-12), 1 - 1e-12)
    beta = np.zeros(Xs.shape[1])
    beta[0] = math.log(ybar / (1 - ybar))
    return beta


def lasso_logistic(X, y, penalty: float, weights=None, beta0=None, tol: float = 1e-10,
                   max_iter: int = 200) -> np.ndarray:
    """Penalised logistic regression at one penalty.

    Columns are standardised internally and the penalty applies to the
    standardised coefficients; the unpenalised intercept comes first in the
    returned original-scale coefficient vector.  ``y`` may be fractional.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    st = _Standardized.of(X, w)
    start = _null_beta(st.X, y, w) if beta0 is None else st.rescale(np.asarray(beta0, float))
    return st.unscale(_lasso_std(st.X, y, w, penalty, start, tol, max_iter))


def _path(Xs, y, w, penalties, tol, path_tol):
    lmax = _lambda_max(Xs, y, w)
    beta = _null_beta(Xs, y, w)
    dev_null = _neg_loglik(Xs @ beta, y, w)
    out = np.empty((len(penalties), Xs.shape[1]))
    prev = None
    done = False
    for i, lam in enumerate(penalties):
        if lam >= lmax or done:
            out[i] = beta
            continue
        beta = _lasso_std(Xs, y, w, lam, beta, tol)
        out[i] = beta
        dev = _neg_loglik(Xs @ beta, y, w)
        if (path_tol > 0 and prev is not None and np.all(beta[1:] != 0)
                and abs(prev - dev) < path_tol * dev_null):
            done = True
        prev = dev
    return out


@dataclass
class LassoPath:
    names: list
    penalties: np.ndarray
    coef: np.ndarray          # L x (p + 1), original scale, intercept first
    n_nonzero: np.ndarray
    cv_mean: np.ndarray
    cv_se: np.ndarray
    i_min: int
    i_1se: int

    @property
    def penalty_min(self) -> float:
        return float(self.penalties[self.i_min])

    @property
    def penalty_1se(self) -> float:
        return float(self.penalties[self.i_1se])

    def to_tsv(self) -> str:
        lines = ["log_penalty\tpenalty\tn_nonzero\tcv_mean\tcv_se\tselected"]
        for i, lam in enumerate(self.penalties):
            mark = "1se" if i == self.i_1se else ("min" if i == self.i_min else "")
            lines.append(f"{math.log(lam):.4f}\t{lam:.6g}\t{self.n_nonzero[i]}\t{self.cv_mean[i]:.8g}\t"
                         f"{self.cv_se[i]:.6g}\t{mark}")
        return "\n".join(lines) + "\n"


def fit_logistic_lasso(X, y, penalties, folds: int = 10, seed: int = 0, groups=None, weights=None,
                       names=None, tol: float = 1e-8, path_tol: float = 1e-7,
                       threads: int = 1) -> LassoPath:
    """LASSO logistic path with K-fold cross-validation and the one-SE rule.

    ``groups`` keeps rows of the same unit in the same fold.  The CV error
    is the held-out mean negative Bernoulli log-likelihood; the selected
    penalty is the largest one whose CV mean is within one standard error of
    the minimum.  Once all coefficients are active and the training
    deviance stops moving (relative change below ``path_tol``) the remaining
    smaller penalties reuse the last solution.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    penalties = np.asarray(penalties, dtype=float)
    if penalties.ndim != 1 or len(penalties) == 0 or np.any(penalties <= 0):
        raise ValueError("penalty grid must be a non-empty sequence of positive values")
    if np.any(np.diff(penalties) >= 0):
        raise ValueError("penalty grid must be strictly descending")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    n = len(y)
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    groups = np.arange(n) if groups is None else np.asarray(groups)
    uniq, inv = np.unique(groups, return_inverse=True)
    if len(uniq) < folds:
        raise ValueError("fewer units than folds")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    unit_fold = np.empty(len(uniq), dtype=np.int64)
    unit_fold[rng.permutation(len(uniq))] = np.arange(len(uniq)) % folds
    fold = unit_fold[inv]

    st = _Standardized.of(X, w)
    path_s = _path(st.X, y, w, penalties, tol, path_tol)
    coef = np.array([st.unscale(b) for b in path_s])

    def run_fold(k):
        tr, te = fold != k, fold == k
        s = _Standardized.of(X[tr], w[tr])
        bs = _path(s.X, y[tr], w[tr], penalties, tol, path_tol)
        Xte = s.apply(X[te])
        return np.array([_neg_loglik(Xte @ b, y[te], w[te]) / w[te].sum() for b in bs])

    errs = np.array(_parallel_map(run_fold, range(folds), threads))
    cv_mean = errs.mean(axis=0)
    cv_se = errs.std(axis=0, ddof=1) / math.sqrt(folds)
    i_min = int(np.argmin(cv_mean))
    i_1se = int(np.flatnonzero(cv_mean <= cv_mean[i_min] + cv_se[i_min])[0])
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    return LassoPath(names, penalties, coef, np.count_nonzero(path_s[:, 1:], axis=1),
                     cv_mean, cv_se, i_min, i_1se)


def observed_information_cov(X, y, beta, weights=None) -> np.ndarray:
    """Inverse observed information restricted to the nonzero coefficients.

    Rows/columns of inactive coefficients are zero; the intercept is always
    treated as active.
    """
    X = np.asarray(X, dtype=float)
    p = X.shape[1] + 1
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, float)
    active = np.flatnonzero(beta != 0)
    active = np.union1d([0], active)
    XA = np.column_stack([np.ones(X.shape[0]), X])[:, active]
    prob = expit(XA @ beta[active])
    info = XA.T @ (XA * (w * prob * (1 - prob))[:, None])
    cov = np.zeros((p, p))
    cov[np.ix_(active, active)] = np.linalg.pinv(info, hermitian=True)
    return cov


# ---------------------------------------------------------------------------
# pooled response model


@dataclass
class PooledLogisticModel:
    design: DesignSpec
    names: list
    pooled: PooledEstimate
    penalty: float
    kind: str = POOLED_LOGISTIC

    @property
    def coef(self) -> np.ndarray:
        return self.pooled.delta_bar

    def linear_predictor(self, data: Portfolio, cat, comp=None) -> np.ndarray:
        X = self.design.matrix(data, cat, comp)
        return self.coef[0] + X @ self.coef[1:]

    def predict(self, data: Portfolio, cat, comp=None) -> np.ndarray:
        """Churn probability of every unit if assigned category ``cat``."""
        return expit(self.linear_predictor(data, cat, comp))

    def churn_matrix(self, data: Portfolio) -> np.ndarray:
        """N x C churn probabilities, one column per category."""
        return np.column_stack([self.predict(data, c) for c in range(self.design.n_categories)])

    def average_with_band(self, data: Portfolio, cat, comp=None, z: float = 1.959963984540054):
        """Average churn probability and a delta-method band from the pooled covariance."""
        X = self.design.matrix(data, cat, comp)
        p = expit(self.coef[0] + X @ self.coef[1:])
        s = p * (1 - p)
        grad = np.concatenate([[s.mean()], s @ X / len(p)])
        se = math.sqrt(max(float(grad @ self.pooled.var @ grad), 0.0))
        est = float(p.mean())
        return est, max(est - z * se, 0.0), min(est + z * se, 1.0)

    def to_dict(self) -> dict:
        return {"format": "renewal.response", "version": 1, "kind": self.kind,
                "design": self.design.to_dict(), "names": ["(intercept)"] + list(self.names),
                "penalty": repr(self.penalty), "pooled": self.pooled.to_dict()}

    def coefficient_tsv(self) -> str:
        lines = ["term\testimate\tse"]
        se = self.pooled.se
        for name, b, s in zip(["(intercept)"] + list(self.names), self.coef, se):
            lines.append(f"{name}\t{b:.10g}\t{s:.6g}")
        return "\n".join(lines) + "\n"


def select_penalty(imputed: ImputedResponseSet, data: Portfolio, design: DesignSpec, penalties,
                   folds: int = 10, seed: int = 0, threads: int = 1, **kw) -> LassoPath:
    """LASSO path on the averaged potential responses; folds split by policy."""
    X = design.stacked(data)
    y = stack_responses(imputed.averages())
    groups = np.tile(np.arange(data.n), design.n_categories)
    return fit_logistic_lasso(X, y, penalties, folds=folds, seed=seed, groups=groups,
                              names=design.names(), threads=threads, **kw)


def fit_pooled_response(imputed: ImputedResponseSet, data: Portfolio, design: DesignSpec,
                        penalty: float, threads: int = 1, tol: float = 1e-8,
                        refit: bool = False) -> PooledLogisticModel:
    """One penalised fit per imputation at a shared penalty, pooled by Rubin's rule.

    Each fit's variance is the inverse observed information on its active
    set.  Coefficients inactive in an imputation enter the pooling as zeros
    with zero within-imputation variance.

    With ``refit`` the penalty only selects terms: the active set of the
    fit to the averaged responses is frozen and every imputation is refitted
    without penalty on it (removes the shrinkage bias of the estimates).
    """
    M = imputed.M
    if M < 2:
        raise ValueError("pooling needs at least 2 imputations")
    if imputed.draws.shape[:2] != (data.n, design.n_categories):
        raise ValueError("imputed responses do not match the portfolio and design")
    X = design.stacked(data)
    w = np.ones(X.shape[0])
    y_avg = stack_responses(imputed.averages())
    st = _Standardized.of(X, w)
    start = _lasso_std(st.X, y_avg, w, penalty, _null_beta(st.X, y_avg, w), tol)
    lam = penalty
    cols = np.arange(X.shape[1])
    if refit:
        cols = np.flatnonzero(start[1:] != 0)
        st = _Standardized.of(X[:, cols], w)
        start = np.concatenate([start[:1], start[1:][cols]])
        lam = 0.0

    def one(m):
        y = stack_responses(imputed.draws[:, :, m]).astype(float)
        b_sub = st.unscale(_lasso_std(st.X, y, w, lam, start, tol))
        b = np.zeros(X.shape[1] + 1)
        b[0] = b_sub[0]
        b[1:][cols] = b_sub[1:]
        return b, observed_information_cov(X, y, b)

    fits = _parallel_map(one, range(M), threads)
    coefs = np.array([b for b, _ in fits])
    covs = np.array([c for _, c in fits])
    act = coefs != 0
    if not np.all(act == act[0]):
        log.info("active sets differ across imputations; pooling over the union (%d of %d terms)",
                 int(act.any(axis=0).sum()), act.shape[1])
    return PooledLogisticModel(design, design.names(), rubin_combine(coefs, covs), float(penalty))


# ---------------------------------------------------------------------------
# dose-response models


QUADRATIC_TERMS = ("1", "gps", "gps^2", "t", "t^2", "gps*t")


def quadratic_features(t, gps) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    g = np.asarray(gps, dtype=float)
    t, g = np.broadcast_arrays(t, g)
    return np.stack([np.ones_like(t), g, g * g, t, t * t, g * t], axis=-1)


@dataclass
class QuadraticDR:
    beta: np.ndarray
    kind: str = QUADRATIC_DR

    def raw(self, t, gps) -> np.ndarray:
        return quadratic_features(t, gps) @ self.beta

    def predict(self, t, gps) -> np.ndarray:
        """Conditional response, clamped to [0, 1]."""
        return np.clip(self.raw(t, gps), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"format": "renewal.response", "version": 1, "kind": self.kind,
                "terms": list(QUADRATIC_TERMS), "beta": [repr(float(b)) for b in self.beta]}


def fit_quadratic_dr(t, y, gps) -> QuadraticDR:
    """OLS of y on [1, gps, gps^2, t, t^2, gps*t]."""
    D = quadratic_features(t, gps)
    y = np.asarray(y, dtype=float)
    if D.ndim != 2 or len(D) < 7:
        raise ValueError("need at least 7 observations")
    _, R, piv = qr(D, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = d[0] * max(D.shape) * np.finfo(float).eps
    rank = int(np.count_nonzero(d > tol))
    if rank < D.shape[1]:
        bad = [QUADRATIC_TERMS[j] for j in piv[rank:]]
        raise ValueError(f"rank-deficient quadratic design; collinear column(s): {', '.join(bad)}")
    beta, *_ = np.linalg.lstsq(D, y, rcond=None)
    return QuadraticDR(beta)


@dataclass
class BoostedDR:
    ensemble: Ensemble
    kind: str = BOOSTED_DR

    def raw(self, t, gps) -> np.ndarray:
        t, gps = np.broadcast_arrays(np.asarray(t, float), np.asarray(gps, float))
        return expit(self.ensemble.predict(np.column_stack([t.ravel(), gps.ravel()]))).reshape(t.shape)

    predict = raw

    def to_dict(self) -> dict:
        return {"format": "renewal.response", "version": 1, "kind": self.kind,
                "features": ["t", "gps"], "ensemble": json.loads(self.ensemble.to_json())}


def _xty(data):
    if isinstance(data, Portfolio):
        return data.covariates(), np.asarray(data.rate_change), np.asarray(data.churn)
    X, t, y, *_ = data
    return np.asarray(X, float), np.asarray(t, float), np.asarray(y)


def fit_boosted_dr(data, ps: PropensityModel, config: BoostConfig, holdout: float = 0.2,
                   seed: int = 0) -> BoostedDR:
    """Bernoulli boosted model of churn on (dose, GPS at the dose).

    A seeded ``holdout`` share of rows is kept aside for early stopping on
    held-out log-loss.
    """
    if ps.kind != CONTINUOUS:
        raise ValueError("the boosted dose-response needs a continuous propensity model")
    X, t, y = _xty(data)
    feats = np.column_stack([t, ps.gps(t, X)])
    n = len(y)
    if holdout > 0:
        rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
        val = np.zeros(n, dtype=bool)
        val[rng.permutation(n)[:max(1, int(round(holdout * n)))]] = True
        ens = boosting.fit(feats[~val], y[~val], BernoulliLoss(), config, record_loss=False,
                           eval_set=(feats[val], y[val]))
    else:
        ens = boosting.fit(feats, y, BernoulliLoss(), config, record_loss=False)
    return BoostedDR(ens)


def fit_linear_logistic_dr(data, ps: Optional[PropensityModel] = None) -> "LinearLogisticDR":
    """Unpenalised logistic regression of churn on the dose and the covariates (baseline)."""
    X, t, y = _xty(data)
    beta = lasso_logistic(np.column_stack([t, X]), y, 0.0)
    return LinearLogisticDR(beta)


@dataclass
class LinearLogisticDR:
    beta: np.ndarray
    kind: str = "linear_logistic"

    def predict_x(self, t, X) -> np.ndarray:
        X = np.asarray(X, float)
        return expit(self.beta[0] + self.beta[1] * t + X @ self.beta[2:])


def _gps_grid(ps: PropensityModel, X, t_grid):
    """len(t_grid) x N matrix of GPS values, reusing one mean prediction."""
    f = ps.mean(X)
    sc = np.asarray(ps.sigma_c)
    return np.array([gps_density(np.full_like(f, t), f, ps.sigma, sc, ps.bounds, ps.grid) for t in t_grid])


def avg_dose_response(model, X, ps: PropensityModel, t):
    """Average of the conditional response at (t, GPS(t, X_i)) over units, in [0, 1].

    For the quadratic model the average is taken before clamping, so the
    curve is linear in the coefficients.
    """
    scalar = np.ndim(t) == 0
    t_grid = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = ps.bounds.lower, ps.bounds.upper
    if np.any(t_grid < lo) or np.any(t_grid > hi):
        raise ValueError(f"dose outside the truncation bounds [{lo}, {hi}]")
    if isinstance(model, LinearLogisticDR):
        out = np.array([model.predict_x(tt, X).mean() for tt in t_grid])
    else:
        G = _gps_grid(ps, np.asarray(X, float), t_grid)
        out = np.array([model.raw(tt, g).mean() for tt, g in zip(t_grid, G)])
        out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def conditional_response_matrix(model, X, ps: PropensityModel, t_grid) -> np.ndarray:
    """N x len(t_grid) matrix of unit-level responses at each candidate dose."""
    G = _gps_grid(ps, np.asarray(X, float), t_grid)
    return np.column_stack([model.predict(tt, g) for tt, g in zip(t_grid, G)])


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapBands:
    t: np.ndarray
    curves: np.ndarray      # B x len(t)
    lower: np.ndarray
    upper: np.ndarray
    median: np.ndarray
    redraws: int = 0

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_tsv(self, estimate=None) -> str:
        head = "t\testimate\tlower\tupper\tmedian" if estimate is not None else "t\tlower\tupper\tmedian"
        lines = [head]
        for i, t in enumerate(self.t):
            vals = ([estimate[i]] if estimate is not None else []) + [self.lower[i], self.upper[i],
                                                                      self.median[i]]
            lines.append("\t".join([f"{t:.6g}"] + [f"{v:.8g}" for v in vals]))
        return "\n".join(lines) + "\n"


def bootstrap_dr(data, pipeline: Callable, B: int, seed: int, t_grid, resample: bool = True,
                 max_attempts: int = 10, threads: int = 1) -> BootstrapBands:
    """Percentile bands for a dose-response curve by refitting on policy resamples.

    ``pipeline((X, t, y), t_grid)`` refits everything and returns the curve.
    A resample whose fit fails with an empty interval is redrawn.
    """
    if B < 2:
        raise ValueError("need at least 2 bootstrap resamples")
    X, t, y = _xty(data)
    t_grid = np.asarray(t_grid, dtype=float)
    n = len(y)

    def one(b):
        for attempt in range(max_attempts):
            if resample:
                rng = np.random.default_rng(np.random.SeedSequence([int(seed), b, attempt]))
                idx = rng.integers(0, n, size=n)
            else:
                idx = np.arange(n)
            try:
                return np.asarray(pipeline((X[idx], t[idx], y[idx]), t_grid), float), attempt
            except ValueError as exc:
                if "interval" not in str(exc):
                    raise
                log.info("bootstrap resample %d attempt %d redrawn: %s", b, attempt, exc)
        raise RuntimeError(f"bootstrap resample {b} failed {max_attempts} times")

    res = _parallel_map(one, range(B), threads)
    curves = np.array([c for c, _ in res])
    lo, hi = np.percentile(curves, [2.5, 97.5], axis=0)
    return BootstrapBands(t_grid, curves, lo, hi, np.median(curves, axis=0),
                          redraws=sum(a for _, a in res))


def quadratic_pipeline(n_intervals: int, gps_config: BoostConfig, bounds) -> Callable:
    """Refit-per-resample pipeline: quantile grid, continuous GPS, quadratic DR."""
    from .portfolio import quantile_grid
    from .propensity import fit_continuous_gps

    def run(sample, t_grid):
        X, t, y = sample
        grid = quantile_grid(t, n_intervals)
        ps = fit_continuous_gps((X, t), grid, gps_config, bounds)
        dr = fit_quadratic_dr(t, y, ps.gps(t, X))
        return avg_dose_response(dr, X, ps, t_grid)

    return run


def boosted_pipeline(n_intervals: int, gps_config: BoostConfig, dr_config: BoostConfig, bounds,
                     seed: int = 0) -> Callable:
    from .portfolio import quantile_grid
    from .propensity import fit_continuous_gps

    def run(sample, t_grid):
        X, t, y = sample
        grid = quantile_grid(t, n_intervals)
        ps = fit_continuous_gps((X, t), grid, gps_config, bounds)
        dr = fit_boosted_dr((X, t, y), ps, dr_config, seed=seed)
        return avg_dose_response(dr, X, ps, t_grid)

    return run


# ---------------------------------------------------------------------------
# churn surfaces


def discrete_churn_surface(model: PooledLogisticModel, data: Portfolio, comp_grid,
                           grid: TreatmentGrid) -> str:
    """TSV of average churn per (category median, competitiveness) with delta-method bands."""
    lines = ["t\tcompetitiveness\testimate\tlo\thi"]
    for c in range(model.design.n_categories):
        for v in comp_grid:
            est, lo, hi = model.average_with_band(data, c, v)
            lines.append(f"{grid.medians[c]:.6g}\t{v:.6g}\t{est:.8g}\t{lo:.8g}\t{hi:.8g}")
    return "\n".join(lines) + "\n"


def continuous_churn_surface(model, X, comp, ps: PropensityModel, t_grid, comp_edges,
                             bands: Optional[Sequence[BootstrapBands]] = None) -> str:
    """TSV of average conditional response per (dose, competitiveness bin).

    The dose-response model has no covariates of its own, so the surface is
    built by averaging unit-level responses within competitiveness bins;
    the bin midpoint is reported.  Bands are left empty.
    """
    R = conditional_response_matrix(model, X, ps, t_grid)
    comp = np.asarray(comp, float)
    edges = np.asarray(comp_edges, float)
    which = np.clip(np.searchsorted(edges, comp, side="right") - 1, 0, len(edges) - 2)
    lines = ["t\tcompetitiveness\testimate\tlo\thi"]
    for j, t in enumerate(t_grid):
        for b in range(len(edges) - 1):
            m = which == b
            if not m.any():
                continue
            mid = 0.5 * (edges[b] + edges[b + 1])
            lines.append(f"{t:.6g}\t{mid:.6g}\t{R[m, j].mean():.8g}\t\t")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# serialisation


def model_to_json(model) -> str:
    return json.dumps(model.to_dict(), sort_keys=True)


def model_from_json(text: str):
    d = json.loads(text)
    if d.get("format") != "renewal.response":
        raise ValueError("not a response model file")
    kind = d["kind"]
    if kind == QUADRATIC_DR:
        return QuadraticDR(np.array([float(b) for b in d["beta"]]))
    if kind == BOOSTED_DR:
        return BoostedDR(Ensemble.from_json(json.dumps(d["ensemble"])))
    if kind == POOLED_LOGISTIC:
        p = d["pooled"]
        pooled = PooledEstimate(np.array(p["delta_bar"]), np.array(p["var"]), np.array(p["W_bar"]),
                                np.array(p["B"]), p["M"])
        return PooledLogisticModel(DesignSpec(**d["design"]), d["names"][1:], pooled, float(d["penalty"]))
    raise ValueError(f"unknown response model kind {kind!r}")
