"""Propensity scores for rate-change categories and generalized propensity
scores for continuous rate changes, with ASAM balance diagnostics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_ndtr

from . import boosting
from .boosting import BoostConfig, Ensemble
from .losses import (
    MultinoulliLoss,
    TruncatedGaussianLoss,
    TruncationBounds,
    log_interval_mass,
    sigma_hat,
    softmax,
)
from .portfolio import Portfolio, TreatmentGrid, covariate_names

log = logging.getLogger(__name__)

DISCRETE = "discrete"
CONTINUOUS = "continuous"
PI_FLOOR = 1e-6
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class NoOverlap(ValueError):
    pass


def design_of(data):
    """(X, t, covariate names) from a Portfolio or an ``(X, t[, names])`` tuple."""
    if isinstance(data, Portfolio):
        return data.covariates(), np.asarray(data.rate_change), data.covariate_names
    X, t, *rest = data
    X = np.asarray(X, dtype=float)
    names = list(rest[0]) if rest else [f"x{k}" for k in range(X.shape[1])]
    return X, np.asarray(t, dtype=float), names


# ---------------------------------------------------------------------------
# model


@dataclass
class PropensityModel:
    kind: str
    grid: TreatmentGrid
    ensemble: Ensemble
    covariate_names: list
    bounds: Optional[TruncationBounds] = None
    sigma: Optional[float] = None
    sigma_c: Optional[list] = None

    def __post_init__(self):
        if self.kind not in (DISCRETE, CONTINUOUS):
            raise ValueError(f"unknown propensity model kind {self.kind!r}")
        if self.kind == CONTINUOUS and (self.bounds is None or self.sigma is None or self.sigma_c is None):
            raise ValueError("continuous models need bounds, sigma and per-interval sigmas")

    @property
    def n_intervals(self) -> int:
        return self.grid.n_intervals

    def mean(self, X) -> np.ndarray:
        """Continuous models: the location f(X) of the dose distribution."""
        if self.kind != CONTINUOUS:
            raise TypeError("only continuous models have a dose mean")
        return self.ensemble.predict(X)

    def interval_probs(self, X, grid: Optional[TreatmentGrid] = None) -> np.ndarray:
        """N x C matrix of pi(t_c, X).

        Discrete models give softmax scores on their own grid.  Continuous
        models give the interval masses of the dose density on ``grid``
        (default: the fitting grid).
        """
        if self.kind == DISCRETE:
            if grid is not None and grid != self.grid:
                raise ValueError("a discrete model is tied to its own grid")
            return softmax(self.ensemble.predict(X))
        grid = grid or self.grid
        return interval_masses(self.mean(X), self.sigma, self.bounds, grid.boundaries)

    def probability(self, t, X) -> np.ndarray:
        """pi of the interval containing each unit's dose ``t``."""
        P = self.interval_probs(X)
        idx = self.grid.category_of(t)
        return P[np.arange(len(P)), idx]

    def gps(self, t, X) -> np.ndarray:
        """Generalized propensity score: dose density at ``t`` given X.

        Inside interval c the density is a Gaussian shape with scale
        sigma_c, rescaled so the interval carries the same mass as under
        the single-scale truncated model.
        """
        if self.kind != CONTINUOUS:
            raise TypeError("gps is defined for continuous models")
        t = np.asarray(t, dtype=float)
        f = self.mean(X)
        t = np.broadcast_to(t, f.shape)
        return gps_density(t, f, self.sigma, np.asarray(self.sigma_c), self.bounds, self.grid)

    def to_json(self) -> str:
        doc = {
            "format": "renewal.propensity",
            "version": 1,
            "kind": self.kind,
            "grid": self.grid.to_dict(),
            "covariate_names": list(self.covariate_names),
            "ensemble": json.loads(self.ensemble.to_json()),
        }
        if self.kind == CONTINUOUS:
            doc["bounds"] = [repr(self.bounds.lower), repr(self.bounds.upper)]
            doc["sigma"] = repr(float(self.sigma))
            doc["sigma_c"] = [repr(float(s)) for s in self.sigma_c]
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PropensityModel":
        doc = json.loads(text)
        if doc.get("format") != "renewal.propensity":
            raise ValueError("not a propensity model file")
        kw = {}
        if doc["kind"] == CONTINUOUS:
            kw = dict(bounds=TruncationBounds(*(float(v) for v in doc["bounds"])),
                      sigma=float(doc["sigma"]), sigma_c=[float(v) for v in doc["sigma_c"]])
        return cls(kind=doc["kind"], grid=TreatmentGrid.from_dict(doc["grid"]),
                   ensemble=Ensemble.from_json(json.dumps(doc["ensemble"])),
                   covariate_names=doc["covariate_names"], **kw)


def interval_masses(f, sigma: float, bounds: TruncationBounds, boundaries) -> np.ndarray:
    """Masses of the truncated normal N(f, sigma^2) on [lower, upper] over each interval."""
    f = np.asarray(f, dtype=float)[:, None]
    b = np.asarray(boundaries, dtype=float)
    if b[0] < bounds.lower - 1e-12 or b[-1] > bounds.upper + 1e-12:
        raise ValueError("grid extends beyond the truncation bounds")
    z = (b[None, :] - f) / sigma
    log_total = log_interval_mass((bounds.lower - f) / sigma, (bounds.upper - f) / sigma)
    log_piece = log_interval_mass(z[:, :-1], z[:, 1:])
    return np.exp(log_piece - log_total)


def gps_density(t, f, sigma, sigma_c, bounds: TruncationBounds, grid: TreatmentGrid) -> np.ndarray:
    """Piecewise dose density; equals the truncated normal when all sigma_c == sigma."""
    t = np.asarray(t, dtype=float)
    f = np.asarray(f, dtype=float)
    c = grid.category_of(t)
    b = np.asarray(grid.boundaries)
    lo, hi = b[c], b[c + 1]
    log_mass = (log_interval_mass((lo - f) / sigma, (hi - f) / sigma)
                - log_interval_mass((bounds.lower - f) / sigma, (bounds.upper - f) / sigma))
    s = sigma_c[c]
    z = (t - f) / s
    log_shape = -0.5 * z * z - _LOG_SQRT_2PI - np.log(s) - log_interval_mass((lo - f) / s, (hi - f) / s)
    return np.exp(log_mass + log_shape)


# ---------------------------------------------------------------------------
# ASAM


def _standardize(X):
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    return mean, sd


def sam_matrix(X, cat, probs, mean=None, sd=None, floor: float = PI_FLOOR):
    """C x K standardized absolute mean differences with weights 1[T in c]/pi.

    Returns (sam, weighted_means, n_floored).  Covariates with zero spread
    get SAM 0.
    """
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    probs = np.asarray(probs, dtype=float)
    C = probs.shape[1]
    if mean is None:
        mean, sd = _standardize(X)
    pi_obs = probs[np.arange(n), cat]
    if np.any(pi_obs == 0):
        raise NoOverlap("no overlap: a unit has zero probability of its observed rate-change interval")
    n_floored = int(np.count_nonzero(pi_obs < floor))
    w = 1.0 / np.maximum(pi_obs, floor)
    means = np.empty((C, k))
    for c in range(C):
        m = cat == c
        wc = w[m]
        means[c] = wc @ X[m] / wc.sum() if m.any() else np.nan
    safe = np.where(sd > 0, sd, 1.0)
    sam = np.where(sd > 0, np.abs(means - mean) / safe, 0.0)
    return sam, means, n_floored


def asam_value(X, cat, probs, mean=None, sd=None) -> float:
    sam, _, _ = sam_matrix(X, cat, probs, mean, sd)
    return float(np.nanmean(sam.mean(axis=1)))


@dataclass
class BalanceReport:
    covariate_names: list
    interval_labels: list
    counts: list
    overall_mean: list
    overall_sd: list
    mean_before: list
    mean_after: list
    sam_before: list
    sam_after: list
    asam_before: list
    asam_after: list
    overall_before: float
    overall_after: float
    n_floored: int = 0
    kind: str = ""

    @property
    def reduction(self) -> float:
        """Relative reduction of overall ASAM by weighting."""
        return 1.0 - self.overall_after / self.overall_before if self.overall_before > 0 else 0.0

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["reduction"] = self.reduction
        return json.dumps(d, indent=2, sort_keys=True)

    def to_tsv(self) -> str:
        """Balance table: one row per covariate, before/after means per interval."""
        head = ["covariate"]
        for lab in self.interval_labels:
            head += [f"{lab} before", f"{lab} after"]
        lines = ["\t".join(head)]
        fmt = lambda v: f"{v:.4f}"
        for k, name in enumerate(self.covariate_names):
            row = [name]
            for c in range(len(self.interval_labels)):
                row += [fmt(self.mean_before[c][k]), fmt(self.mean_after[c][k])]
            lines.append("\t".join(row))
        row = ["ASAM"]
        for c in range(len(self.interval_labels)):
            row += [fmt(self.asam_before[c]), fmt(self.asam_after[c])]
        lines.append("\t".join(row))
        row = ["Observations"]
        for c in range(len(self.interval_labels)):
            row += [str(self.counts[c]), str(self.counts[c])]
        lines.append("\t".join(row))
        lines.append("\t".join(["overall ASAM", fmt(self.overall_before), fmt(self.overall_after)]))
        return "\n".join(lines) + "\n"


def balance_report(X, t, probs, grid: TreatmentGrid, names: Sequence[str], kind: str = "") -> BalanceReport:
    X = np.asarray(X, dtype=float)
    cat = grid.category_of(t)
    C = grid.n_intervals
    mean, sd = _standardize(X)
    uniform = np.full((len(X), C), 1.0 / C)
    sam_b, means_b, _ = sam_matrix(X, cat, uniform, mean, sd)
    sam_a, means_a, n_floored = sam_matrix(X, cat, probs, mean, sd)
    if n_floored:
        log.warning("%d propensity scores below %g were floored in the ASAM weights", n_floored, PI_FLOOR)
    asam_b = sam_b.mean(axis=1)
    asam_a = sam_a.mean(axis=1)
    return BalanceReport(
        covariate_names=list(names), interval_labels=grid.labels(),
        counts=np.bincount(cat, minlength=C).tolist(),
        overall_mean=mean.tolist(), overall_sd=sd.tolist(),
        mean_before=means_b.tolist(), mean_after=means_a.tolist(),
        sam_before=sam_b.tolist(), sam_after=sam_a.tolist(),
        asam_before=asam_b.tolist(), asam_after=asam_a.tolist(),
        overall_before=float(np.mean(asam_b)), overall_after=float(np.mean(asam_a)),
        n_floored=n_floored, kind=kind)


def asam(data, ps: PropensityModel, grid: Optional[TreatmentGrid] = None) -> BalanceReport:
    """Balance of the covariates before and after propensity weighting.

    ``grid`` defaults to the model's grid; continuous models can be
    evaluated on any grid inside their truncation bounds.
    """
    X, t, names = design_of(data)
    grid = grid or ps.grid
    probs = ps.interval_probs(X, grid if ps.kind == CONTINUOUS else None)
    return balance_report(X, t, probs, grid, names, kind=ps.kind)


# ---------------------------------------------------------------------------
# fitting


def _asam_callback(X, cat, probs_of_F):
    mean, sd = _standardize(X)

    def cb(rnd, F):
        return asam_value(X, cat, probs_of_F(F), mean, sd)

    return cb


def fit_discrete_ps(data, grid: TreatmentGrid, config: BoostConfig, *,
                    early_stopping: bool = True) -> PropensityModel:
    """Multinoulli boosted propensity model over the grid's intervals.

    With ``early_stopping`` the training-set ASAM drives the stopping rule
    and the model is cut back to its best-balance round.
    """
    X, t, names = design_of(data)
    cat = grid.category_of(t)
    counts = np.bincount(cat, minlength=grid.n_intervals)
    if np.any(counts == 0):
        raise ValueError(f"empty rate-change interval(s): {np.flatnonzero(counts == 0).tolist()}")
    cb = _asam_callback(X, cat, softmax) if early_stopping else None
    ens = boosting.fit(X, cat, MultinoulliLoss(grid.n_intervals), config, round_callback=cb,
                       record_loss=False)
    return PropensityModel(DISCRETE, grid, ens, list(names))


def fit_continuous_gps(data, grid: TreatmentGrid, config: BoostConfig,
                       bounds: Optional[TruncationBounds] = None, *,
                       early_stopping: bool = True) -> PropensityModel:
    """Truncated-Gaussian boosted mean model plus per-interval scales."""
    X, t, names = design_of(data)
    if bounds is None:
        bounds = TruncationBounds(grid.lower, grid.upper)
    if t.min() < bounds.lower or t.max() > bounds.upper:
        raise ValueError("truncation bounds must cover all observed doses")
    if grid.lower > bounds.lower or grid.upper < bounds.upper:
        # outer intervals reach the truncation bounds so the density is defined on all of them
        grid = TreatmentGrid((bounds.lower,) + grid.boundaries[1:-1] + (bounds.upper,), grid.medians)
    cat = grid.category_of(t)
    counts = np.bincount(cat, minlength=grid.n_intervals)
    if np.any(counts < 2):
        raise ValueError("every interval needs at least 2 observations to estimate its scale")
    cb = None
    if early_stopping:
        def probs_of_F(F):
            return interval_masses(F, sigma_hat(t - F), bounds, grid.boundaries)
        cb = _asam_callback(X, cat, probs_of_F)
    ens = boosting.fit(X, t, TruncatedGaussianLoss(bounds), config, round_callback=cb,
                       record_loss=False)
    resid = t - ens.predict(X)
    sigma = sigma_hat(resid)
    sigma_c = [sigma_hat(resid[cat == c]) for c in range(grid.n_intervals)]
    return PropensityModel(CONTINUOUS, grid, ens, list(names), bounds=bounds, sigma=sigma,
                           sigma_c=sigma_c)


def constant_continuous_model(t, grid: TreatmentGrid, bounds: Optional[TruncationBounds] = None,
                              n_features: int = 1) -> PropensityModel:
    """Unconditional truncated normal, the baseline for held-out comparisons."""
    t = np.asarray(t, dtype=float)
    bounds = bounds or TruncationBounds(grid.lower, grid.upper)
    loss = TruncatedGaussianLoss(bounds)
    f0 = loss.init_score(t)
    ens = Ensemble(base_score=np.array([f0]), trees=[], eta=1.0, loss=loss.to_dict(), n_features=n_features)
    resid = t - f0
    cat = grid.category_of(t)
    return PropensityModel(CONTINUOUS, grid, ens, [f"x{k}" for k in range(n_features)], bounds=bounds,
                           sigma=sigma_hat(resid),
                           sigma_c=[sigma_hat(resid[cat == c]) for c in range(grid.n_intervals)])


def gps_nll(model: PropensityModel, X, t) -> float:
    """Mean negative log generalized propensity score."""
    return float(-np.mean(np.log(model.gps(t, X))))


def multinoulli_log_loss(probs, cat) -> float:
    probs = np.asarray(probs)
    return float(-np.mean(np.log(probs[np.arange(len(probs)), cat])))


# ---------------------------------------------------------------------------
# discrete vs continuous convergence


@dataclass
class ConvergenceRow:
    C: int
    score_diff_quartiles: list
    score_diff_median: float
    asam_discrete: list
    asam_continuous: list
    rounds_discrete: int

    @property
    def asam_discrete_mean(self) -> float:
        return float(np.mean(self.asam_discrete))

    @property
    def asam_continuous_mean(self) -> float:
        return float(np.mean(self.asam_continuous))


def convergence_study(data, C_list: Sequence[int], discrete_config: BoostConfig,
                      continuous: PropensityModel, *, quantile_grid_fn=None,
                      early_stopping: bool = True) -> list[ConvergenceRow]:
    """Compare discrete propensity scores with continuous interval masses as C grows.

    The continuous model is fitted once; its interval masses on each
    C-interval grid are closed-form, so only the discrete model is refitted.
    """
    from .portfolio import quantile_grid

    quantile_grid_fn = quantile_grid_fn or quantile_grid
    X, t, names = design_of(data)
    f = continuous.mean(X)
    rows = []
    for C in C_list:
        grid = quantile_grid_fn(t, C)
        disc = fit_discrete_ps((X, t, names), grid, discrete_config, early_stopping=early_stopping)
        cat = grid.category_of(t)
        p_disc = disc.interval_probs(X)
        p_cont = interval_masses(f, continuous.sigma, continuous.bounds, grid.boundaries)
        idx = np.arange(len(t))
        diff = np.abs(p_disc[idx, cat] - p_cont[idx, cat])
        mean, sd = _standardize(X)
        sam_d, _, _ = sam_matrix(X, cat, p_disc, mean, sd)
        sam_c, _, _ = sam_matrix(X, cat, p_cont, mean, sd)
        rows.append(ConvergenceRow(
            C=int(C),
            score_diff_quartiles=np.quantile(diff, [0.25, 0.5, 0.75]).tolist(),
            score_diff_median=float(np.median(diff)),
            asam_discrete=sam_d.mean(axis=1).tolist(),
            asam_continuous=sam_c.mean(axis=1).tolist(),
            rounds_discrete=disc.ensemble.n_rounds))
    return rows


def convergence_tsv(rows: Sequence[ConvergenceRow]) -> str:
    lines = ["C\tdiff_q1\tdiff_median\tdiff_q3\tasam_discrete_mean\tasam_continuous_mean\trounds_discrete"]
    for r in rows:
        q = r.score_diff_quartiles
        lines.append(f"{r.C}\t{q[0]:.6g}\t{q[1]:.6g}\t{q[2]:.6g}\t{r.asam_discrete_mean:.6g}\t"
                     f"{r.asam_continuous_mean:.6g}\t{r.rounds_discrete}")
    return "\n".join(lines) + "\n"


def mean_interval_scores(model: PropensityModel, X, grid: Optional[TreatmentGrid] = None) -> np.ndarray:
    """Average pi(t_c, X) over units, per interval."""
    return model.interval_probs(X, grid if model.kind == CONTINUOUS else None).mean(axis=0)
