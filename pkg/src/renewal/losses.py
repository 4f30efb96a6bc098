"""Differentiable losses on raw ensemble scores.

Every loss returns per-observation values; averaging over observations is
left to the caller so leaf-weight formulas stay free of the sample size.
Gradients and hessians are taken with respect to the raw score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_ndtr, logsumexp, ndtr

HESS_FLOOR = 1e-12
# below this the mass itself is not representable as a double
_LOG_MASS_FLOOR = math.log(np.finfo(float).tiny)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DegenerateTruncation(ValueError):
    """Both truncation bounds sit so far in one tail that the mass underflows."""


@dataclass(frozen=True)
class LossEval:
    value: np.ndarray | float
    grad: np.ndarray | float
    hess: np.ndarray | float


@dataclass(frozen=True)
class TruncationBounds:
    lower: float
    upper: float

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise ValueError("truncation bounds must be finite")
        if not self.lower < self.upper:
            raise ValueError(f"lower bound {self.lower} must be below upper bound {self.upper}")


# ---------------------------------------------------------------------------
# scalar/vector operations


def bernoulli(y, score) -> LossEval:
    """Negative Bernoulli log-likelihood on the logit scale."""
    y = np.asarray(y, dtype=float)
    s = np.asarray(score, dtype=float)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("bernoulli targets must be 0 or 1")
    p = expit(s)
    value = np.logaddexp(0.0, s) - y * s
    return LossEval(_unwrap(value), _unwrap(p - y), _unwrap(p * (1.0 - p)))


def multinoulli(t_index, scores) -> LossEval:
    """Negative multinoulli log-likelihood with a diagonal hessian.

    ``t_index`` holds 0-based category indices; ``scores`` has the category
    axis last.
    """
    s = np.asarray(scores, dtype=float)
    if s.shape[-1] < 2:
        raise ValueError("multinoulli needs at least two categories")
    t = np.asarray(t_index, dtype=np.intp)
    lse = logsumexp(s, axis=-1, keepdims=True)
    prob = np.exp(s - lse)
    onehot = np.zeros_like(s)
    np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
    value = (lse[..., 0] - np.take_along_axis(s, t[..., None], axis=-1)[..., 0])
    return LossEval(_unwrap(value), prob - onehot, prob * (1.0 - prob))


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    return np.exp(s - logsumexp(s, axis=-1, keepdims=True))


def log_interval_mass(a, b) -> np.ndarray:
    """log(Phi(b) - Phi(a)) for a < b, accurate in both tails."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        # lo <= 0 here; two regimes depending on the sign of hi
        left_tail = log_ndtr(hi) + np.log1p(-np.exp(log_ndtr(lo) - log_ndtr(hi)))
        straddle = np.log1p(-(ndtr(lo) + ndtr(-hi)))
    return np.where(hi <= 0, left_tail, straddle)


def truncated_gaussian(t, f, sigma, bounds: TruncationBounds, *, clamp: bool = True) -> LossEval:
    """Negative truncated-Gaussian log-likelihood in the location ``f``.

    The normalising term uses ``ln(2*pi*sigma)/2``; it is constant in ``f``
    so gradients and minimisers are unaffected.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    t = np.asarray(t, dtype=float)
    f = np.asarray(f, dtype=float)
    a = (bounds.lower - f) / sigma
    b = (bounds.upper - f) / sigma
    log_z = log_interval_mass(a, b)
    if not np.all(np.isfinite(log_z)) or np.any(log_z < _LOG_MASS_FLOOR):
        raise DegenerateTruncation("degenerate truncation: interval mass underflows")
    ra = np.exp(-0.5 * a * a - _LOG_SQRT_2PI - log_z)
    rb = np.exp(-0.5 * b * b - _LOG_SQRT_2PI - log_z)
    resid = t - f
    value = 0.5 * math.log(2.0 * math.pi * sigma) + resid**2 / (2.0 * sigma**2) + log_z
    grad = -resid / sigma**2 + (ra - rb) / sigma
    # a*ra is 0*finite when a is huge, so nan cannot appear
    hess = (1.0 + (a * ra - b * rb) - (ra - rb) ** 2) / sigma**2
    if clamp:
        hess = np.maximum(hess, HESS_FLOOR)
    return LossEval(_unwrap(value), _unwrap(grad), _unwrap(hess))


def sigma_hat(residuals) -> float:
    """Root of the N-1 normalised sum of squared residuals around the model.

    The residuals are not re-centred. Residuals with no spread at all are
    rejected, since they mean the model reproduces the doses up to a shift.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size < 2:
        raise ValueError("sigma_hat needs at least 2 residuals")
    ss = float(np.dot(r, r))
    if not np.isfinite(ss) or np.ptp(r) == 0:
        raise ValueError("degenerate residuals")
    return math.sqrt(ss / (r.size - 1))


def _unwrap(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


# ---------------------------------------------------------------------------
# loss descriptors used by the boosting engine


class Loss:
    """Base class: per-observation value, gradient and hessian on raw scores."""

    name = "base"
    n_outputs = 1

    def check_targets(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float)

    def init_score(self, y: np.ndarray):
        raise NotImplementedError

    def begin_round(self, y: np.ndarray, F: np.ndarray) -> None:
        """Hook called once per boosting round before gradients are taken."""

    def value(self, y, F) -> np.ndarray:
        raise NotImplementedError

    def grad_hess(self, y, F) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"name": self.name}

    @staticmethod
    def from_dict(d: dict) -> "Loss":
        name = d["name"]
        if name == "squared_error":
            return SquaredErrorLoss()
        if name == "bernoulli":
            return BernoulliLoss()
        if name == "multinoulli":
            return MultinoulliLoss(int(d["n_classes"]))
        if name == "truncated_gaussian":
            loss = TruncatedGaussianLoss(TruncationBounds(float(d["lower"]), float(d["upper"])))
            if d.get("sigma") is not None:
                loss.sigma = float(d["sigma"])
            return loss
        raise ValueError(f"unknown loss {name!r}")


class SquaredErrorLoss(Loss):
    name = "squared_error"

    def init_score(self, y):
        return float(np.mean(y))

    def value(self, y, F):
        return 0.5 * (np.asarray(y) - F) ** 2

    def grad_hess(self, y, F):
        return F - y, np.ones_like(F)


class BernoulliLoss(Loss):
    name = "bernoulli"

    def check_targets(self, y):
        y = np.asarray(y, dtype=float)
        if y.ndim != 1 or np.any((y != 0) & (y != 1)):
            raise ValueError("bernoulli loss expects a 1-D array of 0/1 targets")
        return y

    def init_score(self, y):
        p = float(np.clip(np.mean(y), 1e-12, 1 - 1e-12))
        return math.log(p / (1.0 - p))

    def value(self, y, F):
        return np.logaddexp(0.0, F) - y * F

    def grad_hess(self, y, F):
        p = expit(F)
        return p - y, p * (1.0 - p)


class MultinoulliLoss(Loss):
    name = "multinoulli"

    def __init__(self, n_classes: int):
        if n_classes < 2:
            raise ValueError("multinoulli needs at least two classes")
        self.n_outputs = int(n_classes)

    def check_targets(self, y):
        y = np.asarray(y)
        if y.ndim != 1 or not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("multinoulli loss expects integer class indices")
        y = y.astype(np.intp)
        if y.min() < 0 or y.max() >= self.n_outputs:
            raise ValueError(f"class indices must lie in [0, {self.n_outputs})")
        return y

    def init_score(self, y):
        freq = np.bincount(y, minlength=self.n_outputs) / len(y)
        return np.log(np.maximum(freq, 1e-12))

    def value(self, y, F):
        lse = logsumexp(F, axis=1)
        return lse - F[np.arange(len(y)), y]

    def grad_hess(self, y, F):
        prob = softmax(F)
        hess = prob * (1.0 - prob)
        prob[np.arange(len(y)), y] -= 1.0
        return prob, hess

    def to_dict(self):
        return {"name": self.name, "n_classes": self.n_outputs}


class TruncatedGaussianLoss(Loss):
    """Truncated Gaussian location model; the scale is re-estimated every round."""

    name = "truncated_gaussian"

    def __init__(self, bounds: TruncationBounds, newton_steps: int = 50):
        self.bounds = bounds
        self.sigma: float | None = None
        self.newton_steps = newton_steps
        self.n_hess_clamped = 0

    def check_targets(self, y):
        y = np.asarray(y, dtype=float)
        if y.ndim != 1:
            raise ValueError("truncated gaussian loss expects 1-D doses")
        if y.min() < self.bounds.lower or y.max() > self.bounds.upper:
            raise ValueError("doses must lie within the truncation bounds")
        return y

    def init_score(self, y):
        f = float(np.mean(y))
        self.sigma = sigma_hat(y - f)
        for _ in range(self.newton_steps):
            ev = truncated_gaussian(y, np.full_like(y, f), self.sigma, self.bounds)
            step = float(np.sum(ev.grad) / np.sum(ev.hess))
            f -= step
            if abs(step) < 1e-12 * max(1.0, abs(f)):
                break
        return f

    def begin_round(self, y, F):
        self.sigma = sigma_hat(y - F)

    def value(self, y, F):
        return truncated_gaussian(y, F, self.sigma, self.bounds).value

    def grad_hess(self, y, F):
        ev = truncated_gaussian(y, F, self.sigma, self.bounds, clamp=False)
        hess = np.asarray(ev.hess)
        self.n_hess_clamped += int(np.count_nonzero(hess < HESS_FLOOR))
        return np.asarray(ev.grad), np.maximum(hess, HESS_FLOOR)

    def to_dict(self):
        return {"name": self.name, "lower": repr(float(self.bounds.lower)),
                "upper": repr(float(self.bounds.upper)),
                "sigma": None if self.sigma is None else repr(float(self.sigma))}
