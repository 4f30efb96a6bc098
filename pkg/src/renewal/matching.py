"""Counterfactual churn responses by nearest-propensity matching, multiple
imputation and Rubin's rule."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

MAGIC = b"RENEWAL-IMPUTED\n"
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


# ---------------------------------------------------------------------------
# donor search


def _rank_rows(d, idx, I):
    """First I columns of each row ordered by (distance, index)."""
    order = np.lexsort((idx, d), axis=-1)
    return np.take_along_axis(idx, order[:, :I], axis=1), np.take_along_axis(d, order[:, :I], axis=1)


def _brute_force_row(score_i, i, cand, cand_scores, I):
    d = np.abs(score_i - cand_scores)
    keep = cand != i
    d, c = d[keep], cand[keep]
    order = np.lexsort((c, d))
    return c[order[:I]]


def donors_for_category(scores_c, members, I: int, recipients=None) -> np.ndarray:
    """Donor lists for every recipient and one category.

    ``scores_c`` holds pi(t_c, X_j) for all units, ``members`` the units
    whose dose lies in the category.  Returns a (len(recipients), I) array
    of unit indices ordered by distance then index.
    """
    scores_c = np.asarray(scores_c, dtype=float)
    members = np.asarray(members, dtype=np.int64)
    n = len(scores_c)
    recipients = np.arange(n) if recipients is None else np.asarray(recipients, dtype=np.int64)
    if len(members) < I:
        raise ValueError(f"category has {len(members)} units, fewer than I={I}")
    order = np.lexsort((members, scores_c[members]))
    cand = members[order]
    cand_s = scores_c[cand]
    m = len(cand)
    s_i = scores_c[recipients]
    pos = np.searchsorted(cand_s, s_i)
    offsets = np.arange(-(I + 1), I + 1)
    win = pos[:, None] + offsets[None, :]
    valid = (win >= 0) & (win < m)
    win_c = np.where(valid, win, 0)
    idx = cand[win_c]
    d = np.abs(s_i[:, None] - cand_s[win_c])
    invalid = ~valid | (idx == recipients[:, None])
    d = np.where(invalid, np.inf, d)
    idx = np.where(invalid, np.iinfo(np.int64).max, idx)
    out, dist = _rank_rows(d, idx, I)
    # a unit just outside the window can tie the I-th distance; redo those rows exactly
    d_last = dist[:, -1]
    left = pos - (I + 2)
    right = pos + (I + 1)
    edge_left = np.where(left >= 0, np.abs(s_i - cand_s[np.clip(left, 0, m - 1)]), np.inf)
    edge_right = np.where(right < m, np.abs(s_i - cand_s[np.clip(right, 0, m - 1)]), np.inf)
    redo = (edge_left <= d_last) | (edge_right <= d_last) | ~np.isfinite(d_last)
    for r in np.flatnonzero(redo):
        row = _brute_force_row(s_i[r], recipients[r], cand, cand_s, I)
        if len(row) < I:
            raise ValueError(f"category has too few units to give unit {recipients[r]} {I} donors")
        out[r] = row
    return out


def find_donors(i: int, c: int, scores, cat, I: int) -> np.ndarray:
    """The I units in category c closest to unit i in pi(t_c, .); ties to lower index.

    ``scores`` is the N x C propensity matrix and ``cat`` the observed
    category of every unit.  Unit i never donates to itself.
    """
    scores = np.asarray(scores, dtype=float)
    members = np.flatnonzero(np.asarray(cat) == c)
    if len(members) - (1 if cat[i] == c else 0) < I:
        raise ValueError(f"category {c} has fewer than I={I} eligible donors")
    return donors_for_category(scores[:, c], members, I, recipients=[i])[0]


def find_all_donors(scores, cat, I: int) -> np.ndarray:
    """N x C x I donor index array."""
    scores = np.asarray(scores, dtype=float)
    cat = np.asarray(cat)
    n, C = scores.shape
    out = np.empty((n, C, I), dtype=np.int64)
    for c in range(C):
        members = np.flatnonzero(cat == c)
        if len(members) < I + 1:
            raise ValueError(f"category {c} has {len(members)} units; need more than I={I}")
        out[:, c, :] = donors_for_category(scores[:, c], members, I)
    return out


# ---------------------------------------------------------------------------
# imputation


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> np.uint64(31))


def cell_uniforms(seed: int, ids, c: int, M: int) -> np.ndarray:
    """len(ids) x M uniforms in [0, 1) keyed on (seed, id, c, m) only."""
    ids = np.asarray(ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix64(np.full(ids.shape, np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
        h = _splitmix64(h ^ ids)
        h = _splitmix64(h ^ np.uint64(c))
        h = _splitmix64(h[:, None] ^ np.arange(M, dtype=np.uint64)[None, :])
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


@dataclass
class ImputedResponseSet:
    draws: np.ndarray       # N x C x M, uint8
    donors: np.ndarray      # N x C x I, row indices
    ids: np.ndarray
    observed: np.ndarray    # observed category per unit
    seed: int
    I: int
    M: int

    @property
    def shape(self):
        return self.draws.shape

    def averages(self) -> np.ndarray:
        """N x C average potential response over the M imputations."""
        return self.draws.mean(axis=2)

    def imputation(self, m: int) -> np.ndarray:
        return self.draws[:, :, m]

    def save(self, path) -> None:
        n, C, M = self.draws.shape
        header = {"format": "renewal.imputed", "version": 1, "n": n, "C": C, "M": M, "I": self.I,
                  "seed": int(self.seed)}
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(self.ids, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(self.observed, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(self.draws, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(self.donors, dtype="<i8").tobytes())

    @classmethod
    def load(cls, path) -> "ImputedResponseSet":
        with open(path, "rb") as fh:
            if fh.read(len(MAGIC)) != MAGIC:
                raise ValueError(f"{path}: not an imputed response file")
            (size,) = struct.unpack("<Q", fh.read(8))
            h = json.loads(fh.read(size))
            n, C, M, I = h["n"], h["C"], h["M"], h["I"]
            ids = np.frombuffer(fh.read(8 * n), dtype="<i8").astype(np.int64)
            observed = np.frombuffer(fh.read(4 * n), dtype="<i4").astype(np.int64)
            draws = np.frombuffer(fh.read(n * C * M), dtype=np.uint8).reshape(n, C, M).copy()
            donors = np.frombuffer(fh.read(8 * n * C * I), dtype="<i8").reshape(n, C, I).astype(np.int64)
        return cls(draws, donors, ids, observed, h["seed"], I, M)

    def to_long_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "category", "imputation", "churn", "observed"])
            n, C, M = self.draws.shape
            for i in range(n):
                for c in range(C):
                    obs = int(c == self.observed[i])
                    for m in range(M):
                        w.writerow([int(self.ids[i]), c, m, int(self.draws[i, c, m]), obs])


def impute(scores, cat, y, ids, I: int = 10, M: int = 10, seed: int = 0) -> ImputedResponseSet:
    """Multiple imputation of potential churn responses.

    Observed cells repeat the observed response; counterfactual cells draw
    M responses with replacement from the I nearest donors.  Draws for a
    cell depend only on (seed, policy id, category), not on row order.
    """
    scores = np.asarray(scores, dtype=float)
    cat = np.asarray(cat, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    if I < 1 or M < 1:
        raise ValueError("I and M must be positive")
    n, C = scores.shape
    donors = find_all_donors(scores, cat, I)
    draws = np.empty((n, C, M), dtype=np.uint8)
    for c in range(C):
        u = cell_uniforms(seed, ids, c, M)
        pick = np.minimum((u * I).astype(np.int64), I - 1)
        chosen = np.take_along_axis(donors[:, c, :], pick, axis=1)
        draws[:, c, :] = y[chosen]
    own = cat
    draws[np.arange(n), own, :] = y[:, None]
    return ImputedResponseSet(draws, donors, ids, cat, int(seed), I, M)


def impute_portfolio(portfolio, ps, I: int = 10, M: int = 10, seed: int = 0) -> ImputedResponseSet:
    X = portfolio.covariates()
    scores = ps.interval_probs(X)
    cat = ps.grid.category_of(portfolio.rate_change)
    return impute(scores, cat, portfolio.churn, portfolio.id, I, M, seed)


# ---------------------------------------------------------------------------
# pooling


@dataclass
class PooledEstimate:
    delta_bar: np.ndarray
    var: np.ndarray
    W_bar: np.ndarray
    B: np.ndarray
    M: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.var))

    def to_dict(self) -> dict:
        return {"delta_bar": self.delta_bar.tolist(), "var": self.var.tolist(),
                "W_bar": self.W_bar.tolist(), "B": self.B.tolist(), "M": self.M}


def rubin_combine(estimates, variances) -> PooledEstimate:
    """Pool M estimates with Rubin's rule: Var = W_bar + (1 + 1/M) B.

    ``variances`` may be M covariance matrices or M vectors of variances
    (treated as diagonal).
    """
    est = np.asarray(estimates, dtype=float)
    if est.ndim == 1:
        est = est[:, None]
    M, p = est.shape
    if M < 2:
        raise ValueError("Rubin's rule needs at least 2 imputations")
    var = np.asarray(variances, dtype=float)
    if var.ndim == 1:
        var = var[:, None, None]
    elif var.ndim == 2:
        var = np.stack([np.diag(v) for v in var])
    if var.shape != (M, p, p):
        raise ValueError(f"variances must have shape ({M}, {p}, {p})")
    # shifted by the first imputation: identical imputations give B == 0 exactly
    shift = est - est[0]
    delta_bar = est[0] + shift.mean(axis=0)
    W_bar = var.mean(axis=0)
    dev = shift - shift.mean(axis=0)
    B = dev.T @ dev / (M - 1)
    return PooledEstimate(delta_bar, W_bar + (1.0 + 1.0 / M) * B, W_bar, B, M)
