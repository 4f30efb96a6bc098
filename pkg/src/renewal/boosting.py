"""Gradient-boosted regression trees with exact greedy splits.

Two modes are supported:

* ``first_order`` -- stochastic gradient boosting: trees are least-squares
  fits to the pseudo-residuals and each leaf constant is a 1-D line search
  on the loss.
* ``second_order`` -- Newton boosting with an L1/L2 penalty on the leaf
  weights, a per-leaf complexity cost and per-tree column subsampling.

The L2 penalty multiplies ``w**2`` directly (not ``w**2 / 2``), so the
denominator of the leaf solve is ``H + 2 * reg_lambda``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .losses import Loss

MODEL_VERSION = 1
FIRST_ORDER = "first_order"
SECOND_ORDER = "second_order"


class UnboundedLeaf(ArithmeticError):
    pass


@dataclass
class BoostConfig:
    eta: float = 0.3
    max_depth: int = 6
    min_child_weight: float = 1
    subsample: float = 1.0
    colsample: float = 1.0
    gamma: float = 0.0
    reg_lambda: float = 1.0
    reg_alpha: float = 0.0
    max_rounds: int = 10_000
    early_stop_patience: int = 250
    mode: str = SECOND_ORDER
    seed: int = 0
    line_search_steps: int = 20

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.max_depth < 0 or self.min_child_weight < 0:
            raise ValueError("max_depth and min_child_weight must be non-negative")
        if not 0 < self.subsample <= 1 or not 0 < self.colsample <= 1:
            raise ValueError("subsample and colsample must lie in (0, 1]")
        if self.gamma < 0 or self.reg_lambda < 0 or self.reg_alpha < 0:
            raise ValueError("gamma, reg_lambda and reg_alpha must be non-negative")
        if self.max_rounds < 1 or self.early_stop_patience < 0:
            raise ValueError("max_rounds must be >= 1 and early_stop_patience >= 0")
        if self.mode not in (FIRST_ORDER, SECOND_ORDER):
            raise ValueError(f"unknown boosting mode {self.mode!r}")

    @property
    def min_leaf(self) -> int:
        return max(1, int(math.ceil(self.min_child_weight)))

    def penalties(self) -> tuple[float, float, float]:
        """(gamma, lambda, alpha) actually applied; first-order mode has none."""
        if self.mode == FIRST_ORDER:
            return 0.0, 0.0, 0.0
        return self.gamma, self.reg_lambda, self.reg_alpha


# ---------------------------------------------------------------------------
# leaf solve and split scoring


def leaf_weight(G: float, H: float, reg_lambda: float = 0.0, reg_alpha: float = 0.0) -> float:
    """Minimiser of ``G*w + H*w**2/2 + reg_alpha*|w| + reg_lambda*w**2``."""
    if H < 0:
        raise ValueError("hessian sum must be non-negative")
    shrunk = max(abs(G) - reg_alpha, 0.0)
    if shrunk == 0.0:
        return 0.0
    denom = H + 2.0 * reg_lambda
    if denom <= 0:
        raise UnboundedLeaf("unbounded leaf solve")
    return -math.copysign(shrunk, G) / denom


def _score(G, H, reg_lambda, reg_alpha):
    """Negative minimum of the penalised leaf objective (vectorised)."""
    num = np.abs(G)
    if reg_alpha > 0:
        num = np.maximum(num - reg_alpha, 0.0)
    num = num * num
    denom = H + 2.0 * reg_lambda
    if np.all(denom > 0):
        return num / (2.0 * denom)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / (2.0 * denom)
    out = np.where(num == 0.0, 0.0, out)
    return np.where((denom <= 0) & (num > 0), np.inf, out)


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float
    n_left: int
    n_right: int


def _split_threshold(lo: float, hi: float) -> float:
    mid = lo + 0.5 * (hi - lo)
    return mid if lo <= mid < hi else lo


def _best_split_sorted(XT, g, h, sorted_rows, features, min_leaf, gamma, reg_lambda, reg_alpha):
    """Best split of one node.

    ``sorted_rows[i]`` lists the node's rows ordered by feature
    ``features[i]``; ``XT`` is the transposed design matrix.
    """
    n = sorted_rows.shape[1]
    if n < 2 * min_leaf:
        return None
    lo_pos = min_leaf - 1
    hi_pos = n - min_leaf - 1
    if hi_pos < lo_pos:
        return None
    any_rows = sorted_rows[0]
    G = float(np.sum(g[any_rows]))
    H = float(np.sum(h[any_rows]))
    parent = float(_score(G, H, reg_lambda, reg_alpha))
    feats = np.asarray(features, dtype=np.intp)
    x = XT[feats[:, None], sorted_rows]
    # left child holds rows[:j+1]; a split is valid only between distinct values
    sl = slice(lo_pos, hi_pos + 1)
    valid = x[:, lo_pos:hi_pos + 1] < x[:, lo_pos + 1:hi_pos + 2]
    if not valid.any():
        return None
    GL = np.cumsum(g[sorted_rows], axis=1)[:, sl][valid]
    HL = np.cumsum(h[sorted_rows], axis=1)[:, sl][valid]
    gain = (_score(GL, HL, reg_lambda, reg_alpha)
            + _score(G - GL, H - HL, reg_lambda, reg_alpha) - parent - gamma)
    gain = np.where(np.isfinite(gain), gain, -np.inf)
    # boolean compression keeps row-major order: lowest feature first, then
    # lowest threshold
    best = int(np.argmax(gain))
    best_gain = float(gain[best])
    if not best_gain > 0:
        return None
    i, pos = (int(v[best]) for v in np.nonzero(valid))
    jj = pos + lo_pos
    return Split(int(feats[i]), _split_threshold(float(x[i, jj]), float(x[i, jj + 1])),
                 best_gain, jj + 1, n - jj - 1)


def best_split(X, grad, hess, rows, features, config: BoostConfig) -> Optional[Split]:
    """Exact greedy split search on the instances ``rows``.

    Ties are resolved towards the lowest feature index, then the lowest
    threshold.  Returns ``None`` unless the best gain is strictly positive.
    """
    X = np.asarray(X, dtype=float)
    rows = np.asarray(rows, dtype=np.intp)
    features = sorted(int(k) for k in features)
    gamma, lam, alpha = config.penalties()
    if config.mode == FIRST_ORDER:
        hess = np.ones_like(grad)
    sorted_rows = np.array([rows[np.argsort(X[rows, k], kind="stable")] for k in features])
    return _best_split_sorted(X.T, np.asarray(grad, float), np.asarray(hess, float),
                              sorted_rows, features, config.min_leaf, gamma, lam, alpha)


# ---------------------------------------------------------------------------
# trees


@dataclass
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.feature < 0))

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for node in range(len(self.feature)):
            if self.feature[node] >= 0:
                depth[self.left[node]] = depth[node] + 1
                depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row."""
        node = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            idx = rows[active]
            nd = node[active]
            go_left = X[idx, feat[active]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [repr(float(v)) for v in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [repr(float(v)) for v in self.value],
            "count": self.count.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.intp),
            threshold=np.asarray([float(v) for v in d["threshold"]]),
            left=np.asarray(d["left"], dtype=np.intp),
            right=np.asarray(d["right"], dtype=np.intp),
            value=np.asarray([float(v) for v in d["value"]]),
            count=np.asarray(d["count"], dtype=np.intp),
        )


class _TreeBuilder:
    def __init__(self, X, global_order, config: BoostConfig):
        self.X = X
        self.XT = np.ascontiguousarray(X.T)
        self.order = global_order
        self.cfg = config
        self.mark = np.zeros(X.shape[0], dtype=bool)

    def grow(self, g, h, in_sample: np.ndarray, features: list[int], leaf_fn) -> DecisionTree:
        cfg = self.cfg
        gamma, lam, alpha = cfg.penalties()
        split_h = np.ones_like(h) if cfg.mode == FIRST_ORDER else h
        root = np.array([self.order[k][in_sample[self.order[k]]] for k in features])
        feature, threshold, left, right, value, count = [], [], [], [], [], []

        def new_node(n_rows):
            feature.append(-1); threshold.append(0.0); left.append(-1); right.append(-1)
            value.append(0.0); count.append(n_rows)
            return len(feature) - 1

        queue = [(new_node(root.shape[1]), root, 0)]
        head = 0
        while head < len(queue):
            node, rows, depth = queue[head]
            queue[head] = None
            head += 1
            split = None
            if depth < cfg.max_depth:
                split = _best_split_sorted(self.XT, g, split_h, rows, features,
                                           cfg.min_leaf, gamma, lam, alpha)
            if split is None:
                value[node] = leaf_fn(rows[0])
                continue
            k, thr = split.feature, split.threshold
            node_rows = rows[0]
            self.mark[node_rows] = self.XT[k, node_rows] <= thr
            m = self.mark[rows]
            self.mark[node_rows] = False
            n_left = split.n_left
            left_rows = rows[m].reshape(len(features), n_left)
            right_rows = rows[~m].reshape(len(features), -1)
            li, ri = new_node(n_left), new_node(right_rows.shape[1])
            feature[node], threshold[node], left[node], right[node] = k, thr, li, ri
            queue.append((li, left_rows, depth + 1))
            queue.append((ri, right_rows, depth + 1))
        return DecisionTree(np.asarray(feature, dtype=np.intp), np.asarray(threshold, dtype=float),
                            np.asarray(left, dtype=np.intp), np.asarray(right, dtype=np.intp),
                            np.asarray(value, dtype=float), np.asarray(count, dtype=np.intp))


# ---------------------------------------------------------------------------
# ensemble


@dataclass
class Ensemble:
    base_score: np.ndarray
    trees: list
    eta: float
    loss: dict
    n_features: int
    config: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    @property
    def n_outputs(self) -> int:
        return len(self.base_score)

    def predict(self, X, n_rounds: Optional[int] = None) -> np.ndarray:
        """Raw scores; shape (N,) for single-output losses, (N, C) otherwise."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        rounds = self.trees if n_rounds is None else self.trees[:n_rounds]
        F = np.tile(self.base_score, (X.shape[0], 1))
        for round_trees in rounds:
            for c, tree in enumerate(round_trees):
                F[:, c] += self.eta * tree.predict(X)
        return F[:, 0] if self.n_outputs == 1 else F

    def to_json(self) -> str:
        doc = {
            "format": "renewal.ensemble",
            "version": MODEL_VERSION,
            "base_score": [repr(float(v)) for v in self.base_score],
            "eta": repr(float(self.eta)),
            "loss": self.loss,
            "n_features": self.n_features,
            "config": self.config,
            "history": self.history,
            "trees": [[t.to_dict() for t in rt] for rt in self.trees],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Ensemble":
        doc = json.loads(text)
        if doc.get("format") != "renewal.ensemble" or doc.get("version") != MODEL_VERSION:
            raise ValueError("not a renewal ensemble model file of a supported version")
        return cls(
            base_score=np.asarray([float(v) for v in doc["base_score"]]),
            trees=[[DecisionTree.from_dict(t) for t in rt] for rt in doc["trees"]],
            eta=float(doc["eta"]),
            loss=doc["loss"],
            n_features=int(doc["n_features"]),
            config=doc["config"],
            history=doc["history"],
        )


def round_rng(seed: int, round_index: int) -> np.random.Generator:
    """Generator keyed on (seed, round) so each round is reproducible on its own."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(round_index)]))


def _draw(n_rows, n_cols, cfg: BoostConfig, round_index: int):
    rng = round_rng(cfg.seed, round_index)
    in_sample = np.ones(n_rows, dtype=bool)
    if cfg.subsample < 1.0:
        size = max(2, int(round(cfg.subsample * n_rows)))
        rows = rng.choice(n_rows, size=min(size, n_rows), replace=False)
        in_sample[:] = False
        in_sample[rows] = True
    cols = list(range(n_cols))
    if cfg.mode == SECOND_ORDER and cfg.colsample < 1.0:
        size = max(1, int(round(cfg.colsample * n_cols)))
        cols = sorted(int(c) for c in rng.choice(n_cols, size=size, replace=False))
    return in_sample, cols


RoundCallback = Callable[[int, np.ndarray], Optional[float]]


def fit(X, y, loss: Loss, config: BoostConfig, round_callback: Optional[RoundCallback] = None,
        record_loss: bool = True, eval_set=None) -> Ensemble:
    """Fit a boosted tree ensemble.

    ``round_callback(round, F)`` is called after the base score (round 0) and
    after every round with the current raw scores; it may return a metric
    (lower is better) which drives early stopping.  The returned ensemble is
    truncated at the best-metric round.

    ``eval_set=(X_val, y_val)`` instead uses the mean loss on held-out rows
    as the stopping metric.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("X must be a 2-D array with at least two rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    y = loss.check_targets(y)
    if len(y) != X.shape[0]:
        raise ValueError("targets and features disagree on the number of rows")
    n, k = X.shape
    C = loss.n_outputs
    base = np.atleast_1d(np.asarray(loss.init_score(y), dtype=float))
    if base.shape != (C,):
        raise ValueError("loss/target mismatch: base score arity differs from loss outputs")
    F = np.tile(base, (n, 1))
    if eval_set is not None:
        if round_callback is not None:
            raise ValueError("give either round_callback or eval_set, not both")
        X_val = np.asarray(eval_set[0], dtype=float)
        y_val = loss.check_targets(eval_set[1])
        F_val = np.tile(base, (len(X_val), 1))
        sq = (lambda A: A[:, 0]) if C == 1 else (lambda A: A)

        def round_callback(rnd, _F):
            return float(np.mean(loss.value(y_val, sq(F_val))))
    order = [np.argsort(X[:, j], kind="stable") for j in range(k)]
    builder = _TreeBuilder(X, order, config)
    gamma, lam, alpha = config.penalties()

    def squeeze(F):
        return F[:, 0] if C == 1 else F

    trees: list[list[DecisionTree]] = []
    metric_hist: list[float] = []
    loss_hist: list[float] = []
    best_metric, best_round = math.inf, 0
    if round_callback is not None:
        m = round_callback(0, squeeze(F))
        if m is not None:
            metric_hist.append(float(m))
            best_metric = float(m)
    if record_loss:
        loss.begin_round(y, squeeze(F))
        loss_hist.append(float(np.mean(loss.value(y, squeeze(F)))))

    for rnd in range(1, config.max_rounds + 1):
        loss.begin_round(y, squeeze(F))
        g, h = loss.grad_hess(y, squeeze(F))
        g = g.reshape(n, C)
        h = h.reshape(n, C)
        in_sample, cols = _draw(n, k, config, rnd)
        round_trees = []
        for c in range(C):
            gc, hc = np.ascontiguousarray(g[:, c]), np.ascontiguousarray(h[:, c])
            if config.mode == SECOND_ORDER:
                def leaf_fn(rows, gc=gc, hc=hc):
                    return leaf_weight(float(gc[rows].sum()), float(hc[rows].sum()), lam, alpha)
                features = cols
            else:
                def leaf_fn(rows, c=c):
                    return _line_search(loss, y, F, rows, c, C, config.line_search_steps)
                features = list(range(k))
            tree = builder.grow(gc, hc, in_sample, features, leaf_fn)
            round_trees.append(tree)
        for c, tree in enumerate(round_trees):
            F[:, c] += config.eta * tree.predict(X)
            if eval_set is not None:
                F_val[:, c] += config.eta * tree.predict(X_val)
        trees.append(round_trees)
        if record_loss:
            loss.begin_round(y, squeeze(F))
            loss_hist.append(float(np.mean(loss.value(y, squeeze(F)))))
        if round_callback is not None:
            m = round_callback(rnd, squeeze(F))
            if m is not None:
                metric_hist.append(float(m))
                if m < best_metric:
                    best_metric, best_round = float(m), rnd
                elif config.early_stop_patience and rnd - best_round >= config.early_stop_patience:
                    break

    rounds_run = len(trees)
    if metric_hist:
        trees = trees[:best_round]
    history = {"metric": metric_hist, "train_loss": loss_hist,
               "best_round": best_round if metric_hist else len(trees),
               "rounds_run": rounds_run}
    if hasattr(loss, "n_hess_clamped"):
        history["n_hess_clamped"] = loss.n_hess_clamped
    return Ensemble(base_score=base, trees=trees, eta=config.eta, loss=loss.to_dict(),
                    n_features=k, config=asdict(config), history=history)


def _line_search(loss: Loss, y, F, rows, c, C, steps) -> float:
    """Damped 1-D Newton minimisation of the loss over a leaf's constant.

    Steps are halved until the leaf loss decreases, which keeps pure leaves
    (whose minimiser is at infinity) from jumping by 1/p.
    """
    if len(rows) == 0:
        return 0.0
    yr = y[rows]
    Fr = F[rows].copy()
    base = Fr[:, c].copy()

    def at(w):
        Fr[:, c] = base + w
        return Fr[:, 0] if C == 1 else Fr

    w = 0.0
    current = float(np.sum(loss.value(yr, at(w))))
    for _ in range(steps):
        g, h = loss.grad_hess(yr, at(w))
        g = np.asarray(g).reshape(len(rows), C)[:, c]
        h = np.asarray(h).reshape(len(rows), C)[:, c]
        H = float(h.sum())
        if H <= 0:
            break
        step = float(g.sum()) / H
        for _ in range(30):
            trial = float(np.sum(loss.value(yr, at(w - step))))
            if trial <= current:
                break
            step *= 0.5
        else:
            break
        w -= step
        current = trial
        if abs(step) <= 1e-12 * max(1.0, abs(w)):
            break
    return w


def predict(ensemble: Ensemble, X) -> np.ndarray:
    return ensemble.predict(X)
