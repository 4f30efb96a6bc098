"""Command-line driver: staged pipeline with TOML configs, manifests and tuning.

Every stage reads named artifacts from the work directory, writes its own
artifacts plus ``manifests/<stage>.json``, and draws all randomness from the
run seed through a named substream.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import os
import platform
import re
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy
import tomli
import tomli_w

from . import __version__
from .boosting import BoostConfig
from .losses import BernoulliLoss, TruncationBounds
from .matching import ImputedResponseSet, impute_portfolio
from .optimizer import (ActionSet, DoseResponse, PooledResponse, boundary_solutions, frontier,
                        frontier_tsv, margins, multiperiod, plan_json, price_competitiveness)
from .portfolio import (PortfolioError, SynthConfig, TreatmentGrid, load_csv, quantile_grid, save_csv,
                        synth_generate, trim_outliers)
from .propensity import (CONTINUOUS, DISCRETE, PropensityModel, asam, convergence_study, convergence_tsv,
                         design_of, fit_continuous_gps, fit_discrete_ps, gps_nll, multinoulli_log_loss)
from .response import (DesignSpec, avg_dose_response, boosted_pipeline, bootstrap_dr,
                       continuous_churn_surface, default_penalty_grid, discrete_churn_surface,
                       fit_boosted_dr, fit_pooled_response, fit_quadratic_dr, model_from_json,
                       model_to_json, full_penalty_grid, quadratic_pipeline, select_penalty)

log = logging.getLogger("renewal")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _boost_defaults(**kw) -> dict:
    d = {f.name: float(f.default) if f.type in ("float", float) else f.default
         for f in dataclasses.fields(BoostConfig) if f.name != "seed"}
    d.update(kw)
    return d


DEFAULTS = {
    "seed": 7,
    "kind": DISCRETE,
    "paths": {"workdir": "run", "input": ""},
    "simulate": SynthConfig().to_dict(),
    "trim": {"enabled": True, "fields": ["rate_change", "competitiveness"], "k": 1.5, "iterate": False},
    "grid": {"n_intervals": 5, "bounds": []},
    "ps": {
        "early_stopping": True,
        "discrete": _boost_defaults(eta=0.1, max_depth=3, max_rounds=400, early_stop_patience=40),
        "continuous": _boost_defaults(eta=0.1, max_depth=3, max_rounds=400, early_stop_patience=40),
    },
    "converge": {"C": [5, 10, 20, 50]},
    "matching": {"I": 10, "M": 10},
    "response": {
        "folds": 10,
        "penalty_step": 0.5,
        "full_penalties": False,
        "penalty": 0.0,
        "refit": False,
        "model": "boosted",
        "holdout": 0.2,
        "dr": _boost_defaults(eta=0.05, max_depth=3, max_rounds=2000, early_stop_patience=50),
    },
    "dose_response": {"n_points": 41, "bootstrap": 0, "comp_points": [-0.3, -0.15, 0.0, 0.15, 0.3],
                      "comp_bins": 5},
    "frontier": {"alphas": [], "n_alphas": 21, "step": 0.001, "reference": "model"},
    "multiperiod": {"tau": 3, "step": 0.05, "alphas": [], "feedback": "price", "min_tenure": 0,
                    "max_iter": 500},
    "tune": {"folds": 10, "paper_grids": False, "max_rounds": 500,
             "grids": {"eta": [0.1, 0.3], "max_depth": [2, 3], "min_child_weight": [1],
                       "subsample": [1.0], "colsample": [1.0],
                       "gamma": [0.0], "reg_lambda": [1.0], "reg_alpha": [0.0]}},
    "pipeline": {"converge": False, "tune": False},
}


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        key = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a table")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = _coerce(base[k], v, key)
    return out


def _coerce(default, value, key):
    if isinstance(value, dict):
        raise ConfigError(f"config key {key!r} is not a table")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be true or false")
        return value
    if isinstance(value, bool):
        raise ConfigError(f"config key {key!r} must not be a boolean")
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if isinstance(default, (int, float)) and not isinstance(value, type(default)):
        raise ConfigError(f"config key {key!r} must be {'an integer' if isinstance(default, int) else 'a number'}")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"config key {key!r} must be a string")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"config key {key!r} must be an array")
    return value


def parse_override(text: str) -> dict:
    """``--a.b=value`` to a nested dict; the value is read as a TOML value, else as a string."""
    m = re.fullmatch(r"--([A-Za-z_][\w.]*)=(.*)", text, flags=re.S)
    if not m:
        raise ConfigError(f"cannot parse argument {text!r}; overrides look like --section.key=value")
    key, raw = m.groups()
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    out = value
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


def load_config(path=None, overrides: Sequence[str] = (), base: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(base if base is not None else DEFAULTS)
    if path:
        try:
            with open(path, "rb") as fh:
                cfg = _merge(cfg, tomli.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for text in overrides:
        cfg = _merge(cfg, parse_override(text))
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["kind"] not in (DISCRETE, CONTINUOUS):
        raise ConfigError(f"kind must be {DISCRETE!r} or {CONTINUOUS!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    try:
        SynthConfig.from_dict(cfg["simulate"]).validate()
        for sec in (cfg["ps"]["discrete"], cfg["ps"]["continuous"], cfg["response"]["dr"]):
            BoostConfig(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["grid"]["n_intervals"] < 2:
        raise ConfigError("grid.n_intervals must be at least 2")
    if len(cfg["grid"]["bounds"]) not in (0, 2):
        raise ConfigError("grid.bounds must be empty or [lower, upper]")
    if cfg["response"]["model"] not in ("boosted", "quadratic"):
        raise ConfigError("response.model must be 'boosted' or 'quadratic'")
    if cfg["multiperiod"]["feedback"] not in ("price", "frozen"):
        raise ConfigError("multiperiod.feedback must be 'price' or 'frozen'")
    if cfg["frontier"]["reference"] not in ("model", "observed"):
        raise ConfigError("frontier.reference must be 'model' or 'observed'")
    unknown = set(cfg["tune"]["grids"]) - set(TUNE_PARAMS)
    if unknown:
        raise ConfigError(f"unknown tuning parameters: {sorted(unknown)}")


def substream(seed: int, name: str) -> int:
    """Integer seed of the named substream of the run seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def resolve_threads(arg: Optional[int]) -> int:
    if arg is None:
        env = os.environ.get("RENEWAL_THREADS", "")
        try:
            arg = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"RENEWAL_THREADS must be an integer, got {env!r}") from None
    if arg < 1:
        raise ConfigError("threads must be at least 1")
    return arg


# ---------------------------------------------------------------------------
# tuning


TUNE_STAGES = (("eta", "max_depth", "min_child_weight"), ("subsample", "colsample"),
               ("gamma", "reg_lambda", "reg_alpha"))
TUNE_PARAMS = tuple(p for stage in TUNE_STAGES for p in stage)
_TENTHS = [round(0.1 * k, 1) for k in range(1, 11)]
_PENALTY_STEPS = [0.0, 0.1, 1.0, 10.0, 100.0]
FULL_GRIDS = {
    "eta": [0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.15, 0.2, 0.25, 0.5],
    "max_depth": [0, 1, 2, 4, 6, 8, 10, 25, 50],
    "min_child_weight": [0, 1, 2, 3, 4, 5, 10, 25, 50],
    "subsample": _TENTHS,
    "colsample": _TENTHS,
    "gamma": _PENALTY_STEPS,
    "reg_lambda": _PENALTY_STEPS,
    "reg_alpha": _PENALTY_STEPS,
}


@dataclass
class TuneResult:
    best: dict
    rows: list                          # one dict per (candidate, fold)
    summary: list = field(default_factory=list)

    def to_tsv(self) -> str:
        head = ["stage", "candidate", *TUNE_PARAMS, "fold", "loss"]
        lines = ["\t".join(head)]
        for r in self.rows:
            lines.append("\t".join([str(r["stage"]), str(r["candidate"])]
                                   + [repr(r["params"][p]) for p in TUNE_PARAMS]
                                   + [str(r["fold"]), repr(r["loss"])]))
        return "\n".join(lines) + "\n"

    def to_json(self, **extra) -> str:
        return json.dumps({"best": self.best, "candidates": self.summary, **extra}, sort_keys=True, indent=2)


def fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    if folds < 2 or folds > n:
        raise ValueError(f"need 2 <= folds <= {n}")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    out = np.empty(n, dtype=np.int64)
    out[rng.permutation(n)] = np.arange(n) % folds
    return out


def tune(evaluate: Callable, grids: dict, base: BoostConfig, n: int, folds: int = 10, seed: int = 0,
         stages=TUNE_STAGES) -> TuneResult:
    """Stage-wise grid search with K-fold cross-validation.

    ``evaluate(config, train_rows, test_rows)`` returns a held-out loss.
    Within a stage every combination of that stage's grids is tried; the
    best combination (lowest mean loss, first in grid order on ties) is
    frozen before the next stage starts.
    """
    for p in (p for st in stages for p in st):
        if p in grids and len(grids[p]) == 0:
            raise ValueError(f"empty grid for {p}")
    fold = fold_ids(n, folds, seed)
    best = {p: getattr(base, p) for p in TUNE_PARAMS}
    rows, summary = [], []
    cand = 0
    for s, stage in enumerate(stages, start=1):
        names = [p for p in stage if p in grids]
        if not names:
            continue
        stage_best, stage_loss = None, math.inf
        for combo in itertools.product(*(grids[p] for p in names)):
            params = {**best, **dict(zip(names, combo))}
            cfg = dataclasses.replace(base, **params)
            losses = []
            for k in range(folds):
                loss = float(evaluate(cfg, np.flatnonzero(fold != k), np.flatnonzero(fold == k)))
                rows.append({"stage": s, "candidate": cand, "params": params, "fold": k, "loss": loss})
                losses.append(loss)
            mean = float(np.mean(losses))
            summary.append({"stage": s, "candidate": cand, "params": params, "mean_loss": mean,
                            "se_loss": float(np.std(losses, ddof=1) / math.sqrt(folds))})
            if mean < stage_loss:
                stage_best, stage_loss = params, mean
            cand += 1
        best = stage_best
    return TuneResult(best, rows, summary)


def boost_evaluator(X, y, loss_factory: Callable, fit_kw: Optional[dict] = None) -> Callable:
    """Held-out mean loss of a plain boosted fit; the generic evaluator for :func:`tune`."""
    from . import boosting

    X = np.asarray(X, float)
    y = np.asarray(y)

    def evaluate(cfg, tr, te):
        loss = loss_factory()
        ens = boosting.fit(X[tr], y[tr], loss, cfg, record_loss=False, **(fit_kw or {}))
        return float(np.mean(loss.value(y[te], ens.predict(X[te]))))

    return evaluate


def ps_evaluator(data, grid: TreatmentGrid, kind: str, bounds=None, early_stopping: bool = True) -> Callable:
    """Held-out log-loss of the propensity model fitted on the training folds."""
    X, t, names = design_of(data)
    cat = grid.category_of(t)

    def evaluate(cfg, tr, te):
        if kind == DISCRETE:
            ps = fit_discrete_ps((X[tr], t[tr], names), grid, cfg, early_stopping=early_stopping)
            return multinoulli_log_loss(ps.interval_probs(X[te]), cat[te])
        ps = fit_continuous_gps((X[tr], t[tr], names), grid, cfg, bounds, early_stopping=early_stopping)
        return gps_nll(ps, X[te], t[te])

    return evaluate


def dr_evaluator(data, ps: PropensityModel, holdout: float, seed: int) -> Callable:
    """Held-out Bernoulli log-loss of the boosted dose-response model."""
    X = data.covariates()
    t = np.asarray(data.rate_change, float)
    y = np.asarray(data.churn)
    g = ps.gps(t, X)
    loss = BernoulliLoss()

    def evaluate(cfg, tr, te):
        dr = fit_boosted_dr((X[tr], t[tr], y[tr]), ps, cfg, holdout=holdout, seed=seed)
        F = dr.ensemble.predict(np.column_stack([t[te], g[te]]))
        return float(np.mean(loss.value(y[te], F)))

    return evaluate


def tune_grids(cfg: dict, full: bool) -> dict:
    return copy.deepcopy(FULL_GRIDS if full else cfg["tune"]["grids"])


# ---------------------------------------------------------------------------
# stages


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    return {"renewal": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


class Run:
    """One invocation: resolved config, work directory and runtime options."""

    def __init__(self, cfg: dict, threads: int = 1, check: bool = False, paper_grids: bool = False):
        self.cfg = cfg
        self.threads = threads
        self.check = check
        self.paper_grids = paper_grids or cfg["tune"]["paper_grids"]
        self.workdir = Path(cfg["paths"]["workdir"])

    def path(self, name: str) -> Path:
        return self.workdir / name

    def seed(self, name: str) -> int:
        return substream(self.cfg["seed"], name)

    def input_portfolio(self) -> str:
        return self.cfg["paths"]["input"] or str(self.path("portfolio.csv"))

    def boost(self, section: dict, stream: str) -> BoostConfig:
        return BoostConfig(**section, seed=self.seed(stream))

    # loaders ------------------------------------------------------------
    def portfolio(self):
        return load_csv(self.path("trimmed.csv"))

    def grid(self) -> TreatmentGrid:
        return TreatmentGrid.from_dict(json.loads(self.path("grid.json").read_text()))

    def ps(self) -> PropensityModel:
        return PropensityModel.from_json(self.path("ps.json").read_text())

    def bounds(self, grid: TreatmentGrid) -> TruncationBounds:
        b = self.cfg["grid"]["bounds"]
        return TruncationBounds(*b) if b else TruncationBounds(grid.lower, grid.upper)

    def response_model(self):
        return model_from_json(self.path("response.json").read_text())

    def evaluator(self, data):
        model = self.response_model()
        if self.cfg["kind"] == DISCRETE:
            return PooledResponse(model, data, self.grid())
        return DoseResponse(model, self.ps(), data.covariates())

    def actions(self, step: float) -> ActionSet:
        if self.cfg["kind"] == DISCRETE:
            return ActionSet.discrete(self.grid())
        b = self.ps().bounds
        return ActionSet.continuous(b.lower, b.upper, step)

    def write(self, name: str, text: str) -> None:
        with open(self.path(name), "w", newline="\n") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")


@dataclass(frozen=True)
class Stage:
    name: str
    fn: Callable
    inputs: Callable            # Run -> list of paths
    outputs: Callable           # Run -> list of paths
    sections: tuple             # config sections the outputs depend on


def _kind_outputs(discrete, continuous):
    return lambda r: [r.path(n) for n in (discrete if r.cfg["kind"] == DISCRETE else continuous)]


def _files(*names):
    return lambda r: [r.path(n) for n in names]


def stage_simulate(r: Run) -> None:
    cfg = SynthConfig.from_dict(r.cfg["simulate"])
    save_csv(synth_generate(cfg, r.seed("simulate")), r.path("portfolio.csv"))


def stage_trim(r: Run) -> None:
    data = load_csv(r.input_portfolio())
    t = r.cfg["trim"]
    if t["enabled"]:
        data, rep = trim_outliers(data, tuple(t["fields"]), t["k"], t["iterate"])
        report = rep.to_json()
    else:
        report = json.dumps({"n_before": data.n, "n_retained": data.n, "trimmed": False}, indent=2)
    save_csv(data, r.path("trimmed.csv"), write_meta=False)
    r.write("trim.json", report)


def stage_grid(r: Run) -> None:
    data = r.portfolio()
    grid = quantile_grid(data.rate_change, r.cfg["grid"]["n_intervals"])
    r.write("grid.json", json.dumps(grid.to_dict(), sort_keys=True, indent=2))


def _fit_ps(r: Run, data, grid, kind):
    es = r.cfg["ps"]["early_stopping"]
    if kind == DISCRETE:
        return fit_discrete_ps(data, grid, r.boost(r.cfg["ps"]["discrete"], "fit-ps"), early_stopping=es)
    return fit_continuous_gps(data, grid, r.boost(r.cfg["ps"]["continuous"], "fit-ps"), r.bounds(grid),
                              early_stopping=es)


def stage_fit_ps(r: Run) -> None:
    ps = _fit_ps(r, r.portfolio(), r.grid(), r.cfg["kind"])
    r.write("ps.json", ps.to_json())


def stage_balance(r: Run) -> None:
    rep = asam(r.portfolio(), r.ps(), r.grid())
    r.write("balance.tsv", rep.to_tsv())
    r.write("balance.json", rep.to_json())


def stage_converge(r: Run) -> None:
    data = r.portfolio()
    grid = r.grid()
    es = r.cfg["ps"]["early_stopping"]
    cont = fit_continuous_gps(data, grid, r.boost(r.cfg["ps"]["continuous"], "converge"), r.bounds(grid),
                              early_stopping=es)
    rows = convergence_study(data, r.cfg["converge"]["C"], r.boost(r.cfg["ps"]["discrete"], "converge"),
                             cont, early_stopping=es)
    r.write("convergence.tsv", convergence_tsv(rows))


def stage_match(r: Run) -> None:
    m = r.cfg["matching"]
    imp = impute_portfolio(r.portfolio(), r.ps(), m["I"], m["M"], r.seed("match"))
    imp.save(r.path("imputed.bin"))


def _penalties(r: Run):
    rc = r.cfg["response"]
    return full_penalty_grid() if rc["full_penalties"] else default_penalty_grid(rc["penalty_step"])


def stage_fit_response(r: Run) -> None:
    data = r.portfolio()
    rc = r.cfg["response"]
    if r.cfg["kind"] == DISCRETE:
        imp = ImputedResponseSet.load(r.path("imputed.bin"))
        design = DesignSpec.for_grid(r.grid())
        penalty = rc["penalty"]
        if penalty <= 0:
            path = select_penalty(imp, data, design, _penalties(r), folds=rc["folds"],
                                  seed=r.seed("fit-response"), threads=r.threads)
            r.write("lasso_path.tsv", path.to_tsv())
            penalty = path.penalty_1se
        else:
            r.write("lasso_path.tsv", "log_penalty\tpenalty\tn_nonzero\tcv_mean\tcv_se\tselected\n"
                    f"{math.log(penalty):.4f}\t{penalty:.6g}\t\t\t\tfixed\n")
        model = fit_pooled_response(imp, data, design, penalty, threads=r.threads, refit=rc["refit"])
        r.write("response.json", model_to_json(model))
        r.write("coefficients.tsv", model.coefficient_tsv())
        return
    ps = r.ps()
    if rc["model"] == "quadratic":
        t = np.asarray(data.rate_change, float)
        model = fit_quadratic_dr(t, data.churn, ps.gps(t, data.covariates()))
    else:
        model = fit_boosted_dr(data, ps, r.boost(rc["dr"], "fit-response"), holdout=rc["holdout"],
                               seed=r.seed("fit-response/holdout"))
    r.write("response.json", model_to_json(model))


def stage_dose_response(r: Run) -> None:
    data = r.portfolio()
    grid = r.grid()
    dc = r.cfg["dose_response"]
    model = r.response_model()
    if r.cfg["kind"] == DISCRETE:
        lines = ["category\tt\testimate\tlo\thi"]
        for c in range(grid.n_intervals):
            est, lo, hi = model.average_with_band(data, c)
            lines.append(f"{c}\t{grid.medians[c]:.6g}\t{est:.8g}\t{lo:.8g}\t{hi:.8g}")
        r.write("dose_response.tsv", "\n".join(lines))
        r.write("churn_surface.tsv", discrete_churn_surface(model, data, dc["comp_points"], grid))
        return
    ps = r.ps()
    X = data.covariates()
    t_grid = np.linspace(ps.bounds.lower, ps.bounds.upper, dc["n_points"])
    est = avg_dose_response(model, X, ps, t_grid)
    if dc["bootstrap"] >= 2:
        gps_cfg = r.boost(r.cfg["ps"]["continuous"], "fit-ps")
        if r.cfg["response"]["model"] == "quadratic":
            pipe = quadratic_pipeline(grid.n_intervals, gps_cfg, ps.bounds)
        else:
            pipe = boosted_pipeline(grid.n_intervals, gps_cfg, r.boost(r.cfg["response"]["dr"], "fit-response"),
                                    ps.bounds, seed=r.seed("fit-response/holdout"))
        bands = bootstrap_dr(data, pipe, dc["bootstrap"], r.seed("dose-response"), t_grid,
                             threads=r.threads)
        r.write("dose_response.tsv", bands.to_tsv(est))
    else:
        r.write("dose_response.tsv", "t\testimate\n" + "".join(f"{a:.6g}\t{b:.8g}\n" for a, b in zip(t_grid, est)))
    edges = np.quantile(data.competitiveness, np.linspace(0, 1, dc["comp_bins"] + 1))
    r.write("churn_surface.tsv", continuous_churn_surface(model, X, data.competitiveness, ps, t_grid, edges))


def alpha_span(Y, premium_old, expenses, actions, n: int) -> np.ndarray:
    """Caps from the least achievable churn to the churn of the unconstrained optimum."""
    R = (1.0 - Y) * margins(premium_old, expenses, actions)
    lo = Y.min(axis=1).mean()
    hi = Y[np.arange(len(Y)), np.argmax(R, axis=1)].mean()
    if n == 1 or hi <= lo:
        return np.array([max(lo, hi)])
    return np.linspace(lo, hi, n)


def stage_frontier(r: Run) -> None:
    data = r.portfolio()
    fc = r.cfg["frontier"]
    resp = r.evaluator(data)
    acts = r.actions(fc["step"])
    alphas = np.asarray(fc["alphas"], float)
    if len(alphas) == 0:
        alphas = alpha_span(resp.matrix(acts.values), data.premium_old, data.expenses, acts.values,
                            fc["n_alphas"])
    r.write("frontier.tsv", frontier_tsv(frontier(data, resp, acts, alphas)))


def stage_boundary(r: Run) -> None:
    data = r.portfolio()
    fc = r.cfg["frontier"]
    b = boundary_solutions(data, r.evaluator(data), r.actions(fc["step"]), reference=fc["reference"])
    r.write("boundary.tsv", b.to_tsv())
    r.write("plan_A.json", plan_json(b.A, data.id, solution="A"))
    r.write("plan_B.json", plan_json(b.B, data.id, solution="B"))


def stage_multiperiod(r: Run) -> None:
    data = r.portfolio()
    mc = r.cfg["multiperiod"]
    alphas = np.asarray(mc["alphas"], float) if mc["alphas"] else None
    feedback = price_competitiveness if mc["feedback"] == "price" else None
    plan = multiperiod(data, r.evaluator(data), r.actions(mc["step"]), mc["tau"], alphas, feedback,
                       min_tenure=mc["min_tenure"] or None, max_iter=mc["max_iter"])
    r.write("multiperiod.json", plan.to_json())
    r.write("multiperiod.tsv", plan.to_tsv())


def _write_tune(r: Run, prefix: str, res: TuneResult, base: BoostConfig, section: str, **extra) -> None:
    best = {**dataclasses.asdict(base), **res.best}
    best.pop("seed")
    r.write(f"{prefix}.tsv", res.to_tsv())
    r.write(f"{prefix}.json", res.to_json(config=best, section=section, **extra))
    doc: dict = best
    for part in reversed(section.split(".")):
        doc = {part: doc}
    r.write(f"{prefix}.toml", tomli_w.dumps(doc))


def stage_tune_ps(r: Run) -> None:
    data = r.portfolio()
    grid = r.grid()
    kind = r.cfg["kind"]
    tc = r.cfg["tune"]
    base = dataclasses.replace(r.boost(r.cfg["ps"][kind], "fit-ps"),
                               max_rounds=min(r.cfg["ps"][kind]["max_rounds"], tc["max_rounds"]))
    ev = ps_evaluator(data, grid, kind, r.bounds(grid), r.cfg["ps"]["early_stopping"])
    res = tune(ev, tune_grids(r.cfg, r.paper_grids), base, data.n, tc["folds"], r.seed("tune-ps"))
    _write_tune(r, "tune_ps", res, base, f"ps.{kind}", metric="held-out log-loss", paper_grids=r.paper_grids)


def stage_tune_response(r: Run) -> None:
    data = r.portfolio()
    tc = r.cfg["tune"]
    if r.cfg["kind"] == DISCRETE:
        imp = ImputedResponseSet.load(r.path("imputed.bin"))
        path = select_penalty(imp, data, DesignSpec.for_grid(r.grid()), _penalties(r), folds=tc["folds"],
                              seed=r.seed("tune-response"), threads=r.threads)
        r.write("tune_response.tsv", path.to_tsv())
        r.write("tune_response.json", json.dumps({"penalty_1se": path.penalty_1se, "penalty_min": path.penalty_min,
                                                  "folds": tc["folds"]}, sort_keys=True, indent=2))
        r.write("tune_response.toml", tomli_w.dumps({"response": {"penalty": path.penalty_1se}}))
        return
    rc = r.cfg["response"]
    base = dataclasses.replace(r.boost(rc["dr"], "fit-response"),
                               max_rounds=min(rc["dr"]["max_rounds"], tc["max_rounds"]))
    ev = dr_evaluator(data, r.ps(), rc["holdout"], r.seed("fit-response/holdout"))
    res = tune(ev, tune_grids(r.cfg, r.paper_grids), base, data.n, tc["folds"], r.seed("tune-response"))
    _write_tune(r, "tune_response", res, base, "response.dr", metric="held-out log-loss",
                paper_grids=r.paper_grids)


def _ps_inputs(r):
    return [r.path("trimmed.csv"), r.path("grid.json")]


def _response_inputs(r):
    base = [r.path("trimmed.csv"), r.path("grid.json"), r.path("response.json")]
    return base if r.cfg["kind"] == DISCRETE else base + [r.path("ps.json")]


STAGES = {s.name: s for s in [
    Stage("simulate", stage_simulate, lambda r: [], _files("portfolio.csv", "portfolio.meta.json"),
          ("simulate",)),
    Stage("trim", stage_trim, lambda r: [Path(r.input_portfolio())], _files("trimmed.csv", "trim.json"),
          ("trim", "paths")),
    Stage("grid", stage_grid, _files("trimmed.csv"), _files("grid.json"), ("grid",)),
    Stage("fit-ps", stage_fit_ps, _ps_inputs, _files("ps.json"), ("kind", "grid", "ps")),
    Stage("balance", stage_balance, lambda r: _ps_inputs(r) + [r.path("ps.json")],
          _files("balance.tsv", "balance.json"), ()),
    Stage("converge", stage_converge, _ps_inputs, _files("convergence.tsv"), ("grid", "ps", "converge")),
    Stage("match", stage_match, lambda r: [r.path("trimmed.csv"), r.path("ps.json")], _files("imputed.bin"),
          ("matching",)),
    Stage("fit-response", stage_fit_response,
          lambda r: ([r.path("trimmed.csv"), r.path("grid.json"), r.path("imputed.bin")]
                     if r.cfg["kind"] == DISCRETE else [r.path("trimmed.csv"), r.path("ps.json")]),
          _kind_outputs(("response.json", "lasso_path.tsv", "coefficients.tsv"), ("response.json",)),
          ("kind", "response")),
    Stage("dose-response", stage_dose_response, _response_inputs,
          _files("dose_response.tsv", "churn_surface.tsv"), ("kind", "dose_response", "ps", "response")),
    Stage("frontier", stage_frontier, _response_inputs, _files("frontier.tsv"), ("kind", "frontier")),
    Stage("boundary", stage_boundary, _response_inputs, _files("boundary.tsv", "plan_A.json", "plan_B.json"),
          ("kind", "frontier")),
    Stage("multiperiod", stage_multiperiod, _response_inputs, _files("multiperiod.json", "multiperiod.tsv"),
          ("kind", "multiperiod")),
    Stage("tune-ps", stage_tune_ps, _ps_inputs, _files("tune_ps.tsv", "tune_ps.json", "tune_ps.toml"),
          ("kind", "grid", "ps", "tune")),
    Stage("tune-response", stage_tune_response,
          lambda r: ([r.path("trimmed.csv"), r.path("grid.json"), r.path("imputed.bin")]
                     if r.cfg["kind"] == DISCRETE else [r.path("trimmed.csv"), r.path("ps.json")]),
          _files("tune_response.tsv", "tune_response.json", "tune_response.toml"),
          ("kind", "response", "tune")),
]}


def pipeline_stages(cfg: dict) -> list[str]:
    names = [] if cfg["paths"]["input"] else ["simulate"]
    names += ["trim", "grid", "fit-ps", "balance"]
    if cfg["pipeline"]["converge"]:
        names.append("converge")
    if cfg["kind"] == DISCRETE:
        names.append("match")
    names += ["fit-response", "dose-response", "frontier", "boundary", "multiperiod"]
    if cfg["pipeline"]["tune"]:
        names += ["tune-ps", "tune-response"]
    return names


def _stage_config(cfg: dict, stage: Stage, run: Run) -> dict:
    d = {k: cfg[k] for k in stage.sections}
    if stage.name.startswith("tune"):
        d["paper_grids"] = run.paper_grids
    return d


def _manifest_path(r: Run, name: str) -> Path:
    return r.path("manifests") / f"{name}.json"


def up_to_date(r: Run, stage: Stage) -> bool:
    mpath = _manifest_path(r, stage.name)
    if not mpath.exists():
        return False
    m = json.loads(mpath.read_text())
    if m.get("seed") != r.cfg["seed"] or m.get("stage_config") != _stage_config(r.cfg, stage, r):
        return False
    if m.get("inputs") != {str(p.name): sha256_file(p) for p in stage.inputs(r)}:
        return False
    outs = stage.outputs(r)
    return all(p.exists() for p in outs) and m.get("outputs") == {p.name: sha256_file(p) for p in outs}


def run_stage(r: Run, name: str) -> bool:
    """Run one stage; returns False when ``--check`` found it up to date."""
    stage = STAGES[name]
    missing = [str(p) for p in stage.inputs(r) if not p.exists()]
    if missing:
        raise ConfigError(f"{name}: missing input(s): {', '.join(missing)}")
    if r.check and up_to_date(r, stage):
        log.info("%s: up to date", name)
        return False
    r.workdir.mkdir(parents=True, exist_ok=True)
    log.info("%s: running", name)
    inputs = {p.name: sha256_file(p) for p in stage.inputs(r)}
    stage.fn(r)
    outs = [p for p in stage.outputs(r) if p.exists()]
    manifest = {
        "format": "renewal.manifest", "version": 1, "stage": name,
        "seed": r.cfg["seed"], "stage_seed": r.seed(name),
        "config": r.cfg, "stage_config": _stage_config(r.cfg, stage, r),
        "inputs": inputs, "outputs": {p.name: sha256_file(p) for p in outs},
        "versions": versions(),
    }
    _manifest_path(r, name).parent.mkdir(parents=True, exist_ok=True)
    r.write(f"manifests/{name}.json", json.dumps(manifest, sort_keys=True, indent=2))
    return True


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="renewal", allow_abbrev=False,
                                description="Causal price-sensitivity and renewal-pricing pipeline.",
                                epilog="Any config key can be overridden as --section.key=value.")
    p.add_argument("command", choices=sorted(STAGES) + ["pipeline"])
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--from-manifest", help="take the config recorded in a stage manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--kind", choices=[DISCRETE, CONTINUOUS])
    p.add_argument("--workdir")
    p.add_argument("--input", help="portfolio CSV to use instead of simulating one")
    p.add_argument("--threads", type=int, help="worker cap (default: $RENEWAL_THREADS or 1)")
    p.add_argument("--check", action="store_true", help="skip stages whose inputs, config and outputs are unchanged")
    p.add_argument("--paper-grids", action="store_true", help="use the full tuning grids")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        base = None
        if args.from_manifest:
            try:
                base = _merge(DEFAULTS, json.loads(Path(args.from_manifest).read_text())["config"])
            except (OSError, KeyError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read manifest {args.from_manifest}: {exc}") from None
        explicit = [f"--{k}={v!r}" if isinstance(v, str) else f"--{k}={v}" for k, v in
                    (("seed", args.seed), ("kind", args.kind), ("paths.workdir", args.workdir),
                     ("paths.input", args.input)) if v is not None]
        cfg = load_config(args.config, list(rest) + explicit, base=base)
        r = Run(cfg, resolve_threads(args.threads), args.check, args.paper_grids)
        names = pipeline_stages(cfg) if args.command == "pipeline" else [args.command]
        for name in names:
            ran = run_stage(r, name)
            print(f"{name}: {'done' if ran else 'up to date'}")
        if not args.from_manifest:
            r.write("config.toml", tomli_w.dumps(cfg))
        return EXIT_OK
    except (ConfigError, PortfolioError) as exc:
        print(f"renewal: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any failure inside a stage is a runtime error
        log.debug("stage failed", exc_info=True)
        print(f"renewal: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
