"""Ensemble twin experiments, sweeps and file output.

A configuration is a nested set of dataclasses that round-trips through TOML
or JSON.  Realization ``i`` draws its truth, noise and background from the
counter-based streams ``SeededRng(master_seed, i)``, so results do not depend
on worker scheduling.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocklinalg import IllPosed
from .gauss_newton import GNConfig, NoAlphaFound, error_metrics, find_alpha_noisefree, run
from .models import ModelDivergence, ModelKind, lorenz63, lorenz96
from .params import ParamConfig, run_joint
from .wc4dvar import LMConfig, WCConfig, lm_minimize
from .window import (BACKGROUND, NOISE, TRUTH, ObservationOperator, SeededRng,
                     generate_truth, initial_guess, make_background, observe,
                     random_initial_state)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_ENV = "GNDA_OUTPUT_DIR"
DESK_T = {"lorenz63": 2.5, "lorenz96": 1.25}
DEFAULT_DT = {"lorenz63": 0.005, "lorenz96": 0.0025}
MODES = ("noisefree", "noisy", "param", "compare_wc",
         "sweep_alpha", "sweep_gamma", "sweep_obs", "sweep_window")
RUN_COLUMNS = ("seed", "k", "cost", "err_total", "err_obs", "err_unobs", "step_norm",
               "cond1_lhs", "cond1_rhs", "cond2_lhs", "cond2_rhs", "bound")
METRICS = ("cost", "err_total", "err_obs", "err_unobs", "step_norm")


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------

@dataclass
class ModelSection:
    name: str = "lorenz63"
    d: int = 40
    dt: float | None = None
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    forcing: float = 8.0


@dataclass
class WindowSection:
    T: float | None = None
    long_window: bool = False
    cadence: int = 10
    components: list | None = None
    obs_count: int | None = None
    spinup: int = 0


@dataclass
class DataSection:
    gamma: float = 0.0
    background: str = "perturbed_truth"
    sigma_b: float = 1.0


@dataclass
class SolverSection:
    alpha: float | str = "auto"
    c: float | None = None
    alpha0: float = 1e-3
    alpha_max: float = 1e8
    step_tol: float = 1e-14
    max_iter: int | None = None
    monitor: bool = True
    stop_on_violation: bool = True


@dataclass
class ParamSection:
    estimate: list = field(default_factory=lambda: ["sigma"])
    theta0: list = field(default_factory=lambda: [5.0])
    param_tol: float = 1e-3
    max_outer: int = 500


@dataclass
class WCSection:
    r_var: float | None = None
    q_var: float = 1.0
    lambda0: float = 1e-3
    up_factor: float = 10.0
    down_factor: float = 0.1
    grad_tol: float = 1e-8
    step_tol: float = 1e-12
    max_iter: int = 200


@dataclass
class SweepSection:
    alphas: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    obs_counts: list = field(default_factory=list)
    windows: list = field(default_factory=list)


SECTIONS = {"model": ModelSection, "window": WindowSection, "data": DataSection,
            "solver": SolverSection, "param": ParamSection, "wc": WCSection,
            "sweep": SweepSection}


@dataclass
class ExperimentConfig:
    mode: str = "noisefree"
    ensemble_size: int | None = None
    master_seed: int = 0
    workers: int = 1
    output_dir: str | None = None
    model: ModelSection = field(default_factory=ModelSection)
    window: WindowSection = field(default_factory=WindowSection)
    data: DataSection = field(default_factory=DataSection)
    solver: SolverSection = field(default_factory=SolverSection)
    param: ParamSection = field(default_factory=ParamSection)
    wc: WCSection = field(default_factory=WCSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.model.name not in DESK_T:
            raise ConfigError(f"unknown model {self.model.name!r}")
        if self.ensemble_size is not None and self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        sweep_key = {"sweep_alpha": "alphas", "sweep_gamma": "gammas",
                     "sweep_obs": "obs_counts", "sweep_window": "windows"}.get(self.mode)
        if sweep_key and not getattr(self.sweep, sweep_key):
            raise ConfigError(f"mode {self.mode} needs a non-empty sweep.{sweep_key}")
        if self.data.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        T = self.resolved_T()
        if T > DESK_T[self.model.name] * (1 + 1e-12) and not self.window.long_window:
            raise ConfigError(f"T={T} exceeds the desk window {DESK_T[self.model.name]}; "
                              "set window.long_window to allow it")
        return self

    # resolved defaults
    def resolved_dt(self):
        return self.model.dt if self.model.dt is not None else DEFAULT_DT[self.model.name]

    def resolved_T(self):
        return self.window.T if self.window.T is not None else DESK_T[self.model.name]

    def resolved_ensemble_size(self):
        if self.ensemble_size is not None:
            return self.ensemble_size
        return 20 if self.mode.startswith("sweep") or self.mode == "compare_wc" else 100

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        """Copy with dotted-key overrides, e.g. ``replace(**{"data.gamma": 0.1})``."""
        d = self.to_dict()
        for key, value in changes.items():
            _set_dotted(d, key, value)
        return config_from_dict(d)


def _set_dotted(d, key, value):
    parts = key.split(".")
    target = d
    for p in parts[:-1]:
        if p not in target or not isinstance(target[p], dict):
            raise ConfigError(f"unknown config section {p!r}")
        target = target[p]
    if parts[-1] not in target:
        raise ConfigError(f"unknown config key {key!r}")
    target[parts[-1]] = value


def config_from_dict(d):
    d = dict(d)
    kwargs = {}
    for name, cls in SECTIONS.items():
        sec = d.pop(name, {}) or {}
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(sec) - known
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
        kwargs[name] = cls(**sec)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(SECTIONS)
    extra = set(d) - top
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    return ExperimentConfig(**d, **kwargs).validate()


def load_config(path):
    """Read a TOML file, or a ``config.json`` written by :func:`emit`."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
        data = data.get("config", data)
        return config_from_dict(data), text
    return config_from_dict(tomllib.loads(text)), text


# -- realizations --------------------------------------------------------------

def build_model(cfg):
    m = cfg.model
    if m.name == ModelKind.LORENZ63.value:
        return lorenz63(cfg.resolved_dt(), m.sigma, m.rho, m.beta)
    return lorenz96(m.d, cfg.resolved_dt(), m.forcing)


def evenly_spaced(n, count):
    """``count`` distinct component indices spread evenly over ``0 .. n-1``."""
    if not 1 <= count <= n:
        raise ConfigError(f"observed-component count must be in [1, {n}], got {count}")
    return sorted(set(np.floor(np.arange(count) * n / count + 1e-9).astype(int).tolist()))


def observed_components(cfg, n):
    w = cfg.window
    if w.obs_count is not None:
        return evenly_spaced(n, w.obs_count)
    if w.components is not None:
        return [int(c) for c in w.components]
    return [0] if cfg.model.name == "lorenz63" else list(range(0, n, 2))


def window_steps(cfg):
    return int(round(cfg.resolved_T() / cfg.resolved_dt()))


@dataclass
class Realization:
    index: int
    model: object
    H: ObservationOperator
    truth: np.ndarray
    y: object
    u_b: np.ndarray


def build_realization(cfg, index):
    model = build_model(cfg)
    rng = SeededRng(cfg.master_seed, index)
    N = window_steps(cfg)
    u0 = random_initial_state(model, rng.generator(TRUTH), cfg.window.spinup)
    truth = generate_truth(model, u0, N)
    H = ObservationOperator.regular(model.n, N, cfg.window.cadence, observed_components(cfg, model.n))
    y = observe(truth, H, cfg.data.gamma, rng.generator(NOISE))
    u_b = make_background(truth, cfg.data.background, rng.generator(BACKGROUND),
                          cfg.data.sigma_b, model)
    return Realization(index, model, H, truth, y, u_b)


def gn_config(cfg, **over):
    s = cfg.solver
    kw = dict(alpha=s.alpha, c=s.c, step_tol=s.step_tol, max_iter=s.max_iter, alpha0=s.alpha0,
              alpha_max=s.alpha_max, monitor=s.monitor, stop_on_violation=s.stop_on_violation)
    kw.update(over)
    return GNConfig(**kw)


def wc_config(cfg):
    w = cfg.wc
    r_var = w.r_var if w.r_var is not None else (cfg.data.gamma ** 2 if cfg.data.gamma > 0 else 1.0)
    lm = LMConfig(w.lambda0, w.up_factor, w.down_factor, w.grad_tol, w.step_tol, w.max_iter)
    return WCConfig(r_var, w.q_var, lm)


@dataclass
class Outcome:
    """Result of one realization; ``status`` is ``ok`` or an error class name."""

    index: int
    status: str
    message: str = ""
    rows: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    wc_rows: list = field(default_factory=list)
    theta_rows: list = field(default_factory=list)

    @property
    def ok(self):
        return self.status == "ok"


def _gn_rows(index, rec):
    return [dict(seed=index, **{k: v for k, v in r.as_row().items() if k in RUN_COLUMNS})
            for r in rec.records]


def _gn_extra(rec, real):
    last = rec.records[-1]
    return dict(alpha=rec.alpha_used, c=rec.c, termination=rec.termination.value,
                iterations=rec.iterations, err_total=last.err_total, err_obs=last.err_obs,
                err_unobs=last.err_unobs, obs_error=float(np.linalg.norm(real.y.noise)),
                Ht_eta_norm=real.y.Ht_eta_norm, truth_norm=float(np.linalg.norm(real.truth)),
                converged=rec.termination.value == "StepTol")


def _run_gn(cfg, real, gcfg=None):
    rec = run(real.model, gcfg or gn_config(cfg), real.y, real.H, real.u_b, real.truth)
    return Outcome(real.index, "ok", rows=_gn_rows(real.index, rec), extra=_gn_extra(rec, real))


def _run_param(cfg, real):
    p = cfg.param
    pcfg = ParamConfig(tuple(p.theta0), tuple(p.estimate), p.param_tol, p.max_outer,
                       gn_config(cfg, monitor=False))
    which = [real.model.param_index(w) for w in p.estimate]
    theta_true = [real.model.params[i] for i in which]
    rec = run_joint(real.model, pcfg, real.y, real.H, real.u_b, real.truth, theta_true)
    rows = [dict(seed=real.index, k=k, err_total=e) for k, e in enumerate(rec.state_err_history)]
    names = [real.model.param_names[i] for i in which]
    trows = [dict(seed=real.index, k=k, **{n: float(t) for n, t in zip(names, th)})
             for k, th in enumerate(rec.theta_history)]
    extra = dict(alpha=rec.alpha_used, c=rec.c, termination=rec.termination.value,
                 outer_iterations=rec.outer_iterations, state_error=rec.state_err_history[-1],
                 obs_error=float(np.linalg.norm(real.y.noise)),
                 theta={n: float(t) for n, t in zip(names, rec.theta)})
    return Outcome(real.index, "ok", rows=rows, extra=extra, theta_rows=trows)


def _run_compare(cfg, real):
    out = _run_gn(cfg, real)
    wcfg = wc_config(cfg)
    rows = []

    def record(k, u):
        e = real.truth - u
        eo = real.H.apply_HtH(e)
        cost = error_metrics(real.model, u, None, real.y, real.H, out.extra["alpha"])[0]
        rows.append(dict(seed=real.index, k=k, cost=cost, err_total=float(np.linalg.norm(e)),
                         err_obs=float(np.linalg.norm(eo)),
                         err_unobs=float(np.linalg.norm(e - eo))))

    res = lm_minimize(real.model, initial_guess(real.y, real.H, real.u_b), real.y, real.H,
                      wcfg, callback=record)
    out.wc_rows = rows
    last = rows[-1]
    out.extra.update(wc_err_total=last["err_total"], wc_err_obs=last["err_obs"],
                     wc_err_unobs=last["err_unobs"], wc_flag=res.flag.value,
                     wc_iterations=len(res.log) - 1)
    return out


def _cond1_at_start(cfg, real, alpha):
    """True when ``alpha`` satisfies cond1 at the initial guess."""
    gcfg = gn_config(cfg)
    u = initial_guess(real.y, real.H, real.u_b)
    c = gcfg.c if gcfg.c is not None else float(np.linalg.norm(u - real.truth))
    try:
        find_alpha_noisefree(real.model, u, real.H, real.model.lipschitz_G(), c, alpha,
                             alpha_max=alpha)
        return True
    except NoAlphaFound:
        return False


def run_realization(cfg, index):
    """Run one realization; failures become an :class:`Outcome` status."""
    try:
        real = build_realization(cfg, index)
        if cfg.mode == "param":
            return _run_param(cfg, real)
        if cfg.mode == "compare_wc":
            return _run_compare(cfg, real)
        if cfg.mode == "sweep_alpha":
            alpha = float(cfg.solver.alpha)
            if not _cond1_at_start(cfg, real, alpha):
                return Outcome(index, "Skipped", f"alpha={alpha:g} violates cond1 at the initial guess")
        return _run_gn(cfg, real)
    except NoAlphaFound as exc:
        return Outcome(index, "NoAlphaFound", str(exc))
    except IllPosed as exc:
        return Outcome(index, "IllPosed", str(exc))
    except ModelDivergence as exc:
        return Outcome(index, "ModelDivergence", str(exc))


def _run_index(args):
    cfg_dict, index = args
    return run_realization(config_from_dict(cfg_dict), index)


def run_ensemble(cfg):
    """All realizations of ``cfg`` in index order."""
    cfg.validate()
    size = cfg.resolved_ensemble_size()
    if cfg.window.long_window and cfg.resolved_T() > DESK_T[cfg.model.name]:
        warnings.warn(f"long window T={cfg.resolved_T()} has {window_steps(cfg) + 1} blocks; "
                      "expect long runtimes and large memory use", RuntimeWarning, stacklevel=2)
    if cfg.workers > 1 and size > 1:
        d = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_run_index, [(d, i) for i in range(size)]))
    return [run_realization(cfg, i) for i in range(size)]


# -- summaries -----------------------------------------------------------------

@dataclass
class EnsembleSummary:
    """Per-iteration median and median +/- one sample std of each metric.

    Runs that stop early contribute their last value to later iterations.
    """

    iterations: np.ndarray
    median: dict
    std: dict
    n_completed: int
    failures: dict
    terminal: list

    def lo(self, metric):
        return self.median[metric] - self.std[metric]

    def hi(self, metric):
        return self.median[metric] + self.std[metric]

    def terminal_median(self, key):
        vals = [t[key] for t in self.terminal if t.get(key) is not None]
        return float(np.median(vals)) if vals else math.nan


def _std(a, axis=0):
    return np.std(a, axis=axis, ddof=1) if a.shape[axis] > 1 else np.zeros(a.shape[1 - axis])


def summarize(outcomes, metrics=METRICS, rows_attr="rows"):
    done = [o for o in outcomes if o.ok and getattr(o, rows_attr)]
    failures = {}
    for o in outcomes:
        if not o.ok:
            failures[o.status] = failures.get(o.status, 0) + 1
    if not done:
        return EnsembleSummary(np.arange(0), {}, {}, 0, failures, [])
    K = max(len(getattr(o, rows_attr)) for o in done)
    med, std = {}, {}
    for m in metrics:
        if all(getattr(o, rows_attr)[0].get(m) is None for o in done):
            continue
        table = np.full((len(done), K), np.nan)
        for i, o in enumerate(done):
            vals = [np.nan if r.get(m) is None else r[m] for r in getattr(o, rows_attr)]
            table[i, :len(vals)] = vals
            table[i, len(vals):] = vals[-1]
        med[m] = np.median(table, axis=0)
        std[m] = _std(table)
    return EnsembleSummary(np.arange(K), med, std, len(done), failures, [o.extra for o in done])


# -- output -------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_summary(path, summary):
    rows = []
    for k in summary.iterations:
        for m in summary.median:
            rows.append(dict(iteration=int(k), metric=m, median=summary.median[m][k],
                             lo=summary.lo(m)[k], hi=summary.hi(m)[k]))
    write_csv(path, ("iteration", "metric", "median", "lo", "hi"), rows)


def write_plot_data(path, summary):
    """Wide table: one row per iteration, ``<metric>_median/_lo/_hi`` columns."""
    cols = ["k"] + [f"{m}_{s}" for m in summary.median for s in ("median", "lo", "hi")]
    rows = []
    for k in summary.iterations:
        r = {"k": int(k)}
        for m in summary.median:
            r[f"{m}_median"] = summary.median[m][k]
            r[f"{m}_lo"] = summary.lo(m)[k]
            r[f"{m}_hi"] = summary.hi(m)[k]
        rows.append(r)
    write_csv(path, cols, rows)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(x) else float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def write_config_json(path, cfg, source_text=None):
    doc = {"config": cfg.to_dict(),
           "resolved": {"dt": cfg.resolved_dt(), "T": cfg.resolved_T(), "N": window_steps(cfg),
                        "ensemble_size": cfg.resolved_ensemble_size(),
                        "seeds": [[cfg.master_seed, i] for i in range(cfg.resolved_ensemble_size())]},
           "source": source_text}
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def output_dir(cfg, override=None):
    d = override or cfg.output_dir or os.environ.get(OUTPUT_ENV) or "gnda-output"
    Path(d).mkdir(parents=True, exist_ok=True)
    return Path(d)


def emit(outcomes, cfg, directory, source_text=None):
    """Write runs.csv, summary.csv, config.json, failures.csv and plot data."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    summary = summarize(outcomes)
    write_csv(directory / "runs.csv", RUN_COLUMNS, [r for o in outcomes for r in o.rows])
    write_summary(directory / "summary.csv", summary)
    write_plot_data(directory / "plot_convergence.csv", summary)
    write_config_json(directory / "config.json", cfg, source_text)
    write_csv(directory / "realizations.csv",
              ("seed", "status", "message", "alpha", "c", "termination", "iterations",
               "err_total", "err_obs", "err_unobs", "obs_error"),
              [dict(seed=o.index, status=o.status, message=o.message, **o.extra) for o in outcomes])
    if cfg.mode == "compare_wc":
        wc = summarize(outcomes, rows_attr="wc_rows")
        write_csv(directory / "wc_runs.csv", RUN_COLUMNS, [r for o in outcomes for r in o.wc_rows])
        write_summary(directory / "wc_summary.csv", wc)
        write_plot_data(directory / "plot_wc_convergence.csv", wc)
        write_compare_table(directory / "compare.csv", summary)
    if cfg.mode == "param":
        names = list(cfg.param.estimate)
        write_csv(directory / "theta.csv", ["seed", "k"] + names,
                  [r for o in outcomes for r in o.theta_rows])
        write_param_json(directory / "param_summary.json", summary, names)
    return summary


def write_compare_table(path, summary):
    rows = []
    for method, prefix in (("gauss_newton", ""), ("wc4dvar", "wc_")):
        rows.append(dict(method=method,
                         err_total=summary.terminal_median(prefix + "err_total"),
                         err_obs=summary.terminal_median(prefix + "err_obs"),
                         err_unobs=summary.terminal_median(prefix + "err_unobs"),
                         obs_error=summary.terminal_median("obs_error")))
    write_csv(path, ("method", "err_total", "err_obs", "err_unobs", "obs_error"), rows)


def param_medians(summary, names):
    return {n: float(np.median([t["theta"][n] for t in summary.terminal])) if summary.terminal
            else math.nan for n in names}


def write_param_json(path, summary, names):
    terms = {}
    for t in summary.terminal:
        terms[t["termination"]] = terms.get(t["termination"], 0) + 1
    doc = {"theta_median": param_medians(summary, names),
           "state_error_median": summary.terminal_median("state_error"),
           "obs_error_median": summary.terminal_median("obs_error"),
           "outer_iterations_median": summary.terminal_median("outer_iterations"),
           "terminations": terms, "completed": summary.n_completed, "failures": summary.failures}
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- sweeps ---------------------------------------------------------------------

SWEEPS = {"sweep_alpha": ("alphas", "solver.alpha", float),
          "sweep_gamma": ("gammas", "data.gamma", float),
          "sweep_obs": ("obs_counts", "window.obs_count", int),
          "sweep_window": ("windows", "window.T", float)}
SWEEP_COLUMNS = ("value", "completed", "failed", "failure_kinds", "iterations_median",
                 "err_total_median", "err_obs_median", "err_unobs_median", "cost_median",
                 "obs_error_median")


@dataclass
class SweepPoint:
    value: float
    config: ExperimentConfig
    outcomes: list
    summary: EnsembleSummary

    def iterations_to_tolerance(self):
        """Median GN steps over realizations that met the step tolerance."""
        its = [t["iterations"] for t in self.summary.terminal if t.get("converged")]
        return float(np.median(its)) if its else None

    @property
    def failure_rate(self):
        return 1.0 - self.summary.n_completed / len(self.outcomes)


def run_sweep(cfg):
    key, dotted, cast = SWEEPS[cfg.mode]
    points = []
    for v in getattr(cfg.sweep, key):
        sub = cfg.replace(**{dotted: cast(v)})
        outcomes = run_ensemble(sub)
        points.append(SweepPoint(cast(v), sub, outcomes, summarize(outcomes)))
    return points


def _sweep_label(mode, value):
    return f"{SWEEPS[mode][0][:-1]}={value!r}"


def emit_sweep(points, cfg, directory, source_text=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows, curves = [], []
    for p in points:
        sub = directory / _sweep_label(cfg.mode, p.value)
        emit(p.outcomes, p.config, sub)
        s = p.summary
        fails = s.failures
        its = p.iterations_to_tolerance()
        rows.append(dict(value=p.value, completed=s.n_completed, failed=sum(fails.values()),
                         failure_kinds=";".join(f"{k}:{v}" for k, v in sorted(fails.items())),
                         iterations_median=its,
                         err_total_median=_none_nan(s.terminal_median("err_total")),
                         err_obs_median=_none_nan(s.terminal_median("err_obs")),
                         err_unobs_median=_none_nan(s.terminal_median("err_unobs")),
                         cost_median=None if "cost" not in s.median else s.median["cost"][-1],
                         obs_error_median=_none_nan(s.terminal_median("obs_error"))))
        for k in s.iterations:
            curves.append(dict(value=p.value, k=int(k),
                               **{f"{m}_median": s.median[m][k] for m in ("cost", "err_total")
                                  if m in s.median}))
    write_csv(directory / "sweep.csv", SWEEP_COLUMNS, rows)
    write_csv(directory / "plot_sweep.csv", ("value", "k", "cost_median", "err_total_median"), curves)
    skipped = [dict(value=p.value, seed=o.index, status=o.status, message=o.message)
               for p in points for o in p.outcomes if not o.ok]
    write_csv(directory / "skipped.csv", ("value", "seed", "status", "message"), skipped)
    write_config_json(directory / "config.json", cfg, source_text)
    return rows


def _none_nan(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def run_experiment(cfg):
    """Run ``cfg``; returns outcomes (ensemble modes) or sweep points."""
    if cfg.mode in SWEEPS:
        return run_sweep(cfg)
    return run_ensemble(cfg)


def all_outcomes(result):
    if result and isinstance(result[0], SweepPoint):
        return [o for p in result for o in p.outcomes]
    return list(result)
