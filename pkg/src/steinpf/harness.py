"""Experiment driver: simulate, filter, compare with the exact posterior, write CSV.

Configuration is a YAML mapping::

    model:
      name: linear-gaussian        # or benes
      dt: 0.02
      params: {}                   # keyword overrides of the model constructor
      reference: discrete-kalman   # linear model only; or kalman-bucy
    horizon: 1.0
    runs: {count: 10, base_seed: 0, workers: 1}
    filters:
      - {backend: sir, n: 200, ess_threshold: 0.5}
      - {backend: stein-seq, n: 200, svgd: {L: 100, eps: 0.01}}
      - {backend: stein-window, n: 200, T: 3, svgd: {L: 100, eps: 0.01}}
    outputs:
      dir: results
      kde_times: [0.2, 0.5, 1.0]
      kde_bandwidth: 0.1
      grid: {lo: -4.0, hi: 4.0, points: 801}

Every section and key is optional; omitted values take the desk-scale
defaults above. Unknown keys are rejected.

Randomness. Run ``m`` uses the integer seed ``base_seed + m``. Each random
consumer draws from its own ``numpy.random.Generator`` (PCG64) seeded by
``SeedSequence([seed, stream, step])``, where ``stream`` is 0 for the
truth/observation simulation and the CRC32 of the series label for a
filter backend. A backend therefore cannot perturb another backend's
randomness, and a run's output does not depend on which other runs exist or
in which order they execute.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import metrics, reference
from .filter import (
    FilterError,
    sir_initial,
    sir_step,
    stein_initial_step,
    stein_sequential_step,
    stein_window_initial,
    stein_window_step,
)
from .model import ModelError, benes_spec, discretize, linear_gaussian_spec, simulate
from .svgd import KernelConfig, SvgdConfig

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND = 0, 2, 3
MODELS = ("linear-gaussian", "benes")
BACKENDS = ("sir", "stein-seq", "stein-window")
REFERENCES = {"linear-gaussian": ("discrete-kalman", "kalman-bucy"), "benes": ("benes",)}
FIGURES = ("linear-mse", "benes-mse", "benes-density")
EXACT = "exact"

_MODEL_PARAMS = {
    "linear-gaussian": ("drift_coef", "diffusion", "obs_coef", "obs_noise", "x0_mean", "x0_var"),
    "benes": ("mu", "sigma_b", "h1", "h2", "x0", "x0_var"),
}
_TRUTH_STREAM = 0


class ConfigError(ValueError):
    """The experiment configuration is malformed."""


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterSpec:
    backend: str
    n: int = 200
    window: int = 1
    iterations: int = 100
    step_size: float = 0.01
    schedule: str = "rmsprop"
    bandwidth: object = "median"
    decay: float = 0.9
    init: str = "dynamics"
    ess_threshold: float = 0.5
    label: str = ""

    def svgd_config(self) -> SvgdConfig:
        return SvgdConfig(
            iterations=self.iterations,
            step_size=self.step_size,
            schedule=self.schedule,
            kernel=KernelConfig(self.bandwidth),
            decay=self.decay,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "linear-gaussian"
    dt: float = 0.02
    params: tuple = ()
    reference: str = ""
    horizon: float = 1.0
    runs: int = 10
    base_seed: int = 0
    workers: int = 1
    filters: tuple = ()
    out_dir: str = "results"
    kde_times: tuple = (0.2, 0.5, 1.0)
    kde_bandwidth: float = 0.1
    grid: tuple = (-4.0, 4.0, 801)

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def labels(self) -> list:
        return [f.label for f in self.filters]

    def kde_steps(self) -> list:
        return [int(round(t / self.dt)) - 1 for t in self.kde_times]

    def grid_points(self) -> np.ndarray:
        lo, hi, num = self.grid
        return np.linspace(lo, hi, num)


def default_filters(n: int = 200) -> list:
    return [
        {"backend": "sir", "n": n},
        {"backend": "stein-seq", "n": n},
        {"backend": "stein-window", "n": n, "T": 3},
    ]


def _default_label(backend: str, window: int) -> str:
    if backend == "sir":
        return "sir"
    if backend == "stein-seq":
        return "stein_T1"
    return f"stein_T{window}"


def _check_keys(section: dict, allowed, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(map(str, unknown))}")


def _number(value, where: str, *, positive=False, integer=False, minimum=None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{where} must be finite, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    if positive and not value > 0:
        raise ConfigError(f"{where} must be positive, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{where} must be >= {minimum}, got {value!r}")
    return int(value) if integer else float(value)


def _parse_filter(i: int, raw) -> FilterSpec:
    where = f"filters[{i}]"
    _check_keys(raw, ("backend", "n", "T", "svgd", "ess_threshold", "label"), where)
    backend = raw.get("backend")
    if backend not in BACKENDS:
        raise ConfigError(f"{where}.backend must be one of {', '.join(BACKENDS)}, got {backend!r}")
    kw = {"backend": backend, "n": _number(raw.get("n", 200), f"{where}.n", integer=True, minimum=2)}
    if "T" in raw:
        if backend != "stein-window":
            raise ConfigError(f"{where}.T only applies to stein-window")
        kw["window"] = _number(raw["T"], f"{where}.T", integer=True, minimum=1)
    elif backend == "stein-window":
        kw["window"] = 3
    if "ess_threshold" in raw:
        if backend != "sir":
            raise ConfigError(f"{where}.ess_threshold only applies to sir")
        thr = _number(raw["ess_threshold"], f"{where}.ess_threshold", minimum=0.0)
        if thr > 1:
            raise ConfigError(f"{where}.ess_threshold must lie in [0, 1], got {thr}")
        kw["ess_threshold"] = thr
    if "svgd" in raw:
        if backend == "sir":
            raise ConfigError(f"{where}.svgd does not apply to sir")
        sv = raw["svgd"]
        sw = f"{where}.svgd"
        _check_keys(sv, ("L", "eps", "bandwidth", "schedule", "decay", "init"), sw)
        if "L" in sv:
            kw["iterations"] = _number(sv["L"], f"{sw}.L", integer=True, minimum=0)
        if "eps" in sv:
            kw["step_size"] = _number(sv["eps"], f"{sw}.eps", positive=True)
        if "bandwidth" in sv:
            bw = sv["bandwidth"]
            if bw != "median":
                bw = _number(bw, f"{sw}.bandwidth (a positive number or 'median')", positive=True)
            kw["bandwidth"] = bw
        if "schedule" in sv:
            if sv["schedule"] not in ("constant", "adagrad", "rmsprop"):
                raise ConfigError(f"{sw}.schedule must be constant, adagrad or rmsprop, got {sv['schedule']!r}")
            kw["schedule"] = sv["schedule"]
        if "decay" in sv:
            decay = _number(sv["decay"], f"{sw}.decay", minimum=0.0)
            if decay >= 1:
                raise ConfigError(f"{sw}.decay must lie in [0, 1), got {decay}")
            kw["decay"] = decay
        if "init" in sv:
            if sv["init"] not in ("dynamics", "previous"):
                raise ConfigError(f"{sw}.init must be dynamics or previous, got {sv['init']!r}")
            kw["init"] = sv["init"]
    label = raw.get("label")
    if label is not None and (not isinstance(label, str) or not label or label == EXACT or "," in label):
        raise ConfigError(f"{where}.label must be a non-empty string other than {EXACT!r} without commas")
    kw["label"] = label or _default_label(backend, kw.get("window", 1))
    return FilterSpec(**kw)


def parse_config(raw) -> ExperimentConfig:
    """Validate a config mapping (as loaded from YAML) into an ExperimentConfig."""
    if raw is None:
        raw = {}
    _check_keys(raw, ("model", "horizon", "runs", "filters", "outputs"), "config")
    kw: dict = {}

    model = raw.get("model", {})
    if isinstance(model, str):
        model = {"name": model}
    _check_keys(model, ("name", "dt", "params", "reference"), "model")
    name = model.get("name", "linear-gaussian")
    if name not in MODELS:
        raise ConfigError(f"model.name must be one of {', '.join(MODELS)}, got {name!r}")
    kw["model"] = name
    kw["dt"] = _number(model.get("dt", 0.02), "model.dt", positive=True)
    params = model.get("params") or {}
    _check_keys(params, _MODEL_PARAMS[name], "model.params")
    kw["params"] = tuple(sorted((k, _number(v, f"model.params.{k}")) for k, v in params.items()))
    ref = model.get("reference", REFERENCES[name][0])
    if ref not in REFERENCES[name]:
        raise ConfigError(f"model.reference for {name} must be one of {', '.join(REFERENCES[name])}, got {ref!r}")
    kw["reference"] = ref

    horizon = _number(raw.get("horizon", 1.0), "horizon", positive=True)
    steps = horizon / kw["dt"]
    if round(steps) < 1 or abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
        raise ConfigError(f"horizon {horizon} is not a positive whole number of steps of dt = {kw['dt']}")
    kw["horizon"] = horizon

    runs = raw.get("runs", {})
    if isinstance(runs, int) and not isinstance(runs, bool):
        runs = {"count": runs}
    _check_keys(runs, ("count", "base_seed", "workers"), "runs")
    kw["runs"] = _number(runs.get("count", 10), "runs.count", integer=True, minimum=1)
    kw["base_seed"] = _number(runs.get("base_seed", 0), "runs.base_seed", integer=True, minimum=0)
    kw["workers"] = _number(runs.get("workers", 1), "runs.workers", integer=True, minimum=1)

    filters = raw.get("filters", default_filters())
    if not isinstance(filters, list) or not filters:
        raise ConfigError("filters must be a non-empty list")
    specs = tuple(_parse_filter(i, f) for i, f in enumerate(filters))
    labels = [s.label for s in specs]
    dup = sorted({x for x in labels if labels.count(x) > 1})
    if dup:
        raise ConfigError(f"duplicate series label(s) {', '.join(dup)}; set 'label' to disambiguate")
    kw["filters"] = specs

    out = raw.get("outputs", {})
    _check_keys(out, ("dir", "kde_times", "kde_bandwidth", "grid"), "outputs")
    if "dir" in out:
        if not isinstance(out["dir"], str) or not out["dir"]:
            raise ConfigError("outputs.dir must be a non-empty string")
        kw["out_dir"] = out["dir"]
    times = out.get("kde_times", [t for t in (0.2, 0.5, 1.0) if t <= horizon + 1e-12])
    if not isinstance(times, list):
        raise ConfigError("outputs.kde_times must be a list")
    parsed = []
    for t in times:
        t = _number(t, "outputs.kde_times entry", positive=True)
        k = t / kw["dt"]
        if abs(k - round(k)) > 1e-6 * max(1.0, k) or not 1 <= round(k) <= round(steps):
            raise ConfigError(f"KDE snapshot time {t} is not an observation time in (0, {horizon}]")
        parsed.append(t)
    kw["kde_times"] = tuple(parsed)
    kw["kde_bandwidth"] = _number(out.get("kde_bandwidth", 0.1), "outputs.kde_bandwidth", positive=True)
    grid = out.get("grid", {})
    _check_keys(grid, ("lo", "hi", "points"), "outputs.grid")
    lo = _number(grid.get("lo", -4.0), "outputs.grid.lo")
    hi = _number(grid.get("hi", 4.0), "outputs.grid.hi")
    pts = _number(grid.get("points", 801), "outputs.grid.points", integer=True, minimum=2)
    if not hi > lo:
        raise ConfigError("outputs.grid.hi must exceed outputs.grid.lo")
    kw["grid"] = (lo, hi, pts)
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(raw)


def with_overrides(
    config: ExperimentConfig,
    *,
    paper: bool = False,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    model: Optional[str] = None,
    runs: Optional[int] = None,
    workers: Optional[int] = None,
) -> ExperimentConfig:
    """Apply CLI overrides. ``paper`` switches to n = 500, M = 50, L = 100,
    eps = 0.01; explicit ``runs`` still wins over the preset."""
    kw = dict(config.__dict__)
    if paper:
        kw["runs"] = 50
        kw["filters"] = tuple(
            FilterSpec(**{**f.__dict__, "n": 500, "iterations": 100, "step_size": 0.01}) for f in config.filters
        )
    if model is not None and model != config.model:
        if model not in MODELS:
            raise ConfigError(f"--model must be one of {', '.join(MODELS)}, got {model!r}")
        kw.update(model=model, params=(), reference=REFERENCES[model][0])
    if seed is not None:
        kw["base_seed"] = _number(seed, "--seed", integer=True, minimum=0)
    if runs is not None:
        kw["runs"] = _number(runs, "--runs", integer=True, minimum=1)
    if workers is not None:
        kw["workers"] = _number(workers, "--workers", integer=True, minimum=1)
    if out is not None:
        kw["out_dir"] = out
    return ExperimentConfig(**kw)


# --------------------------------------------------------------------------
# One run
# --------------------------------------------------------------------------


def stream_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    """Generator for one (run seed, consumer, step) triple."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, step]))


def stream_id(label: str) -> int:
    return zlib.crc32(label.encode()) + 1


def build_model(config: ExperimentConfig):
    params = dict(config.params)
    if config.model == "linear-gaussian":
        return discretize(linear_gaussian_spec(dt=config.dt, **params))
    return discretize(benes_spec(dt=config.dt, **params))


def reference_posterior(config: ExperimentConfig, model, observations):
    """Exact means ``(K, d)``, covariances ``(K, d, d)`` and a density callable
    ``density(k, grid)`` for step k."""
    params = dict(config.params)
    dt = config.dt
    dy = observations[:, 0] * dt
    if config.model == "benes":
        p = reference.BenesParams(**{k: v for k, v in params.items() if k != "x0_var"})
        posts = reference.benes_path(dy, dt, p)
        means = np.array([[q.mean] for q in posts])
        covs = np.array([[[q.variance]] for q in posts])
        return means, covs, lambda k, grid: posts[k].density(grid)
    if config.reference == "kalman-bucy":
        lp = reference.LinearParams(**{k: v for k, v in params.items() if not k.startswith("x0")})
        mu, sig = reference.kalman_path(dy, dt, params.get("x0_mean", 1.0), params.get("x0_var", 1.0), lp)
        means, covs = mu[:, None], sig[:, None, None]
    else:
        zero = np.zeros((1, model.state_dim))
        means, covs = reference.discrete_kalman_path(
            observations,
            model.transition.drift_jacobian(zero)[0],
            model.transition.noise_cov,
            model.observation.grad_obs_map(zero)[0],
            model.observation.obs_noise_cov,
            model.initial.mean,
            model.initial.cov,
        )

    def density(k, grid):
        var = covs[k, 0, 0]
        return np.exp(-0.5 * (grid - means[k, 0]) ** 2 / var) / np.sqrt(2.0 * np.pi * var)

    return means, covs, density


def _run_backend(spec: FilterSpec, model, observations, seed: int):
    """Run one backend over all observations; returns per-step states' stats."""
    sid = stream_id(spec.label)
    steps = observations.shape[0]
    means = np.empty((steps, model.state_dim))
    covs = np.empty((steps, model.state_dim, model.state_dim))
    wall = np.empty(steps)
    ess = np.empty(steps) if spec.backend == "sir" else None
    ensembles = {}
    cfg = spec.svgd_config() if spec.backend != "sir" else None
    state = None
    for k in range(steps):
        rng = stream_rng(seed, sid, k)
        z = observations[k]
        t0 = time.perf_counter()
        if spec.backend == "sir":
            state = sir_initial(model, z, spec.n, rng, spec.ess_threshold) if k == 0 else sir_step(state, model, z, rng)
        elif spec.backend == "stein-seq":
            if k == 0:
                state = stein_initial_step(model, z, spec.n, cfg, rng)
            else:
                state = stein_sequential_step(state, model, z, cfg, rng, init=spec.init)
        else:
            if k == 0:
                state = stein_window_initial(model, z, spec.n, spec.window, cfg, rng)
            else:
                state = stein_window_step(state, model, z, cfg, rng)
        wall[k] = time.perf_counter() - t0
        if spec.backend == "sir":
            ens = state.ensemble
            means[k], covs[k] = metrics.empirical_moments(ens.particles, ens.weights)
            ess[k] = metrics.effective_sample_size(ens.weights)
            ensembles[k] = (ens.particles.copy(), ens.weights.copy())
        else:
            particles = state.posterior_ensemble()
            means[k], covs[k] = metrics.empirical_moments(particles)
            ensembles[k] = (particles.copy(), None)
        if not (np.all(np.isfinite(means[k])) and np.all(np.isfinite(covs[k]))):
            raise FilterError(f"non-finite posterior moments at step {k}")
    return means, covs, wall, ess, ensembles


@dataclass
class RunResult:
    """Everything one run produced: per-label records, failures and data."""

    index: int
    seed: int
    times: np.ndarray
    states: np.ndarray
    observations: np.ndarray
    ref_means: np.ndarray
    ref_covs: np.ndarray
    exact_kde: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)


def run_single(config: ExperimentConfig, index: int) -> RunResult:
    """Simulate run ``index`` and apply every configured backend to it."""
    seed = config.base_seed + index
    model = build_model(config)
    states, obs = simulate(model, config.steps, stream_rng(seed, _TRUTH_STREAM, 0))
    ref_means, ref_covs, density = reference_posterior(config, model, obs)
    times = (np.arange(config.steps) + 1) * config.dt
    grid = config.grid_points()
    result = RunResult(index, seed, times, states, obs, ref_means, ref_covs)
    snapshots = config.kde_steps() if model.state_dim == 1 else []
    for k in snapshots:
        result.exact_kde[k] = density(k, grid)
    for spec in config.filters:
        try:
            means, covs, wall, ess, ensembles = _run_backend(spec, model, obs, seed)
        except (FilterError, ModelError, FloatingPointError, np.linalg.LinAlgError) as exc:
            logger.error("run %d, backend %s failed: %s", index, spec.label, exc)
            result.failures[spec.label] = str(exc)
            continue
        rec = metrics.RunRecord(times, means, covs, ref_means, ref_covs, wall, ess)
        for k in snapshots:
            particles, weights = ensembles[k]
            rec.kde[k] = metrics.kde(particles, grid, config.kde_bandwidth, weights)
            rec.l1[k] = metrics.l1_density_distance(rec.kde[k], result.exact_kde[k], grid)
        result.records[spec.label] = rec
    return result


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _time_tag(t: float) -> str:
    return f"t{t:.4f}".replace(".", "p")


def write_run_files(config: ExperimentConfig, result: RunResult, out_dir: Path):
    """Run-scoped files: truth, per-step means/variances and KDE snapshots."""
    run_dir = out_dir / "runs" / f"run_{result.index:03d}"
    d = result.states.shape[1]
    rows = []
    for k, t in enumerate(result.times):
        for c in range(d):
            rows.append([_fmt(t), "truth", c, _fmt(result.states[k, c]), ""])
            rows.append([_fmt(t), EXACT, c, _fmt(result.ref_means[k, c]), _fmt(result.ref_covs[k, c, c])])
            for label in config.labels:
                rec = result.records.get(label)
                if rec is not None:
                    rows.append([_fmt(t), label, c, _fmt(rec.means[k, c]), _fmt(rec.covs[k, c, c])])
    _write_csv(run_dir / "means.csv", ["time", "series", "component", "mean", "variance"], rows)
    _write_csv(
        run_dir / "observations.csv",
        ["time", "component", "value"],
        [[_fmt(t), c, _fmt(result.observations[k, c])] for k, t in enumerate(result.times) for c in range(result.observations.shape[1])],
    )
    grid = config.grid_points()
    for t, k in zip(config.kde_times, config.kde_steps()):
        if k not in result.exact_kde:
            continue
        series = [(EXACT, result.exact_kde[k])]
        series += [(lab, result.records[lab].kde[k]) for lab in config.labels if lab in result.records]
        _write_csv(
            run_dir / f"kde_{_time_tag(t)}.csv",
            ["x", "series", "density"],
            [[_fmt(x), name, _fmt(v)] for name, dens in series for x, v in zip(grid, dens)],
        )


def _records(results, label):
    return [r.records[label] for r in results if label in r.records]


def emit_figure_data(results, figure: str, out_dir, labels=None, config: Optional[ExperimentConfig] = None):
    """Write the long-format CSV behind one figure.

    ``linear-mse``/``benes-mse`` give ``time,series,value`` files for the mean
    and covariance m.s.e.; ``benes-density`` gives one ``x,series,density``
    file per snapshot, built from the first run, with the exact mixture as
    the ``exact`` series.

    Returns:
        List of written paths.

    Raises:
        ValueError: unknown figure or a requested series has no data.
    """
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}")
    out_dir = Path(out_dir)
    results = list(results)
    if not results:
        raise ValueError("no results to emit")
    if labels is None:
        labels = sorted({lab for r in results for lab in r.records})
    missing = [lab for lab in labels if not _records(results, lab)]
    if missing:
        raise ValueError(f"missing backend series: {', '.join(missing)}")
    prefix = figure.split("-")[0]
    paths = []
    if figure.endswith("mse"):
        curves = {}
        for lab in labels:
            recs = _records(results, lab)
            curves[lab] = metrics.mse_curves(
                [r.means for r in recs], [r.covs for r in recs], [r.ref_means for r in recs], [r.ref_covs for r in recs]
            )
        times = results[0].times
        for which, name in ((0, "mean"), (1, "cov")):
            path = out_dir / f"{prefix}_mse_{name}.csv"
            rows = [[_fmt(t), lab, _fmt(curves[lab][which][k])] for lab in labels for k, t in enumerate(times)]
            _write_csv(path, ["time", "series", "value"], rows)
            paths.append(path)
        return paths
    if config is None:
        raise ValueError("benes-density needs the experiment config for grid and snapshot times")
    first = min(results, key=lambda r: r.index)
    grid = config.grid_points()
    for t, k in zip(config.kde_times, config.kde_steps()):
        if k not in first.exact_kde:
            continue
        series = [(EXACT, first.exact_kde[k])] + [
            (lab, first.records[lab].kde[k]) for lab in labels if lab in first.records
        ]
        path = out_dir / f"{prefix}_density_{_time_tag(t)}.csv"
        _write_csv(path, ["x", "series", "density"], [[_fmt(x), s, _fmt(v)] for s, dens in series for x, v in zip(grid, dens)])
        paths.append(path)
    return paths


def _mean_stderr(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def summarize(config: ExperimentConfig, results):
    """Rows ``(backend, metric, value, stderr)`` of run-averaged statistics.

    Time-averaged m.s.e. is first averaged over steps within a run, then over
    runs; stderr is across runs. Wall-time is kept apart (see ``timing_rows``)
    because it is not reproducible.
    """
    rows = []
    for lab in config.labels:
        recs = _records(results, lab)
        err_mu = [np.mean(np.sum((r.means - r.ref_means) ** 2, axis=1)) for r in recs]
        err_cov = [np.mean(np.sum((r.covs - r.ref_covs) ** 2, axis=(1, 2))) for r in recs]
        rows.append((lab, "mse_mean", *_mean_stderr(err_mu)))
        rows.append((lab, "mse_cov", *_mean_stderr(err_cov)))
        for t, k in zip(config.kde_times, config.kde_steps()):
            vals = [r.l1[k] for r in recs if k in r.l1]
            if vals:
                rows.append((lab, f"l1_{_time_tag(t)}", *_mean_stderr(vals)))
        ess = [np.mean(r.ess) / config.filters[config.labels.index(lab)].n for r in recs if r.ess is not None]
        if ess:
            rows.append((lab, "mean_ess_fraction", *_mean_stderr(ess)))
        failed = sum(lab in r.failures for r in results)
        rows.append((lab, "failed_runs", float(failed), 0.0))
    return rows


def timing_rows(config: ExperimentConfig, results):
    return [
        (lab, "wall_time_per_step", *_mean_stderr([np.mean(r.wall_time) for r in _records(results, lab)]))
        for lab in config.labels
    ]


def run_experiment(config: ExperimentConfig, out_dir=None) -> dict:
    """Run all M runs, write every CSV and return a small report.

    Returns:
        ``{"results": [...], "summary": rows, "failures": [(run, label, msg)],
        "paths": [...]}``.
    """
    out_dir = Path(out_dir if out_dir is not None else config.out_dir)
    indices = range(config.runs)
    if config.workers > 1 and config.runs > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run_single, [config] * config.runs, indices))
    else:
        results = [run_single(config, m) for m in indices]
    results.sort(key=lambda r: r.index)

    for r in results:
        write_run_files(config, r, out_dir)
    paths = []
    available = [lab for lab in config.labels if _records(results, lab)]
    prefix = "linear" if config.model == "linear-gaussian" else "benes"
    if available:
        paths += emit_figure_data(results, f"{prefix}-mse", out_dir, available)
        if config.model == "benes" and config.kde_times:
            paths += emit_figure_data(results, "benes-density", out_dir, available, config)
    summary = summarize(config, results)
    _write_csv(
        out_dir / "summary.csv",
        ["backend", "metric", "value", "stderr"],
        [[b, m, _fmt(v), _fmt(s)] for b, m, v, s in summary],
    )
    failures = [(r.index, lab, msg) for r in results for lab, msg in sorted(r.failures.items())]
    _write_csv(out_dir / "failures.csv", ["run", "series", "message"], [list(f) for f in failures])
    _write_csv(
        out_dir / "timing.csv",
        ["backend", "metric", "value", "stderr"],
        [[b, m, _fmt(v), _fmt(s)] for b, m, v, s in timing_rows(config, results)],
    )
    return {"results": results, "summary": summary, "failures": failures, "paths": paths}


# --------------------------------------------------------------------------
# CLI
# --------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="steinpf", description="Stein particle filter benchmark harness")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment and write CSV outputs")
    r.add_argument("config")
    r.add_argument("--paper", action="store_true", help="full-scale settings: n=500, M=50")
    r.add_argument("--seed", type=int, help="base seed (run m uses seed + m)")
    r.add_argument("--out", help="output directory")
    r.add_argument("--model", choices=MODELS)
    r.add_argument("--runs", type=int, help="number of Monte Carlo runs M")
    r.add_argument("--workers", type=int, help="parallel worker processes")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok ({config.model}, {len(config.filters)} filters, M={config.runs})")
            return EXIT_OK
        config = with_overrides(
            config,
            paper=args.paper,
            seed=args.seed,
            out=args.out,
            model=args.model,
            runs=args.runs,
            workers=args.workers,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = run_experiment(config)
    for b, m, v, s in report["summary"]:
        print(f"{b:>12s} {m:<22s} {v:.4e} +- {s:.1e}")
    if report["failures"]:
        for run, lab, msg in report["failures"]:
            print(f"run {run} {lab} failed: {msg}", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
