"""Simulation harness: synthetic data, GP base forecasts, reconciliation, NLPD.

Every simulation draws all of its randomness from
``SeedSequence([master_seed, sim_index])``, so a simulation's outcome does not
depend on how many simulations run or on how they are spread over workers.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from . import gp
from .errors import ConfigError, ContractViolation, HtsrError
from .gaussian import Gaussian, log_pdf
from .hierarchy import Hierarchy, from_groups
from .kernels import parse_kernel
from .reconcile import BaseForecasts, get_reconciler

log = logging.getLogger(__name__)

DEFAULT_SIGMAS = (0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)
SYNTHETIC_KERNEL = "periodic(period=fixed(6.283185307179586))"
REAL_KERNEL = "sum(periodic(period=bounded(12.0, 11.9, 12.1)), rbf(lengthscale=bounded(24.0, 1.0, 10000.0)))"
N_SYNTHETIC = 4
Z95 = 1.959964


@dataclass(frozen=True)
class SyntheticDataset:
    train_t: np.ndarray
    test_t: np.ndarray
    y: np.ndarray  # (N, T_train) observations
    x_true: np.ndarray  # (N, T_test) hidden future states
    u_true: np.ndarray  # (T_test,) column sums of x_true
    sigma_eps: float
    seed: object


def gen_experiment_a(sigma_eps: float, points_per_period: int = 50, seed=0) -> SyntheticDataset:
    """Four noisy copies of ``sin(t)``: observed on [0, 2pi), hidden on [2pi, 4pi]."""
    if sigma_eps < 0:
        raise ContractViolation(f"sigma_eps must be >= 0, got {sigma_eps}")
    if points_per_period < 8:
        raise ContractViolation(f"points_per_period must be >= 8, got {points_per_period}")
    rng = np.random.default_rng(seed)
    train_t = np.linspace(0.0, 2 * np.pi, points_per_period, endpoint=False)
    test_t = np.linspace(2 * np.pi, 4 * np.pi, points_per_period)
    eps = rng.standard_normal((N_SYNTHETIC, 2 * points_per_period)) * sigma_eps
    y = np.sin(train_t) + eps[:, :points_per_period]
    x_true = np.sin(test_t) + eps[:, points_per_period:]
    return SyntheticDataset(train_t, test_t, y, x_true, x_true.sum(axis=0), float(sigma_eps), seed)


def draw_shifts(n_series: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n_series)


def shift_forecasts_b(base: Sequence[gp.GpPrediction], seed) -> list[gp.GpPrediction]:
    """Move each bottom forecast's mean by one standard-normal draw per series."""
    zeta = draw_shifts(len(base), seed)
    return [gp.shifted(p, float(z)) for p, z in zip(base, zeta)]


def nlpd(dists: Sequence[Gaussian], truths) -> float:
    """Average over time steps of ``-log p(truth_t)`` under ``dists[t]``."""
    truths = np.asarray(truths, dtype=float)
    if truths.ndim == 1:
        truths = truths.reshape(len(dists), -1) if len(dists) else truths
    if len(dists) == 0 or truths.shape[0] != len(dists):
        raise ContractViolation(f"{len(dists)} distributions for {truths.shape[0]} truths")
    total = 0.0
    for d, x in zip(dists, truths):
        if x.size != d.dim:
            raise ContractViolation(f"truth of length {x.size} for a {d.dim}-dimensional forecast")
        total -= log_pdf(d, x)
    return total / len(dists)


@dataclass(frozen=True)
class Aggregate:
    mean: float
    sem: float
    sd: float


def aggregate(values) -> Aggregate:
    """Mean, standard error of the mean and (n-1) standard deviation.

    A single value gets SD = SEM = 0.
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise ContractViolation("cannot aggregate an empty list")
    mean = float(np.mean(v))
    if v.size == 1:
        return Aggregate(mean, 0.0, 0.0)
    sd = float(np.std(v, ddof=1))
    return Aggregate(mean, sd / math.sqrt(v.size), sd)


# -- experiment configuration and running ---------------------------------

@dataclass(frozen=True)
class SeriesData:
    """Bottom-level series on a shared integer time axis, in hierarchy order."""

    t: np.ndarray  # (T,)
    values: np.ndarray  # (N, T)
    hierarchy: Hierarchy


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "a"  # a | b | real
    sigma_eps: float = 0.1
    n_sims: int = 50
    points_per_period: int = 50
    kernel_bottom: str = SYNTHETIC_KERNEL
    kernel_upper: str = SYNTHETIC_KERNEL
    reconcilers: tuple[str, ...] = ("et",)
    master_seed: int = 0
    skip_on_failure: bool = False
    n_starts: int = gp.N_STARTS
    noise_init: float = 0.1
    data: SeriesData | None = None
    train_window: int = 60
    test_window: int = 24

    def __post_init__(self):
        if self.experiment not in ("a", "b", "real"):
            raise ConfigError(f"unknown experiment {self.experiment!r} (expected a, b or real)")
        if self.n_sims < 1:
            raise ConfigError("n_sims must be >= 1")
        for name in self.reconcilers:
            get_reconciler(name)
        parse_kernel(self.kernel_bottom)
        parse_kernel(self.kernel_upper)
        if self.experiment == "real":
            if self.data is None:
                raise ConfigError("the real experiment needs a dataset")
            need = self.n_sims - 1 + self.train_window + self.test_window
            if self.data.t.size < need:
                raise ConfigError(
                    f"{self.n_sims} sliding windows of {self.train_window}+{self.test_window} "
                    f"need {need} time steps, dataset has {self.data.t.size}"
                )
        elif self.sigma_eps < 0:
            raise ConfigError("sigma_eps must be >= 0")

    @property
    def methods(self) -> list[str]:
        return ["base", *self.reconcilers]


@dataclass(frozen=True)
class Forecasts:
    """Data and fitted base forecasts of one simulation."""

    hierarchy: Hierarchy
    train_t: np.ndarray
    test_t: np.ndarray
    y_bottom: np.ndarray  # (N, T_train)
    y_upper: np.ndarray  # (M, T_train)
    x_true: np.ndarray  # (N, T_test)
    u_true: np.ndarray  # (M, T_test)
    models: tuple[gp.GpModel, ...]  # bottom then upper
    bottom: tuple[gp.GpPrediction, ...]
    upper: tuple[gp.GpPrediction, ...]
    shifts: np.ndarray  # (N,) constant added to each bottom mean; zeros outside experiment B


def sim_seed(master_seed: int, sim_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(sim_index)])


def _fit_all(series, train_t, test_t, kernel_exprs, fit_seeds, cfg, relative_bounds):
    models, preds = [], []
    for ys, expr, seed in zip(series, kernel_exprs, fit_seeds):
        m = gp.fit(
            train_t, ys, parse_kernel(expr), cfg.noise_init, np.random.default_rng(seed),
            n_starts=cfg.n_starts, relative_bounds=relative_bounds,
        )
        models.append(m)
        preds.append(gp.predict(m, test_t))
    return models, preds


def make_forecasts(cfg: ExperimentConfig, sim_index: int) -> Forecasts:
    """Generate (or slice) the data of one simulation and fit every base GP."""
    data_ss, fit_ss, shift_ss = sim_seed(cfg.master_seed, sim_index).spawn(3)
    if cfg.experiment == "real":
        h = cfg.data.hierarchy
        lo = sim_index
        mid, hi = lo + cfg.train_window, lo + cfg.train_window + cfg.test_window
        train_t = cfg.data.t[lo:mid].astype(float)
        test_t = cfg.data.t[mid:hi].astype(float)
        y_bottom = cfg.data.values[:, lo:mid]
        x_true = cfg.data.values[:, mid:hi]
        relative = True
    else:
        h = from_groups([range(N_SYNTHETIC)], N_SYNTHETIC)
        ds = gen_experiment_a(cfg.sigma_eps, cfg.points_per_period, data_ss)
        train_t, test_t, y_bottom, x_true = ds.train_t, ds.test_t, ds.y, ds.x_true
        relative = False
    y_upper = h.A @ y_bottom
    u_true = h.A @ x_true
    n, m = h.n_bottom, h.n_upper
    fit_seeds = fit_ss.spawn(n + m)
    exprs = [cfg.kernel_bottom] * n + [cfg.kernel_upper] * m
    models, preds = _fit_all(
        list(y_bottom) + list(y_upper), train_t, test_t, exprs, fit_seeds, cfg, relative
    )
    bottom, upper = preds[:n], preds[n:]
    shifts = np.zeros(n)
    if cfg.experiment == "b":
        shifts = draw_shifts(n, shift_ss)
        bottom = [gp.shifted(p, float(z)) for p, z in zip(bottom, shifts)]
    return Forecasts(
        h, train_t, test_t, y_bottom, y_upper, x_true, u_true,
        tuple(models), tuple(bottom), tuple(upper), shifts,
    )


def base_forecasts_at(fc: Forecasts, t: int) -> BaseForecasts:
    """Per-time-step marginals assembled into a diagonal product prior."""
    return BaseForecasts.from_marginals(
        [p.dist.mean[t] for p in fc.bottom],
        [p.dist.cov[t, t] for p in fc.bottom],
        [p.dist.mean[t] for p in fc.upper],
        [p.dist.cov[t, t] for p in fc.upper],
    )


def score(fc: Forecasts, reconcilers: Sequence[str]) -> dict[str, float]:
    dists: dict[str, list[Gaussian]] = {"base": [], **{r: [] for r in reconcilers}}
    for t in range(fc.test_t.size):
        bf = base_forecasts_at(fc, t)
        dists["base"].append(bf.bottom)
        for r in reconcilers:
            dists[r].append(get_reconciler(r)(bf, fc.hierarchy).dist)
    truths = fc.x_true.T
    return {name: nlpd(d, truths) for name, d in dists.items()}


@dataclass(frozen=True)
class SimResult:
    sim_index: int
    nlpd: dict[str, float] | None
    error: str | None = None


def run_simulation(cfg: ExperimentConfig, sim_index: int) -> SimResult:
    try:
        return SimResult(sim_index, score(make_forecasts(cfg, sim_index), cfg.reconcilers))
    except HtsrError as exc:
        if not cfg.skip_on_failure:
            raise
        log.warning("simulation %d failed: %s", sim_index, exc)
        return SimResult(sim_index, None, f"{exc.category}: {exc}")


@dataclass
class RunReport:
    experiment: str
    sigma_eps: float
    n_sims: int
    master_seed: int
    methods: list[str]
    nlpd: dict[str, list[float]]  # per method, one entry per simulation (NaN if failed)
    failures: dict[int, str] = field(default_factory=dict)

    def summary(self) -> dict[str, Aggregate]:
        out = {}
        for m in self.methods:
            vals = [v for v in self.nlpd[m] if not math.isnan(v)]
            out[m] = aggregate(vals) if vals else Aggregate(math.nan, math.nan, math.nan)
        return out


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> RunReport:
    """Run ``cfg.n_sims`` simulations and collect NLPD per method."""
    work = partial(run_simulation, cfg)
    if jobs > 1 and cfg.n_sims > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, range(cfg.n_sims)))
    else:
        results = [work(i) for i in range(cfg.n_sims)]
    methods = cfg.methods
    table = {m: [] for m in methods}
    failures = {}
    for r in sorted(results, key=lambda r: r.sim_index):
        if r.nlpd is None:
            failures[r.sim_index] = r.error
        for m in methods:
            table[m].append(math.nan if r.nlpd is None else r.nlpd[m])
    sigma = math.nan if cfg.experiment == "real" else cfg.sigma_eps
    return RunReport(cfg.experiment, sigma, cfg.n_sims, cfg.master_seed, methods, table, failures)


# -- serialization --------------------------------------------------------

PER_SIM_HEADER = ("method", "sigma_eps", "sim_index", "nlpd")


def _fmt(x: float) -> str:
    return repr(float(x))


def per_sim_rows(reports: Sequence[RunReport]) -> list[tuple]:
    rows = []
    for rep in reports:
        for m in rep.methods:
            for i, v in enumerate(rep.nlpd[m]):
                rows.append((m, rep.sigma_eps, i, v))
    return rows


def write_per_sim_csv(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PER_SIM_HEADER)
    for m, s, i, v in per_sim_rows(reports):
        w.writerow((m, _fmt(s), i, _fmt(v)))
    return buf.getvalue()


def read_per_sim_csv(text: str) -> list[tuple[str, float, int, float]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != PER_SIM_HEADER:
        raise ConfigError(f"per-simulation CSV must start with {','.join(PER_SIM_HEADER)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        try:
            rows.append((rec[0], float(rec[1]), int(rec[2]), float(rec[3])))
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"per-simulation CSV line {lineno}: {exc}") from exc
    return rows


def summarize_rows(rows) -> tuple[list[str], list[float], dict[tuple[str, float], Aggregate]]:
    """Group per-simulation rows by (method, sigma) and aggregate them."""
    methods: list[str] = []
    sigmas: list[float] = []
    groups: dict[tuple[str, float], list[float]] = {}
    for m, s, _, v in rows:
        if m not in methods:
            methods.append(m)
        if not any(s == x or (math.isnan(s) and math.isnan(x)) for x in sigmas):
            sigmas.append(s)
        key = (m, _sigma_key(s))
        groups.setdefault(key, [])
        if not math.isnan(v):
            groups[key].append(v)
    aggs = {
        k: aggregate(v) if v else Aggregate(math.nan, math.nan, math.nan) for k, v in groups.items()
    }
    return methods, sigmas, aggs


def _sigma_key(s: float):
    return "nan" if math.isnan(s) else s


def write_summary_csv(rows) -> str:
    """One block of mean/SEM/SD rows per noise level; one column per method."""
    methods, sigmas, aggs = summarize_rows(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("sigma_eps", "stat", *methods))
    for s in sigmas:
        for stat in ("mean", "SEM", "SD"):
            attr = stat.lower()
            w.writerow((_fmt(s), stat, *(_fmt(getattr(aggs[(m, _sigma_key(s))], attr)) for m in methods)))
    return buf.getvalue()


def format_summary_table(rows) -> str:
    """Aligned text table with 6 significant digits."""
    methods, sigmas, aggs = summarize_rows(rows)
    header = ["sigma_eps", "stat", *methods]
    body = []
    for s in sigmas:
        for stat in ("mean", "SEM", "SD"):
            a = [aggs[(m, _sigma_key(s))] for m in methods]
            body.append([f"{s:.6g}", stat, *(f"{getattr(x, stat.lower()):.6g}" for x in a)])
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.rjust(wd) for c, wd in zip(r, widths)).rstrip() for r in [header, *body]]
    return "\n".join(lines) + "\n"


def forecast_rows(fc: Forecasts, which: str, index: int) -> list[tuple]:
    """``t, split, truth, mean, lo95, hi95`` rows for one bottom or upper series.

    Training rows carry the fitted posterior at the training inputs.
    """
    model = fc.models[index if which == "bottom" else fc.hierarchy.n_bottom + index]
    test_pred = (fc.bottom if which == "bottom" else fc.upper)[index]
    train_pred = gp.predict(model, fc.train_t)
    if which == "bottom" and fc.shifts[index] != 0.0:
        train_pred = gp.shifted(train_pred, float(fc.shifts[index]))
    y_train = (fc.y_bottom if which == "bottom" else fc.y_upper)[index]
    y_test = (fc.x_true if which == "bottom" else fc.u_true)[index]
    rows = []
    for split, t, truth, pred in (
        ("train", fc.train_t, y_train, train_pred),
        ("test", fc.test_t, y_test, test_pred),
    ):
        sd = np.sqrt(np.maximum(pred.var, 0.0))
        for k in range(t.size):
            mu = pred.mean[k]
            rows.append((t[k], split, truth[k], mu, mu - Z95 * sd[k], mu + Z95 * sd[k]))
    return rows


def write_forecast_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("t", "split", "truth", "mean", "lo95", "hi95"))
    for t, split, truth, mu, lo, hi in rows:
        w.writerow((_fmt(t), split, _fmt(truth), _fmt(mu), _fmt(lo), _fmt(hi)))
    return buf.getvalue()
