"""Command-line entry point.

Subcommands::

    htsr run --config exp_a.cfg [--jobs N] [--seed S] [--out DIR] [--set key=value ...]
    htsr gen --experiment a --sigma 0.2 --seed 7 [--out DIR]
    htsr oracle-check [--seeds 10]
    htsr report --per-sim out/per_sim.csv [--out DIR]

Failures print one line ``<category>: <detail>`` on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import harness
from .errors import ConfigError, DataError, HtsrError, OracleFailureError
from .gaussian import Gaussian
from .hierarchy import Hierarchy, format_hierarchy, from_groups, load_hierarchy
from .kernels import parse_kernel
from .reconcile import BaseForecasts, grid_posterior_moments, max_relative_deviation, reconcile_lg

log = logging.getLogger(__name__)

SEED_ENV = "HTSR_SEED"
ORACLE_TOL = 1e-2


# -- configuration --------------------------------------------------------

def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    out = tuple(float(v) for v in s.split(",") if v.strip())
    if not out:
        raise ValueError("expected at least one number")
    return out


def _parse_names(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _parse_kernel_expr(s: str) -> str:
    parse_kernel(s)
    return s.strip()


# key -> (parser, help)
CONFIG_KEYS: dict[str, tuple[Callable[[str], object], str]] = {
    "experiment": (lambda s: s.strip().lower(), "a | b | real"),
    "sigmas": (_parse_floats, "comma-separated noise levels (a, b)"),
    "n_sims": (int, "simulations per noise level"),
    "points_per_period": (int, "training points on [0, 2pi) and test points on [2pi, 4pi] (a, b)"),
    "kernel_bottom": (_parse_kernel_expr, "kernel expression for the bottom series"),
    "kernel_upper": (_parse_kernel_expr, "kernel expression for the summed series"),
    "reconcilers": (_parse_names, "comma-separated reconciler names, e.g. et"),
    "master_seed": (int, "root seed; overridden by $HTSR_SEED, then by --seed"),
    "output_dir": (str, "output directory (relative to the working directory)"),
    "dataset": (str, "long-format CSV series,t,value (real; relative to the config file)"),
    "hierarchy": (str, "hierarchy file of 'upper: b1,b2' lines (real; relative to the config file)"),
    "skip_on_failure": (_parse_bool, "record failed simulations and keep going"),
    "n_starts": (int, "optimizer starts per GP fit"),
    "noise_init": (float, "initial noise variance of every GP fit"),
    "train_window": (int, "training months per window (real)"),
    "test_window": (int, "test months per window (real)"),
    "write_forecasts": (_parse_bool, "dump forecasts_<series>.csv for simulation 0"),
}


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "a"
    sigmas: tuple[float, ...] = harness.DEFAULT_SIGMAS
    n_sims: int = 50
    points_per_period: int = 50
    kernel_bottom: str | None = None
    kernel_upper: str | None = None
    reconcilers: tuple[str, ...] = ("et",)
    master_seed: int = 0
    output_dir: str = "out"
    dataset: str | None = None
    hierarchy: str | None = None
    skip_on_failure: bool = False
    n_starts: int = harness.gp.N_STARTS
    noise_init: float = 0.1
    train_window: int = 60
    test_window: int = 24
    write_forecasts: bool = True
    base_dir: Path = field(default=Path("."), compare=False)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _parse_line(raw: str, where: str) -> tuple[str, object] | None:
    line = raw.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" not in line:
        raise ConfigError(f"{where}: expected 'key = value'")
    key, value = (s.strip() for s in line.split("=", 1))
    if key not in CONFIG_KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    parser = CONFIG_KEYS[key][0]
    try:
        return key, parser(value)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {key}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc


def parse_config(text: str, base_dir=".", overrides: Sequence[str] = (), source: str = "config") -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        kv = _parse_line(raw, f"{source} line {lineno}")
        if kv is None:
            continue
        if kv[0] in values:
            raise ConfigError(f"{source} line {lineno}: duplicate key {kv[0]!r}")
        values[kv[0]] = kv[1]
    for item in overrides:
        kv = _parse_line(item, f"--set {item!r}")
        if kv is not None:
            values[kv[0]] = kv[1]
    return RunConfig(**values, base_dir=Path(base_dir))


def load_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text, path.parent, overrides, source=str(path))


def resolve_seed(flag: int | None, env: dict, configured: int) -> int:
    """Seed precedence: command-line flag, then $HTSR_SEED, then the config."""
    if flag is not None:
        return flag
    raw = env.get(SEED_ENV)
    if raw is not None and raw.strip():
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    return configured


# -- dataset ingestion ----------------------------------------------------

@dataclass(frozen=True)
class SeriesTable:
    """Validated series on one shared time axis.

    ``t`` holds the model time axis (months become 0..T-1); ``stamps`` keeps
    the time stamps as they appeared in the file.
    """

    labels: tuple[str, ...]
    t: np.ndarray
    stamps: tuple[str, ...]
    values: np.ndarray  # (len(labels), T)

    def series(self, label: str) -> np.ndarray:
        return self.values[self.labels.index(label)]


_MONTH = re.compile(r"^(\d{4})-(\d{1,2})$")


def _parse_stamp(s: str) -> tuple[str, float]:
    """Classify a time stamp as an integer month, a YYYY-MM month or a real number."""
    s = s.strip()
    m = _MONTH.match(s)
    if m:
        month = int(m.group(2))
        if not 1 <= month <= 12:
            raise ValueError(f"month out of range in {s!r}")
        return "month", int(m.group(1)) * 12 + month - 1
    try:
        return "month", int(s)
    except ValueError:
        pass
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"non-finite time stamp {s!r}")
    return "real", v


def load_dataset(csv_path, hierarchy_path) -> tuple[SeriesTable, Hierarchy]:
    """Read a ``series,t,value`` CSV and a hierarchy file.

    Only bottom series named by the hierarchy are kept; summary series are
    recomputed as sums of their members, whatever the file says about them.
    """
    csv_path, hierarchy_path = Path(csv_path), Path(hierarchy_path)
    try:
        h = load_hierarchy(hierarchy_path)
    except OSError as exc:
        raise DataError(f"cannot read hierarchy {hierarchy_path}: {exc.strerror or exc}") from exc
    try:
        fh = csv_path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {csv_path}: {exc.strerror or exc}") from exc

    wanted = set(h.bottom_labels)
    records: dict[str, dict[float, tuple[float, str, int]]] = {s: {} for s in h.bottom_labels}
    kinds: set[str] = set()
    with fh:
        reader = csv.reader(fh)
        header = [c.strip() for c in next(reader, [])]
        if header != ["series", "t", "value"]:
            raise DataError(f"{csv_path} line 1: header must be 'series,t,value', got {','.join(header)!r}")
        for rec in reader:
            lineno = reader.line_num
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 3:
                raise DataError(f"{csv_path} line {lineno}: expected 3 fields, got {len(rec)}")
            label, stamp, raw = (c.strip() for c in rec)
            if not label:
                raise DataError(f"{csv_path} line {lineno}: empty series label")
            try:
                kind, t = _parse_stamp(stamp)
            except ValueError:
                raise DataError(f"{csv_path} line {lineno}: bad time stamp {stamp!r}") from None
            try:
                value = float(raw)
            except ValueError:
                value = math.nan
            if not math.isfinite(value):
                raise DataError(f"{csv_path} line {lineno}: non-numeric value {raw!r} for series {label!r}")
            if label not in wanted:
                continue
            kinds.add(kind)
            if t in records[label]:
                first = records[label][t][2]
                raise DataError(
                    f"{csv_path} line {lineno}: duplicate (series, t) = ({label}, {stamp}); "
                    f"first seen on line {first}"
                )
            records[label][t] = (value, stamp, lineno)

    missing = [s for s in h.bottom_labels if not records[s]]
    if missing:
        raise DataError(f"{csv_path}: series {', '.join(map(repr, missing))} named in the hierarchy are missing")
    if len(kinds) > 1:
        raise DataError(f"{csv_path}: mixes month and real-valued time stamps")

    ref_label = h.bottom_labels[0]
    axis = sorted(records[ref_label])
    for s in h.bottom_labels:
        ts = sorted(records[s])
        if ts != axis:
            raise DataError(
                f"{csv_path}: series {s!r} covers t in [{records[s][ts[0]][1]}, {records[s][ts[-1]][1]}] "
                f"({len(ts)} stamps) but {ref_label!r} covers [{records[ref_label][axis[0]][1]}, "
                f"{records[ref_label][axis[-1]][1]}] ({len(axis)} stamps)"
            )
    stamps = tuple(records[ref_label][t][1] for t in axis)
    t_raw = np.array(axis, dtype=float)
    if kinds == {"month"}:
        gaps = np.flatnonzero(np.diff(t_raw) != 1)
        if gaps.size:
            k = gaps[0]
            raise DataError(f"{csv_path}: months are not contiguous between {stamps[k]} and {stamps[k + 1]}")
        t_axis = t_raw - t_raw[0]
    else:
        t_axis = t_raw
    bottom = np.array([[records[s][t][0] for t in axis] for s in h.bottom_labels])
    upper = h.A @ bottom
    table = SeriesTable(
        h.bottom_labels + h.upper_labels, t_axis, stamps, np.vstack([bottom, upper])
    )
    return table, h


def series_data(table: SeriesTable, h: Hierarchy) -> harness.SeriesData:
    return harness.SeriesData(table.t, table.values[: h.n_bottom], h)


# -- experiment assembly --------------------------------------------------

def experiment_configs(rc: RunConfig, seed: int, data: harness.SeriesData | None = None):
    """One validated harness configuration per noise level (one in total for real data)."""
    if rc.experiment == "real":
        kb = rc.kernel_bottom or harness.REAL_KERNEL
        ku = rc.kernel_upper or harness.REAL_KERNEL
        sigmas: tuple[float, ...] = (0.0,)
    else:
        kb = rc.kernel_bottom or harness.SYNTHETIC_KERNEL
        ku = rc.kernel_upper or harness.SYNTHETIC_KERNEL
        sigmas = rc.sigmas
        if rc.points_per_period < 8:
            raise ConfigError("points_per_period must be >= 8")
    if rc.n_starts < 1:
        raise ConfigError("n_starts must be >= 1")
    if not rc.noise_init > 0:
        raise ConfigError("noise_init must be > 0")
    if rc.train_window < 2 or rc.test_window < 1:
        raise ConfigError("train_window must be >= 2 and test_window >= 1")
    return [
        harness.ExperimentConfig(
            experiment=rc.experiment,
            sigma_eps=s,
            n_sims=rc.n_sims,
            points_per_period=rc.points_per_period,
            kernel_bottom=kb,
            kernel_upper=ku,
            reconcilers=rc.reconcilers,
            master_seed=seed,
            skip_on_failure=rc.skip_on_failure,
            n_starts=rc.n_starts,
            noise_init=rc.noise_init,
            data=data,
            train_window=rc.train_window,
            test_window=rc.test_window,
        )
        for s in sigmas
    ]


def _load_real_data(rc: RunConfig) -> harness.SeriesData | None:
    if rc.experiment != "real":
        return None
    if not rc.dataset or not rc.hierarchy:
        raise ConfigError("the real experiment needs both 'dataset' and 'hierarchy'")
    table, h = load_dataset(rc.resolve(rc.dataset), rc.resolve(rc.hierarchy))
    return series_data(table, h)


_UNSAFE = re.compile(r"[^A-Za-z0-9_.-]")


def forecast_filename(label: str) -> str:
    return f"forecasts_{_UNSAFE.sub('_', label)}.csv"


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def write_forecast_files(fc: harness.Forecasts, out: Path) -> list[Path]:
    h = fc.hierarchy
    written = []
    for which, labels in (("bottom", h.bottom_labels), ("upper", h.upper_labels)):
        for i, label in enumerate(labels):
            p = out / forecast_filename(label)
            _write(p, harness.write_forecast_csv(harness.forecast_rows(fc, which, i)))
            written.append(p)
    return written


def _sigma_dir(s: float) -> str:
    return f"sigma_{s:g}"


# -- oracle check ---------------------------------------------------------

def oracle_case(seed: int) -> tuple[BaseForecasts, Hierarchy]:
    """Random N=2, M=1 linear-Gaussian case.

    Bottom variances are uniform on [0.5, 2] with correlation uniform on
    [-0.8, 0.8]; all means are uniform on [-3, 3]; the summary variance is
    the prior's variance of the sum times a factor uniform on [0.5, 2].
    """
    h = from_groups([[0, 1]], 2)
    rng = np.random.default_rng(seed)
    sd = np.sqrt(rng.uniform(0.5, 2.0, 2))
    rho = rng.uniform(-0.8, 0.8)
    cov = np.outer(sd, sd) * np.array([[1.0, rho], [rho, 1.0]])
    mu = rng.uniform(-3.0, 3.0, 2)
    pushed = float(h.A[0] @ cov @ h.A[0])
    var_eta = rng.uniform(0.5, 2.0) * pushed
    mu_eta = rng.uniform(-3.0, 3.0, 1)
    return BaseForecasts(Gaussian(mu, cov), Gaussian(mu_eta, [[var_eta]])), h


def oracle_deviation(seed: int, half_width_sigmas: float = 6.0, points_per_dim: int = 201) -> float:
    f, h = oracle_case(seed)
    post = reconcile_lg(f, h).dist
    gm, gc = grid_posterior_moments(f, h, half_width_sigmas, points_per_dim)
    return max_relative_deviation(gm, gc, post.mean, post.cov)


# -- subcommands ----------------------------------------------------------

def cmd_run(args) -> int:
    rc = load_config(args.config, args.set or ())
    seed = resolve_seed(args.seed, os.environ, rc.master_seed)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    cfgs = experiment_configs(rc, seed, _load_real_data(rc))
    out = Path(args.out or rc.output_dir)

    reports = [harness.run_experiment(cfg, jobs=args.jobs) for cfg in cfgs]
    for rep in reports:
        for i, msg in sorted(rep.failures.items()):
            log.warning("sigma %g simulation %d skipped: %s", rep.sigma_eps, i, msg)
    rows = harness.per_sim_rows(reports)

    out.mkdir(parents=True, exist_ok=True)
    _write(out / "per_sim.csv", harness.write_per_sim_csv(reports))
    _write(out / "summary.csv", harness.write_summary_csv(rows))
    table = harness.format_summary_table(rows)
    _write(out / "summary.txt", table)
    if rc.write_forecasts:
        for cfg in cfgs:
            target = out if rc.experiment == "real" else out / _sigma_dir(cfg.sigma_eps)
            target.mkdir(parents=True, exist_ok=True)
            write_forecast_files(harness.make_forecasts(cfg, 0), target)
    sys.stdout.write(table)
    return 0


def cmd_gen(args) -> int:
    if args.points_per_period < 8:
        raise ConfigError("--points-per-period must be >= 8")
    cfg = harness.ExperimentConfig(
        experiment=args.experiment,
        sigma_eps=args.sigma,
        n_sims=1,
        points_per_period=args.points_per_period,
        master_seed=args.seed,
    )
    fc = harness.make_forecasts(cfg, 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = fc.hierarchy
    lines = ["series,t,value"]
    for i, label in enumerate(h.bottom_labels):
        for t, v in zip(fc.train_t, fc.y_bottom[i]):
            lines.append(f"{label},{float(t)!r},{float(v)!r}")
        for t, v in zip(fc.test_t, fc.x_true[i]):
            lines.append(f"{label},{float(t)!r},{float(v)!r}")
    _write(out / "data.csv", "\n".join(lines) + "\n")
    _write(out / "hierarchy.txt", format_hierarchy(h))
    written = write_forecast_files(fc, out)
    for p in [out / "data.csv", out / "hierarchy.txt", *written]:
        print(p)
    return 0


def cmd_oracle_check(args) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    worst = 0.0
    for seed in range(args.seeds):
        d = oracle_deviation(seed, args.half_width, args.points_per_dim)
        worst = max(worst, d)
        print(f"seed {seed}: max relative deviation {d:.3e}")
    status = "ok" if worst < ORACLE_TOL else "FAIL"
    print(f"max over {args.seeds} seeds: {worst:.3e} (tolerance {ORACLE_TOL:g}) {status}")
    if worst >= ORACLE_TOL:
        raise OracleFailureError(f"closed form and grid disagree by {worst:.3e} >= {ORACLE_TOL:g}")
    return 0


def cmd_report(args) -> int:
    src = Path(args.per_sim)
    try:
        text = src.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {src}: {exc.strerror or exc}") from exc
    rows = harness.read_per_sim_csv(text)
    if not rows:
        raise DataError(f"{src} has no simulation rows")
    out = Path(args.out) if args.out else src.parent
    summary = harness.write_summary_csv(rows)
    table = harness.format_summary_table(rows)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "summary.csv", summary)
    _write(out / "summary.txt", table)
    sys.stdout.write(table)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _config_help() -> str:
    lines = ["config keys (one 'key = value' per line, '#' comments):"]
    width = max(map(len, CONFIG_KEYS))
    for k, (_, doc) in CONFIG_KEYS.items():
        lines.append(f"  {k.ljust(width)}  {doc}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="htsr", description="Bayesian reconciliation of hierarchical forecasts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser(
        "run", help="run an experiment sweep from a config file",
        epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    r.add_argument("--config", required=True)
    r.add_argument("--jobs", type=int, default=1, help="concurrent simulations (default 1)")
    r.add_argument("--seed", type=int, default=None, help=f"master seed; beats ${SEED_ENV} and the config")
    r.add_argument("--out", default=None, help="output directory; beats the config's output_dir")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen", help="dump one synthetic data set with its base forecasts")
    g.add_argument("--experiment", choices=("a", "b"), default="a")
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points-per-period", type=int, default=50)
    g.add_argument("--out", default="gen")
    g.set_defaults(func=cmd_gen)

    o = sub.add_parser("oracle-check", help="compare the closed form against grid quadrature")
    o.add_argument("--seeds", type=int, default=10)
    o.add_argument("--half-width", type=float, default=6.0, help="grid half-width in prior SDs")
    o.add_argument("--points-per-dim", type=int, default=201)
    o.set_defaults(func=cmd_oracle_check)

    rp = sub.add_parser("report", help="re-render summary tables from a per_sim.csv")
    rp.add_argument("--per-sim", required=True)
    rp.add_argument("--out", default=None, help="output directory (default: next to the input)")
    rp.set_defaults(func=cmd_report)
    return p


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except HtsrError as exc:
        print(f"{exc.category}: {_one_line(exc)}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except HtsrError as exc:
        print(f"{exc.category}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io: {_one_line(exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
