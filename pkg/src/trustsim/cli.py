"""Command-line entry point.

Configuration files hold one ``key = value`` pair per line (``#`` starts a
comment). List-valued keys (``strategies``, ``deltas``, ``psis``) take
comma-separated values. Command-line flags override file values.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import SCHEMAS, DataError, load_profits, load_ratings, save_profits
from .engine import (
    CONFIG_FIELDS,
    METRICS,
    RunConfig,
    RunResult,
    SimulationError,
    grid,
    mean_and_ci,
    replication_profits,
    run_many,
)
from .predictor import TrainingError
from .strategy import STRATEGIES, STRATEGY_OMEGA

logger = logging.getLogger("trustsim")

SCHEMA_VERSION = 1
RAW_COLUMNS = ("strategy", "omega", "delta", "psi", "replication", "seed", "step") + METRICS
AGGREGATE_COLUMNS = ("strategy", "omega", "delta", "psi", "step", "metric", "mean", "ci_half_width")
FIGURE_METRICS = {
    "consumption": "mean_consumption_prob",
    "trust": "mean_trust",
    "profit-per-step": "profit_step",
    "cumulative-profit": "cumulative_profit",
}

GRID_DELTAS = (0.0, 0.05, 0.1, 0.5)
GRID_PSIS = (0.75, 0.85, 0.95)
FIGURES = {
    "fig3": dict(deltas=(0.0,), psis=(0.75,)),
    "fig4": dict(deltas=GRID_DELTAS, psis=(0.75,)),
    "fig5": dict(deltas=GRID_DELTAS, psis=(0.75,)),
    "fig6": dict(deltas=GRID_DELTAS, psis=(0.75,)),
    "appendix": dict(deltas=(0.0,), psis=GRID_PSIS),
}

QUICK = dict(consumers=100, steps=100, replications=2)


class ConfigError(ValueError):
    pass


@dataclass
class Settings:
    """Fully resolved request: data inputs, run parameters and grid factors."""

    run: RunConfig = field(default_factory=RunConfig)
    strategies: tuple = STRATEGIES
    deltas: tuple = (0.0,)
    psis: tuple = (0.75,)
    ratings: str | None = None
    ratings_format: str = "movielens-csv"
    profits: str | None = None
    consumers: int = 0  # subsample size, 0 = everyone
    jobs: int = 1
    quick: bool = False

    def configs(self) -> list[RunConfig]:
        return grid(self.strategies, self.deltas, self.psis, base=self.run)

    def echo(self) -> dict:
        out = asdict(self)
        out["run"] = asdict(self.run)
        for key in ("strategies", "deltas", "psis"):
            out[key] = list(out[key])
        return out


SETTINGS_KEYS = {
    "strategies": "list",
    "deltas": "list",
    "psis": "list",
    "ratings": str,
    "ratings_format": str,
    "profits": str,
    "consumers": int,
    "jobs": int,
}


def _valid_keys():
    return sorted(set(CONFIG_FIELDS) | set(SETTINGS_KEYS))


def _convert(key: str, raw: str):
    raw = raw.strip()
    if key in ("strategies",):
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    if key in ("deltas", "psis"):
        try:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated numbers, got {raw!r}") from None
    if key in SETTINGS_KEYS:
        kind = SETTINGS_KEYS[key]
    else:
        kind = CONFIG_FIELDS[key].type
    if key == "omega":
        return None if raw.lower() in ("", "none", "default") else _number(key, raw, float)
    if kind in (bool, "bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    if kind in (int, "int"):
        return _number(key, raw, int)
    if kind in (float, "float"):
        return _number(key, raw, float)
    return raw


def _number(key, raw, kind):
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if kind is int:
        if value != int(value):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return int(value)
    return value


def read_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


_RANGES = {
    "psi": "(0, 1)",
    "delta": "[0, inf)",
    "omega": "[0, 1]",
    "p_feed": "[0, 1]",
    "p_soc": "[0, 1]",
    "nu": "[1, inf)",
    "steps": "[0, inf)",
    "replications": "[1, inf)",
    "retrain_period": "[1, inf)",
    "list_len": "[1, inf)",
    "noise_sd": "[0, inf)",
}


def parse_config(path=None, overrides: dict | None = None) -> Settings:
    """Resolve defaults < config file < overrides into :class:`Settings`.

    ``overrides`` maps keys to raw strings or already-typed values.
    """
    raw: dict = {}
    if path is not None:
        raw.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key.replace("-", "_")] = value

    unknown = sorted(set(raw) - set(_valid_keys()))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}; valid keys: {', '.join(_valid_keys())}")
    values = {k: (_convert(k, v) if isinstance(v, str) else v) for k, v in raw.items()}

    # single-valued run keys also define the grid when no list is given
    if "strategy" in values and "strategies" not in values:
        values["strategies"] = (values["strategy"],)
    if "delta" in values and "deltas" not in values:
        values["deltas"] = (values["delta"],)
    if "psi" in values and "psis" not in values:
        values["psis"] = (values["psi"],)

    for s in values.get("strategies", ()):
        if s not in STRATEGY_OMEGA:
            raise ConfigError(f"unknown strategy {s!r}; valid: {', '.join(STRATEGIES)}")
    for key, single in (("deltas", "delta"), ("psis", "psi")):
        for v in values.get(key, ()):
            _check_range(single, v)
    run_kwargs = {k: v for k, v in values.items() if k in CONFIG_FIELDS}
    for key, value in run_kwargs.items():
        _check_range(key, value)
    if "strategies" in values and "strategy" not in run_kwargs and values["strategies"]:
        run_kwargs["strategy"] = values["strategies"][0]
    try:
        run = RunConfig(**run_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    settings = Settings(run=run, **{k: v for k, v in values.items() if k in SETTINGS_KEYS})
    if not settings.strategies or not settings.deltas or not settings.psis:
        raise ConfigError("strategies, deltas and psis must be non-empty")
    if settings.ratings_format not in SCHEMAS:
        raise ConfigError(f"ratings_format must be one of {sorted(SCHEMAS)}")
    if settings.consumers < 0 or settings.jobs < 1:
        raise ConfigError("consumers must be >= 0 and jobs >= 1")
    return settings


def _check_range(key, value):
    if key not in _RANGES or value is None:
        return
    probe = {"strategy": "consumer_centric", key: value}
    try:
        RunConfig(**probe)
    except ValueError:
        raise ConfigError(f"{key}={value} out of range; valid range {_RANGES[key]}") from None


# -- output -----------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ""
    return repr(value)


def _series_label(cfg: RunConfig) -> str:
    if cfg.omega == STRATEGY_OMEGA[cfg.strategy]:
        return cfg.strategy
    return f"{cfg.strategy}_w{cfg.omega:g}"


def raw_rows(results: list[RunResult]):
    for res in results:
        cfg = res.config
        for r, (seed, rep) in enumerate(zip(res.seeds, res.per_replication)):
            for m in rep:
                yield [cfg.strategy, cfg.omega, cfg.delta, cfg.psi, r, seed, m.step] + [
                    getattr(m, name) for name in METRICS
                ]


def aggregate_rows(groups):
    """Aggregate rows from ``[(key, metric arrays)]``; key is (strategy, omega, delta, psi)."""
    for key, arrays, steps in groups:
        for metric in METRICS:
            mean, ci = mean_and_ci(arrays[metric])
            for s, mu, hw in zip(steps, mean, ci):
                yield list(key) + [s, metric, mu, hw]


def _groups_from_results(results):
    for res in results:
        cfg = res.config
        if not res.per_replication or not res.per_replication[0]:
            continue
        arrays = {
            m: np.array([[getattr(x, m) for x in rep] for rep in res.per_replication], dtype=np.float64)
            for m in METRICS
        }
        steps = [x.step for x in res.per_replication[0]]
        yield (cfg.strategy, cfg.omega, cfg.delta, cfg.psi), arrays, steps


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def emit_csv(results: list[RunResult], out_dir, manifest: dict | None = None) -> list[Path]:
    """Write raw.csv, aggregate.csv, per-figure series and manifest.json."""
    if not results:
        raise ValueError("no results to write")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "raw.csv", out / "aggregate.csv"]
        _write_csv(written[0], RAW_COLUMNS, raw_rows(results))
        _write_csv(written[1], AGGREGATE_COLUMNS, aggregate_rows(_groups_from_results(results)))
        written += _write_figures(results, out / "figures")
        meta = {"schema_version": SCHEMA_VERSION, "raw_columns": list(RAW_COLUMNS)}
        meta.update(manifest or {})
        (out / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
        written.append(out / "manifest.json")
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return written


def _write_figures(results, fig_dir: Path) -> list[Path]:
    slices: dict[tuple, list[RunResult]] = {}
    for res in results:
        if res.aggregate:
            slices.setdefault((res.config.delta, res.config.psi), []).append(res)
    if not slices:
        return []
    fig_dir.mkdir(exist_ok=True)
    written = []
    for (delta, psi), members in slices.items():
        for name, metric in FIGURE_METRICS.items():
            header = ["step"]
            columns = []
            for res in members:
                label = _series_label(res.config)
                header += [f"{label}_mean", f"{label}_ci"]
                columns += list(res.aggregate[metric])
            steps = [m.step for m in members[0].per_replication[0]]
            path = fig_dir / f"{name}_delta-{delta:g}_psi-{psi:g}.csv"
            _write_csv(path, header, ([s] + [col[i] for col in columns] for i, s in enumerate(steps)))
            written.append(path)
    return written


def verify(out_dir) -> tuple[bool, str]:
    """Re-derive aggregate.csv from raw.csv and compare byte for byte."""
    out = Path(out_dir)
    raw_path, agg_path = out / "raw.csv", out / "aggregate.csv"
    if not raw_path.exists() or not agg_path.exists():
        return False, f"{out} lacks raw.csv or aggregate.csv"
    groups: dict[tuple, dict[int, list]] = {}
    with raw_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = (
                row["strategy"],
                float(row["omega"]) if row["omega"] else None,
                float(row["delta"]),
                float(row["psi"]),
            )
            groups.setdefault(key, {}).setdefault(int(row["replication"]), []).append(row)
    rebuilt = []
    for key, reps in groups.items():
        ordered = [reps[r] for r in sorted(reps)]
        steps = [int(x["step"]) for x in ordered[0]]
        if any(len(rep) != len(steps) for rep in ordered):
            return False, f"replications of {key} have different lengths"
        arrays = {m: np.array([[float(x[m]) for x in rep] for rep in ordered]) for m in METRICS}
        rebuilt.append((key, arrays, steps))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(AGGREGATE_COLUMNS)
    for row in aggregate_rows(rebuilt):
        writer.writerow([_fmt(v) for v in row])
    expected = buf.getvalue()
    actual = agg_path.read_text()
    if expected == actual:
        return True, f"aggregate.csv matches raw.csv ({len(expected.splitlines()) - 1} rows)"
    exp_lines, act_lines = expected.splitlines(), actual.splitlines()
    for i, (a, b) in enumerate(zip(exp_lines, act_lines)):
        if a != b:
            return False, f"line {i + 1} differs: expected {a!r}, found {b!r}"
    return False, f"row count differs: expected {len(exp_lines)}, found {len(act_lines)}"


def summary_table(results: list[RunResult]) -> str:
    """Final cumulative profit per strategy, relative to consumer_centric, per slice."""
    lines = []
    slices: dict[tuple, list[RunResult]] = {}
    for res in results:
        slices.setdefault((res.config.delta, res.config.psi), []).append(res)
    for (delta, psi), members in slices.items():
        finals = {
            _series_label(r.config): (
                r.aggregate["cumulative_profit"][0][-1],
                r.aggregate["mean_consumption_prob"][0][-1],
            )
            for r in members if r.aggregate
        }
        base = finals.get("consumer_centric", (None,))[0]
        lines.append(f"delta={delta:g} psi={psi:g}")
        lines.append(f"  {'strategy':<18}{'cum. profit':>14}{'vs consumer':>13}{'p_con(T)':>10}")
        for label, (cum, prob) in finals.items():
            rel = f"{100 * (cum / base - 1):+.1f}%" if base else "n/a"
            lines.append(f"  {label:<18}{cum:>14.1f}{rel:>13}{prob:>10.3f}")
    return "\n".join(lines)


# -- commands ---------------------------------------------------------------

def _load_inputs(settings: Settings):
    if not settings.ratings:
        raise ConfigError("a ratings file is required (--ratings or 'ratings =' in the config)")
    loaded = load_ratings(settings.ratings, settings.ratings_format)
    store = loaded.store
    if settings.consumers and settings.consumers < store.n_consumers:
        rng = np.random.default_rng(settings.run.seed)
        chosen = np.sort(rng.choice(store.n_consumers, size=settings.consumers, replace=False))
        store = store.subset(chosen)
        logger.info("subsampled %d consumers", settings.consumers)
    profits = load_profits(settings.profits, store.n_items) if settings.profits else None
    return store, profits


def _execute(settings: Settings, out_dir, label: str) -> list[RunResult]:
    if settings.quick:
        logger.warning("QUICK MODE: subsampled consumers and shortened runs; not a reproduction")
    for key, value in sorted(settings.echo().items()):
        logger.info("config %s = %s", key, value)
    store, profits = _load_inputs(settings)
    configs = settings.configs()
    results = run_many(configs, store, profits=profits, jobs=settings.jobs)
    manifest = {"command": label, "settings": settings.echo(), "quick": settings.quick}
    if settings.quick:
        manifest["note"] = "quick mode, not a reproduction"
    if out_dir is not None:
        for path in emit_csv(results, out_dir, manifest):
            logger.info("wrote %s", path)
    return results


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
    parser.add_argument("--quick", action="store_true",
                        help="small smoke-test run (fewer consumers and steps); not a reproduction")
    for key in _valid_keys():
        parser.add_argument("--" + key.replace("_", "-"), dest=f"opt_{key}", default=None, metavar="VALUE")


def _settings_from_args(args, forced: dict | None = None) -> Settings:
    overrides = {}
    if args.quick:
        overrides.update({k: str(v) for k, v in QUICK.items()})
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for key in _valid_keys():
        value = getattr(args, f"opt_{key}")
        if value is not None:
            overrides[key] = value
    overrides.update(forced or {})
    settings = parse_config(args.config, overrides)
    settings.quick = bool(args.quick)
    return settings


def cmd_run(args) -> int:
    settings = _settings_from_args(args)
    single = dict(strategies=(settings.run.strategy,), deltas=(settings.run.delta,), psis=(settings.run.psi,))
    settings = replace(settings, **single)
    results = _execute(settings, args.out, "run")
    print(summary_table(results))
    return 0


def cmd_grid(args) -> int:
    settings = _settings_from_args(args)
    results = _execute(settings, args.out, "grid")
    print(summary_table(results))
    return 0


def cmd_reproduce(args) -> int:
    if args.figure not in FIGURES:
        raise ConfigError(f"unknown figure {args.figure!r}; valid: {', '.join(FIGURES)}")
    slice_ = FIGURES[args.figure]
    forced = {
        "strategies": ",".join(STRATEGIES),
        "deltas": ",".join(str(d) for d in slice_["deltas"]),
        "psis": ",".join(str(p) for p in slice_["psis"]),
    }
    settings = _settings_from_args(args, forced)
    out = args.out or Path("results") / args.figure
    results = _execute(settings, out, f"reproduce {args.figure}")
    print(summary_table(results))
    return 0


def cmd_verify(args) -> int:
    ok, message = verify(args.out_dir)
    print(message)
    return 0 if ok else 1


def cmd_profits(args) -> int:
    settings = _settings_from_args(args)
    store, _ = _load_inputs(settings)
    profits = replication_profits(settings.run.seed, store.n_items)
    save_profits(args.output, profits)
    print(f"wrote {store.n_items} profits for seed {settings.run.seed} to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trustsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="run the product of strategies x deltas x psis")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("reproduce", help="run the grid slice behind a figure")
    p.add_argument("figure", help=f"one of: {', '.join(FIGURES)}")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory (default results/<figure>)")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("verify", help="re-derive aggregate.csv from raw.csv and compare")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("profits", help="export the profit draw of a seed as item_id,profit CSV")
    _add_config_flags(p)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_profits)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SimulationError, TrainingError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
