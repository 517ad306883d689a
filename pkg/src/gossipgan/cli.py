"""Command-line entry point.

Every subcommand writes into a run directory::

    run-dir/
      config.json        copy of the run configuration
      checkpoints/       *.ckpt files (generator, discriminator, encoder, decoder)
      metrics.csv        append-only, one row per evaluated run
      trace.log          gossip events, one JSON record per line
      .lock              present while a process owns the directory

Relative run directories resolve under $GOSSIPGAN_RUN_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .autoencoder import format_nmse
from .channel import (ChannelConfig, DatasetFormatError, export_dataset, generate_channels, normalize_dataset,
                      preset)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gan import Generator, TrainingDiverged
from .pipeline import (METRIC_COLUMNS, STANDARD_GAMMAS, RUN_KINDS, SWEEP_AXES, ExperimentConfig, GeneratorOutcome,
                       RunReport, continual_baselines, continual_sequence, make_area, run_experiment, statistics,
                       sweep, train_generator)
from .runconfig import ConfigError, load_run_config

EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED, EXIT_LOCKED, EXIT_FORMAT = 2, 3, 4, 5, 6
ENV_ROOT = "GOSSIPGAN_RUN_ROOT"
FIGURES = {"gamma-sweep": "gamma", "fake-count-sweep": "fake_count", "ue-sweep": "ue_count", "continual": None}


class RunDirLocked(RuntimeError):
    pass


# ---------------------------------------------------------------- run directory helpers


def resolve_run_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(ENV_ROOT)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


@contextmanager
def locked(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunDirLocked(f"run directory {run_dir} is in use (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def copy_config(src: str, run_dir: Path) -> None:
    dst = run_dir / "config.json"
    if Path(src).resolve() != dst.resolve():
        shutil.copyfile(src, dst)


def append_rows(path: Path, rows: list[dict], columns=METRIC_COLUMNS) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        if new:
            w.writeheader()
        w.writerows(rows)


def write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _json_default(o):
    if isinstance(o, float) and math.isinf(o):
        return "perfect"
    raise TypeError(type(o).__name__)


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def save_report(run_dir: Path, report: RunReport, wall_clock: bool) -> None:
    append_rows(run_dir / "metrics.csv", [report.row(wall_clock)])
    reports = run_dir / "reports"
    reports.mkdir(exist_ok=True)
    payload = {
        "run_id": report.run_id, "kind": report.kind, "scenario": report.scenario,
        "nmse_db": {k: format_nmse(v) if v == -math.inf else v for k, v in report.nmse_db.items()},
        "histories": report.histories, "bs_uplink_params": report.bs_uplink_params,
        "d2d_params": report.d2d_params, "memory_bytes": report.memory_bytes,
    }
    write_json(reports / f"{report.run_id}.json", payload)
    dae = report.extras.get("dae")
    if dae is not None:
        save_checkpoint(run_dir / "checkpoints" / f"{report.kind}_encoder.ckpt", dae.encoder.state(), "encoder")
        save_checkpoint(run_dir / "checkpoints" / f"{report.kind}_decoder.ckpt", dae.decoder.state(), "decoder")


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = ChannelConfig(args.n_t, args.n_c, args.bandwidth, args.paths, literal=args.literal)
    spec = preset(args.preset)
    H = generate_channels(cfg, spec, args.count, args.seed)
    ds = normalize_dataset(H, args.test_fraction, split_seed=args.seed)
    with locked(resolve_run_dir(args.run_dir)) as run_dir:
        export_dataset(ds, run_dir / "dataset.csid")
        write_json(run_dir / "dataset.json", {
            "preset": spec.to_dict(), "n_t": cfg.n_t, "n_c": cfg.n_c, "bandwidth": cfg.bandwidth,
            "n_paths": cfg.n_paths, "literal": cfg.literal, "count": args.count, "seed": args.seed,
            "scale": ds.scale, "train": ds.train.tolist(), "test": ds.test.tolist(),
        })
    print(f"wrote {args.count} samples to {run_dir / 'dataset.csid'}")
    return 0


def _selected_generator_path(run_dir: Path) -> Path:
    return run_dir / "checkpoints" / "selected_generator.ckpt"


def _train_stage(args, kind: str) -> int:
    config = load_run_config(args.config)
    with locked(resolve_run_dir(args.run_dir)) as run_dir:
        copy_config(args.config, run_dir)
        area = make_area(config)
        outcome = train_generator(config, area, kind)
        ck = run_dir / "checkpoints"
        if outcome.generator is not None:
            save_checkpoint(_selected_generator_path(run_dir), outcome.generator.state(), "generator")
        trace = outcome.extras.get("trace")
        if trace is not None:
            trace.write(run_dir / "trace.log")
        write_json(run_dir / "stage.json", {
            "kind": kind, "bs_uplink": outcome.bs_uplink, "d2d": outcome.d2d, "histories": outcome.histories,
            "extras": {k: v for k, v in outcome.extras.items() if k != "trace"},
        })
        for stale in ck.glob("ue*_*.ckpt"):
            stale.unlink()
    print(f"{kind}: GAN stage done in {run_dir}")
    return 0


def cmd_train_gossip(args) -> int:
    return _train_stage(args, "gossip")


def cmd_train_baseline(args) -> int:
    return _train_stage(args, args.kind)


def cmd_eval(args) -> int:
    run_dir = resolve_run_dir(args.run_dir)
    stage_file = run_dir / "stage.json"
    if not stage_file.exists():
        raise FileNotFoundError(f"{stage_file} not found; run train-gossip or train-baseline first")
    config = load_run_config(args.config or run_dir / "config.json")
    stage = json.loads(stage_file.read_text())
    kind = stage["kind"]
    generator = None
    if kind not in ("true_csi", "untrained"):
        generator = Generator(config.gan, np.random.default_rng(0))
        generator.load_state(load_checkpoint(_selected_generator_path(run_dir), "generator"))
    outcome = GeneratorOutcome(generator, stage["bs_uplink"], stage["d2d"], stage["histories"], stage["extras"])
    with locked(run_dir):
        report = run_experiment(config, kind, outcome=outcome)
        save_report(run_dir, report, args.wall_clock)
    print(f"{kind}: NMSE " + ", ".join(f"{k}={format_nmse(v)} dB" for k, v in report.nmse_db.items()))
    return 0


def _parse_value(axis: str, text: str):
    if axis == "gamma":
        return float(Fraction(text))
    return int(text)


def _sweep_rows(axis, results):
    return [[repr(v) if isinstance(v, float) else v, format_nmse(r.nmse())] for v, r in results]


def cmd_sweep(args) -> int:
    config = load_run_config(args.config)
    values = [_parse_value(args.axis, v) for v in args.values.split(",")]
    with locked(resolve_run_dir(args.run_dir)) as run_dir:
        copy_config(args.config, run_dir)
        results = sweep(config, args.axis, values, args.kind)
        for _, r in results:
            save_report(run_dir, r, args.wall_clock)
        write_table(run_dir / f"sweep-{args.axis}.csv", [args.axis, "nmse_db"], _sweep_rows(args.axis, results))
    print(f"sweep over {args.axis}: {len(values)} runs")
    return 0


def _continual_configs(args) -> list[ExperimentConfig]:
    base = load_run_config(args.config)
    return [replace(base, scenario=s, custom_scenario=None) for s in args.scenarios.split(",")]


def _continual_rows(configs):
    proposed = continual_sequence(configs)
    base = continual_baselines(configs)
    rows = []
    for scheme, reps in (("proposed", proposed), *base.items()):
        for step, rep in enumerate(reps):
            for scen, v in sorted(rep.nmse_db.items()):
                rows.append([scheme, step, rep.scenario, scen, format_nmse(v), rep.memory_bytes])
    return proposed, base, rows


CONTINUAL_HEADER = ["scheme", "step", "trained_on", "evaluated_on", "nmse_db", "memory_bytes"]


def cmd_continual(args) -> int:
    configs = _continual_configs(args)
    with locked(resolve_run_dir(args.run_dir)) as run_dir:
        copy_config(args.config, run_dir)
        proposed, base, rows = _continual_rows(configs)
        for rep in proposed + [r for reps in base.values() for r in reps]:
            save_report(run_dir, rep, args.wall_clock)
        write_table(run_dir / "continual.csv", CONTINUAL_HEADER, rows)
    print(f"continual sequence {args.scenarios}: {len(rows)} rows")
    return 0


class _Stub:
    """Minimal report view rebuilt from a saved JSON report."""

    def __init__(self, data: dict):
        self.scenario = data["scenario"]
        self.nmse_db = {k: (-math.inf if v == "perfect" else v) for k, v in data["nmse_db"].items()}
        self.histories = data["histories"]

    def nmse(self, scenario=None):
        return self.nmse_db[scenario or self.scenario]


def cmd_stats(args) -> int:
    reports = []
    for d in args.runs:
        for f in sorted((resolve_run_dir(d) / "reports").glob("*.json")):
            data = json.loads(f.read_text())
            if args.kind is None or data["kind"] == args.kind:
                reports.append(_Stub(data))
    if len(reports) < 2:
        raise ConfigError(f"statistics need at least two reports, found {len(reports)}")
    summary = statistics(reports, args.scenario)
    out = summary.to_dict()
    print(json.dumps(out, sort_keys=True))
    if args.out:
        write_json(Path(args.out), out)
    return 0


def cmd_plot_data(args) -> int:
    axis = FIGURES[args.figure]
    config = load_run_config(args.config)
    with locked(resolve_run_dir(args.run_dir)) as run_dir:
        copy_config(args.config, run_dir)
        if axis is None:
            scen = args.values.split(",") if args.values else ["sparse", "dense"]
            configs = [replace(config, scenario=s, custom_scenario=None) for s in scen]
            _, _, rows = _continual_rows(configs)
            write_table(run_dir / "figure-continual.csv", CONTINUAL_HEADER, rows)
            return 0
        if args.values:
            values = [_parse_value(axis, v) for v in args.values.split(",")]
        elif axis == "gamma":
            values = list(STANDARD_GAMMAS)
        elif axis == "fake_count":
            values = [200, 500, 1000, 2000]
        else:
            values = [2, 3, 4]
        results = sweep(config, axis, values)
        label = {"gamma": "gamma", "fake_count": "S", "ue_count": "K"}[axis]
        write_table(run_dir / f"figure-{args.figure}.csv", [label, "nmse_db"], _sweep_rows(axis, results))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gossipgan", description="Decentralised GAN training for CSI feedback.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesise a CSID dataset")
    g.add_argument("--preset", choices=["sparse", "dense"], required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n-t", type=int, default=32)
    g.add_argument("--n-c", type=int, default=32)
    g.add_argument("--bandwidth", type=float, default=50e6)
    g.add_argument("--paths", type=int, default=None, help="override the preset path count L")
    g.add_argument("--literal", action="store_true", help="subcarrier index inside the array response")
    g.add_argument("--test-fraction", type=float, default=0.0)
    g.add_argument("--run-dir", default="data")
    g.set_defaults(func=cmd_gen_data)

    def run_args(sp, config_required=True):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--run-dir", required=True)
        sp.add_argument("--wall-clock", action="store_true", help="fill the wall_seconds metrics column")

    t = sub.add_parser("train-gossip", help="gossip-train the GANs and store the selected generator")
    run_args(t)
    t.set_defaults(func=cmd_train_gossip)

    b = sub.add_parser("train-baseline", help="run a baseline GAN stage (or none for true_csi/untrained)")
    run_args(b)
    b.add_argument("--kind", choices=[k for k in RUN_KINDS if k != "gossip"], required=True)
    b.set_defaults(func=cmd_train_baseline)

    e = sub.add_parser("eval", help="synthesise data, train the DAE and append NMSE to metrics.csv")
    run_args(e, config_required=False)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="NMSE versus S, gamma or K")
    run_args(s)
    s.add_argument("--axis", choices=SWEEP_AXES, required=True)
    s.add_argument("--values", required=True, help="comma separated, e.g. 1/16,1/32")
    s.add_argument("--kind", choices=RUN_KINDS, default="gossip")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("continual", help="generative-replay sequence plus the two baselines")
    run_args(c)
    c.add_argument("--scenarios", default="sparse,dense")
    c.set_defaults(func=cmd_continual)

    st = sub.add_parser("stats", help="mean, variance and 95%% interval over saved reports")
    st.add_argument("--runs", nargs="+", required=True)
    st.add_argument("--kind", choices=RUN_KINDS + ("continual", "no_retraining", "retraining"))
    st.add_argument("--scenario")
    st.add_argument("--out")
    st.set_defaults(func=cmd_stats)

    pd = sub.add_parser("plot-data", help="per-figure CSV series")
    run_args(pd)
    pd.add_argument("--figure", choices=sorted(FIGURES), required=True)
    pd.add_argument("--values", help="override the axis values (or scenarios for 'continual')")
    pd.set_defaults(func=cmd_plot_data)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, (DatasetFormatError, CheckpointError)):
            return _fail(EXIT_FORMAT, "format", exc)
        return _fail(EXIT_CONFIG, "config", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing-file", exc)
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, "diverged", exc)
    except RunDirLocked as exc:
        return _fail(EXIT_LOCKED, "locked", exc)


if __name__ == "__main__":
    sys.exit(main())
