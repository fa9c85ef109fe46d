"""Command-line front end.

Subcommands: ``sim-channel``, ``train``, ``pack-verify``, ``resources`` and
``report``. Exit codes: 0 success, 1 verification mismatch, 2 bad config or
arguments, 3 I/O error, 4 packing constraint violation.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli

from . import dsppack
from .channel import ChannelConfig, make_rng, simulate
from .harness import (ARCHS, QuantConfig, SystemConfig, config_echo, convergence_time,
                      estimate_resources, run_experiment)
from .train import TrainConfig

log = logging.getLogger("eqsim")

MANIFEST_VERSION = "eqsim-run/1"

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_IO, EXIT_PACK = 0, 1, 2, 3, 4

# TOML spellings that differ from the dataclass field names
_ALIASES = {"channel": {"lambda": "lam"}}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunManifest:
    system: SystemConfig
    out_dir: Path | None = None
    version: str = MANIFEST_VERSION

    @property
    def channel(self) -> ChannelConfig:
        return self.system.channel

    @property
    def train(self) -> TrainConfig:
        return self.system.train

    def echo(self) -> dict:
        return {"version": self.version, **config_echo(self.system)}


def _build(cls, section: str, table: dict, **extra):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        name = _ALIASES.get(section, {}).get(key, key)
        if name not in names or name in extra:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def manifest_from_dict(doc: dict, seed: int | None = None,
                       out_dir: Path | None = None) -> RunManifest:
    """Validate every section before anything runs. ``seed`` overrides the
    system seed, and the channel seed defaults to the system seed."""
    unknown = set(doc) - {"channel", "system", "train", "quant"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sys_table = dict(doc.get("system", {}))
    ch_table = dict(doc.get("channel", {}))
    if seed is not None:
        sys_table["seed"] = seed
        ch_table["seed"] = seed
    ch_table.setdefault("seed", sys_table.get("seed", 0))
    channel = _build(ChannelConfig, "channel", ch_table)
    train = _build(TrainConfig, "train", doc.get("train", {}))
    quant = _build(QuantConfig, "quant", doc.get("quant", {}))
    system = _build(SystemConfig, "system", sys_table, channel=channel, train=train,
                    quant=quant)
    try:
        quant.layers()
    except ValueError as exc:
        raise ConfigError(f"[quant]: {exc}") from exc
    return RunManifest(system, out_dir)


def load_manifest(path, seed: int | None = None, out_dir=None) -> RunManifest:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return manifest_from_dict(doc, seed, Path(out_dir) if out_dir else None)


# --- output helpers -----------------------------------------------------------

def atomic_write(path, text: str):
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x) -> str:
    return repr(float(x))


def emit(text: str, out):
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        atomic_write(out, text)


# --- commands -----------------------------------------------------------------

def channel_csv(manifest: RunManifest, n_symbols: int) -> str:
    cfg = manifest.channel
    tx, rx = simulate(n_symbols, cfg, make_rng(cfg.seed), manifest.system.quant.input_fmt)
    y = rx.values().reshape(n_symbols, cfg.n_os)
    if cfg.n_os != 2:
        raise ConfigError("sim-channel CSV expects n_os = 2")
    rows = ((k, _num(tx.symbols[k]), _num(y[k, 0]), _num(y[k, 1])) for k in range(n_symbols))
    return csv_text(["idx", "tx_symbol", "rx_sample_even", "rx_sample_odd"], rows)


def cmd_sim_channel(args) -> int:
    manifest = load_manifest(args.config, args.seed)
    if args.symbols < 64:
        raise ConfigError("--symbols must be at least 64")
    emit(channel_csv(manifest, args.symbols), args.out)
    return EXIT_OK


def trajectory_csv(report) -> str:
    rows = []
    for r in report.runs:
        rows += [(r.run_id, u, _num(t), _num(b))
                 for u, t, b in zip(r.updates, r.times_ms, r.bers)]
    return csv_text(["run_id", "update_idx", "time_ms", "ber"], rows)


def cmd_train(args) -> int:
    manifest = load_manifest(args.config, args.seed, args.out)
    system = manifest.system
    if args.runs is not None:
        if args.runs < 1:
            raise ConfigError("--runs must be >= 1")
        system = dataclasses.replace(system, n_runs=args.runs)
    out = Path(args.out or "eqsim-out")
    report = run_experiment(system, threads=args.threads)
    summary = report.summary()
    summary["config"] = RunManifest(system, out).echo()
    atomic_write(out / "trajectory.csv", trajectory_csv(report))
    atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    frac = summary["converged_fraction"]
    mean = summary["mean_t_conv_ms"]
    print(f"converged {summary['converged_runs']}/{summary['n_runs']} ({frac:.0%}), "
          f"mean t_conv {'n/a' if mean is None else f'{mean:.4f} ms'}")
    return EXIT_OK


def cmd_pack_verify(args) -> int:
    spec = dsppack.PackedMulSpec(args.d, args.w)
    problems = dsppack.check_mapping_constraints(spec)
    if problems:
        for p in problems:
            print(f"constraint violation: {p}")
        return EXIT_PACK
    tested, bad = dsppack.verify(spec, samples=args.samples, seed=args.seed or 0)
    print(f"d={args.d} w={args.w} tested={tested} mismatches={0 if bad is None else '>=1'}")
    if bad is not None:
        print(f"first counterexample: {bad}")
        return EXIT_MISMATCH
    return EXIT_OK


def parse_range(text: str) -> range:
    """``a:b`` (inclusive) or a single integer."""
    try:
        if ":" in text:
            a, b = (int(v) for v in text.split(":", 1))
        else:
            a = b = int(text)
    except ValueError as exc:
        raise ConfigError(f"bad range {text!r}") from exc
    if a < 0:
        raise ConfigError("p_i must be non-negative")
    return range(a, b + 1)


def resources_csv(archs, p_range, p_t: int) -> str:
    rows = []
    for arch in archs:
        for p in p_range:
            est = estimate_resources(arch, p, p_t)
            rows.append((arch, p, est.dsp_count, est.lut_estimate))
    return csv_text(["arch", "p_i", "dsp", "lut_est"], rows)


def cmd_resources(args) -> int:
    archs = ARCHS if args.arch == "all" else (args.arch,)
    p_range = parse_range(args.p_i)
    if len(p_range) == 0:
        raise ConfigError(f"empty p_i range {args.p_i!r}")
    emit(resources_csv(archs, p_range, args.p_t), args.out)
    return EXIT_OK


def summarize_trajectory(text: str, threshold: float) -> dict:
    reader = csv.DictReader(io.StringIO(text))
    need = {"run_id", "update_idx", "time_ms", "ber"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise ConfigError(f"trajectory CSV needs columns {sorted(need)}")
    runs: dict[int, list] = {}
    try:
        for row in reader:
            runs.setdefault(int(row["run_id"]), []).append(
                (int(row["update_idx"]), float(row["time_ms"]), float(row["ber"])))
    except ValueError as exc:
        raise ConfigError(f"malformed trajectory row: {exc}") from exc
    if not runs:
        raise ConfigError("trajectory CSV has no rows")
    t_conv = {}
    for rid, pts in sorted(runs.items()):
        pts.sort()
        t_conv[rid] = convergence_time([p[1] for p in pts], [p[2] for p in pts], threshold)
    done = [t for t in t_conv.values() if t is not None]
    pct = {f"p{q}": (float(np.percentile(done, q)) if done else None) for q in (25, 50, 75)}
    return {
        "n_runs": len(runs),
        "converged_runs": len(done),
        "converged_fraction": len(done) / len(runs),
        "mean_t_conv_ms": float(np.mean(done)) if done else None,
        "t_conv_percentiles_ms": pct,
        "per_run_t_conv_ms": [t_conv[r] for r in sorted(t_conv)],
        "fec_threshold": threshold,
    }


def cmd_report(args) -> int:
    if not 0 < args.threshold < 1:
        raise ConfigError("--threshold must lie in (0, 1)")
    try:
        text = Path(args.trajectory).read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"no such trajectory file: {args.trajectory}") from exc
    summary = summarize_trajectory(text, args.threshold)
    emit(json.dumps(summary, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def _global_flags(parser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    parser.add_argument("--threads", type=int, default=d(1), help="parallel runs")
    parser.add_argument("--out", default=d(None),
                        help="output file (or directory for train); '-' or unset: stdout")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqsim", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sim-channel", parents=[common], help="simulate the optical link")
    s.add_argument("config")
    s.add_argument("--symbols", type=int, default=4096)
    s.set_defaults(func=cmd_sim_channel)

    s = sub.add_parser("train", parents=[common], help="run a convergence experiment")
    s.add_argument("config")
    s.add_argument("--runs", type=int, default=None, help="override system.n_runs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("pack-verify", parents=[common], help="check the packed multiplier")
    s.add_argument("--d", type=int, default=10)
    s.add_argument("--w", type=int, default=6)
    s.add_argument("--samples", type=lambda v: int(float(v)), default=None,
                   help="random triples (default: exhaustive when feasible)")
    s.set_defaults(func=cmd_pack_verify)

    s = sub.add_parser("resources", parents=[common], help="DSP/LUT estimates")
    s.add_argument("--arch", choices=(*ARCHS, "all"), default="all")
    s.add_argument("--p-i", default="1:64", help="range a:b, inclusive")
    s.add_argument("--p-t", type=int, default=0)
    s.set_defaults(func=cmd_resources)

    s = sub.add_parser("report", parents=[common], help="summarize a trajectory CSV")
    s.add_argument("trajectory")
    s.add_argument("--threshold", type=float, default=2.7e-2)
    s.set_defaults(func=cmd_report)
    return p


def _setup_logging():
    level = os.environ.get("EQSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"eqsim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except dsppack.PackingError as exc:
        print(f"eqsim: {exc}", file=sys.stderr)
        return EXIT_PACK
    except OSError as exc:
        print(f"eqsim: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
