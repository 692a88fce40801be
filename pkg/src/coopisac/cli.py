"""Command-line entry point.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import harness
from .fusion import FUSION_METHODS, cooperative_fusion, write_fused_csv
from .geometry import load_scenario, save_scenario
from .params import read_measurements_csv, write_measurements_csv
from .waveform import NoiseConfig, design_region_beamformer, dump_tensor, simulate_received_tensor

PAPER_SCALE = dict(n_subcarriers=612, trials=500)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def parse_k_range(text: str) -> list[int]:
    """``"1..6"`` or ``"1,3,5"`` or ``"4"``."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split("..", 1))
            ks = list(range(lo, hi + 1))
        else:
            ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K range {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError(f"K values must be >= 1: {text!r}")
    return ks


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad value list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=Path, default=None, help="output file or directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--estimator", choices=("proposed", "als"), default=None)
    common.add_argument("--fusion", choices=FUSION_METHODS, default=None)
    common.add_argument("--paper-scale", action="store_true",
                        help="612 subcarriers and 500 trials")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coopisac", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="dump one pair's echo tensor")
    s.add_argument("--pair", type=int, nargs=2, metavar=("TBS", "RBS"), default=(4, 0))
    s.add_argument("--k", type=_positive_int, default=None, help="number of targets")
    s.add_argument("--noiseless", action="store_true")

    e = sub.add_parser("estimate", parents=[common], help="estimate every link of one scene")
    e.add_argument("--k", type=_positive_int, default=None)
    e.add_argument("--trial", type=int, default=0, help="scene index within the seed")

    f = sub.add_parser("fuse", parents=[common], help="fuse a measurements CSV")
    f.add_argument("measurements", type=Path)
    f.add_argument("--scenario", type=Path, required=True, help="scenario JSON")
    f.add_argument("--k", type=_positive_int, default=None)

    b = sub.add_parser("bench", parents=[common], help="CPU time of proposed vs ALS recovery")
    b.add_argument("--k", type=parse_k_range, default=list(range(1, 7)))
    b.add_argument("--reps", type=_positive_int, default=3)

    x = sub.add_parser("experiment", parents=[common], help="Monte Carlo sweep")
    x.add_argument("--trials", type=_positive_int, default=None)
    x.add_argument("--sweep", choices=harness.SWEEPS, default=None)
    x.add_argument("--values", type=_floats, default=None, help="comma-separated sweep values")
    x.add_argument("--workers", type=_positive_int, default=None)
    return p


def load_config(args) -> harness.ExperimentConfig:
    """Experiment configuration from the optional file plus command-line overrides."""
    d: dict = {}
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text())
        d.update(raw.get("experiment", {}))
        if "scenario" in raw:
            d["scenario"] = raw["scenario"]
        for key, name in (("noise", "noise"), ("link", "link"), ("fusion", "fusion_cfg")):
            if key in raw:
                d[name] = raw[key]
    if args.paper_scale:
        d.update(PAPER_SCALE)
    overrides = dict(seed=args.seed, estimator=args.estimator, fusion=args.fusion,
                     trials=getattr(args, "trials", None), sweep=getattr(args, "sweep", None),
                     values=getattr(args, "values", None), workers=getattr(args, "workers", None),
                     k_targets=getattr(args, "k", None) if args.command in ("simulate", "estimate") else None)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return harness.ExperimentConfig.from_dict(d)


def _emit_text(text: str, out: Path | None, force: bool) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    if out.exists() and not force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    out.write_text(text)


def cmd_simulate(args, cfg) -> int:
    sc, _ = harness.trial_scene(cfg, 0)
    bf = design_region_beamformer(sc.array, *sc.beam_region)
    noise = NoiseConfig(enabled=False) if args.noiseless else cfg.noise
    T = simulate_received_tensor(sc, tuple(args.pair), (bf, bf), noise, cfg.seed)
    out = args.out or Path("tensor.bin")
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    dump_tensor(T.data, out)
    print(f"wrote {out} shape={T.data.shape}")
    return 0


def cmd_estimate(args, cfg) -> int:
    sc, pairs = harness.trial_scene(cfg, args.trial)
    ms, _, failures = harness.estimate_links(sc, pairs, cfg, args.trial)
    buf = io.StringIO()
    write_measurements_csv(ms, buf)
    if args.out is not None:
        out = harness.prepare_out_dir(args.out, args.force)
        (out / "measurements.csv").write_text(buf.getvalue())
        save_scenario(sc, out / "scenario.json")
    sys.stdout.write(buf.getvalue())
    if failures:
        print(f"{failures} link(s) failed", file=sys.stderr)
    return 0


def cmd_fuse(args, cfg) -> int:
    sc = load_scenario(args.scenario)
    with open(args.measurements, newline="") as fh:
        ms = read_measurements_csv(fh)
    K = args.k or sc.k_targets or max(m.n_paths for m in ms)
    result = cooperative_fusion(ms, sc, K, replace(cfg.fusion_cfg, method=cfg.fusion))
    buf = io.StringIO()
    write_fused_csv(result, buf)
    _emit_text(buf.getvalue(), args.out, args.force)
    return 0


def cmd_bench(args, cfg) -> int:
    rows = harness.bench(args.k, args.reps, cfg.seed, cfg.n_subcarriers, cfg.noise)
    buf = io.StringIO()
    harness.write_bench_csv(rows, buf)
    _emit_text(buf.getvalue(), args.out, args.force)
    return 0


def cmd_experiment(args, cfg) -> int:
    out = args.out or Path("results")
    harness.prepare_out_dir(out, args.force)  # fail before spending CPU time
    report = harness.run_experiment(cfg)
    for p in harness.emit_outputs(report, cfg, out, force=True):
        print(p)
    return 0


COMMANDS = dict(simulate=cmd_simulate, estimate=cmd_estimate, fuse=cmd_fuse,
                bench=cmd_bench, experiment=cmd_experiment)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        cfg = load_config(args)
    except (ValueError, TypeError, json.JSONDecodeError, OSError) as exc:
        print(f"coopisac: config error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args, cfg)
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"coopisac {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
