"""Command-line front end.

Subcommands: run, sweep, analyze, synth, regen, calibrate.  All outputs are
regenerable from (scenario, master seed); wall-clock timing is reported on
stderr only so output files stay byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

from . import __version__
from .calibrate import DEFAULT_TOLERANCE, TABLE1_CALCULATED_BPS, fit_table1
from .config import ConfigError, parse_scenario
from .errormodel import (
    BurstSynthParams,
    ChannelCondition,
    TableFormatError,
    TableKey,
    TraceFormatError,
    analyze_trace,
    burst_synthesize,
    Erracle,
    load_table,
    load_trace,
    save_table,
    save_trace,
    BitErrorTrace,
    DEFAULT_GUARD_GAP_BITS,
)
from .kernel import RngStream
from .runner import run_scenario, run_sweep, write_outputs, write_sweep_csv

import numpy as np


def _fail(msg: str) -> int:
    print(f"hflink: error: {msg}", file=sys.stderr)
    return 2


def cmd_run(args) -> int:
    try:
        cfg = parse_scenario(args.scenario)
    except (ConfigError, OSError) as exc:
        return _fail(str(exc))
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, master_seed=args.seed)
    out_dir = args.out or cfg.output
    if out_dir is None:
        return _fail("no output directory: pass --out or set `output:` in the scenario")
    try:
        metrics, link = run_scenario(cfg)
    except (ConfigError, TableFormatError) as exc:
        return _fail(str(exc))
    write_outputs(metrics, link, out_dir)
    print(
        f"sim {metrics.sim_time_s:.0f} s in {metrics.wall_time_s:.2f} s wall "
        f"({metrics.speedup:.0f}x real time); goodput {metrics.goodput_bps:.1f} bps; "
        f"PER {metrics.packet_error_rate:.4f}",
        file=sys.stderr,
    )
    return 0


def cmd_sweep(args) -> int:
    snrs = [float(s) for s in args.snr.split(",") if s]
    modes = [m for m in args.modes.split(",") if m]
    for m in modes:
        if m not in ("plain", "accelerate", "saturation"):
            return _fail(f"unknown sweep mode {m!r}")
    try:
        rows, skipped = run_sweep(args.scenario, snrs, args.seeds, modes,
                                  args.tables_dir, jobs=args.jobs)
        cfg = parse_scenario(args.scenario)
    except (ConfigError, TableFormatError, OSError) as exc:
        return _fail(str(exc))
    for snr, reason in skipped:
        print(f"hflink: warning: skipping snr {snr:g}: {reason}", file=sys.stderr)
    write_sweep_csv(rows, args.out, cfg.scenario_sha256, cfg.master_seed)
    for r in rows:
        print(f"snr {r.snr_db:6.1f}  {r.mode:<10}  {r.successes}/{r.seeds}  "
              f"success_rate {r.success_rate:.2f}", file=sys.stderr)
    return 0


def cmd_analyze(args) -> int:
    try:
        trace = load_trace(args.trace)
    except (TraceFormatError, OSError) as exc:
        return _fail(str(exc))
    key = TableKey(
        ChannelCondition(args.snr, args.doppler, args.multipath),
        args.rate,
        args.interleaver,
    )
    try:
        table = analyze_trace(trace, args.guard, key)
    except ValueError as exc:
        return _fail(str(exc))
    save_table(table, args.out)
    print(
        f"analyzed {trace.length_bits} bits: ber {table.source_ber:.3e}, "
        f"{len(table.mixed_samples)} mixed runs, {table.gap_cdf.support.size} gap lengths",
        file=sys.stderr,
    )
    return 0


def cmd_synth(args) -> int:
    try:
        params = BurstSynthParams(args.p_g2b, args.p_b2g, args.ber_bad, args.ber_good)
    except ValueError as exc:
        return _fail(str(exc))
    rng = RngStream(args.seed, "synth")
    trace = burst_synthesize(params, args.bits, rng)
    save_trace(trace, args.out)
    print(f"synthesized {args.bits} bits, ber {trace.ber:.3e}", file=sys.stderr)
    return 0


def cmd_regen(args) -> int:
    try:
        table = load_table(args.table)
    except (TableFormatError, OSError) as exc:
        return _fail(str(exc))
    rng = RngStream(args.seed, "regen")
    erracle = Erracle(table, rng)
    wall0 = time.perf_counter()
    positions = np.fromiter(
        iter(lambda: _next_below(erracle, args.bits), None), dtype=np.int64
    )
    wall = time.perf_counter() - wall0
    trace = BitErrorTrace(args.bits, positions)
    if args.out:
        save_trace(trace, args.out)
    rate = args.bits / wall if wall > 0 else float("inf")
    print(
        f"regenerated {args.bits} bits ({positions.size} errors) in {wall:.3f} s "
        f"({rate:.3g} bits/s)",
        file=sys.stderr,
    )
    return 0


def _next_below(erracle: Erracle, limit: int):
    pos = erracle.next_error()
    return pos if pos is not None and pos < limit else None


def cmd_calibrate(args) -> int:
    result = fit_table1()
    rows = []
    for rate, (target, fitted, rel) in sorted(result.residuals.items()):
        rows.append([rate, target, f"{fitted:.1f}", f"{rel:+.4f}"])
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["rate_bps", "calculated_bps", "fitted_bps", "rel_err"])
            w.writerows(rows)
    print(
        "fitted: t_preamble_s={:.3f} t_flush_s={:.3f} t_turnaround_s={:.3f} "
        "frame_overhead_bytes={} (only the preamble+flush sum is identified)".format(
            result.t_preamble_s, result.t_flush_s, result.t_turnaround_s,
            result.frame_overhead_bytes,
        ),
        file=sys.stderr,
    )
    for rate, target, fitted, rel in rows:
        print(f"  {rate:>5} bps: target {target:>5}, fit {fitted:>8}, {rel}", file=sys.stderr)
    print(f"worst |rel err| = {result.worst_abs_rel_err:.4f}", file=sys.stderr)
    if result.worst_abs_rel_err > args.tolerance:
        print(
            f"hflink: calibration residual {result.worst_abs_rel_err:.4f} exceeds "
            f"tolerance {args.tolerance}",
            file=sys.stderr,
        )
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hflink", description=__doc__)
    ap.add_argument("--version", action="version", version=f"hflink {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the scenario master seed")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="success-rate sweep over SNR points and modes")
    p.add_argument("--scenario", required=True, help="base scenario (traffic + modem + link)")
    p.add_argument("--snr", required=True, help="comma-separated SNR points, e.g. 2,5,8")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--modes", default="plain,accelerate")
    p.add_argument("--tables-dir", required=True,
                   help="directory of snr{snr}_{rate}_{interleaver}.json tables")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--jobs", type=int, default=1, help="parallel isolated runs")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("analyze", help="build an error table from a bit-error trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--guard", type=int, default=DEFAULT_GUARD_GAP_BITS,
                   help="guard gap in bits separating mixed runs")
    p.add_argument("--snr", type=float, required=True)
    p.add_argument("--doppler", type=float, default=0.0)
    p.add_argument("--multipath", type=float, default=0.0)
    p.add_argument("--rate", type=int, required=True)
    p.add_argument("--interleaver", default="long")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("synth", help="synthesize a burst-error trace (two-state chain)")
    p.add_argument("--p-g2b", type=float, required=True, dest="p_g2b")
    p.add_argument("--p-b2g", type=float, required=True, dest="p_b2g")
    p.add_argument("--ber-bad", type=float, required=True, dest="ber_bad")
    p.add_argument("--ber-good", type=float, default=0.0, dest="ber_good")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("regen", help="regenerate an error stream from a table")
    p.add_argument("--table", required=True)
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional trace output path")
    p.set_defaults(fn=cmd_regen)

    p = sub.add_parser("calibrate", help="fit modem timing against the published table")
    p.add_argument("--out", default=None, help="residual report CSV")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.set_defaults(fn=cmd_calibrate)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
