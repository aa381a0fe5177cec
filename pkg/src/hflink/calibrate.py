"""Throughput calibration against published STANAG 5066 figures.

The closed-form cycle model below is the algebraic twin of the simulator's
saturation steady state: one maximal data transmission (bounded by the
120-second rule and the selective-repeat window), a turnaround, one ack
transmission, and another turnaround.  Fitting the modem timing parameters
so this model reproduces the published calculated-throughput column pins
down the timing abstraction; the discrete-event simulator is then checked
against the same closed form.

Only the preamble+flush sum is identified by the fit (both are fixed
per-transmission time), so the reported split between them is a
convention, not a measurement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .kernel import us
from .modem import ModemParams, capacity_frames, tx_duration_us

# Published ideal-throughput calibration (bps): data rate -> calculated
# throughput of the real protocol, and the original model column for
# reference.
TABLE1_CALCULATED_BPS = {
    75: 57, 150: 113, 300: 229, 600: 456, 1200: 912, 2400: 1803,
    3200: 2543, 4800: 3717, 6400: 4536, 8000: 5476, 9600: 6202,
}
TABLE1_MODEL_BPS = {
    75: 52, 150: 115, 300: 228, 600: 465, 1200: 890, 2400: 1760,
    3200: 2597, 4800: 3812, 6400: 4711, 8000: 5641, 9600: 6380,
}

DEFAULT_TOLERANCE = 0.05


@dataclass(frozen=True)
class CyclePoint:
    rate_bps: int
    frames: int
    cycle_s: float
    goodput_bps: float


def cycle_goodput(rate_bps: int, t_preamble_s: float, t_flush_s: float, t_turnaround_s: float,
                  frame_overhead_bytes: int, frame_payload_bytes: int = 250,
                  window_frames: int = 128, max_tx_time_s: float = 120.0) -> CyclePoint:
    """Steady-state saturation goodput of one data/ack cycle, error-free."""
    p = ModemParams(rate_bps, "long", t_preamble_s, t_flush_s, t_turnaround_s)
    n = min(
        capacity_frames(max_tx_time_s, frame_payload_bytes, frame_overhead_bytes, p),
        window_frames,
    )
    if n <= 0:
        return CyclePoint(rate_bps, 0, 0.0, 0.0)
    ack_bytes = 8 + math.ceil(window_frames / 8)
    cycle_us = (
        tx_duration_us(n * frame_payload_bytes, n * frame_overhead_bytes, p)
        + tx_duration_us(ack_bytes, 0, p)
        + 2 * us(t_turnaround_s)
    )
    return CyclePoint(rate_bps, n, cycle_us / 1e6, n * frame_payload_bytes * 8 * 1e6 / cycle_us)


@dataclass
class CalibrationResult:
    t_preamble_s: float
    t_flush_s: float
    t_turnaround_s: float
    frame_overhead_bytes: int
    worst_abs_rel_err: float
    residuals: dict[int, tuple[float, float, float]]  # rate -> (target, fitted, rel_err)

    def within(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.worst_abs_rel_err <= tolerance


def _objective(t_pre: float, t_flush: float, t_t: float, ov: int, targets) -> float:
    worst = 0.0
    for rate, target in targets.items():
        g = cycle_goodput(rate, t_pre, t_flush, t_t, ov).goodput_bps
        worst = max(worst, abs(g - target) / target)
    return worst


def fit_table1(targets=None, window_frames: int = 128) -> CalibrationResult:
    """Coordinate search for (t_preamble, t_flush, frame_overhead,
    t_turnaround) minimizing the worst-case relative goodput error."""
    targets = dict(targets or TABLE1_CALCULATED_BPS)

    # coarse seeding over the (preamble+flush, turnaround, overhead) volume
    seeds = []
    for f10 in range(5, 61, 5):
        for tt10 in range(0, 31, 5):
            for ov in range(40, 61, 4):
                f = f10 / 10
                seeds.append((_objective(0.6, f - 0.6 if f > 0.6 else 0.0, tt10 / 10, ov, targets),
                              (0.6, max(f - 0.6, 0.0), tt10 / 10, ov)))
    seeds.sort(key=lambda s: s[0])
    best_err, best = seeds[0]

    # coordinate descent, shrinking step sizes
    steps = [(0.2, 0.2, 0.2, 4), (0.05, 0.05, 0.05, 1), (0.01, 0.01, 0.01, 1),
             (0.002, 0.002, 0.002, 1)]
    for d_pre, d_flush, d_tt, d_ov in steps:
        improved = True
        while improved:
            improved = False
            t_pre, t_flush, t_t, ov = best
            for axis, delta in (("pre", d_pre), ("flush", d_flush), ("tt", d_tt), ("ov", d_ov)):
                for k in range(-8, 9):
                    if k == 0:
                        continue
                    cand = [t_pre, t_flush, t_t, ov]
                    idx = ("pre", "flush", "tt", "ov").index(axis)
                    cand[idx] = cand[idx] + k * delta
                    if cand[0] < 0 or cand[1] < 0 or cand[2] < 0 or cand[3] < 0:
                        continue
                    cand[3] = int(round(cand[3]))
                    err = _objective(cand[0], cand[1], cand[2], cand[3], targets)
                    if err < best_err - 1e-12:
                        best_err, best = err, tuple(cand)
                        improved = True
            # re-anchor after a full sweep

    t_pre, t_flush, t_t, ov = best
    residuals = {}
    for rate, target in sorted(targets.items()):
        g = cycle_goodput(rate, t_pre, t_flush, t_t, int(ov), window_frames=window_frames).goodput_bps
        residuals[rate] = (float(target), g, (g - target) / target)
    return CalibrationResult(t_pre, t_flush, t_t, int(ov), best_err, residuals)
