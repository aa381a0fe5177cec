"""Empirical burst-error modeling.

An offline bit-error trace (one bit per simulated modem bit, 1 = error) is
analyzed into a table of run statistics: the cumulative distribution of
error-free gap lengths, plus the (span, error count) of each error cluster
("mixed run").  The streaming generator replays statistically equivalent
error sequences from such a table without ever materializing per-bit data,
which is what makes error generation fast enough for network simulation.

Because real modem traces are not available, a two-state burst synthesizer
(good/bad Markov chain) stands in as the trace source.

Trace file format: 8-byte little-endian unsigned bit count, then the bits
packed 8 per byte, least-significant bit first within each byte.

Table file format: JSON with a version field; see TABLE_FORMAT below.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .kernel import RngStream

DEFAULT_GUARD_GAP_BITS = 128

TABLE_FORMAT = "hflink-error-table"
TABLE_VERSION = 1

# Interior errors of a mixed run are re-drawn until every internal
# separation respects the guard gap; after this many failures we fall back
# to even spacing, which always satisfies the constraint for samples that
# came out of analysis.
PLACEMENT_MAX_TRIES = 100


class TraceFormatError(ValueError):
    """A trace file is malformed or truncated."""


class TableFormatError(ValueError):
    """A table document is malformed, truncated, or violates invariants."""


@dataclass(frozen=True)
class ChannelCondition:
    """Channel condition key.  Values are rounded to 0.1 so that keys
    compare and hash stably."""

    snr_db: float
    doppler_hz: float
    multipath_ms: float

    def __post_init__(self):
        object.__setattr__(self, "snr_db", round(float(self.snr_db), 1))
        object.__setattr__(self, "doppler_hz", round(float(self.doppler_hz), 1))
        object.__setattr__(self, "multipath_ms", round(float(self.multipath_ms), 1))
        if self.doppler_hz < 0 or self.multipath_ms < 0:
            raise ValueError("doppler_hz and multipath_ms must be >= 0")


@dataclass(frozen=True)
class TableKey:
    condition: ChannelCondition
    data_rate_bps: int
    interleaver: str


@dataclass
class BitErrorTrace:
    length_bits: int
    error_positions: np.ndarray  # strictly increasing int64 indices

    def __post_init__(self):
        self.error_positions = np.asarray(self.error_positions, dtype=np.int64)
        if self.length_bits < 0:
            raise ValueError("trace length must be >= 0")
        e = self.error_positions
        if e.size:
            if e[0] < 0 or e[-1] >= self.length_bits:
                raise ValueError("error positions out of range")
            if not np.all(np.diff(e) > 0):
                raise ValueError("error positions must be strictly increasing")

    @property
    def ber(self) -> float:
        return self.error_positions.size / self.length_bits if self.length_bits else 0.0


@dataclass
class RunLengthCdf:
    """Empirical CDF over run lengths: sorted distinct lengths and matching
    cumulative probabilities (final value exactly 1.0)."""

    support: np.ndarray
    cum_prob: np.ndarray

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.int64)
        self.cum_prob = np.asarray(self.cum_prob, dtype=np.float64)
        if self.support.size != self.cum_prob.size:
            raise ValueError("support and cum_prob must have equal length")
        if self.support.size:
            if self.support[0] < 1 or not np.all(np.diff(self.support) > 0):
                raise ValueError("support must be sorted, distinct, >= 1")
            if not np.all(np.diff(self.cum_prob) > 0):
                raise ValueError("cum_prob must be strictly increasing")
            if self.cum_prob[-1] != 1.0:
                raise ValueError("cum_prob must end at exactly 1.0")

    @classmethod
    def from_lengths(cls, lengths) -> "RunLengthCdf":
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.size == 0:
            return cls(np.empty(0, np.int64), np.empty(0, np.float64))
        support, counts = np.unique(lengths, return_counts=True)
        cum = np.cumsum(counts) / lengths.size
        cum[-1] = 1.0
        return cls(support, cum)

    def sample(self, u: float) -> int:
        """Inverse-transform sample for u in [0, 1).  Empty CDF yields 0."""
        if self.support.size == 0:
            return 0
        idx = int(np.searchsorted(self.cum_prob, u, side="left"))
        return int(self.support[min(idx, self.support.size - 1)])


@dataclass(frozen=True)
class MixedRunSample:
    """One error cluster: distance from first to last error inclusive, and
    how many error bits the cluster contains."""

    span_bits: int
    error_count: int

    def __post_init__(self):
        if not 1 <= self.error_count <= self.span_bits:
            raise ValueError("need 1 <= error_count <= span_bits")
        if self.error_count == 1 and self.span_bits != 1:
            raise ValueError("a single error spans exactly 1 bit")
        if self.error_count >= 2 and self.span_bits < 2:
            raise ValueError("multiple errors need span >= 2")


@dataclass
class ErrorStatTable:
    key: TableKey
    gap_cdf: RunLengthCdf
    mixed_samples: list[MixedRunSample]
    guard_gap_bits: int
    source_ber: float
    source_length_bits: int

    def __post_init__(self):
        if not 0.0 <= self.source_ber <= 1.0:
            raise ValueError("source_ber must be in [0, 1]")
        if self.guard_gap_bits < 1:
            raise ValueError("guard_gap_bits must be >= 1")
        for s in self.mixed_samples:
            # zeros between adjacent errors inside one run stay below the
            # guard gap, so the widest possible span is bounded:
            if s.span_bits > s.error_count + (s.error_count - 1) * (self.guard_gap_bits - 1):
                raise ValueError(f"sample {s} inconsistent with guard gap {self.guard_gap_bits}")
        if (self.source_ber > 0) != bool(self.mixed_samples):
            raise ValueError("mixed_samples must be non-empty iff the source trace had errors")


def analyze_trace(trace: BitErrorTrace, guard_gap_bits: int, key: TableKey) -> ErrorStatTable:
    """Partition a trace into error-free gaps and mixed runs.

    Two consecutive errors belong to the same mixed run iff the count of
    zeros between them is < guard_gap_bits.  Each mixed run spans first to
    last error inclusive and contributes one (span, count) sample; the zero
    runs between mixed runs, plus any leading/trailing zero runs, populate
    the gap CDF.
    """
    if trace.length_bits < 1:
        raise ValueError("cannot analyze an empty trace")
    if guard_gap_bits < 1:
        raise ValueError("guard_gap_bits must be >= 1")

    e = trace.error_positions
    if e.size == 0:
        gap_cdf = RunLengthCdf.from_lengths([trace.length_bits])
        return ErrorStatTable(key, gap_cdf, [], guard_gap_bits, 0.0, trace.length_bits)

    zeros_between = np.diff(e) - 1
    brk = np.flatnonzero(zeros_between >= guard_gap_bits)
    starts = np.concatenate(([0], brk + 1))
    ends = np.concatenate((brk, [e.size - 1]))
    spans = e[ends] - e[starts] + 1
    counts = ends - starts + 1
    samples = [MixedRunSample(int(s), int(c)) for s, c in zip(spans, counts)]

    gaps = list(zeros_between[brk])
    lead = int(e[0])
    trail = int(trace.length_bits - 1 - e[-1])
    if lead >= 1:
        gaps.insert(0, lead)
    if trail >= 1:
        gaps.append(trail)
    gap_cdf = RunLengthCdf.from_lengths(gaps)

    ber = e.size / trace.length_bits
    return ErrorStatTable(key, gap_cdf, samples, guard_gap_bits, ber, trace.length_bits)


@dataclass(frozen=True)
class BurstSynthParams:
    """Two-state (good/bad) per-bit Markov chain parameters."""

    p_g2b: float
    p_b2g: float
    ber_bad: float
    ber_good: float = 0.0

    def __post_init__(self):
        for name in ("p_g2b", "p_b2g", "ber_bad", "ber_good"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def stationary_ber(self) -> float:
        """Closed-form long-run bit error ratio of the chain."""
        denom = self.p_g2b + self.p_b2g
        if denom == 0.0:
            return self.ber_good  # chain never leaves the good start state
        p_bad = self.p_g2b / denom
        return p_bad * self.ber_bad + (1.0 - p_bad) * self.ber_good


def burst_synthesize(params: BurstSynthParams, n_bits: int, rng: RngStream) -> BitErrorTrace:
    """Simulate the two-state chain for n_bits, starting in the good state.

    Each bit is emitted with the current state's error probability, then the
    state transition is evaluated.  Sojourn lengths are geometric, so the
    chain is advanced a whole sojourn at a time; this is distributionally
    identical to stepping bit by bit but runs at array speed.
    """
    if n_bits < 1:
        raise ValueError("n_bits must be >= 1")
    gen = rng.gen
    chunks = []
    pos = 0
    in_bad = False
    while pos < n_bits:
        p_leave = params.p_b2g if in_bad else params.p_g2b
        if p_leave <= 0.0:
            run = n_bits - pos
        else:
            run = min(int(gen.geometric(p_leave)), n_bits - pos)
        ber = params.ber_bad if in_bad else params.ber_good
        if ber >= 1.0:
            chunks.append(np.arange(pos, pos + run, dtype=np.int64))
        elif ber > 0.0:
            hits = np.flatnonzero(gen.random(run) < ber)
            if hits.size:
                chunks.append(hits.astype(np.int64) + pos)
        pos += run
        in_bad = not in_bad
    positions = np.concatenate(chunks) if chunks else np.empty(0, np.int64)
    return BitErrorTrace(n_bits, positions)


def place_mixed_run(sample: MixedRunSample, guard_gap_bits: int, rng: RngStream) -> list[int]:
    """Bit offsets (within the span) of a regenerated mixed run's errors.

    First and last bits are always errors.  Interior errors are drawn
    uniformly without replacement, rejected until every internal separation
    stays below the guard gap, with an even-spacing fallback.
    """
    s, c = sample.span_bits, sample.error_count
    if c == 1:
        return [0]
    if c == 2:
        return [0, s - 1]
    need = c - 2
    for _ in range(PLACEMENT_MAX_TRIES):
        interior = np.sort(rng.gen.choice(s - 2, size=need, replace=False)) + 1
        offsets = [0, *interior.tolist(), s - 1]
        if max(b - a for a, b in zip(offsets, offsets[1:])) <= guard_gap_bits:
            return offsets
    return [round(i * (s - 1) / (c - 1)) for i in range(c)]


class Erracle:
    """Streaming regenerator of error positions from an ErrorStatTable.

    Alternates gap draws (inverse-transform on the gap CDF) with mixed-run
    draws (uniform over the stored samples), never touching per-bit data, so
    long error-free stretches are skipped in O(1).
    """

    def __init__(self, table: ErrorStatTable, rng: RngStream):
        self.table = table
        self.rng = rng
        self._pending: list[int] = []
        self._pending_idx = 0
        self._cursor = 0  # first bit position not yet covered by generated runs
        self._query_floor = 0
        self.exhausted = not table.mixed_samples

    def _generate_run(self) -> None:
        gap = self.table.gap_cdf.sample(self.rng.random())
        first = self._cursor + gap
        samples = self.table.mixed_samples
        sample = samples[self.rng.integers(0, len(samples))] if len(samples) > 1 else samples[0]
        offsets = place_mixed_run(sample, self.table.guard_gap_bits, self.rng)
        if self._pending_idx:
            del self._pending[: self._pending_idx]
            self._pending_idx = 0
        self._pending.extend(first + o for o in offsets)
        self._cursor = first + sample.span_bits

    def next_error(self):
        """Absolute bit position of the next error, or None if the table
        came from an error-free trace."""
        if self.exhausted:
            return None
        if self._pending_idx >= len(self._pending):
            self._generate_run()
        pos = self._pending[self._pending_idx]
        self._pending_idx += 1
        return pos

    def errors_in_span(self, from_bit: int, to_bit: int) -> list[int]:
        """Error positions p with from_bit <= p < to_bit.

        Spans must be queried in non-decreasing, non-overlapping order (the
        stream is consumed as it is read); positions skipped over are gone.
        """
        if from_bit > to_bit:
            raise ValueError(f"span [{from_bit}, {to_bit}) is inverted")
        if from_bit < self._query_floor:
            raise RuntimeError(
                f"out-of-order span query: [{from_bit}, {to_bit}) begins before "
                f"previous query end {self._query_floor}"
            )
        self._query_floor = to_bit
        if self.exhausted:
            return []
        while self._cursor < to_bit:
            self._generate_run()
        out = []
        i = self._pending_idx
        pending = self._pending
        while i < len(pending) and pending[i] < to_bit:
            if pending[i] >= from_bit:
                out.append(pending[i])
            i += 1
        self._pending_idx = i
        return out


# ---------------------------------------------------------------------------
# File formats


def save_trace(trace: BitErrorTrace, path) -> None:
    bits = np.zeros(trace.length_bits, dtype=np.uint8)
    bits[trace.error_positions] = 1
    packed = np.packbits(bits, bitorder="little")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", trace.length_bits))
        f.write(packed.tobytes())


def load_trace(path) -> BitErrorTrace:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise TraceFormatError(f"{path}: truncated header")
        (length_bits,) = struct.unpack("<Q", header)
        payload = f.read()
    expected = (length_bits + 7) // 8
    if len(payload) != expected:
        raise TraceFormatError(
            f"{path}: expected {expected} payload bytes for {length_bits} bits, got {len(payload)}"
        )
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=length_bits, bitorder="little")
    return BitErrorTrace(int(length_bits), np.flatnonzero(bits).astype(np.int64))


def table_to_dict(table: ErrorStatTable) -> dict:
    return {
        "format": TABLE_FORMAT,
        "version": TABLE_VERSION,
        "key": {
            "snr_db": table.key.condition.snr_db,
            "doppler_hz": table.key.condition.doppler_hz,
            "multipath_ms": table.key.condition.multipath_ms,
            "data_rate_bps": table.key.data_rate_bps,
            "interleaver": table.key.interleaver,
        },
        "guard_gap_bits": table.guard_gap_bits,
        "source_ber": table.source_ber,
        "source_length_bits": table.source_length_bits,
        "gap_cdf": {
            "support": table.gap_cdf.support.tolist(),
            "cum_prob": table.gap_cdf.cum_prob.tolist(),
        },
        "mixed_samples": [[s.span_bits, s.error_count] for s in table.mixed_samples],
    }


def table_from_dict(doc: dict) -> ErrorStatTable:
    try:
        if doc.get("format") != TABLE_FORMAT:
            raise TableFormatError(f"not an error table document: format={doc.get('format')!r}")
        if doc.get("version") != TABLE_VERSION:
            raise TableFormatError(
                f"unsupported table version {doc.get('version')!r} (expected {TABLE_VERSION})"
            )
        k = doc["key"]
        key = TableKey(
            ChannelCondition(k["snr_db"], k["doppler_hz"], k["multipath_ms"]),
            int(k["data_rate_bps"]),
            str(k["interleaver"]),
        )
        gap = doc["gap_cdf"]
        table = ErrorStatTable(
            key=key,
            gap_cdf=RunLengthCdf(gap["support"], gap["cum_prob"]),
            mixed_samples=[MixedRunSample(int(s), int(c)) for s, c in doc["mixed_samples"]],
            guard_gap_bits=int(doc["guard_gap_bits"]),
            source_ber=float(doc["source_ber"]),
            source_length_bits=int(doc["source_length_bits"]),
        )
    except TableFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise TableFormatError(f"invalid table document: {exc}") from exc
    return table


def save_table(table: ErrorStatTable, path) -> None:
    with open(path, "w") as f:
        json.dump(table_to_dict(table), f, indent=1)
        f.write("\n")


def load_table(path) -> ErrorStatTable:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise TableFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise TableFormatError(f"{path}: table document must be a JSON object")
    try:
        return table_from_dict(doc)
    except TableFormatError as exc:
        raise TableFormatError(f"{path}: {exc}") from exc
