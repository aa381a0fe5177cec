"""Simplified STANAG 5066-style data link.

Three concerns, mirrored from the real protocol stack:

* subnet interface: IP packets are cached at the source side; only frame
  descriptors (size + location) cross the simulated channel, and the cached
  packet is released at the destination once all of its frames have been
  received ("virtual" fragmentation - no payload bytes are ever copied);
* channel access: a stub - the radios are assumed already linked;
* data transfer: fragmentation bookkeeping and a half-duplex selective
  repeat ARQ with strictly alternating transmissions (data, turnaround,
  ack, turnaround).

A reverse-direction transmission always carries the link-level ack block
and may also carry that node's own data frames, so bidirectional traffic
(e.g. TCP acknowledgements) shares the same alternation.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Optional

from .kernel import Simulator, us
from .errormodel import Erracle, ErrorStatTable
from .modem import ModemParams, capacity_frames, judge_frames, plan_transmission

# rate adaptation thresholds: step down after consecutive lossy cycles,
# step up after a longer run of clean ones
ADAPT_DOWN_LOSS = 0.3
ADAPT_DOWN_CYCLES = 2
ADAPT_UP_LOSS = 0.05
ADAPT_UP_CYCLES = 4


@dataclass
class IpPacketRecord:
    packet_id: int
    length_bytes: int
    arrival_time_us: int
    source: str
    destination: str
    # virtual packet content: no payload bytes exist, so upper layers hang
    # their message descriptor here
    meta: Any = None
    released_at_us: Optional[int] = None

    def __post_init__(self):
        if self.length_bytes < 1:
            raise ValueError("packet length must be >= 1 byte")


@dataclass
class DPduDescriptor:
    packet_id: int
    offset_bytes: int
    length_bytes: int
    seq: int
    tx_count: int = 0


@dataclass
class AckReport:
    cumulative_seq: int  # highest in-order received seq, -1 if none yet
    selective_bitmap: tuple  # received flags for seqs cumulative+1..cumulative+len
    size_bytes: int


@dataclass
class LinkConfig:
    frame_payload_bytes: int = 250
    frame_overhead_bytes: int = 10
    window_frames: int = 128
    max_tx_time_s: float = 120.0
    rate_adapt: str = "off"  # off | simple
    queue_packets: int = 64

    def __post_init__(self):
        if self.window_frames < 1:
            raise ValueError("window_frames must be >= 1")
        if self.frame_payload_bytes < 1:
            raise ValueError("frame_payload_bytes must be >= 1")
        if self.rate_adapt not in ("off", "simple"):
            raise ValueError(f"rate_adapt must be off|simple, not {self.rate_adapt!r}")

    @property
    def ack_size_bytes(self) -> int:
        # modeled over-the-air ack size: fixed base plus one bit per window slot
        return 8 + math.ceil(self.window_frames / 8)


def rate_adapt_step(history, current_rate: int, ladder) -> int:
    """Apply the simple rate adaptation rule to the loss history since the
    last rate change; returns the (possibly unchanged) data rate."""
    ladder = sorted(ladder)
    idx = ladder.index(current_rate)
    if len(history) >= ADAPT_DOWN_CYCLES and all(
        l > ADAPT_DOWN_LOSS for l in history[-ADAPT_DOWN_CYCLES:]
    ):
        return ladder[max(idx - 1, 0)]
    if len(history) >= ADAPT_UP_CYCLES and all(
        l < ADAPT_UP_LOSS for l in history[-ADAPT_UP_CYCLES:]
    ):
        return ladder[min(idx + 1, len(ladder) - 1)]
    return current_rate


class LinkEndpoint:
    """One side of the link: source-side packet cache plus ARQ sender and
    receiver state machines."""

    def __init__(self, name: str, cfg: LinkConfig):
        self.name = name
        self.cfg = cfg
        self.peer: "LinkEndpoint" = None  # wired by HalfDuplexLink

        # sender side
        self.cache: dict[int, IpPacketRecord] = {}  # insertion order = submission order
        self.pending: deque[DPduDescriptor] = deque()  # never transmitted
        self.outstanding: dict[int, DPduDescriptor] = {}  # transmitted, unacked
        self.flagged: set[int] = set()  # seqs flagged for retransmission
        self.unacked_frames: dict[int, int] = {}  # packet_id -> frames not yet acked
        self.next_seq = 0
        self.last_tx_seqs: list[int] = []
        self.loss_history: list[float] = []

        # receiver side
        self.rcv_cum = -1
        self.rcv_extra: set[int] = set()
        self.frames_needed: dict[int, int] = {}
        self.frames_got: dict[int, int] = {}
        self.peer_packets: dict[int, IpPacketRecord] = {}
        self.release_order: deque[int] = deque()
        self.complete: set[int] = set()
        self.owes_ack = False

        # callbacks
        self.on_deliver: Optional[Callable[[IpPacketRecord, int], None]] = None
        self.on_retire: Optional[Callable[[IpPacketRecord, int], None]] = None

        # counters
        self.submitted_packets = 0
        self.submitted_bytes = 0
        self.dropped_packets = 0
        self.dropped_bytes = 0
        self.released_packets = 0
        self.released_bytes = 0
        self.released_ids: list[int] = []
        self.frames_rx = 0
        self.frames_rx_corrupted = 0
        self.frames_tx = 0
        self.frames_retx = 0

    # -- sender side --------------------------------------------------------

    def submit(self, packet: IpPacketRecord) -> bool:
        """Cache a packet and fragment it; False means tail-dropped."""
        if len(self.cache) >= self.cfg.queue_packets:
            self.dropped_packets += 1
            self.dropped_bytes += packet.length_bytes
            return False
        self.submitted_packets += 1
        self.submitted_bytes += packet.length_bytes
        self.cache[packet.packet_id] = packet
        frags = self.fragment(packet)
        self.pending.extend(frags)
        self.unacked_frames[packet.packet_id] = len(frags)
        self.peer.register_incoming(packet, len(frags))
        return True

    def fragment(self, packet: IpPacketRecord) -> list[DPduDescriptor]:
        size = self.cfg.frame_payload_bytes
        frags = []
        for off in range(0, packet.length_bytes, size):
            frags.append(
                DPduDescriptor(
                    packet.packet_id, off, min(size, packet.length_bytes - off), self.next_seq
                )
            )
            self.next_seq += 1
        return frags

    def window_base(self) -> int:
        return min(self.outstanding) if self.outstanding else self.next_seq

    def has_traffic(self) -> bool:
        return bool(self.pending or self.flagged or self.owes_ack)

    def select_frames(self, max_frames: int) -> list[DPduDescriptor]:
        """Retransmissions first (lowest seq first), then new frames in
        order, bounded by the window and max_frames."""
        frames = []
        for seq in sorted(self.flagged):
            if len(frames) >= max_frames:
                return frames
            frames.append(self.outstanding[seq])
        limit = self.window_base() + self.cfg.window_frames
        while len(frames) < max_frames and self.pending and self.pending[0].seq < limit:
            frames.append(self.pending.popleft())
        return frames

    def mark_transmitted(self, frames: list[DPduDescriptor]) -> None:
        self.last_tx_seqs = [f.seq for f in frames]
        for f in frames:
            f.tx_count += 1
            self.frames_tx += 1
            if f.tx_count > 1:
                self.frames_retx += 1
            self.outstanding[f.seq] = f
            self.flagged.discard(f.seq)

    def process_ack(self, report: AckReport, now_us: int) -> None:
        acked = [s for s in self.outstanding if s <= report.cumulative_seq]
        for i, got in enumerate(report.selective_bitmap):
            s = report.cumulative_seq + 1 + i
            if got and s in self.outstanding:
                acked.append(s)
        for seq in sorted(acked):
            frame = self.outstanding.pop(seq)
            self.flagged.discard(seq)
            pid = frame.packet_id
            self.unacked_frames[pid] -= 1
            if self.unacked_frames[pid] == 0:
                del self.unacked_frames[pid]
                packet = self.cache.pop(pid)
                if self.on_retire is not None:
                    self.on_retire(packet, now_us)
        self._finish_cycle(still_unacked=set(self.outstanding))
        # everything sent but not acknowledged goes around again
        self.flagged = set(self.outstanding)

    def on_ack_corrupted(self) -> None:
        """A corrupted ack carries no information: retransmit everything
        outstanding next cycle."""
        self._finish_cycle(still_unacked=set(self.outstanding), unknown=True)
        self.flagged = set(self.outstanding)

    def _finish_cycle(self, still_unacked: set, unknown: bool = False) -> None:
        if not self.last_tx_seqs:
            return
        if unknown:
            self.loss_history.append(1.0)
        else:
            lost = sum(1 for s in self.last_tx_seqs if s in still_unacked)
            self.loss_history.append(lost / len(self.last_tx_seqs))
        self.last_tx_seqs = []

    # -- receiver side ------------------------------------------------------

    def register_incoming(self, packet: IpPacketRecord, n_frames: int) -> None:
        """Virtual interface: the whole packet is cached here at submit time;
        it is released upward once the data link declares all its frames
        delivered."""
        self.peer_packets[packet.packet_id] = packet
        self.frames_needed[packet.packet_id] = n_frames
        self.frames_got[packet.packet_id] = 0
        self.release_order.append(packet.packet_id)

    def receive_frames(self, frames, corrupted_flags, now_us: int) -> int:
        corrupted = 0
        for frame, bad in zip(frames, corrupted_flags):
            self.frames_rx += 1
            if bad:
                self.frames_rx_corrupted += 1
                corrupted += 1
                continue
            seq = frame.seq
            if seq <= self.rcv_cum or seq in self.rcv_extra:
                continue  # duplicate of an already-received frame
            if seq == self.rcv_cum + 1:
                self.rcv_cum = seq
                while self.rcv_cum + 1 in self.rcv_extra:
                    self.rcv_extra.discard(self.rcv_cum + 1)
                    self.rcv_cum += 1
            else:
                self.rcv_extra.add(seq)
            pid = frame.packet_id
            self.frames_got[pid] += 1
            if self.frames_got[pid] == self.frames_needed[pid]:
                self.complete.add(pid)
        self._release_ready(now_us)
        return corrupted

    def _release_ready(self, now_us: int) -> None:
        # released packet order must equal the submission order
        while self.release_order and self.release_order[0] in self.complete:
            pid = self.release_order.popleft()
            self.complete.discard(pid)
            del self.frames_needed[pid]
            del self.frames_got[pid]
            packet = self.peer_packets.pop(pid)
            packet.released_at_us = now_us
            self.released_packets += 1
            self.released_bytes += packet.length_bytes
            self.released_ids.append(pid)
            if self.on_deliver is not None:
                self.on_deliver(packet, now_us)

    def build_ack_report(self) -> AckReport:
        cum = self.rcv_cum
        top = max(self.rcv_extra) if self.rcv_extra else cum
        n = min(top - cum, self.cfg.window_frames)
        bitmap = tuple((cum + 1 + i) in self.rcv_extra for i in range(n))
        return AckReport(cum, bitmap, self.cfg.ack_size_bytes)

    def pending_bytes(self) -> int:
        """Submitted but not yet released at the destination."""
        return sum(p.length_bytes for p in self.cache.values() if p.released_at_us is None)


class HalfDuplexLink:
    """Two endpoints alternating over one Erracle-driven channel.

    Every over-the-air transmission consumes the error stream of the active
    data rate in order, so adjacent transmissions occupy disjoint,
    consecutive bit ranges (channel reciprocity: both directions share the
    stream, which half-duplex operation makes well defined).
    """

    def __init__(self, sim: Simulator, cfg: LinkConfig, params: ModemParams,
                 tables: dict[int, ErrorStatTable], name_a: str = "A", name_b: str = "B"):
        if params.data_rate_bps not in tables:
            raise ValueError(f"no error table for configured rate {params.data_rate_bps}")
        self.sim = sim
        self.cfg = cfg
        self.params = params
        self.rate_ladder = tuple(sorted(tables))
        self.erracles = {r: Erracle(tables[r], sim.rng(f"erracle/{r}")) for r in self.rate_ladder}
        self.bit_cursors = {r: 0 for r in self.rate_ladder}
        self.a = LinkEndpoint(name_a, cfg)
        self.b = LinkEndpoint(name_b, cfg)
        self.a.peer = self.b
        self.b.peer = self.a
        self.by_name = {name_a: self.a, name_b: self.b}
        self.linked = False
        self.establish_count = 0
        self.idle = True
        self._busy = False
        self._kick = None
        self.cycles = 0
        self.acks_sent = 0
        self.acks_corrupted = 0
        self.rate_changes: list[tuple[int, int]] = []
        # per-transmission log: (time_us, direction, frames, retransmissions, corrupted, rate)
        self.log_rows: list[tuple[int, str, int, int, int, int]] = []

    # -- channel access (stub) ----------------------------------------------

    def establish(self) -> None:
        """Channel access is a stub: the radios are assumed to be already
        linked on a common frequency, so this just flips the flag (and
        contributes nothing to round-trip time)."""
        self.establish_count += 1
        self.linked = True
        for ep in (self.a, self.b):
            if ep.has_traffic():
                self._maybe_kick(ep)
                break

    # -- traffic entry points -------------------------------------------------

    def submit(self, node: str, packet: IpPacketRecord) -> bool:
        ep = self.by_name[node]
        ok = ep.submit(packet)
        if ok:
            self._maybe_kick(ep)
        return ok

    def queue_free(self, node: str) -> int:
        ep = self.by_name[node]
        return self.cfg.queue_packets - len(ep.cache)

    def _maybe_kick(self, ep: LinkEndpoint) -> None:
        # Defer the first transmission to an immediate event so that a batch
        # of same-time submissions forms one full transmission.
        if self.linked and self.idle and self._kick is None:
            self.idle = False
            self._kick = self.sim.schedule_in(
                0, f"link/start/{ep.name}", partial(self._begin_tx, ep)
            )

    # -- alternation ----------------------------------------------------------

    def _begin_tx(self, ep: LinkEndpoint) -> None:
        self._kick = None
        ack_report = ep.build_ack_report() if ep.owes_ack else None
        ack_bytes = ack_report.size_bytes if ack_report else 0
        cap = capacity_frames(
            self.cfg.max_tx_time_s,
            self.cfg.frame_payload_bytes,
            self.cfg.frame_overhead_bytes,
            self.params,
            reserved_bytes=ack_bytes,
        )
        frames = ep.select_frames(min(cap, self.cfg.window_frames))
        if not frames and ack_report is None:
            if ep.peer.has_traffic():
                # zero-frame plan: the token passes after one turnaround
                self.sim.schedule_in(
                    self.params.turnaround_us,
                    f"link/token/{ep.peer.name}",
                    partial(self._begin_tx, ep.peer),
                )
            else:
                self.idle = True
            return
        assert not self._busy, "half-duplex exclusivity violated"
        self._busy = True
        self.idle = False
        ep.owes_ack = False
        ep.mark_transmitted(frames)
        plan = plan_transmission(
            frames,
            [f.length_bytes for f in frames],
            self.cfg.frame_overhead_bytes,
            ack_bytes,
            self.params,
        )
        if ack_report is not None:
            self.acks_sent += 1
        self.sim.schedule_in(
            plan.duration_us,
            f"link/tx-end/{ep.name}",
            partial(self._end_tx, ep, plan, ack_report, self.params.data_rate_bps),
        )

    def _end_tx(self, ep: LinkEndpoint, plan, ack_report, rate: int) -> None:
        self._busy = False
        peer = ep.peer
        now = self.sim.now()
        erracle = self.erracles[rate]
        start = self.bit_cursors[rate]
        ack_bad, flags = judge_frames(plan, erracle, start)
        self.bit_cursors[rate] = start + plan.total_bits

        if ack_report is not None:
            if ack_bad:
                self.acks_corrupted += 1
                peer.on_ack_corrupted()
            else:
                peer.process_ack(ack_report, now)
        corrupted = peer.receive_frames(plan.frames, flags, now) if plan.frames else 0
        if plan.frames:
            peer.owes_ack = True
        retx = sum(1 for f in plan.frames if f.tx_count > 1)
        self.cycles += 1
        self.log_rows.append((now, ep.name, len(plan.frames), retx, corrupted, rate))

        if self.cfg.rate_adapt == "simple" and ack_report is not None:
            self._adapt_rate(peer)

        self.sim.schedule_in(
            self.params.turnaround_us, f"link/token/{peer.name}", partial(self._begin_tx, peer)
        )

    def _adapt_rate(self, ep: LinkEndpoint) -> None:
        current = self.params.data_rate_bps
        new_rate = rate_adapt_step(ep.loss_history, current, self.rate_ladder)
        if new_rate != current:
            ep.loss_history.clear()
            self.params = self.params.at_rate(new_rate)
            self.rate_changes.append((self.sim.now(), new_rate))

    # -- accounting -----------------------------------------------------------

    def audit_conservation(self) -> None:
        """Delivered + still-queued + dropped must equal submitted, per
        direction, at any instant."""
        for src, dst in ((self.a, self.b), (self.b, self.a)):
            lhs = dst.released_bytes + src.dropped_bytes + src.pending_bytes()
            if lhs != src.submitted_bytes:
                raise AssertionError(
                    f"byte conservation violated {src.name}->{dst.name}: "
                    f"{lhs} != submitted {src.submitted_bytes}"
                )

    def frames_received_total(self) -> int:
        return self.a.frames_rx + self.b.frames_rx

    def frames_corrupted_total(self) -> int:
        return self.a.frames_rx_corrupted + self.b.frames_rx_corrupted

    def packet_error_rate(self) -> float:
        total = self.frames_received_total()
        return self.frames_corrupted_total() / total if total else 0.0

    def delivered_payload_bytes(self) -> int:
        return self.a.released_bytes + self.b.released_bytes
