"""Miniature TCP, traffic sources, and the TCP acceleration proxy.

The TCP model keeps only the dynamics that matter over a long-latency,
high-loss bearer: slow start / congestion avoidance, RTO estimation with
exponential backoff, and transfer abort after too many consecutive
timeouts.  Segments are virtual (byte ranges, no payload copies).

Three traffic modes plug into the data link:

* plain      - TCP end to end across the link, acks travel back over the air;
* saturation - no transport at all, the link queue is kept full (the
               peak-goodput benchmark the other modes are compared against);
* accelerate - a proxy terminates TCP next to the origin, acknowledges data
               locally (aggregated), relays payload over the link with
               backpressure, and a far-side peer re-delivers to the true
               destination.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

from .kernel import Simulator, us
from .s5066 import HalfDuplexLink, IpPacketRecord


@dataclass
class TcpConfig:
    mss: int = 1460
    header_bytes: int = 40
    init_cwnd_segments: int = 1
    init_ssthresh_bytes: int = 65535
    adv_window_bytes: int = 65535
    rto_initial_s: float = 1.0
    rto_min_s: float = 1.0
    rto_max_s: float = 240.0
    max_retries: int = 15


@dataclass
class TcpConnState:
    """Sender-side congestion state, separated from the event plumbing so
    the update rules can be stepped directly in tests."""

    mss: int
    cwnd: int
    ssthresh: int
    snd_una: int = 0
    snd_nxt: int = 0
    srtt: Optional[float] = None
    rttvar: Optional[float] = None
    rto: float = 1.0
    retries: int = 0

    def flight(self) -> int:
        return self.snd_nxt - self.snd_una


def tcp_emit_segments(state: TcpConnState, size_bytes: int, adv_window: int) -> list[tuple[int, int]]:
    """Byte ranges to put on the wire now: fill min(cwnd, advertised window)
    with unsent bytes, in segments of at most one MSS."""
    out = []
    limit = min(state.cwnd, adv_window)
    while state.snd_nxt < size_bytes and state.flight() + state.mss <= limit:
        end = min(state.snd_nxt + state.mss, size_bytes)
        out.append((state.snd_nxt, end))
        state.snd_nxt = end
    return out


def tcp_on_ack(state: TcpConnState, ack_byte: int, rtt_sample_s: Optional[float],
               cfg: TcpConfig) -> int:
    """Advance snd_una; grow cwnd; fold in an RTT sample if one was taken.
    Returns the number of newly acknowledged bytes."""
    acked = ack_byte - state.snd_una
    if acked <= 0:
        return 0
    state.snd_una = ack_byte
    state.retries = 0
    if state.cwnd < state.ssthresh:
        state.cwnd += min(acked, state.mss)  # slow start: doubles per RTT
    else:
        state.cwnd += max(state.mss * state.mss // state.cwnd, 1)
    if rtt_sample_s is not None:
        if state.srtt is None:
            state.srtt = rtt_sample_s
            state.rttvar = rtt_sample_s / 2
        else:
            state.rttvar = 0.75 * state.rttvar + 0.25 * abs(state.srtt - rtt_sample_s)
            state.srtt = 0.875 * state.srtt + 0.125 * rtt_sample_s
        state.rto = min(max(state.srtt + 4 * state.rttvar, cfg.rto_min_s), cfg.rto_max_s)
    return acked


def tcp_on_timeout(state: TcpConnState, cfg: TcpConfig) -> None:
    """Multiplicative decrease plus exponential RTO backoff."""
    state.ssthresh = max(state.flight() // 2, 2 * state.mss)
    state.cwnd = state.mss
    state.rto = min(state.rto * 2, cfg.rto_max_s)
    state.retries += 1


class TcpSender:
    """Transfers size_bytes to a peer reached through submit_fn.

    submit_fn(length_bytes, meta) carries one virtual packet toward the
    peer; packets coming back arrive via on_packet(meta).
    """

    def __init__(self, sim: Simulator, name: str, size_bytes: int, cfg: TcpConfig,
                 submit_fn: Callable[[int, dict], None],
                 on_abort: Optional[Callable[[], None]] = None):
        self.sim = sim
        self.name = name
        self.size = size_bytes
        self.cfg = cfg
        self.submit = submit_fn
        self.on_abort = on_abort
        self.state = TcpConnState(
            mss=cfg.mss,
            cwnd=cfg.init_cwnd_segments * cfg.mss,
            ssthresh=cfg.init_ssthresh_bytes,
            rto=cfg.rto_initial_s,
        )
        self.established = False
        self.aborted = False
        self.done = False
        self.bytes_retx = 0
        self._timer = None
        # Karn: time one never-retransmitted segment at a time
        self._timed_end: Optional[int] = None
        self._timed_sent_us = 0

    def start(self) -> None:
        self._send_syn(retx=False)

    def _send_syn(self, retx: bool) -> None:
        if not retx:
            self._timed_end = 0  # times the handshake
            self._timed_sent_us = self.sim.now()
        self.submit(self.cfg.header_bytes, {"kind": "syn"})
        self._arm_timer()

    def on_packet(self, meta: dict) -> None:
        if self.done or self.aborted:
            return
        kind = meta["kind"]
        if kind == "synack":
            if not self.established:
                self.established = True
                if self._timed_end == 0:
                    self._take_rtt_sample()
                self.state.retries = 0
                self._pump()
        elif kind == "ack":
            self._on_ack(meta["ack"])

    def _take_rtt_sample(self) -> Optional[float]:
        sample = (self.sim.now() - self._timed_sent_us) / 1_000_000
        self._timed_end = None
        st = self.state
        if st.srtt is None:
            st.srtt = sample
            st.rttvar = sample / 2
        else:
            st.rttvar = 0.75 * st.rttvar + 0.25 * abs(st.srtt - sample)
            st.srtt = 0.875 * st.srtt + 0.125 * sample
        st.rto = min(max(st.srtt + 4 * st.rttvar, self.cfg.rto_min_s), self.cfg.rto_max_s)
        return sample

    def _on_ack(self, ack_byte: int) -> None:
        st = self.state
        if ack_byte <= st.snd_una:
            return
        if self._timed_end is not None and self._timed_end > 0 and ack_byte >= self._timed_end:
            self._take_rtt_sample()
        tcp_on_ack(st, ack_byte, None, self.cfg)
        if st.snd_una >= self.size:
            self.done = True
            self._cancel_timer()
            return
        self._pump()

    def _pump(self) -> None:
        st = self.state
        for start, end in tcp_emit_segments(st, self.size, self.cfg.adv_window_bytes):
            if self._timed_end is None:
                self._timed_end = end
                self._timed_sent_us = self.sim.now()
            self.submit(self.cfg.header_bytes + (end - start),
                        {"kind": "data", "start": start, "end": end})
        self._arm_timer()

    def _arm_timer(self) -> None:
        self._cancel_timer()
        self._timer = self.sim.schedule_in(
            us(self.state.rto), f"tcp/{self.name}/rto", self._on_timeout
        )

    def _cancel_timer(self) -> None:
        if self._timer is not None:
            self.sim.cancel(self._timer)
            self._timer = None

    def _on_timeout(self) -> None:
        self._timer = None
        if self.done or self.aborted:
            return
        st = self.state
        tcp_on_timeout(st, self.cfg)
        if st.retries > self.cfg.max_retries:
            self.aborted = True
            self._cancel_timer()
            if self.on_abort is not None:
                self.on_abort()
            return
        self._timed_end = None  # Karn: no sample across a retransmission
        if not self.established:
            self._send_syn(retx=True)
            return
        if st.snd_nxt == st.snd_una:
            self._pump()
            return
        start = st.snd_una
        end = min(start + st.mss, st.snd_nxt)
        self.bytes_retx += end - start
        self.submit(self.cfg.header_bytes + (end - start),
                    {"kind": "data", "start": start, "end": end})
        self._arm_timer()


class TcpReceiver:
    """Receiver half: in-order reassembly of virtual byte ranges, one
    cumulative ack per arriving data segment."""

    def __init__(self, name: str, cfg: TcpConfig, submit_fn: Callable[[int, dict], None],
                 deliver_fn: Callable[[int, int], None]):
        self.name = name
        self.cfg = cfg
        self.submit = submit_fn
        self.deliver = deliver_fn  # called with (new_in_order_bytes, now_us)
        self.rcv_nxt = 0
        self.ooo: list[tuple[int, int]] = []  # disjoint sorted (start, end) above rcv_nxt

    def on_packet(self, meta: dict, now_us: int) -> None:
        kind = meta["kind"]
        if kind == "syn":
            self.submit(self.cfg.header_bytes, {"kind": "synack"})
            return
        if kind != "data":
            return
        before = self.rcv_nxt
        self._absorb(meta["start"], meta["end"])
        if self.rcv_nxt > before:
            self.deliver(self.rcv_nxt - before, now_us)
        self.submit(self.cfg.header_bytes, {"kind": "ack", "ack": self.rcv_nxt})

    def _absorb(self, start: int, end: int) -> None:
        if end <= self.rcv_nxt:
            return
        start = max(start, self.rcv_nxt)
        self.ooo.append((start, end))
        self.ooo.sort()
        merged = []
        for s, e in self.ooo:
            if merged and s <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], e))
            else:
                merged.append((s, e))
        self.ooo = merged
        while self.ooo and self.ooo[0][0] <= self.rcv_nxt:
            s, e = self.ooo.pop(0)
            self.rcv_nxt = max(self.rcv_nxt, e)


@dataclass
class PepConfig:
    mode: str = "off"  # off | accelerate
    local_ack: bool = True
    ack_aggregation_interval_s: float = 0.5
    advertised_window_bytes: int = 1 << 20

    def __post_init__(self):
        if self.ack_aggregation_interval_s < 0:
            raise ValueError("ack_aggregation_interval_s must be >= 0")
        if self.mode not in ("off", "accelerate"):
            raise ValueError(f"pep mode must be off|accelerate, not {self.mode!r}")


class PepProxy:
    """Near-side acceleration proxy.

    Masquerades as the TCP destination toward the local origin: answers the
    handshake immediately, acknowledges received data on the aggregation
    timer (one ack covering everything accepted in the interval), and
    relays payload over the data link with backpressure - bytes are only
    acknowledged to the origin once they have been accepted into the link
    queue, so a full queue stalls the origin instead of buffering without
    bound.
    """

    def __init__(self, sim: Simulator, cfg: PepConfig, tcp_cfg: TcpConfig,
                 link: HalfDuplexLink, node: str, dest: str, pids,
                 reply_fn: Callable[[dict], None]):
        self.sim = sim
        self.cfg = cfg
        self.tcp_cfg = tcp_cfg
        self.link = link
        self.node = node
        self.dest = dest
        self.pids = pids
        self.reply = reply_fn
        self.rcv_nxt = 0
        self.ooo: list[tuple[int, int]] = []
        self.relayed = 0  # in-order bytes accepted into the link queue
        self.acked = 0  # bytes acknowledged to the origin
        self.active = True
        self._timer_running = False
        link.by_name[node].on_retire = self._on_space

    def shutdown(self) -> None:
        """Detach from the link once the transfer it served is resolved."""
        self.active = False
        if self.link.by_name[self.node].on_retire == self._on_space:
            self.link.by_name[self.node].on_retire = None

    def handle_packet(self, meta: dict) -> bool:
        """True when terminated locally; False means forward unmodified."""
        if not self.active:
            return True  # swallow stale traffic from a resolved transfer
        if self.cfg.mode != "accelerate" or not self.cfg.local_ack:
            return False
        kind = meta["kind"]
        if kind == "syn":
            self.reply({"kind": "synack"})
        elif kind == "data":
            self._absorb(meta["start"], meta["end"])
            self._push_relay()
            self._start_timer()
        return True

    def _absorb(self, start: int, end: int) -> None:
        if end <= self.rcv_nxt:
            return
        self.ooo.append((max(start, self.rcv_nxt), end))
        self.ooo.sort()
        merged = []
        for s, e in self.ooo:
            if merged and s <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], e))
            else:
                merged.append((s, e))
        self.ooo = merged
        while self.ooo and self.ooo[0][0] <= self.rcv_nxt:
            s, e = self.ooo.pop(0)
            self.rcv_nxt = max(self.rcv_nxt, e)

    def _push_relay(self) -> None:
        """Chunk in-order payload into relay packets while the queue has room."""
        if not self.active:
            return
        while self.relayed < self.rcv_nxt and self.link.queue_free(self.node) > 0:
            end = min(self.relayed + self.tcp_cfg.mss, self.rcv_nxt)
            packet = IpPacketRecord(
                packet_id=next(self.pids),
                length_bytes=self.tcp_cfg.header_bytes + (end - self.relayed),
                arrival_time_us=self.sim.now(),
                source=self.node,
                destination=self.dest,
                meta={"kind": "relay", "start": self.relayed, "end": end},
            )
            if not self.link.submit(self.node, packet):
                break
            self.relayed = end

    def _on_space(self, _packet, _now) -> None:
        self._push_relay()
        if self.relayed > self.acked:
            self._start_timer()

    def _start_timer(self) -> None:
        if self._timer_running or not self.cfg.local_ack:
            return
        self._timer_running = True
        self.sim.schedule_in(
            us(self.cfg.ack_aggregation_interval_s), f"pep/{self.node}/ack", self._on_timer
        )

    def _on_timer(self) -> None:
        self._timer_running = False
        if not self.active:
            return
        if self.relayed > self.acked:
            self.acked = self.relayed
            self.reply({"kind": "ack", "ack": self.acked})
        if self.rcv_nxt > self.relayed or self.relayed > self.acked:
            self._start_timer()


class PepFarDelivery:
    """Far-side proxy peer: re-delivers relayed payload to the destination
    application.  The re-originated local TCP leg is lossless and fast next
    to the HF link, so delivery is immediate and in order."""

    def __init__(self, deliver_fn: Callable[[int, int], None]):
        self.deliver = deliver_fn
        self.expected = 0

    def on_packet(self, meta: dict, now_us: int) -> None:
        if meta["kind"] != "relay":
            return
        if meta["start"] != self.expected:
            raise AssertionError(
                f"relay stream out of order: got {meta['start']}, expected {self.expected}"
            )
        self.expected = meta["end"]
        self.deliver(meta["end"] - meta["start"], now_us)


class SaturationSource:
    """Bypasses the transport layer entirely and keeps the link queue at its
    high-water mark with fixed-size packets, so measured goodput is the peak
    the link can carry - the benchmark the TCP modes are compared against."""

    def __init__(self, sim: Simulator, link: HalfDuplexLink, node: str, dest: str,
                 pids, packet_bytes: int = 1500):
        self.sim = sim
        self.link = link
        self.node = node
        self.dest = dest
        self.pids = pids
        self.packet_bytes = packet_bytes
        self.generated = 0
        link.by_name[node].on_retire = lambda _p, _t: self.refill()

    def start(self) -> None:
        self.refill()

    def refill(self) -> None:
        while self.link.queue_free(self.node) > 0:
            packet = IpPacketRecord(
                packet_id=next(self.pids),
                length_bytes=self.packet_bytes,
                arrival_time_us=self.sim.now(),
                source=self.node,
                destination=self.dest,
                meta={"kind": "fill"},
            )
            if not self.link.submit(self.node, packet):
                break
            self.generated += 1
