"""Scenario execution: wires traffic modes onto the link and collects metrics.

A run is one isolated Simulator instance; sweeps fan out over fully
isolated instances (one per (snr, mode, seed) point) and merge results in
deterministic key order, so parallel and serial sweeps are byte-identical.
"""

from __future__ import annotations

import csv
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml

from .config import (
    ConfigError,
    RunMetrics,
    ScenarioConfig,
    TransferResult,
    TransferSpec,
    build_scenario,
    load_tables,
)
from .errormodel import ErrorStatTable
from .kernel import Simulator, us
from .s5066 import HalfDuplexLink, IpPacketRecord
from .transport import PepFarDelivery, PepProxy, SaturationSource, TcpReceiver, TcpSender

NODE_A = "A"
NODE_B = "B"


class _TransferDriver:
    """Runs the scenario's transfers one at a time (simultaneous flows are
    out of scope); each transfer gets a fresh connection tagged with its
    index so stale packets from a finished transfer are ignored."""

    def __init__(self, sim: Simulator, link: HalfDuplexLink, cfg: ScenarioConfig, pids):
        self.sim = sim
        self.link = link
        self.cfg = cfg
        self.pids = pids
        self.results: list[TransferResult] = []
        self.idx = -1
        self.current = None  # (sender, pep, deadline_event, spec)
        self.sink_got = 0
        link.by_name[NODE_A].on_deliver = self._deliver_at_a
        link.by_name[NODE_B].on_deliver = self._deliver_at_b

    def start(self) -> None:
        self._launch_next()

    # -- per-transfer wiring --------------------------------------------------

    def _launch_next(self) -> None:
        self.idx += 1
        if self.idx >= len(self.cfg.traffic):
            return
        spec = self.cfg.traffic[self.idx]
        at = max(us(spec.start_s), self.sim.now())
        self.sim.schedule(at, f"transfer/{self.idx}/start", lambda: self._begin(spec))

    def _begin(self, spec: TransferSpec) -> None:
        idx = self.idx
        conn = idx
        self.sink_got = 0
        sender = TcpSender(
            self.sim,
            f"t{idx}",
            spec.size_bytes,
            self.cfg.tcp,
            submit_fn=lambda length, meta: self._from_origin(conn, length, meta),
            on_abort=lambda: self._resolve("FAILED", None),
        )
        pep = None
        far = None
        receiver = None
        if self.cfg.mode == "accelerate":
            pep = PepProxy(
                self.sim,
                self.cfg.pep,
                self.cfg.tcp,
                self.link,
                NODE_A,
                NODE_B,
                self.pids,
                reply_fn=lambda meta: self._to_origin(conn, meta),
            )
            far = PepFarDelivery(self._sink_deliver)
        else:
            receiver = TcpReceiver(
                f"r{idx}",
                self.cfg.tcp,
                submit_fn=lambda length, meta: self._submit(NODE_B, conn, length, meta),
                deliver_fn=self._sink_deliver,
            )
        deadline_ev = self.sim.schedule(
            self.sim.now() + us(spec.deadline_s),
            f"transfer/{idx}/deadline",
            lambda: self._resolve("FAILED", None),
        )
        self.current = {
            "conn": conn,
            "spec": spec,
            "sender": sender,
            "pep": pep,
            "far": far,
            "receiver": receiver,
            "deadline": deadline_ev,
            "begin_us": self.sim.now(),
        }
        sender.start()

    def _submit(self, node: str, conn: int, length: int, meta: dict) -> None:
        meta = dict(meta)
        meta["conn"] = conn
        packet = IpPacketRecord(
            packet_id=next(self.pids),
            length_bytes=length,
            arrival_time_us=self.sim.now(),
            source=node,
            destination=NODE_B if node == NODE_A else NODE_A,
            meta=meta,
        )
        self.link.submit(node, packet)

    def _from_origin(self, conn: int, length: int, meta: dict) -> None:
        cur = self.current
        if cur is None or cur["conn"] != conn:
            return
        if cur["pep"] is not None and cur["pep"].handle_packet(meta):
            return
        self._submit(NODE_A, conn, length, meta)

    def _to_origin(self, conn: int, meta: dict) -> None:
        cur = self.current
        if cur is not None and cur["conn"] == conn:
            cur["sender"].on_packet(meta)

    def _deliver_at_b(self, packet: IpPacketRecord, now_us: int) -> None:
        cur = self.current
        meta = packet.meta or {}
        if cur is None or meta.get("conn") != cur["conn"]:
            return
        if cur["far"] is not None:
            cur["far"].on_packet(meta, now_us)
        elif cur["receiver"] is not None:
            cur["receiver"].on_packet(meta, now_us)

    def _deliver_at_a(self, packet: IpPacketRecord, now_us: int) -> None:
        cur = self.current
        meta = packet.meta or {}
        if cur is None or meta.get("conn") != cur["conn"]:
            return
        cur["sender"].on_packet(meta)

    def _sink_deliver(self, n_bytes: int, now_us: int) -> None:
        cur = self.current
        self.sink_got += n_bytes
        if self.sink_got >= cur["spec"].size_bytes:
            self._resolve("SUCCESS", now_us)

    def _resolve(self, outcome: str, completion_us: Optional[int]) -> None:
        cur = self.current
        if cur is None:
            return
        spec = cur["spec"]
        completion_s = None
        if completion_us is not None:
            # duration from the transfer's actual start
            completion_s = (completion_us - cur["begin_us"]) / 1e6
        self.results.append(
            TransferResult(self.cfg.mode, spec.size_bytes, outcome, completion_s,
                           cur["sender"].bytes_retx)
        )
        self.sim.cancel(cur["deadline"])
        cur["sender"]._cancel_timer()
        if cur["pep"] is not None:
            cur["pep"].shutdown()
        self.current = None
        self._launch_next()


def run_scenario(cfg: ScenarioConfig,
                 tables: Optional[dict[int, ErrorStatTable]] = None) -> tuple[RunMetrics, HalfDuplexLink]:
    """Execute one scenario to its configured duration; returns metrics and
    the link (for logs and audits)."""
    wall0 = time.perf_counter()
    if tables is None:
        tables = load_tables(cfg)
    sim = Simulator(cfg.master_seed)
    link = HalfDuplexLink(sim, cfg.link, cfg.modem, tables, NODE_A, NODE_B)
    pids = itertools.count(1)

    driver = None
    if cfg.mode == "saturation":
        source = SaturationSource(sim, link, NODE_A, NODE_B, pids,
                                  cfg.saturation_packet_bytes)
        link.establish()
        source.start()
    else:
        driver = _TransferDriver(sim, link, cfg, pids)
        link.establish()
        driver.start()

    sim.run_until(us(cfg.duration_s))
    link.audit_conservation()

    results = list(driver.results) if driver else []
    if driver and driver.current is not None:
        # ran out of simulated time before the transfer resolved
        cur = driver.current
        results.append(TransferResult(cfg.mode, cur["spec"].size_bytes, "FAILED", None,
                                      cur["sender"].bytes_retx))

    forward = link.by_name[NODE_B]
    metrics = RunMetrics(
        goodput_bps=forward.released_bytes * 8 / cfg.duration_s,
        packet_error_rate=link.packet_error_rate(),
        transfers=results,
        link_summary={
            "cycles": link.cycles,
            "frames_sent": link.a.frames_tx + link.b.frames_tx,
            "frames_received": link.frames_received_total(),
            "frames_corrupted": link.frames_corrupted_total(),
            "retransmissions": link.a.frames_retx + link.b.frames_retx,
            "acks_sent": link.acks_sent,
            "acks_corrupted": link.acks_corrupted,
            "packets_delivered": link.a.released_packets + link.b.released_packets,
            "packets_dropped": link.a.dropped_packets + link.b.dropped_packets,
            "rate_changes": len(link.rate_changes),
            "final_rate_bps": link.params.data_rate_bps,
        },
        sim_time_s=sim.now() / 1e6,
        wall_time_s=time.perf_counter() - wall0,
        scenario_sha256=cfg.scenario_sha256,
        master_seed=cfg.master_seed,
        mode=cfg.mode,
        snr_db=cfg.channel.condition.snr_db,
    )
    return metrics, link


# ---------------------------------------------------------------------------
# Output files


def _audit_header(metrics: RunMetrics) -> str:
    return f"# scenario_sha256={metrics.scenario_sha256} master_seed={metrics.master_seed}\n"


def write_outputs(metrics: RunMetrics, link: HalfDuplexLink, out_dir) -> Path:
    """Write metrics.json, link_log.csv, and transfers.csv; all files are
    byte-identical across reruns of the same (scenario, seed)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "metrics.json", "w", newline="\n") as f:
        json.dump(metrics.to_output_dict(), f, indent=1, sort_keys=True)
        f.write("\n")

    with open(out / "link_log.csv", "w", newline="") as f:
        f.write(_audit_header(metrics))
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["time", "direction", "frames", "retransmissions", "corrupted", "rate"])
        for row in link.log_rows:
            w.writerow(row)

    with open(out / "transfers.csv", "w", newline="") as f:
        f.write(_audit_header(metrics))
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["mode", "snr_db", "seed", "size", "outcome", "completion_s", "bytes_retx"])
        for t in metrics.transfers:
            w.writerow([t.mode, metrics.snr_db, metrics.master_seed, t.size_bytes, t.outcome,
                        "" if t.completion_s is None else t.completion_s, t.bytes_retx])
    return out


# ---------------------------------------------------------------------------
# Sweeps


@dataclass
class SweepPoint:
    snr_db: float
    mode: str
    seeds: int
    successes: int

    @property
    def success_rate(self) -> float:
        return self.successes / self.seeds if self.seeds else 0.0


def table_path_for(tables_dir: Path, snr_db: float, rate: int, interleaver: str) -> Path:
    return Path(tables_dir) / f"snr{snr_db:g}_{rate}_{interleaver}.json"


def _sweep_one(args) -> tuple[float, str, int, bool]:
    doc, base_dir, snr_db, mode, seed_index, tables_dir = args
    doc = dict(doc)
    doc["mode"] = mode
    doc["master_seed"] = int(doc["master_seed"]) + seed_index
    channel = dict(doc["channel"])
    channel["snr_db"] = snr_db
    entries = []
    for entry in channel["tables"]:
        entry = dict(entry)
        entry["path"] = str(
            table_path_for(tables_dir, snr_db, int(entry["rate_bps"]),
                           entry.get("interleaver", "long"))
        )
        entries.append(entry)
    channel["tables"] = entries
    doc["channel"] = channel
    cfg = build_scenario(doc, Path(base_dir))
    metrics, _link = run_scenario(cfg)
    ok = bool(metrics.transfers) and all(t.outcome == "SUCCESS" for t in metrics.transfers)
    return (snr_db, mode, seed_index, ok)


def run_sweep(scenario_path, snr_list, n_seeds: int, modes, tables_dir,
              jobs: int = 1) -> tuple[list[SweepPoint], list[tuple[float, str]]]:
    """Success-rate table over (snr, mode) with common random numbers: the
    same seed index maps to the same master seed in every mode."""
    scenario_path = Path(scenario_path)
    raw = scenario_path.read_bytes()
    doc = yaml.safe_load(raw)
    if not isinstance(doc, dict):
        raise ConfigError(f"{scenario_path}: scenario must be a mapping")
    base_cfg = build_scenario(dict(doc), scenario_path.parent)
    if not base_cfg.traffic:
        raise ConfigError("sweep needs a scenario with traffic entries")

    skipped = []
    points = []
    for snr in snr_list:
        missing = [
            str(table_path_for(tables_dir, snr, rate, interleaver))
            for rate, (interleaver, _p) in sorted(base_cfg.channel.tables.items())
            if not table_path_for(tables_dir, snr, rate, interleaver).exists()
        ]
        if missing:
            skipped.append((snr, f"missing tables: {', '.join(missing)}"))
            continue
        for mode in modes:
            for seed_index in range(n_seeds):
                points.append(
                    (doc, str(scenario_path.parent), float(snr), mode, seed_index,
                     str(tables_dir))
                )

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_one, points))
    else:
        outcomes = [_sweep_one(p) for p in points]

    tally: dict[tuple[float, str], list[int]] = {}
    for snr, mode, _seed, ok in outcomes:
        cell = tally.setdefault((snr, mode), [0, 0])
        cell[0] += 1
        cell[1] += int(ok)
    rows = [
        SweepPoint(snr, mode, seeds, successes)
        for (snr, mode), (seeds, successes) in sorted(tally.items(),
                                                      key=lambda kv: (kv[0][0], kv[0][1]))
    ]
    return rows, skipped


def write_sweep_csv(rows: list[SweepPoint], path, scenario_sha256: str, base_seed: int) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# scenario_sha256={scenario_sha256} master_seed={base_seed}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["snr_db", "mode", "seeds", "successes", "success_rate"])
        for r in rows:
            w.writerow([r.snr_db, r.mode, r.seeds, r.successes, r.success_rate])
