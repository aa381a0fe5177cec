"""Scenario documents and run metrics.

A scenario is a single YAML document with a versioned schema.  Unknown keys
anywhere in the document are errors: silent config drift is the main enemy
of reproducible runs.  Every output file records (scenario hash, master
seed) so results can be audited and regenerated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errormodel import ChannelCondition, ErrorStatTable, TableKey, load_table
from .modem import ModemParams, RATE_LADDER_BPS, UnsupportedRateError
from .s5066 import LinkConfig
from .transport import PepConfig, TcpConfig

SCENARIO_VERSION = 1

MODES = ("plain", "saturation", "accelerate")


class ConfigError(ValueError):
    """Scenario document is invalid."""


@dataclass(frozen=True)
class TransferSpec:
    size_bytes: int
    start_s: float = 0.0
    deadline_s: float = 3600.0

    def __post_init__(self):
        if self.size_bytes < 1:
            raise ConfigError("transfer size_bytes must be >= 1")
        if self.deadline_s <= 0:
            raise ConfigError("transfer deadline_s must be > 0")


@dataclass
class ChannelSpec:
    condition: ChannelCondition
    # data rate -> (interleaver, table path)
    tables: dict[int, tuple[str, Path]]


@dataclass
class ScenarioConfig:
    master_seed: int
    duration_s: float
    mode: str
    channel: ChannelSpec
    modem: ModemParams
    link: LinkConfig
    pep: PepConfig
    tcp: TcpConfig
    traffic: list[TransferSpec]
    saturation_packet_bytes: int = 1500
    output: Optional[str] = None
    scenario_sha256: str = ""


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return doc[key]


def _check_keys(doc: dict, allowed, where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def build_scenario(doc: dict, base_dir: Path, sha256: str = "") -> ScenarioConfig:
    """Validate a parsed scenario document and construct the config."""
    _check_keys(
        doc,
        ("scenario_version", "master_seed", "duration_s", "mode", "channel", "modem",
         "link", "pep", "tcp", "traffic", "saturation", "output"),
        "scenario",
    )
    version = _require(doc, "scenario_version", "scenario")
    if version != SCENARIO_VERSION:
        raise ConfigError(f"scenario_version {version!r} unsupported (expected {SCENARIO_VERSION})")

    master_seed = int(_require(doc, "master_seed", "scenario"))
    duration_s = float(_require(doc, "duration_s", "scenario"))
    if duration_s <= 0:
        raise ConfigError("duration_s must be > 0")
    mode = _require(doc, "mode", "scenario")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, not {mode!r}")

    ch = _require(doc, "channel", "scenario")
    _check_keys(ch, ("snr_db", "doppler_hz", "multipath_ms", "tables"), "channel")
    condition = ChannelCondition(
        float(_require(ch, "snr_db", "channel")),
        float(ch.get("doppler_hz", 0.0)),
        float(ch.get("multipath_ms", 0.0)),
    )
    entries = _require(ch, "tables", "channel")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("channel.tables must be a non-empty list")
    tables: dict[int, tuple[str, Path]] = {}
    for i, entry in enumerate(entries):
        _check_keys(entry, ("rate_bps", "interleaver", "path"), f"channel.tables[{i}]")
        rate = int(_require(entry, "rate_bps", f"channel.tables[{i}]"))
        interleaver = str(entry.get("interleaver", "long"))
        path = Path(_require(entry, "path", f"channel.tables[{i}]"))
        if not path.is_absolute():
            path = base_dir / path
        if rate in tables:
            raise ConfigError(f"channel.tables: duplicate rate {rate}")
        tables[rate] = (interleaver, path)

    mo = doc.get("modem", {})
    _check_keys(
        mo,
        ("data_rate_bps", "interleaver", "t_preamble_s", "t_flush_s", "t_turnaround_s",
         "extra_rates"),
        "modem",
    )
    extra = tuple(int(r) for r in mo.get("extra_rates", ()))
    kwargs = {k: mo[k] for k in ("interleaver", "t_preamble_s", "t_flush_s", "t_turnaround_s")
              if k in mo}
    try:
        modem = ModemParams(
            int(_require(mo, "data_rate_bps", "modem")),
            supported_rates=tuple(RATE_LADDER_BPS) + extra,
            **kwargs,
        )
    except (UnsupportedRateError, ValueError) as exc:
        raise ConfigError(f"modem: {exc}") from exc

    li = doc.get("link", {})
    _check_keys(
        li,
        ("frame_payload_bytes", "frame_overhead_bytes", "window_frames", "max_tx_time_s",
         "rate_adapt", "queue_packets"),
        "link",
    )
    try:
        link = LinkConfig(**{k: li[k] for k in li})
    except ValueError as exc:
        raise ConfigError(f"link: {exc}") from exc
    if link.max_tx_time_s <= modem.t_preamble_s + modem.t_flush_s:
        raise ConfigError("link.max_tx_time_s must exceed modem preamble + flush")

    pe = doc.get("pep", {})
    _check_keys(pe, ("local_ack", "ack_aggregation_interval_s", "advertised_window_bytes"), "pep")
    try:
        pep = PepConfig(
            mode="accelerate" if mode == "accelerate" else "off",
            **{k: pe[k] for k in pe},
        )
    except ValueError as exc:
        raise ConfigError(f"pep: {exc}") from exc

    tc = doc.get("tcp", {})
    _check_keys(
        tc,
        ("mss", "header_bytes", "init_cwnd_segments", "init_ssthresh_bytes",
         "adv_window_bytes", "rto_initial_s", "rto_min_s", "rto_max_s", "max_retries"),
        "tcp",
    )
    tcp = TcpConfig(**{k: tc[k] for k in tc})

    traffic_doc = doc.get("traffic", [])
    transfers = []
    for i, t in enumerate(traffic_doc):
        _check_keys(t, ("size_bytes", "start_s", "deadline_s"), f"traffic[{i}]")
        transfers.append(TransferSpec(
            int(_require(t, "size_bytes", f"traffic[{i}]")),
            float(t.get("start_s", 0.0)),
            float(t.get("deadline_s", 3600.0)),
        ))
    if mode in ("plain", "accelerate") and not transfers:
        raise ConfigError(f"mode {mode!r} needs at least one traffic entry")

    sat = doc.get("saturation", {})
    _check_keys(sat, ("packet_bytes",), "saturation")
    packet_bytes = int(sat.get("packet_bytes", 1500))

    if modem.data_rate_bps not in tables:
        raise ConfigError(
            f"modem rate {modem.data_rate_bps} has no entry in channel.tables"
        )

    return ScenarioConfig(
        master_seed=master_seed,
        duration_s=duration_s,
        mode=mode,
        channel=ChannelSpec(condition, tables),
        modem=modem,
        link=link,
        pep=pep,
        tcp=tcp,
        traffic=transfers,
        saturation_packet_bytes=packet_bytes,
        output=doc.get("output"),
        scenario_sha256=sha256,
    )


def parse_scenario(path) -> ScenarioConfig:
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: scenario must be a mapping")
    sha = hashlib.sha256(raw).hexdigest()
    return build_scenario(doc, path.parent, sha)


def load_tables(cfg: ScenarioConfig) -> dict[int, ErrorStatTable]:
    """Load every referenced table and verify it matches its declared key."""
    out = {}
    for rate, (interleaver, path) in sorted(cfg.channel.tables.items()):
        if not Path(path).exists():
            raise ConfigError(f"table file not found: {path}")
        table = load_table(path)
        want = TableKey(cfg.channel.condition, rate, interleaver)
        if table.key != want:
            raise ConfigError(
                f"{path}: table key {table.key} does not match scenario key {want}"
            )
        out[rate] = table
    return out


@dataclass
class TransferResult:
    mode: str
    size_bytes: int
    outcome: str  # SUCCESS | FAILED
    completion_s: Optional[float]
    bytes_retx: int


@dataclass
class RunMetrics:
    goodput_bps: float
    packet_error_rate: float
    transfers: list[TransferResult]
    link_summary: dict
    sim_time_s: float
    wall_time_s: float  # reported on stderr, never persisted (determinism)
    scenario_sha256: str
    master_seed: int
    mode: str
    snr_db: float = 0.0

    @property
    def speedup(self) -> float:
        return self.sim_time_s / self.wall_time_s if self.wall_time_s > 0 else float("inf")

    def to_output_dict(self) -> dict:
        """Deterministic serialization: everything except wall-clock timing."""
        return {
            "format": "hflink-run-metrics",
            "version": 1,
            "scenario_sha256": self.scenario_sha256,
            "master_seed": self.master_seed,
            "mode": self.mode,
            "snr_db": self.snr_db,
            "sim_time_s": self.sim_time_s,
            "goodput_bps": self.goodput_bps,
            "packet_error_rate": self.packet_error_rate,
            "link": self.link_summary,
            "transfers": [
                {
                    "mode": t.mode,
                    "size_bytes": t.size_bytes,
                    "outcome": t.outcome,
                    "completion_s": t.completion_s,
                    "bytes_retx": t.bytes_retx,
                }
                for t in self.transfers
            ],
        }
