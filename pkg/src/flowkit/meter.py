"""
Flow metering: aggregate ParsedPackets into unidirectional FlowRecords.

The cache applies idle/active timeouts, optional FIN/RST expiry and
oldest-last-seen eviction. All timing is in milliseconds; packet timestamps
(microseconds) are floored to milliseconds on entry.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

from flowkit.flow import PROTO_TCP, TCP_FIN, TCP_RST, EndReason, FlowKey, FlowRecord
from flowkit.packet import DecodeError, NonIp, ParsedPacket, RawFrame, decode_frame

log = logging.getLogger(__name__)

_FIN_RST = TCP_FIN | TCP_RST


@dataclass
class MeterConfig:
    idle_timeout: float = 15.0
    active_timeout: float = 300.0
    max_cache_entries: int = 1 << 20
    tcp_finrst_expiry: bool = True
    sample_rate_n: int = 1

    def __post_init__(self):
        if self.idle_timeout <= 0 or self.active_timeout <= 0:
            raise ValueError("timeouts must be positive")
        if not self.idle_timeout < self.active_timeout:
            raise ValueError("idle_timeout must be shorter than active_timeout")
        if self.sample_rate_n < 1:
            raise ValueError("sample_rate_n must be >= 1")
        if self.max_cache_entries < 1:
            raise ValueError("max_cache_entries must be >= 1")

    @property
    def idle_ms(self) -> int:
        return int(round(self.idle_timeout * 1000))

    @property
    def active_ms(self) -> int:
        return int(round(self.active_timeout * 1000))


class FlowCache:
    """Keyed flow cache owned by a single metering task.

    :meth:`process_packet`, :meth:`sweep` and :meth:`flush` each return the
    records that left the cache because of that call.
    """

    def __init__(self, config: Optional[MeterConfig] = None):
        self.config = config or MeterConfig()
        self.entries: dict[FlowKey, FlowRecord] = {}
        self.packets_seen = 0
        self.packets_sampled_out = 0
        self._idle = self.config.idle_ms
        self._active = self.config.active_ms

    def __len__(self) -> int:
        return len(self.entries)

    def process_packet(self, pkt: ParsedPacket) -> list[FlowRecord]:
        cfg = self.config
        self.packets_seen += 1
        if cfg.sample_rate_n > 1 and self.packets_seen % cfg.sample_rate_n:
            self.packets_sampled_out += 1
            return []

        t = pkt.timestamp // 1000
        key = FlowKey(pkt.ip_version, pkt.src_ip, pkt.dst_ip,
                      pkt.protocol, pkt.src_port, pkt.dst_port)
        entries = self.entries
        out: list[FlowRecord] = []
        rec = entries.get(key)
        if rec is not None:
            # Expire before counting so the packet starts the continuation flow.
            if t - rec.first_seen >= self._active:
                rec.end_reason = EndReason.ACTIVE
            elif t - rec.last_seen >= self._idle:
                rec.end_reason = EndReason.IDLE
            if rec.end_reason is not None:
                del entries[key]
                out.append(rec)
                rec = None

        if rec is None:
            if len(entries) >= cfg.max_cache_entries:
                out.append(self._evict())
            rec = FlowRecord(key, t, t, 1, pkt.ip_payload_len, pkt.tcp_flags)
            entries[key] = rec
        else:
            rec.packets += 1
            rec.bytes += pkt.ip_payload_len
            rec.tcp_flags |= pkt.tcp_flags
            if t > rec.last_seen:
                rec.last_seen = t
            elif t < rec.first_seen:
                rec.first_seen = t

        if cfg.tcp_finrst_expiry and pkt.protocol == PROTO_TCP and pkt.tcp_flags & _FIN_RST:
            del entries[key]
            rec.end_reason = EndReason.FIN_RST
            out.append(rec)
        return out

    def _evict(self) -> FlowRecord:
        key = min(self.entries, key=lambda k: self.entries[k].last_seen)
        rec = self.entries.pop(key)
        rec.end_reason = EndReason.EVICTED
        return rec

    def sweep(self, now: int) -> list[FlowRecord]:
        """Expire entries idle or active at ``now`` (milliseconds)."""
        idle, active = self._idle, self._active
        out = []
        for key, rec in list(self.entries.items()):
            if now - rec.last_seen >= idle:
                rec.end_reason = EndReason.IDLE
            elif now - rec.first_seen >= active:
                rec.end_reason = EndReason.ACTIVE
            else:
                continue
            del self.entries[key]
            out.append(rec)
        return out

    def flush(self) -> list[FlowRecord]:
        out = list(self.entries.values())
        for rec in out:
            rec.end_reason = EndReason.EOF
        self.entries.clear()
        return out


@dataclass
class MeterStats:
    frames: int = 0
    ip_packets: int = 0
    ip_bytes: int = 0
    non_ip: int = 0
    decode_errors: int = 0
    flows: int = 0
    by_reason: dict = field(default_factory=dict)

    def count_flows(self, records: list[FlowRecord]) -> None:
        self.flows += len(records)
        for r in records:
            name = r.end_reason.value if r.end_reason else "none"
            self.by_reason[name] = self.by_reason.get(name, 0) + 1


def meter_packets(packets: Iterable[ParsedPacket], config: Optional[MeterConfig] = None,
                  sweep_interval_ms: int = 1000,
                  cache: Optional[FlowCache] = None) -> Iterator[FlowRecord]:
    """Meter a finite packet stream using packet time as the clock.

    A sweep runs before the first packet at or past each sweep deadline; the
    cache is flushed when the stream ends.
    """
    cache = cache or FlowCache(config)
    next_sweep = None
    for pkt in packets:
        t = pkt.timestamp // 1000
        if next_sweep is None:
            next_sweep = t + sweep_interval_ms
        elif t >= next_sweep:
            yield from cache.sweep(t)
            next_sweep = t + sweep_interval_ms
        yield from cache.process_packet(pkt)
    yield from cache.flush()


def decode_frames(frames: Iterable[RawFrame], stats: Optional[MeterStats] = None
                  ) -> Iterator[ParsedPacket]:
    """Decode frames, dropping non-IP and undecodable ones into ``stats``."""
    stats = stats if stats is not None else MeterStats()
    for frame in frames:
        stats.frames += 1
        try:
            pkt = decode_frame(frame)
        except DecodeError as exc:
            stats.decode_errors += 1
            log.debug("event=decode_error error=%s", exc)
            continue
        if isinstance(pkt, NonIp):
            stats.non_ip += 1
            continue
        stats.ip_packets += 1
        stats.ip_bytes += pkt.ip_payload_len
        yield pkt


def meter_frames(frames: Iterable[RawFrame], config: Optional[MeterConfig] = None,
                 stats: Optional[MeterStats] = None,
                 sweep_interval_ms: int = 1000) -> Iterator[FlowRecord]:
    stats = stats if stats is not None else MeterStats()
    for rec in meter_packets(decode_frames(frames, stats), config, sweep_interval_ms):
        stats.count_flows([rec])
        yield rec
