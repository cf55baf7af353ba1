"""Wiring of the metering and export roles, shared by the CLI and tests."""
from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from flowkit.flow import FlowRecord
from flowkit.ipfix.export import Exporter
from flowkit.meter import FlowCache, MeterConfig, MeterStats, decode_frames
from flowkit.packet import LiveSource, RawFrame

log = logging.getLogger(__name__)

SWEEP_INTERVAL_MS = 1000

Send = Callable[[bytes], object]


@dataclass
class MeterRun:
    stats: MeterStats = field(default_factory=MeterStats)
    datagrams: int = 0
    exported_bytes: int = 0
    flows_exported: int = 0


def _ship(run: MeterRun, send: Send, datagrams: list[bytes]) -> None:
    for d in datagrams:
        run.datagrams += 1
        run.exported_bytes += len(d)
        send(d)


def meter_file(frames: Iterable[RawFrame], config: MeterConfig, exporter: Exporter,
               send: Send, on_flow: Optional[Callable[[FlowRecord], None]] = None
               ) -> MeterRun:
    """Meter a finite capture and export its flows, using packet time as the clock."""
    run = MeterRun()
    cache = FlowCache(config)
    next_sweep: Optional[int] = None
    t = 0

    def emit(records: list[FlowRecord], now_ms: int) -> None:
        run.stats.count_flows(records)
        for rec in records:
            run.flows_exported += 1
            if on_flow is not None:
                on_flow(rec)
            _ship(run, send, exporter.submit(rec, now_ms / 1000))

    for pkt in decode_frames(frames, run.stats):
        t = pkt.timestamp // 1000
        if next_sweep is None:
            next_sweep = t + SWEEP_INTERVAL_MS
        elif t >= next_sweep:
            emit(cache.sweep(t), t)
            _ship(run, send, exporter.tick(t / 1000))
            next_sweep = t + SWEEP_INTERVAL_MS
        emit(cache.process_packet(pkt), t)
    emit(cache.flush(), t)
    _ship(run, send, exporter.flush(t / 1000))
    return run


def meter_live(source: LiveSource, config: MeterConfig, exporter: Exporter, send: Send,
               stop: threading.Event, duration: Optional[float] = None,
               on_flow: Optional[Callable[[FlowRecord], None]] = None) -> MeterRun:
    """Meter a live source with wall-clock sweeps until ``stop`` is set."""
    run = MeterRun()
    cache = FlowCache(config)
    deadline = time.monotonic() + duration if duration else None
    next_sweep = time.time() + SWEEP_INTERVAL_MS / 1000

    def emit(records: list[FlowRecord], now: float) -> None:
        run.stats.count_flows(records)
        for rec in records:
            run.flows_exported += 1
            if on_flow is not None:
                on_flow(rec)
            _ship(run, send, exporter.submit(rec, now))

    try:
        while not stop.is_set():
            if deadline is not None and time.monotonic() >= deadline:
                break
            frames = source.poll(0.1)
            now = time.time()
            for pkt in decode_frames(frames, run.stats):
                emit(cache.process_packet(pkt), now)
            if now >= next_sweep:
                emit(cache.sweep(int(now * 1000)), now)
                _ship(run, send, exporter.tick(now))
                next_sweep = now + SWEEP_INTERVAL_MS / 1000
    finally:
        now = time.time()
        emit(cache.flush(), now)
        _ship(run, send, exporter.flush(now))
        log.info("event=capture_stopped interface=%s kernel_drops=%d",
                 source.interface, source.drops)
        source.stop()
    return run
