"""
IPFIX/UDP collection: raw replication (tee), decoding against per-exporter
template caches, and delivery of decoded flows to sinks.

Replication happens on the receive path before anything is decoded, so
downstream collectors get byte-identical datagrams, foreign templates and
all. Decoding runs on worker threads partitioned by exporter; each sink sits
behind its own bounded queue so a slow sink cannot starve the others.
"""
from __future__ import annotations

import logging
import queue
import socket
import sys
import threading
import time
from dataclasses import dataclass, fields
from typing import Callable, Hashable, Optional, Protocol, Sequence

from flowkit.flow import FlowRecord
from flowkit.ipfix.codec import HEADER, MalformedMessage, TemplateCache, decode_message
from flowkit.ipfix.export import udp_socket_for

log = logging.getLogger(__name__)

DEFAULT_LISTEN = ("0.0.0.0", 4739)
RECV_BUFFER = 8 << 20


@dataclass
class ExporterStats:
    datagrams: int = 0
    malformed: int = 0
    flows_decoded: int = 0
    unknown_template_drops: int = 0
    sequence_gaps: int = 0
    templates_learned: int = 0

    def add(self, other: "ExporterStats") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))


@dataclass(frozen=True)
class SendOutcome:
    destination: tuple[str, int]
    ok: bool
    error: Optional[str] = None


class Replicator:
    """Forward raw datagrams to a fixed set of destinations (tee)."""

    def __init__(self, destinations: Sequence[tuple[str, int]]):
        self.destinations = list(destinations)
        self._socks: dict[int, socket.socket] = {}
        self.sent = {d: 0 for d in self.destinations}
        self.failed = {d: 0 for d in self.destinations}

    def _sock(self, host: str) -> socket.socket:
        family = socket.AF_INET6 if ":" in host else socket.AF_INET
        s = self._socks.get(family)
        if s is None:
            s = self._socks[family] = udp_socket_for(host)
        return s

    def replicate(self, data: bytes) -> list[SendOutcome]:
        return replicate_datagram(data, self.destinations, self)

    def close(self) -> None:
        for s in self._socks.values():
            s.close()
        self._socks.clear()


def replicate_datagram(data: bytes, destinations: Sequence[tuple[str, int]],
                       replicator: Optional[Replicator] = None) -> list[SendOutcome]:
    """Send ``data`` unchanged to every destination; failures stay per-destination."""
    own = replicator is None
    rep = replicator or Replicator(destinations)
    outcomes = []
    try:
        for dest in destinations:
            try:
                rep._sock(dest[0]).sendto(data, dest)
            except OSError as exc:
                rep.failed[dest] = rep.failed.get(dest, 0) + 1
                outcomes.append(SendOutcome(dest, False, str(exc)))
                continue
            rep.sent[dest] = rep.sent.get(dest, 0) + 1
            outcomes.append(SendOutcome(dest, True))
    finally:
        if own:
            rep.close()
    return outcomes


class Sink(Protocol):
    def deliver(self, flows: list[FlowRecord]) -> None: ...

    def close(self) -> None: ...


class StoreSink:
    def __init__(self, store, clock: Callable[[], float] = time.time):
        self.store = store
        self.clock = clock
        self.errors = 0

    def deliver(self, flows: list[FlowRecord]) -> None:
        now = self.clock()
        for f in flows:
            try:
                self.store.append(f, now)
            except (OSError, ValueError) as exc:
                self.errors += 1
                log.warning("event=store_error error=%s", exc)
        self.store.flush()

    def close(self) -> None:
        self.store.close()


class JsonlSink:
    def __init__(self, target: str = "-"):
        from flowkit.pipeline import to_jsonl
        self._to_jsonl = to_jsonl
        if target in ("-", "stdout"):
            self._out, self._owned = sys.stdout, False
        else:
            self._out, self._owned = open(target, "a", encoding="utf-8"), True

    def deliver(self, flows: list[FlowRecord]) -> None:
        self._out.writelines(self._to_jsonl(f) for f in flows)
        self._out.flush()

    def close(self) -> None:
        if self._owned:
            self._out.close()


class PipelineSink:
    def __init__(self, pipeline):
        self.pipeline = pipeline

    def deliver(self, flows: list[FlowRecord]) -> None:
        for f in flows:
            self.pipeline.process(f)

    def close(self) -> None:
        self.pipeline.close()


class QueuedSink:
    """Run a sink on its own thread behind a bounded queue; overflow is counted."""

    def __init__(self, sink: Sink, maxsize: int = 1024, name: str = "sink"):
        self.sink = sink
        self.name = name
        self.overflow = 0
        self.delivered = 0
        self.errors = 0
        self._queue: queue.Queue = queue.Queue(maxsize)
        self._thread = threading.Thread(target=self._run, name=f"sink-{name}", daemon=True)
        self._thread.start()

    def deliver(self, flows: list[FlowRecord]) -> None:
        try:
            self._queue.put_nowait(flows)
        except queue.Full:
            self.overflow += len(flows)

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            try:
                if item is None:
                    return
                self.sink.deliver(item)
                self.delivered += len(item)
            except Exception as exc:  # noqa: BLE001 - a broken sink must not kill the collector
                self.errors += 1
                log.error("event=sink_error sink=%s error=%s", self.name, exc)
            finally:
                self._queue.task_done()

    def join(self) -> None:
        """Block until everything queued so far has been handled."""
        self._queue.join()

    def close(self) -> None:
        self._queue.put(None)
        self._thread.join()
        self.sink.close()


class Collector:
    """Decode datagrams, keep per-exporter statistics and feed sinks."""

    def __init__(self, sinks: Sequence[Sink] = (), cache: Optional[TemplateCache] = None):
        self.sinks = list(sinks)
        self.cache = cache or TemplateCache()
        self.stats: dict[tuple[Hashable, Optional[int]], ExporterStats] = {}
        self._lock = threading.Lock()

    def handle_datagram(self, data: bytes, source: Hashable) -> ExporterStats:
        delta = ExporterStats(datagrams=1)
        odid = HEADER.unpack_from(data)[4] if len(data) >= HEADER.size else None
        try:
            result = decode_message(data, self.cache, source)
        except MalformedMessage as exc:
            delta.malformed = 1
            log.debug("event=malformed exporter=%s error=%s", source, exc)
        else:
            delta.flows_decoded = len(result.flows)
            delta.unknown_template_drops = result.unknown_template_records
            delta.sequence_gaps = 1 if result.sequence_gap else 0
            delta.templates_learned = result.templates_learned
            if result.flows:
                for sink in self.sinks:
                    sink.deliver(result.flows)
        with self._lock:
            self.stats.setdefault((source, odid), ExporterStats()).add(delta)
        return delta

    def totals(self) -> ExporterStats:
        total = ExporterStats()
        with self._lock:
            for s in self.stats.values():
                total.add(s)
        return total

    def log_stats(self) -> None:
        with self._lock:
            items = list(self.stats.items())
        for (source, odid), s in items:
            exporter = f"{source[0]}:{source[1]}" if isinstance(source, tuple) else source
            log.info("event=exporter_stats exporter=%s odid=%s datagrams=%d malformed=%d "
                     "flows_decoded=%d unknown_template_drops=%d sequence_gaps=%d",
                     exporter, odid, s.datagrams, s.malformed, s.flows_decoded,
                     s.unknown_template_drops, s.sequence_gaps)


class CollectorServer:
    """UDP receive loop: replicate, then hand off to exporter-partitioned workers."""

    def __init__(self, listen: tuple[str, int], collector: Collector,
                 replicator: Optional[Replicator] = None, workers: int = 2,
                 queue_size: int = 8192, stats_interval: float = 0.0):
        self.collector = collector
        self.replicator = replicator
        self.stats_interval = stats_interval
        self.sock = udp_socket_for(listen[0])
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, RECV_BUFFER)
        self.sock.bind(listen)
        self.sock.settimeout(0.2)
        self.address = self.sock.getsockname()[:2]
        self.received = 0
        self.worker_drops = 0
        self._stop = threading.Event()
        self._queues = [queue.Queue(queue_size) for _ in range(max(1, workers))]
        self._workers = [threading.Thread(target=self._work, args=(q,), daemon=True,
                                          name=f"decode-{i}")
                         for i, q in enumerate(self._queues)]
        for w in self._workers:
            w.start()

    def _work(self, q: queue.Queue) -> None:
        while True:
            item = q.get()
            try:
                if item is None:
                    return
                self.collector.handle_datagram(*item)
            finally:
                q.task_done()

    def serve_forever(self) -> None:
        next_stats = time.monotonic() + self.stats_interval if self.stats_interval else None
        while not self._stop.is_set():
            try:
                data, addr = self.sock.recvfrom(65535)
            except socket.timeout:
                data = None
            except OSError:
                if self._stop.is_set():
                    break
                raise
            if data is not None:
                self.received += 1
                if self.replicator is not None:
                    self.replicator.replicate(data)
                source = addr[:2]
                q = self._queues[hash(source) % len(self._queues)]
                try:
                    q.put_nowait((data, source))
                except queue.Full:
                    self.worker_drops += 1
            if next_stats is not None and time.monotonic() >= next_stats:
                self.collector.log_stats()
                next_stats = time.monotonic() + self.stats_interval

    def drain(self) -> None:
        """Wait until every received datagram has been decoded and delivered."""
        for q in self._queues:
            q.join()
        for sink in self.collector.sinks:
            if isinstance(sink, QueuedSink):
                sink.join()

    def stop(self) -> None:
        self._stop.set()

    def close(self) -> None:
        self._stop.set()
        for q in self._queues:
            q.put(None)
        for w in self._workers:
            w.join()
        self.sock.close()
        if self.replicator is not None:
            self.replicator.close()
        for sink in self.collector.sinks:
            sink.close()

    def start_thread(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="collector", daemon=True)
        t.start()
        return t
