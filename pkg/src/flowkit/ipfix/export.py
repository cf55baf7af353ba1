"""
Batch FlowRecords into IPFIX datagrams and ship them over UDP.

:class:`Exporter` is transport-free: ``submit``/``tick``/``flush`` return the
datagrams that became ready, in send order. :class:`UdpSender` puts them on
the wire from a background thread behind a bounded queue.
"""
from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from typing import Optional, Sequence

from flowkit.flow import FlowRecord
from flowkit.ipfix.codec import (
    CANONICAL_TEMPLATES,
    MAX_MESSAGE_SIZE,
    TemplateRecord,
    encode_message,
    encode_template_message,
    records_per_message,
)

log = logging.getLogger(__name__)

DEFAULT_PORT = 4739


class Exporter:
    """Exporting process state for one observation domain.

    A template message precedes the first data message, and is repeated
    before any data message once ``template_interval`` seconds or
    ``template_records`` data records have passed since the last one.
    """

    def __init__(self, odid: int = 0, *, template_interval: float = 600.0,
                 template_records: int = 4096, linger: float = 1.0,
                 max_size: int = MAX_MESSAGE_SIZE,
                 templates: Sequence[TemplateRecord] = CANONICAL_TEMPLATES):
        self.odid = odid
        self.template_interval = template_interval
        self.template_records = template_records
        self.linger = linger
        self.max_size = max_size
        self.templates = tuple(templates)
        self._by_version = {t.ip_version: t for t in self.templates}
        self._capacity = {t.template_id: records_per_message(t, max_size) for t in self.templates}
        self.sequence = 0
        self.last_template_send: Optional[float] = None
        self.records_since_template = 0
        self._batches: dict[int, list[FlowRecord]] = {t.template_id: [] for t in self.templates}
        self._batch_started: dict[int, float] = {}
        self.data_messages = 0
        self.template_messages = 0
        self.bytes_out = 0

    def submit(self, record: FlowRecord, now: float) -> list[bytes]:
        template = self._by_version[record.key.ip_version]
        tid = template.template_id
        batch = self._batches[tid]
        if not batch:
            self._batch_started[tid] = now
        batch.append(record)
        if len(batch) >= self._capacity[tid]:
            return self._emit(template, now)
        return []

    def tick(self, now: float) -> list[bytes]:
        """Flush batches older than the linger time; refresh templates if due."""
        out: list[bytes] = []
        for t in self.templates:
            tid = t.template_id
            if self._batches[tid] and now - self._batch_started[tid] >= self.linger:
                out += self._emit(t, now)
        if (self.last_template_send is not None
                and now - self.last_template_send >= self.template_interval):
            out.append(self._template_message(now))
        return out

    def flush(self, now: float) -> list[bytes]:
        out: list[bytes] = []
        for t in self.templates:
            if self._batches[t.template_id]:
                out += self._emit(t, now)
        return out

    @property
    def pending(self) -> int:
        return sum(len(b) for b in self._batches.values())

    def _template_due(self, now: float) -> bool:
        return (self.last_template_send is None
                or now - self.last_template_send >= self.template_interval
                or self.records_since_template >= self.template_records)

    def _template_message(self, now: float) -> bytes:
        msg = encode_template_message(self.templates, sequence=self.sequence,
                                      export_time=int(now), odid=self.odid,
                                      max_size=self.max_size)
        self.last_template_send = now
        self.records_since_template = 0
        self.template_messages += 1
        self.bytes_out += len(msg)
        return msg

    def _emit(self, template: TemplateRecord, now: float) -> list[bytes]:
        tid = template.template_id
        records = self._batches[tid]
        self._batches[tid] = []
        self._batch_started.pop(tid, None)
        out = []
        if self._template_due(now):
            out.append(self._template_message(now))
        msg = encode_message(records, template, sequence=self.sequence,
                             export_time=int(now), odid=self.odid, max_size=self.max_size)
        self.sequence = (self.sequence + len(records)) & 0xFFFFFFFF
        self.records_since_template += len(records)
        self.data_messages += 1
        self.bytes_out += len(msg)
        out.append(msg)
        return out


def parse_hostport(text: str, default_port: int = DEFAULT_PORT) -> tuple[str, int]:
    """Parse ``host:port``, ``[v6]:port``, ``host`` or ``:port``."""
    text = text.strip()
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = rest[1:] if rest.startswith(":") else ""
    elif text.count(":") == 1:
        host, port = text.split(":")
    elif text.count(":") > 1:
        host, port = text, ""
    else:
        host, port = text, ""
    port_num = int(port) if port else default_port
    if not 0 <= port_num <= 65535:
        raise ValueError(f"port out of range in {text!r}")
    return host or "0.0.0.0", port_num


def udp_socket_for(host: str) -> socket.socket:
    family = socket.AF_INET6 if ":" in host else socket.AF_INET
    return socket.socket(family, socket.SOCK_DGRAM)


class UdpSender:
    """Send datagrams to one destination without blocking the caller.

    Datagrams that do not fit into the bounded queue are dropped and counted,
    as are socket errors.
    """

    def __init__(self, destination: tuple[str, int], queue_size: int = 4096,
                 pace: float = 0.0):
        self.destination = destination
        self.pace = pace
        self.sent = 0
        self.dropped = 0
        self.errors = 0
        self._sock = udp_socket_for(destination[0])
        self._queue: queue.Queue = queue.Queue(queue_size)
        self._thread = threading.Thread(target=self._run, name="udp-sender", daemon=True)
        self._thread.start()

    def send(self, datagram: bytes) -> bool:
        try:
            self._queue.put_nowait(datagram)
            return True
        except queue.Full:
            self.dropped += 1
            return False

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            try:
                self._sock.sendto(item, self.destination)
                self.sent += 1
            except OSError as exc:
                self.errors += 1
                log.debug("event=send_error dest=%s:%d error=%s", *self.destination, exc)
            if self.pace:
                time.sleep(self.pace)

    def close(self, timeout: float = 10.0) -> None:
        """Drain queued datagrams, then stop."""
        self._queue.put(None)
        self._thread.join(timeout)
        self._sock.close()
