import hashlib
import os
import socket
import threading
import time

from flowkit.flow import FlowRecord, make_key
from flowkit.ipfix import CANONICAL_TEMPLATES, IPV4_TEMPLATE, encode_message, encode_template_message
from flowkit.ipfix.collect import (
    Collector,
    CollectorServer,
    ExporterStats,
    QueuedSink,
    Replicator,
    StoreSink,
    replicate_datagram,
)
from flowkit.ipfix.export import Exporter
from flowkit.store import FlowStore, scan

SRC = ("192.0.2.1", 4739)


def rec(i):
    return FlowRecord(make_key("10.0.0.1", "10.0.0.2", 6, 1000 + i, 80), 1_700_000_000_000 + i,
                      1_700_000_000_500 + i, 2, 200)


class ListSink:
    def __init__(self):
        self.flows = []
        self.closed = False

    def deliver(self, flows):
        self.flows.extend(flows)

    def close(self):
        self.closed = True


def receivers(n):
    socks = []
    for _ in range(n):
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        s.bind(("127.0.0.1", 0))
        s.settimeout(2)
        socks.append(s)
    return socks


def test_replicate_three_destinations_byte_identical():
    socks = receivers(3)
    dests = [s.getsockname() for s in socks]
    payloads = [os.urandom(n) for n in (1, 100, 1464, 9000)]
    rep = Replicator(dests)
    for p in payloads:
        outcomes = rep.replicate(p)
        assert [o.ok for o in outcomes] == [True] * 3
    for s in socks:
        got = [s.recv(65535) for _ in payloads]
        assert [hashlib.sha256(g).digest() for g in got] == \
            [hashlib.sha256(p).digest() for p in payloads]
        s.close()
    rep.close()
    assert rep.sent == {d: 4 for d in dests}


def test_replicate_no_destinations():
    assert replicate_datagram(b"abc", []) == []


def test_replicate_failure_is_isolated():
    socks = receivers(2)
    dests = [socks[0].getsockname(), ("255.255.255.255", 4739), socks[1].getsockname()]
    rep = Replicator(dests)
    outcomes = rep.replicate(b"payload")
    assert [o.ok for o in outcomes] == [True, False, True]
    assert rep.failed[dests[1]] == 1
    assert [s.recv(100) for s in socks] == [b"payload", b"payload"]
    for s in socks:
        s.close()
    rep.close()


def test_handle_template_then_five_records():
    sink = ListSink()
    col = Collector([sink])
    ex = Exporter(odid=3)
    msgs = []
    for i in range(5):
        msgs += ex.submit(rec(i), 0.0)
    msgs += ex.flush(0.0)
    deltas = [col.handle_datagram(m, SRC) for m in msgs]
    assert sum(d.flows_decoded for d in deltas) == 5
    assert sink.flows == [rec(i) for i in range(5)]
    s = col.stats[(SRC, 3)]
    assert (s.datagrams, s.flows_decoded, s.templates_learned) == (2, 5, 2)


def test_handle_data_before_template():
    sink = ListSink()
    col = Collector([sink])
    data = encode_message([rec(0)], IPV4_TEMPLATE, sequence=0, export_time=0, odid=0)
    d = col.handle_datagram(data, SRC)
    assert d.unknown_template_drops == 1 and sink.flows == []


def test_handle_random_bytes():
    col = Collector([ListSink()])
    d = col.handle_datagram(os.urandom(40), SRC)
    assert d.malformed == 1 and d.datagrams == 1
    assert col.totals().malformed == 1


def test_sequence_gap_counted():
    col = Collector()
    col.handle_datagram(encode_template_message(CANONICAL_TEMPLATES, sequence=0,
                                                export_time=0, odid=0), SRC)
    col.handle_datagram(encode_message([rec(0)], IPV4_TEMPLATE, sequence=0, export_time=0,
                                       odid=0), SRC)
    d = col.handle_datagram(encode_message([rec(1)], IPV4_TEMPLATE, sequence=7,
                                           export_time=0, odid=0), SRC)
    assert d.sequence_gaps == 1


def test_stats_monotone():
    col = Collector()
    prev = ExporterStats()
    for i in range(50):
        data = os.urandom(30) if i % 3 else encode_template_message(
            CANONICAL_TEMPLATES, sequence=0, export_time=0, odid=0)
        col.handle_datagram(data, SRC)
        cur = col.totals()
        assert all(getattr(cur, f) >= getattr(prev, f) for f in vars(cur))
        prev = cur


def test_sinks_receive_in_configuration_order():
    order = []

    class Tagged(ListSink):
        def __init__(self, tag):
            super().__init__()
            self.tag = tag

        def deliver(self, flows):
            order.append(self.tag)

    col = Collector([Tagged("a"), Tagged("b"), Tagged("c")])
    ex = Exporter()
    ex.submit(rec(0), 0)
    for m in ex.flush(0):
        col.handle_datagram(m, SRC)
    assert order == ["a", "b", "c"]


def test_slow_and_failing_sinks_do_not_starve_others():
    release = threading.Event()

    class Slow(ListSink):
        def deliver(self, flows):
            release.wait(5)
            super().deliver(flows)

    class Broken(ListSink):
        def deliver(self, flows):
            raise RuntimeError("disk on fire")

    good = ListSink()
    slow = QueuedSink(Slow(), maxsize=2, name="slow")
    broken = QueuedSink(Broken(), name="broken")
    fast = QueuedSink(good, name="fast")
    col = Collector([slow, broken, fast])
    ex = Exporter()
    msgs = []
    for i in range(100):
        msgs += ex.submit(rec(i), 0)
    msgs += ex.flush(0)
    for m in msgs:
        col.handle_datagram(m, SRC)
    fast.join()
    broken.join()
    assert good.flows == [rec(i) for i in range(100)]
    assert broken.errors > 0
    assert slow.overflow > 0
    release.set()
    for s in (slow, broken, fast):
        s.close()
    assert slow.delivered + slow.overflow == 100


def test_server_end_to_end_with_store_and_tee(tmp_path):
    downstream = receivers(1)[0]
    store = FlowStore(tmp_path / "store")
    sink = ListSink()
    col = Collector([StoreSink(store, clock=lambda: 1_700_000_000.0), sink])
    server = CollectorServer(("127.0.0.1", 0), col, Replicator([downstream.getsockname()]))
    server.start_thread()
    ex = Exporter()
    msgs = []
    for i in range(70):
        msgs += ex.submit(rec(i), 0)
    msgs += ex.flush(0)
    tx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    for m in msgs:
        tx.sendto(m, server.address)
    deadline = time.monotonic() + 5
    while server.received < len(msgs) and time.monotonic() < deadline:
        time.sleep(0.01)
    server.drain()
    server.stop()
    server.close()
    tx.close()
    teed = [downstream.recv(65535) for _ in msgs]
    downstream.close()
    assert teed == msgs
    assert sink.flows == [rec(i) for i in range(70)]
    stored = list(scan(tmp_path / "store"))
    assert stored == [rec(i) for i in range(70)]
    assert sink.closed
