import socket
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowkit.flow import FlowRecord, make_key
from flowkit.ipfix import TemplateCache, decode_message
from flowkit.ipfix.export import Exporter, UdpSender, parse_hostport

EXP = ("192.0.2.1", 4739)


def rec(i, v=4):
    src, dst = ("10.0.0.1", "10.0.0.2") if v == 4 else ("2001:db8::1", "2001:db8::2")
    return FlowRecord(make_key(src, dst, 17, i % 65536, 53), 1000 + i, 2000 + i, 1, 100)


def set_ids(msg):
    return struct.unpack_from("!H", msg, 16)[0]


def seq(msg):
    return struct.unpack_from("!I", msg, 8)[0]


def test_cold_start_template_then_data():
    ex = Exporter()
    assert ex.submit(rec(0), 0.0) == []
    assert ex.tick(0.5) == []
    out = ex.tick(1.0)
    assert [set_ids(m) for m in out] == [2, 256]
    assert ex.sequence == 1


def test_two_hundred_records_partitioned_in_order():
    ex = Exporter()
    out = []
    for i in range(200):
        out += ex.submit(rec(i), 0.0)
    out += ex.flush(0.0)
    assert set_ids(out[0]) == 2
    data = out[1:]
    assert all(len(m) <= 1464 for m in out)
    # 46-byte records, 1444 bytes of room: 31 per message
    assert [(len(m) - 20) // 46 for m in data] == [31] * 6 + [14]
    cache = TemplateCache()
    flows = []
    for m in out:
        flows += decode_message(m, cache, EXP).flows
    assert flows == [rec(i) for i in range(200)]
    assert [seq(m) for m in data] == [31 * k for k in range(7)]


def test_ipv6_batches_separately():
    ex = Exporter()
    for i in range(25):
        ex.submit(rec(i, 6), 0.0)
        ex.submit(rec(i, 4), 0.0)
    out = ex.flush(0.0)
    assert sorted((set_ids(m), len(m)) for m in out if set_ids(m) != 2) == \
        [(256, 20 + 46 * 25), (257, 20 + 70 * 5)]


@given(st.lists(st.integers(1, 40), max_size=30), st.integers(0, 2**32 - 1))
@settings(max_examples=100)
def test_sequence_counts_records_mod_2_32(batches, start):
    ex = Exporter()
    ex.sequence = start
    total = 0
    for n in batches:
        for i in range(n):
            ex.submit(rec(i), 0.0)
        ex.flush(0.0)
        total += n
    assert ex.sequence == (start + total) % 2**32


def test_tick_template_refresh_without_data():
    ex = Exporter()
    ex.submit(rec(0), 0.0)
    ex.flush(0.0)
    assert ex.tick(599.0) == []
    (msg,) = ex.tick(601.0)
    assert set_ids(msg) == 2


def test_tick_linger_flush():
    ex = Exporter()
    ex.submit(rec(0), 10.0)
    ex.flush(10.0)
    ex.submit(rec(1), 20.0)
    assert ex.tick(20.9) == []
    (msg,) = ex.tick(21.0)
    assert set_ids(msg) == 256


def test_two_ticks_nothing_pending():
    ex = Exporter()
    ex.submit(rec(0), 0.0)
    ex.flush(0.0)
    assert ex.tick(5.0) == [] and ex.tick(5.5) == []


def test_template_refresh_after_4096_records():
    ex = Exporter()
    out = []
    for i in range(4096 + 31):
        out += ex.submit(rec(i), 0.0)
    out += ex.flush(0.0)
    kinds = [set_ids(m) for m in out]
    assert kinds.count(2) == 2
    second = kinds.index(2, 1)
    records_before = sum((len(m) - 20) // 46 for m in out[:second] if set_ids(m) == 256)
    assert records_before >= 4096 and records_before - 31 < 4096


def test_template_refresh_after_interval_precedes_data():
    ex = Exporter(template_interval=2.0)
    ex.submit(rec(0), 0.0)
    ex.flush(0.0)
    ex.submit(rec(1), 2.5)
    assert [set_ids(m) for m in ex.flush(2.5)] == [2, 256]


def test_late_joiner_decodes_after_next_template():
    ex = Exporter(template_interval=2.0)
    stream = []
    for t in range(10):
        stream += [(t, m) for m in ex.submit(rec(t), float(t))]
        stream += [(t, m) for m in ex.tick(float(t) + 1.0)]
    cache = TemplateCache()
    seen_template = False
    for t, m in stream:
        if t < 3:
            continue
        res = decode_message(m, cache, EXP)
        seen_template = seen_template or res.templates_learned > 0
        if seen_template:
            assert res.unknown_template_records == 0


@pytest.mark.parametrize("text,expected", [
    ("127.0.0.1:9995", ("127.0.0.1", 9995)),
    ("[::1]:4739", ("::1", 4739)),
    ("collector", ("collector", 4739)),
    (":2055", ("0.0.0.0", 2055)),
    ("::1", ("::1", 4739)),
])
def test_parse_hostport(text, expected):
    assert parse_hostport(text) == expected


def test_parse_hostport_bad_port():
    with pytest.raises(ValueError):
        parse_hostport("h:70000")


def test_udp_sender_delivers_and_counts():
    rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    rx.bind(("127.0.0.1", 0))
    rx.settimeout(2)
    sender = UdpSender(rx.getsockname())
    for i in range(5):
        sender.send(bytes([i]) * 10)
    sender.close()
    got = [rx.recv(100) for _ in range(5)]
    rx.close()
    assert got == [bytes([i]) * 10 for i in range(5)]
    assert sender.sent == 5 and sender.dropped == 0


def test_udp_sender_overflow_is_counted():
    sender = UdpSender(("127.0.0.1", 9), queue_size=1, pace=0.05)
    accepted = sum(sender.send(b"x") for _ in range(50))
    sender.close()
    assert sender.dropped == 50 - accepted > 0
