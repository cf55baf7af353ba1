import ipaddress
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowkit.flow import FlowRecord, make_key
from flowkit.ipfix import (
    CANONICAL_TEMPLATES,
    IPV4_TEMPLATE,
    IPV6_TEMPLATE,
    EmptyBatch,
    FieldSpec,
    MalformedMessage,
    MessageTooLarge,
    RecordTemplateMismatch,
    TemplateCache,
    TemplateRecord,
    decode_message,
    encode_message,
    encode_template_message,
    records_per_message,
)

from conftest import flow_records
from oracles import scapy_dissect, scapy_flows, scapy_templates

EXP = ("192.0.2.1", 4739)
HDR = dict(sequence=0, export_time=1_700_000_000, odid=1)


def v4flow(sport=1234, **kw):
    vals = dict(first=1_700_000_000_123, last=1_700_000_001_456, packets=7, bytes=9001, flags=0x1B)
    vals.update(kw)
    return FlowRecord(make_key("10.1.2.3", "192.0.2.9", 6, sport, 443), vals["first"],
                      vals["last"], vals["packets"], vals["bytes"], vals["flags"])


def message(*sets, sequence=0, odid=1, export_time=1_700_000_000):
    body = b"".join(struct.pack("!HH", sid, 4 + len(b)) + b for sid, b in sets)
    return struct.pack("!HHIII", 10, 16 + len(body), export_time, sequence, odid) + body


def template_body(tid, fields):
    out = struct.pack("!HH", tid, len(fields))
    for f in fields:
        if len(f) == 3:
            out += struct.pack("!HHI", f[0] | 0x8000, f[1], f[2])
        else:
            out += struct.pack("!HH", *f)
    return out


def test_record_sizes():
    assert IPV4_TEMPLATE.record_length == 46
    assert IPV6_TEMPLATE.record_length == 70
    assert records_per_message(IPV4_TEMPLATE) == 31
    assert records_per_message(IPV6_TEMPLATE) == 20


def test_one_ipv4_flow_message_layout_and_scapy():
    data = encode_message([v4flow()], IPV4_TEMPLATE, **HDR)
    assert len(data) == 16 + 4 + 46
    version, length = struct.unpack_from("!HH", data)
    assert (version, length) == (10, len(data))
    tmpl = encode_template_message(CANONICAL_TEMPLATES, **HDR)
    dissected = scapy_dissect([tmpl, data])
    assert scapy_flows(dissected) == [v4flow().identity()]


def test_template_message_against_scapy():
    tmpl = encode_template_message([IPV4_TEMPLATE, IPV6_TEMPLATE], **HDR)
    sets = struct.unpack_from("!HH", tmpl, 16)
    assert sets == (2, len(tmpl) - 16)
    templates = scapy_templates(scapy_dissect([tmpl]))
    assert templates[256] == [(f.element_id, f.length) for f in IPV4_TEMPLATE.fields]
    assert templates[257] == [(f.element_id, f.length) for f in IPV6_TEMPLATE.fields]


def test_template_message_does_not_advance_sequence():
    cache = TemplateCache()
    decode_message(encode_template_message(CANONICAL_TEMPLATES, sequence=5,
                                           export_time=0, odid=1), cache, EXP)
    data = encode_message([v4flow()], IPV4_TEMPLATE, sequence=5, export_time=0, odid=1)
    assert decode_message(data, cache, EXP).sequence_gap == 0


def test_empty_batch():
    with pytest.raises(EmptyBatch):
        encode_message([], IPV4_TEMPLATE, **HDR)
    assert issubclass(EmptyBatch, RecordTemplateMismatch)


def test_version_mismatch():
    r6 = FlowRecord(make_key("::1", "::2", 17), 0, 0, 1, 60)
    with pytest.raises(RecordTemplateMismatch):
        encode_message([r6], IPV4_TEMPLATE, **HDR)


def test_too_large():
    with pytest.raises(MessageTooLarge):
        encode_message([v4flow()] * 32, IPV4_TEMPLATE, **HDR)
    assert len(encode_message([v4flow()] * 31, IPV4_TEMPLATE, **HDR)) <= 1464


def test_template_record_invariants():
    with pytest.raises(ValueError):
        TemplateRecord(255, (FieldSpec(1, 8),))
    with pytest.raises(ValueError):
        TemplateRecord(300, ())


def _roundtrip(records, template):
    cache = TemplateCache()
    decode_message(encode_template_message(CANONICAL_TEMPLATES, **HDR), cache, EXP)
    res = decode_message(encode_message(records, template, **HDR), cache, EXP)
    return res.flows


@given(st.lists(flow_records(4), min_size=1, max_size=31))
@settings(max_examples=200)
def test_roundtrip_ipv4(records):
    assert _roundtrip(records, IPV4_TEMPLATE) == records


@given(st.lists(flow_records(6), min_size=1, max_size=20))
@settings(max_examples=200)
def test_roundtrip_ipv6(records):
    assert _roundtrip(records, IPV6_TEMPLATE) == records


@given(st.lists(flow_records(), min_size=1, max_size=40))
@settings(max_examples=50, deadline=None)
def test_scapy_agrees_on_random_records(records):
    msgs = [encode_template_message(CANONICAL_TEMPLATES, **HDR)]
    for tmpl in CANONICAL_TEMPLATES:
        batch = [r for r in records if r.ip_version == tmpl.ip_version]
        n = records_per_message(tmpl)
        msgs += [encode_message(batch[i:i + n], tmpl, **HDR) for i in range(0, len(batch), n)]
    expected = [r.identity() for r in records if r.ip_version == 4] + \
               [r.identity() for r in records if r.ip_version == 6]
    assert scapy_flows(scapy_dissect(msgs)) == expected


def test_data_before_template():
    cache = TemplateCache()
    res = decode_message(encode_message([v4flow()] * 5, IPV4_TEMPLATE, **HDR), cache, EXP)
    assert res.flows == [] and res.unknown_template_records == 1


def test_truncated_header():
    with pytest.raises(MalformedMessage):
        decode_message(b"\x00\x0a" + bytes(8), TemplateCache(), EXP)


@pytest.mark.parametrize("mutate", [
    lambda d: b"\x00\x09" + d[2:],                          # version
    lambda d: d[:2] + struct.pack("!H", len(d) + 1) + d[4:],  # length
    lambda d: d[:-1],                                       # datagram shorter than header says
    lambda d: d[:18] + struct.pack("!H", 4000) + d[20:],    # set overruns message
    lambda d: d[:18] + struct.pack("!H", 2) + d[20:],       # set length below header size
])
def test_malformed_messages(mutate):
    data = encode_message([v4flow()], IPV4_TEMPLATE, **HDR)
    with pytest.raises(MalformedMessage):
        decode_message(mutate(data), TemplateCache(), EXP)


def test_malformed_message_is_atomic():
    cache = TemplateCache()
    good_tmpl = template_body(300, [(1, 8), (8, 4), (12, 4)])
    bad = message((2, good_tmpl), (256, b"\x00" * 10))
    bad = bad[:-12] + struct.pack("!HH", 256, 400) + bad[-8:]  # last set overruns
    with pytest.raises(MalformedMessage):
        decode_message(bad, cache, EXP)
    assert len(cache) == 0
    assert cache.expected_sequence(EXP, 1) is None


def test_template_replacement_uses_latest_layout():
    cache = TemplateCache()
    decode_message(message((2, template_body(400, [(8, 4), (12, 4), (2, 8)]))), cache, EXP)
    decode_message(message((2, template_body(400, [(8, 4), (12, 4), (1, 4), (2, 4)]))), cache, EXP)
    rec = ipaddress.IPv4Address("1.1.1.1").packed + ipaddress.IPv4Address("2.2.2.2").packed \
        + struct.pack("!II", 555, 3)
    res = decode_message(message((400, rec)), cache, EXP)
    (f,) = res.flows
    assert (f.bytes, f.packets, str(f.dst_ip)) == (555, 3, "2.2.2.2")


def test_withdrawal_single_and_all():
    cache = TemplateCache()
    decode_message(encode_template_message(CANONICAL_TEMPLATES, **HDR), cache, EXP)
    res = decode_message(message((2, struct.pack("!HH", 256, 0))), cache, EXP)
    assert res.templates_withdrawn == 1
    assert cache.get(EXP, 1, 256) is None and cache.get(EXP, 1, 257) is not None
    decode_message(message((2, struct.pack("!HH", 2, 0))), cache, EXP)
    assert len(cache) == 0
    res = decode_message(encode_message([v4flow()], IPV4_TEMPLATE, **HDR), cache, EXP)
    assert res.unknown_template_records == 1


def test_templates_are_per_exporter_and_domain():
    cache = TemplateCache()
    decode_message(encode_template_message(CANONICAL_TEMPLATES, **HDR), cache, EXP)
    data = encode_message([v4flow()], IPV4_TEMPLATE, sequence=0, export_time=0, odid=2)
    assert decode_message(data, cache, EXP).unknown_template_records == 1
    data = encode_message([v4flow()], IPV4_TEMPLATE, **HDR)
    assert decode_message(data, cache, ("198.51.100.1", 4739)).unknown_template_records == 1
    assert len(decode_message(data, cache, EXP).flows) == 1


def test_template_expiry():
    now = [0.0]
    cache = TemplateCache(expiry=1800, clock=lambda: now[0])
    decode_message(encode_template_message(CANONICAL_TEMPLATES, **HDR), cache, EXP)
    now[0] = 1799
    assert cache.get(EXP, 1, 256) is not None
    now[0] = 1801
    assert cache.get(EXP, 1, 256) is None
    assert cache.expire() == 1  # 257 still pending eager removal


def test_sequence_gap_signed_and_wrapping():
    cache = TemplateCache()
    decode_message(encode_template_message(CANONICAL_TEMPLATES, **HDR), cache, EXP)

    def data(seq, n=1):
        return encode_message([v4flow()] * n, IPV4_TEMPLATE, sequence=seq, export_time=0, odid=1)

    assert decode_message(data(0, 3), cache, EXP).sequence_gap == 0
    assert decode_message(data(3), cache, EXP).sequence_gap == 0
    assert decode_message(data(10), cache, EXP).sequence_gap == 6
    assert decode_message(data(5), cache, EXP).sequence_gap == -6
    assert decode_message(data(2**32 - 1, 2), cache, EXP).sequence_gap != 0
    assert decode_message(data(1), cache, EXP).sequence_gap == 0


def test_options_template_set_skipped_and_counted():
    opts = struct.pack("!HHH", 500, 2, 1) + struct.pack("!HHHH", 149, 4, 41, 8)
    msg = message((3, opts), (2, template_body(256, [(f.element_id, f.length)
                                                     for f in IPV4_TEMPLATE.fields])))
    res = decode_message(msg, TemplateCache(), EXP)
    assert res.options_template_sets == 1 and res.templates_learned == 1


def test_variable_length_and_enterprise_fields_skipped():
    cache = TemplateCache()
    fields = [(8, 4), (12, 4), (1, 8), (2, 8), (200, 0xFFFF), (77, 6, 29305), (7, 2), (11, 2),
              (152, 8), (153, 8)]
    decode_message(message((2, template_body(600, fields))), cache, EXP)
    a, b = ipaddress.IPv4Address("10.0.0.1").packed, ipaddress.IPv4Address("10.0.0.2").packed
    tail = struct.pack("!HHQQ", 1000, 2000, 1_000, 2_000)
    rec1 = a + b + struct.pack("!QQ", 300, 3) + b"\x03abc" + b"E" * 6 + tail
    rec2 = a + b + struct.pack("!QQ", 400, 4) + b"\xff" + struct.pack("!H", 300) + b"x" * 300 \
        + b"E" * 6 + tail
    res = decode_message(message((600, rec1 + rec2)), cache, EXP)
    assert [(f.bytes, f.packets, f.src_port, f.dst_port, f.first_seen) for f in res.flows] == \
        [(300, 3, 1000, 2000, 1000), (400, 4, 1000, 2000, 1000)]


def test_variable_length_overrun_is_malformed():
    cache = TemplateCache()
    decode_message(message((2, template_body(600, [(8, 4), (12, 4), (200, 0xFFFF)]))), cache, EXP)
    with pytest.raises(MalformedMessage):
        decode_message(message((600, bytes(8) + b"\x20abc")), cache, EXP)


def test_seconds_and_missing_timestamps():
    cache = TemplateCache()
    decode_message(message((2, template_body(700, [(8, 4), (12, 4), (150, 4), (151, 4)])),
                           export_time=50), cache, EXP)
    decode_message(message((2, template_body(701, [(8, 4), (12, 4)]))), cache, EXP)
    rec = bytes(8) + struct.pack("!II", 10, 12)
    res = decode_message(message((700, rec), (701, bytes(8)), export_time=50), cache, EXP)
    assert [(f.first_seen, f.last_seen) for f in res.flows] == [(10_000, 12_000), (50_000, 50_000)]


def test_template_without_addresses_counts_skipped():
    cache = TemplateCache()
    decode_message(message((2, template_body(800, [(1, 8)]))), cache, EXP)
    res = decode_message(message((800, bytes(24))), cache, EXP)
    assert res.flows == [] and res.records_skipped == 3


def test_set_padding_tolerated():
    cache = TemplateCache()
    decode_message(encode_template_message(CANONICAL_TEMPLATES, **HDR), cache, EXP)
    data = encode_message([v4flow()], IPV4_TEMPLATE, **HDR)
    body = data[20:] + b"\x00\x00\x00"
    res = decode_message(message((256, body)), cache, EXP)
    assert res.flows == [v4flow()]


@given(st.binary(max_size=300))
@settings(max_examples=3000)
def test_fuzz_random_bytes(data):
    try:
        decode_message(data, TemplateCache(), EXP)
    except MalformedMessage:
        pass


@given(st.binary(min_size=1, max_size=16), st.integers(0, 200))
@settings(max_examples=3000)
def test_fuzz_mutated_valid_stream(noise, pos):
    cache = TemplateCache()
    tmpl = bytearray(encode_template_message(CANONICAL_TEMPLATES, **HDR))
    data = bytearray(encode_message([v4flow()] * 3, IPV4_TEMPLATE, **HDR))
    for buf in (tmpl, data):
        p = pos % len(buf)
        buf[p:p + len(noise)] = noise
        try:
            decode_message(bytes(buf), cache, EXP)
        except MalformedMessage:
            pass
