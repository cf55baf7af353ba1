"""
IPFIX message encoding and decoding (RFC 7011).

Encoding emits only the two canonical templates. Decoding accepts any
template layout: recognised information elements are mapped onto
FlowRecord fields, everything else (enterprise elements, variable-length
fields, options templates) is skipped by length.
"""
from __future__ import annotations

import ipaddress
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Optional, Sequence

from flowkit.flow import FlowKey, FlowRecord

IPFIX_VERSION = 10
TEMPLATE_SET_ID = 2
OPTIONS_TEMPLATE_SET_ID = 3
MIN_DATA_SET_ID = 256
MAX_MESSAGE_SIZE = 1464
VARIABLE_LENGTH = 0xFFFF

HEADER = struct.Struct("!HHIII")
SET_HEADER = struct.Struct("!HH")

# IANA information element ids
IE_OCTET_DELTA_COUNT = 1
IE_PACKET_DELTA_COUNT = 2
IE_PROTOCOL_IDENTIFIER = 4
IE_TCP_CONTROL_BITS = 6
IE_SOURCE_TRANSPORT_PORT = 7
IE_SOURCE_IPV4_ADDRESS = 8
IE_DESTINATION_TRANSPORT_PORT = 11
IE_DESTINATION_IPV4_ADDRESS = 12
IE_SOURCE_IPV6_ADDRESS = 27
IE_DESTINATION_IPV6_ADDRESS = 28
IE_OCTET_TOTAL_COUNT = 85
IE_PACKET_TOTAL_COUNT = 86
IE_FLOW_START_SECONDS = 150
IE_FLOW_END_SECONDS = 151
IE_FLOW_START_MILLISECONDS = 152
IE_FLOW_END_MILLISECONDS = 153
IE_FLOW_START_MICROSECONDS = 154
IE_FLOW_END_MICROSECONDS = 155


class IpfixError(Exception):
    pass


class MalformedMessage(IpfixError):
    pass


class RecordTemplateMismatch(IpfixError):
    pass


class EmptyBatch(RecordTemplateMismatch):
    pass


class MessageTooLarge(IpfixError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    element_id: int
    length: int
    enterprise: Optional[int] = None


@dataclass(frozen=True)
class TemplateRecord:
    template_id: int
    fields: tuple[FieldSpec, ...]

    def __post_init__(self):
        if self.template_id < MIN_DATA_SET_ID:
            raise ValueError(f"template id {self.template_id} < 256")
        if not self.fields:
            raise ValueError("template has no fields")

    @property
    def is_variable(self) -> bool:
        return any(f.length == VARIABLE_LENGTH for f in self.fields)

    @property
    def min_record_length(self) -> int:
        # A variable-length field takes at least its one-byte length prefix.
        return sum(1 if f.length == VARIABLE_LENGTH else f.length for f in self.fields)

    @property
    def record_length(self) -> Optional[int]:
        return None if self.is_variable else self.min_record_length

    @property
    def ip_version(self) -> Optional[int]:
        """4 or 6 when the template carries a usable address pair, else None."""
        return _address_version(self)

    def encoded_length(self) -> int:
        return 4 + sum(8 if f.enterprise is not None else 4 for f in self.fields)


def _canonical(template_id: int, src_ie: int, dst_ie: int, addr_len: int) -> TemplateRecord:
    return TemplateRecord(template_id, (
        FieldSpec(IE_OCTET_DELTA_COUNT, 8),
        FieldSpec(IE_PACKET_DELTA_COUNT, 8),
        FieldSpec(IE_PROTOCOL_IDENTIFIER, 1),
        FieldSpec(IE_TCP_CONTROL_BITS, 1),
        FieldSpec(IE_SOURCE_TRANSPORT_PORT, 2),
        FieldSpec(src_ie, addr_len),
        FieldSpec(IE_DESTINATION_TRANSPORT_PORT, 2),
        FieldSpec(dst_ie, addr_len),
        FieldSpec(IE_FLOW_START_MILLISECONDS, 8),
        FieldSpec(IE_FLOW_END_MILLISECONDS, 8),
    ))


IPV4_TEMPLATE = _canonical(256, IE_SOURCE_IPV4_ADDRESS, IE_DESTINATION_IPV4_ADDRESS, 4)
IPV6_TEMPLATE = _canonical(257, IE_SOURCE_IPV6_ADDRESS, IE_DESTINATION_IPV6_ADDRESS, 16)
CANONICAL_TEMPLATES = (IPV4_TEMPLATE, IPV6_TEMPLATE)


def template_for(record: FlowRecord) -> TemplateRecord:
    return IPV4_TEMPLATE if record.key.ip_version == 4 else IPV6_TEMPLATE


def records_per_message(template: TemplateRecord, max_size: int = MAX_MESSAGE_SIZE) -> int:
    return (max_size - HEADER.size - SET_HEADER.size) // template.record_length


# --- encoding ---------------------------------------------------------------

_INT_CODES = {1: "B", 2: "H", 4: "I", 8: "Q"}

_RECORD_GETTERS: dict[int, Callable[[FlowRecord], object]] = {
    IE_OCTET_DELTA_COUNT: lambda r: r.bytes,
    IE_PACKET_DELTA_COUNT: lambda r: r.packets,
    IE_PROTOCOL_IDENTIFIER: lambda r: r.key.protocol,
    IE_TCP_CONTROL_BITS: lambda r: r.tcp_flags,
    IE_SOURCE_TRANSPORT_PORT: lambda r: r.key.src_port,
    IE_DESTINATION_TRANSPORT_PORT: lambda r: r.key.dst_port,
    IE_SOURCE_IPV4_ADDRESS: lambda r: r.key.src_ip.packed,
    IE_DESTINATION_IPV4_ADDRESS: lambda r: r.key.dst_ip.packed,
    IE_SOURCE_IPV6_ADDRESS: lambda r: r.key.src_ip.packed,
    IE_DESTINATION_IPV6_ADDRESS: lambda r: r.key.dst_ip.packed,
    IE_FLOW_START_MILLISECONDS: lambda r: r.first_seen,
    IE_FLOW_END_MILLISECONDS: lambda r: r.last_seen,
}
_ADDRESS_IES = {IE_SOURCE_IPV4_ADDRESS: 4, IE_DESTINATION_IPV4_ADDRESS: 4,
                IE_SOURCE_IPV6_ADDRESS: 16, IE_DESTINATION_IPV6_ADDRESS: 16}

_encoders: dict[TemplateRecord, tuple[struct.Struct, tuple]] = {}


def _encoder(template: TemplateRecord) -> tuple[struct.Struct, tuple]:
    enc = _encoders.get(template)
    if enc is not None:
        return enc
    fmt = "!"
    getters = []
    for f in template.fields:
        getter = _RECORD_GETTERS.get(f.element_id) if f.enterprise is None else None
        if getter is None:
            raise RecordTemplateMismatch(f"cannot encode element {f.element_id}")
        if f.element_id in _ADDRESS_IES:
            if f.length != _ADDRESS_IES[f.element_id]:
                raise RecordTemplateMismatch(f"address element {f.element_id} length {f.length}")
            fmt += f"{f.length}s"
        elif f.length in _INT_CODES:
            fmt += _INT_CODES[f.length]
        else:
            raise RecordTemplateMismatch(f"unsupported encoding length {f.length}")
        getters.append(getter)
    enc = (struct.Struct(fmt), tuple(getters))
    _encoders[template] = enc
    return enc


def encode_message(records: Sequence[FlowRecord], template: TemplateRecord, *,
                   sequence: int, export_time: int, odid: int,
                   max_size: int = MAX_MESSAGE_SIZE) -> bytes:
    """Encode one data set of ``records`` under ``template`` into a message."""
    if not records:
        raise EmptyBatch("no records to encode")
    version = template.ip_version
    packer, getters = _encoder(template)
    length = HEADER.size + SET_HEADER.size + packer.size * len(records)
    if length > max_size:
        raise MessageTooLarge(f"{length} bytes > {max_size}")
    buf = bytearray(length)
    HEADER.pack_into(buf, 0, IPFIX_VERSION, length, export_time & 0xFFFFFFFF,
                     sequence & 0xFFFFFFFF, odid)
    SET_HEADER.pack_into(buf, HEADER.size, template.template_id, length - HEADER.size)
    off = HEADER.size + SET_HEADER.size
    for r in records:
        if r.key.ip_version != version:
            raise RecordTemplateMismatch(
                f"IPv{r.key.ip_version} record under template {template.template_id}")
        try:
            packer.pack_into(buf, off, *[g(r) for g in getters])
        except struct.error as exc:
            raise RecordTemplateMismatch(str(exc)) from None
        off += packer.size
    return bytes(buf)


def encode_template_message(templates: Sequence[TemplateRecord], *, sequence: int,
                            export_time: int, odid: int,
                            max_size: int = MAX_MESSAGE_SIZE) -> bytes:
    """Encode all ``templates`` into a single template set."""
    if not templates:
        raise ValueError("no templates to encode")
    body = bytearray()
    for t in templates:
        body += struct.pack("!HH", t.template_id, len(t.fields))
        for f in t.fields:
            if f.enterprise is None:
                body += struct.pack("!HH", f.element_id, f.length)
            else:
                body += struct.pack("!HHI", f.element_id | 0x8000, f.length, f.enterprise)
    length = HEADER.size + SET_HEADER.size + len(body)
    if length > max_size:
        raise MessageTooLarge(f"{length} bytes > {max_size}")
    return (HEADER.pack(IPFIX_VERSION, length, export_time & 0xFFFFFFFF,
                        sequence & 0xFFFFFFFF, odid)
            + SET_HEADER.pack(TEMPLATE_SET_ID, SET_HEADER.size + len(body))
            + bytes(body))


# --- template cache ---------------------------------------------------------

@dataclass
class _CachedTemplate:
    template: TemplateRecord
    refreshed: float


class TemplateCache:
    """Templates keyed by (exporter, observation domain, template id).

    Entries not refreshed within ``expiry`` seconds are treated as absent.
    Also tracks the next expected sequence number per (exporter, domain).
    Reads take no lock; writes are serialized.
    """

    def __init__(self, expiry: float = 1800.0, clock: Callable[[], float] = time.monotonic):
        self.expiry = expiry
        self.clock = clock
        self._templates: dict[tuple, _CachedTemplate] = {}
        self._expected_seq: dict[tuple, int] = {}
        self._lock = threading.Lock()

    def get(self, exporter: Hashable, odid: int, template_id: int) -> Optional[TemplateRecord]:
        entry = self._templates.get((exporter, odid, template_id))
        if entry is None:
            return None
        if self.clock() - entry.refreshed > self.expiry:
            with self._lock:
                if self._templates.get((exporter, odid, template_id)) is entry:
                    del self._templates[(exporter, odid, template_id)]
            return None
        return entry.template

    def put(self, exporter: Hashable, odid: int, template: TemplateRecord) -> None:
        with self._lock:
            self._templates[(exporter, odid, template.template_id)] = _CachedTemplate(
                template, self.clock())

    def withdraw(self, exporter: Hashable, odid: int, template_id: Optional[int] = None) -> None:
        """Drop one template, or every template of the domain when id is None."""
        with self._lock:
            if template_id is not None:
                self._templates.pop((exporter, odid, template_id), None)
            else:
                for k in [k for k in self._templates if k[0] == exporter and k[1] == odid]:
                    del self._templates[k]

    def expire(self) -> int:
        """Remove stale entries eagerly; returns how many were dropped."""
        now = self.clock()
        with self._lock:
            stale = [k for k, v in self._templates.items() if now - v.refreshed > self.expiry]
            for k in stale:
                del self._templates[k]
        return len(stale)

    def expected_sequence(self, exporter: Hashable, odid: int) -> Optional[int]:
        return self._expected_seq.get((exporter, odid))

    def set_expected_sequence(self, exporter: Hashable, odid: int, value: Optional[int]) -> None:
        with self._lock:
            if value is None:
                self._expected_seq.pop((exporter, odid), None)
            else:
                self._expected_seq[(exporter, odid)] = value & 0xFFFFFFFF

    def __len__(self) -> int:
        return len(self._templates)


# --- decoding ---------------------------------------------------------------

@dataclass
class DecodeResult:
    export_time: int
    sequence: int
    observation_domain_id: int
    templates_learned: int = 0
    templates_withdrawn: int = 0
    options_template_sets: int = 0
    flows: list[FlowRecord] = field(default_factory=list)
    unknown_template_records: int = 0
    records_skipped: int = 0
    sequence_gap: int = 0


_WITHDRAW_ALL = object()


def _parse_template_set(data: bytes, off: int, end: int, staged: dict) -> tuple[int, int]:
    learned = withdrawn = 0
    while off < end:
        if end - off < 4:
            if any(data[off:end]):
                raise MalformedMessage("trailing bytes in template set")
            break
        tid, count = struct.unpack_from("!HH", data, off)
        off += 4
        if count == 0:
            if tid == TEMPLATE_SET_ID:
                staged[_WITHDRAW_ALL] = True
                for k in [k for k in staged if k is not _WITHDRAW_ALL]:
                    staged[k] = None
            elif tid >= MIN_DATA_SET_ID:
                staged[tid] = None
            elif tid == 0 and not any(data[off:end]):
                break  # zero padding
            else:
                raise MalformedMessage(f"bad withdrawal id {tid}")
            withdrawn += 1
            continue
        if tid < MIN_DATA_SET_ID:
            raise MalformedMessage(f"template id {tid} < 256")
        fields = []
        for _ in range(count):
            if end - off < 4:
                raise MalformedMessage("field specifier overruns set")
            ie, flen = struct.unpack_from("!HH", data, off)
            off += 4
            enterprise = None
            if ie & 0x8000:
                if end - off < 4:
                    raise MalformedMessage("enterprise number overruns set")
                enterprise = struct.unpack_from("!I", data, off)[0]
                ie &= 0x7FFF
                off += 4
            fields.append(FieldSpec(ie, flen, enterprise))
        template = TemplateRecord(tid, tuple(fields))
        if template.min_record_length == 0:
            raise MalformedMessage(f"template {tid} has zero record length")
        staged[tid] = template
        learned += 1
    return learned, withdrawn


def _int(b: bytes) -> int:
    return int.from_bytes(b, "big")


# Integer elements mapped onto FlowRecord fields.
_INT_IES = frozenset({
    IE_OCTET_DELTA_COUNT, IE_OCTET_TOTAL_COUNT, IE_PACKET_DELTA_COUNT,
    IE_PACKET_TOTAL_COUNT, IE_PROTOCOL_IDENTIFIER, IE_TCP_CONTROL_BITS,
    IE_SOURCE_TRANSPORT_PORT, IE_DESTINATION_TRANSPORT_PORT,
    IE_FLOW_START_SECONDS, IE_FLOW_END_SECONDS,
    IE_FLOW_START_MILLISECONDS, IE_FLOW_END_MILLISECONDS,
    IE_FLOW_START_MICROSECONDS, IE_FLOW_END_MICROSECONDS,
})


@dataclass(frozen=True)
class _Layout:
    """Decoding plan for one template: a struct for fixed layouts, else a field walk."""

    unpacker: Optional[struct.Struct]
    slots: tuple  # (element_id, kind, length); fixed layouts list only decoded fields
    version: Optional[int]


_layouts: dict[TemplateRecord, _Layout] = {}


def _address_version(template: TemplateRecord) -> Optional[int]:
    present = {(f.element_id, f.length) for f in template.fields if f.enterprise is None}
    if {(IE_SOURCE_IPV4_ADDRESS, 4), (IE_DESTINATION_IPV4_ADDRESS, 4)} <= present:
        return 4
    if {(IE_SOURCE_IPV6_ADDRESS, 16), (IE_DESTINATION_IPV6_ADDRESS, 16)} <= present:
        return 6
    return None


def _layout(template: TemplateRecord) -> _Layout:
    lay = _layouts.get(template)
    if lay is not None:
        return lay
    version = _address_version(template)
    wanted_addrs = {4: (IE_SOURCE_IPV4_ADDRESS, IE_DESTINATION_IPV4_ADDRESS),
                    6: (IE_SOURCE_IPV6_ADDRESS, IE_DESTINATION_IPV6_ADDRESS)}.get(version, ())
    variable = template.is_variable
    slots = []
    fmt = "!"
    for f in template.fields:
        kind = None
        if f.enterprise is None and f.length != VARIABLE_LENGTH:
            if f.element_id in wanted_addrs and f.length == _ADDRESS_IES[f.element_id]:
                kind = "addr"
            elif f.element_id in _INT_IES:
                kind = "int"
        if variable:
            slots.append((f.element_id, kind, f.length))
        elif kind is None:
            fmt += f"{f.length}x"
        elif kind == "addr":
            fmt += f"{f.length}s"
            slots.append((f.element_id, kind, f.length))
        elif f.length in _INT_CODES:
            fmt += _INT_CODES[f.length]
            slots.append((f.element_id, kind, f.length))
        else:
            fmt += f"{f.length}s"
            slots.append((f.element_id, "bytes_int", f.length))
    lay = _Layout(None if variable else struct.Struct(fmt), tuple(slots), version)
    if len(_layouts) > 4096:
        _layouts.clear()
    _layouts[template] = lay
    return lay


_IPV4 = ipaddress.IPv4Address
_IPV6 = ipaddress.IPv6Address


def _build_record(values: dict, version: int, export_ms: int) -> FlowRecord:
    addr = _IPV4 if version == 4 else _IPV6
    if version == 4:
        src, dst = values[IE_SOURCE_IPV4_ADDRESS], values[IE_DESTINATION_IPV4_ADDRESS]
    else:
        src, dst = values[IE_SOURCE_IPV6_ADDRESS], values[IE_DESTINATION_IPV6_ADDRESS]
    g = values.get
    first = g(IE_FLOW_START_MILLISECONDS)
    if first is None:
        first = _scaled(g(IE_FLOW_START_SECONDS), g(IE_FLOW_START_MICROSECONDS), export_ms)
    last = g(IE_FLOW_END_MILLISECONDS)
    if last is None:
        last = _scaled(g(IE_FLOW_END_SECONDS), g(IE_FLOW_END_MICROSECONDS), first)
    octets = g(IE_OCTET_DELTA_COUNT)
    packets = g(IE_PACKET_DELTA_COUNT)
    key = FlowKey(version, addr(src), addr(dst), g(IE_PROTOCOL_IDENTIFIER, 0) & 0xFF,
                  g(IE_SOURCE_TRANSPORT_PORT, 0) & 0xFFFF,
                  g(IE_DESTINATION_TRANSPORT_PORT, 0) & 0xFFFF)
    return FlowRecord(key, first, last,
                      packets if packets is not None else g(IE_PACKET_TOTAL_COUNT, 0),
                      octets if octets is not None else g(IE_OCTET_TOTAL_COUNT, 0),
                      g(IE_TCP_CONTROL_BITS, 0) & 0xFF)


def _scaled(seconds: Optional[int], micros: Optional[int], default: int) -> int:
    if seconds is not None:
        return seconds * 1000
    if micros is not None:
        # dateTimeMicroseconds is NTP format: seconds since 1900 + 2^-32 fractions.
        ntp_sec, frac = micros >> 32, micros & 0xFFFFFFFF
        return (ntp_sec - 2_208_988_800) * 1000 + (frac * 1000 >> 32)
    return default


def _decode_data_set(data: bytes, off: int, end: int, template: TemplateRecord,
                     export_ms: int, flows: list) -> int:
    """Decode the records of one data set; returns the number of records seen."""
    lay = _layout(template)
    if lay.unpacker is not None:
        size = lay.unpacker.size
        n = (end - off) // size
        if lay.version is None:
            return n
        slots = lay.slots
        for i in range(n):
            vals = lay.unpacker.unpack_from(data, off + i * size)
            values = {}
            for (ie, kind, _flen), v in zip(slots, vals):
                values[ie] = _int(v) if kind == "bytes_int" else v
            flows.append(_build_record(values, lay.version, export_ms))
        return n

    minimum = template.min_record_length
    count = 0
    while end - off >= minimum:
        values = {}
        for (ie, kind, flen) in lay.slots:
            if flen == VARIABLE_LENGTH:
                if off >= end:
                    raise MalformedMessage("variable-length prefix overruns set")
                flen = data[off]
                off += 1
                if flen == 255:
                    if end - off < 2:
                        raise MalformedMessage("variable-length prefix overruns set")
                    flen = struct.unpack_from("!H", data, off)[0]
                    off += 2
            if end - off < flen:
                raise MalformedMessage("field overruns set")
            if kind == "addr":
                values[ie] = data[off:off + flen]
            elif kind is not None:
                values[ie] = _int(data[off:off + flen])
            off += flen
        count += 1
        if lay.version is not None:
            flows.append(_build_record(values, lay.version, export_ms))
    return count


def decode_message(data: bytes, cache: TemplateCache, exporter: Hashable) -> DecodeResult:
    """Decode one IPFIX message.

    The message is validated and decoded in full before the template cache
    is touched, so a MalformedMessage leaves the cache unchanged.
    """
    if len(data) < HEADER.size:
        raise MalformedMessage(f"{len(data)} bytes, header needs 16")
    version, length, export_time, sequence, odid = HEADER.unpack_from(data, 0)
    if version != IPFIX_VERSION:
        raise MalformedMessage(f"version {version}")
    if length != len(data):
        raise MalformedMessage(f"header length {length} != datagram length {len(data)}")

    result = DecodeResult(export_time, sequence, odid)
    export_ms = export_time * 1000
    staged: dict = {}
    records_total = 0
    flows: list[FlowRecord] = []
    off = HEADER.size
    while off < length:
        if length - off < SET_HEADER.size:
            raise MalformedMessage("truncated set header")
        set_id, set_len = SET_HEADER.unpack_from(data, off)
        if set_len < SET_HEADER.size or off + set_len > length:
            raise MalformedMessage(f"set {set_id} length {set_len} overruns message")
        body, end = off + SET_HEADER.size, off + set_len
        if set_id == TEMPLATE_SET_ID:
            learned, withdrawn = _parse_template_set(data, body, end, staged)
            result.templates_learned += learned
            result.templates_withdrawn += withdrawn
        elif set_id == OPTIONS_TEMPLATE_SET_ID:
            result.options_template_sets += 1
        elif set_id >= MIN_DATA_SET_ID:
            if set_id in staged:
                template = staged[set_id]
            elif _WITHDRAW_ALL in staged:
                template = None
            else:
                template = cache.get(exporter, odid, set_id)
            if template is None:
                result.unknown_template_records += 1
            else:
                before = len(flows)
                n = _decode_data_set(data, body, end, template, export_ms, flows)
                records_total += n
                result.records_skipped += n - (len(flows) - before)
        off = end

    result.flows = flows
    if staged.pop(_WITHDRAW_ALL, False):
        cache.withdraw(exporter, odid)
    for tid, template in staged.items():
        if template is None:
            cache.withdraw(exporter, odid, tid)
        else:
            cache.put(exporter, odid, template)

    expected = cache.expected_sequence(exporter, odid)
    if expected is not None:
        gap = (sequence - expected) & 0xFFFFFFFF
        result.sequence_gap = gap - (1 << 32) if gap >= 1 << 31 else gap
    # Records under unknown templates cannot be counted, so expectation resets.
    cache.set_expected_sequence(
        exporter, odid,
        None if result.unknown_template_records else sequence + records_total)
    return result


def iter_sets(data: bytes) -> Iterable[tuple[int, bytes]]:
    """Yield (set_id, body) pairs of a well-formed message (debug helper)."""
    off = HEADER.size
    while off + SET_HEADER.size <= len(data):
        set_id, set_len = SET_HEADER.unpack_from(data, off)
        if set_len < SET_HEADER.size:
            return
        yield set_id, data[off + SET_HEADER.size:off + set_len]
        off += set_len
