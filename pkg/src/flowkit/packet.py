"""
Frame ingestion: pcap files and live interfaces in, ParsedPacket values out.

Only Ethernet framing is understood. Headers are decoded through L4 (ports
and TCP flags); payloads are never inspected.
"""
from __future__ import annotations

import errno
import ipaddress
import logging
import os
import select
import socket
import struct
import time
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Optional, Union

from flowkit.flow import PROTO_TCP, PROTO_UDP, FlowKey, IPAddress

log = logging.getLogger(__name__)

LINKTYPE_ETHERNET = 1

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_ARP = 0x0806
ETHERTYPE_IPV6 = 0x86DD
ETHERTYPE_VLAN = 0x8100
ETHERTYPE_QINQ = 0x88A8

IPV6_HOPOPTS = 0
IPV6_ROUTING = 43
IPV6_FRAGMENT = 44
IPV6_DSTOPTS = 60

PCAP_MAGIC_USEC = 0xA1B2C3D4
PCAP_MAGIC_NSEC = 0xA1B23C4D

_ETH = struct.Struct("!6s6sH")
_VLAN = struct.Struct("!HH")
_IPV4 = struct.Struct("!BBHHHBBH4s4s")
_IPV6 = struct.Struct("!IHBB16s16s")
_PORTS = struct.Struct("!HH")


class DecodeError(Exception):
    pass


class TruncatedFrame(DecodeError):
    pass


class MalformedFrame(DecodeError):
    pass


class UnsupportedLinkType(DecodeError):
    pass


class PcapError(Exception):
    pass


class BadMagic(PcapError):
    pass


class TruncatedCapture(PcapError):
    pass


class CaptureError(OSError):
    pass


class NoSuchInterface(CaptureError):
    pass


class CapturePermissionDenied(CaptureError, PermissionError):
    pass


@dataclass(frozen=True, slots=True)
class RawFrame:
    timestamp: int  # microseconds since epoch, UTC
    data: bytes
    link_type: int = LINKTYPE_ETHERNET
    orig_len: Optional[int] = None


@dataclass(frozen=True, slots=True)
class ParsedPacket:
    timestamp: int  # microseconds
    ip_version: int
    src_ip: IPAddress
    dst_ip: IPAddress
    protocol: int
    src_port: int
    dst_port: int
    tcp_flags: int
    ip_payload_len: int  # IP header included; this is what flows count as bytes
    vlan_id: Optional[int] = None

    @property
    def key(self) -> FlowKey:
        return FlowKey(self.ip_version, self.src_ip, self.dst_ip,
                       self.protocol, self.src_port, self.dst_port)


@dataclass(frozen=True, slots=True)
class NonIp:
    """A well-formed frame that does not carry IPv4 or IPv6."""

    ethertype: int


def decode_frame(frame: RawFrame) -> Union[ParsedPacket, NonIp]:
    """Decode an Ethernet frame down to the transport header.

    Raises TruncatedFrame when the frame ends before a header it announces,
    MalformedFrame for impossible header values, UnsupportedLinkType for
    anything but Ethernet.
    """
    if frame.link_type != LINKTYPE_ETHERNET:
        raise UnsupportedLinkType(f"link type {frame.link_type}")
    data = frame.data
    n = len(data)
    if n < 14:
        raise TruncatedFrame(f"{n} bytes, Ethernet header needs 14")
    ethertype = _ETH.unpack_from(data, 0)[2]
    off = 14
    vlan_id = None
    for _ in range(2):
        if ethertype != ETHERTYPE_VLAN and ethertype != ETHERTYPE_QINQ:
            break
        if n < off + 4:
            raise TruncatedFrame("802.1Q tag")
        tci, ethertype = _VLAN.unpack_from(data, off)
        if vlan_id is None:
            vlan_id = tci & 0x0FFF
        off += 4

    if ethertype == ETHERTYPE_IPV4:
        return _decode_ipv4(data, off, frame.timestamp, vlan_id)
    if ethertype == ETHERTYPE_IPV6:
        return _decode_ipv6(data, off, frame.timestamp, vlan_id)
    return NonIp(ethertype)


def _decode_ipv4(data: bytes, off: int, ts: int, vlan_id) -> ParsedPacket:
    if len(data) < off + 20:
        raise TruncatedFrame("IPv4 header")
    ver_ihl, _tos, total_len, _ident, frag, _ttl, proto, _csum, src, dst = \
        _IPV4.unpack_from(data, off)
    if ver_ihl >> 4 != 4:
        raise MalformedFrame(f"IP version {ver_ihl >> 4} under IPv4 ethertype")
    ihl = (ver_ihl & 0x0F) * 4
    if ihl < 20:
        raise MalformedFrame(f"IHL {ihl}")
    l4 = off + ihl
    if len(data) < l4:
        raise TruncatedFrame("IPv4 options")
    sport = dport = flags = 0
    # Non-first fragments carry no transport header.
    if frag & 0x1FFF == 0:
        sport, dport, flags = _decode_l4(data, l4, proto)
    return ParsedPacket(ts, 4, ipaddress.IPv4Address(src), ipaddress.IPv4Address(dst),
                        proto, sport, dport, flags, total_len, vlan_id)


def _decode_ipv6(data: bytes, off: int, ts: int, vlan_id) -> ParsedPacket:
    if len(data) < off + 40:
        raise TruncatedFrame("IPv6 header")
    vtf, payload_len, next_header, _hlim, src, dst = _IPV6.unpack_from(data, off)
    if vtf >> 28 != 6:
        raise MalformedFrame(f"IP version {vtf >> 28} under IPv6 ethertype")
    pos = off + 40
    first_fragment = True
    while next_header in (IPV6_HOPOPTS, IPV6_ROUTING, IPV6_DSTOPTS, IPV6_FRAGMENT):
        if len(data) < pos + 8:
            raise TruncatedFrame("IPv6 extension header")
        nh = data[pos]
        if next_header == IPV6_FRAGMENT:
            if (data[pos + 2] << 8 | data[pos + 3]) & 0xFFF8:
                first_fragment = False
            pos += 8
        else:
            pos += (data[pos + 1] + 1) * 8
        next_header = nh
    sport = dport = flags = 0
    if first_fragment:
        sport, dport, flags = _decode_l4(data, pos, next_header)
    return ParsedPacket(ts, 6, ipaddress.IPv6Address(src), ipaddress.IPv6Address(dst),
                        next_header, sport, dport, flags, 40 + payload_len, vlan_id)


def _decode_l4(data: bytes, pos: int, proto: int) -> tuple[int, int, int]:
    if proto == PROTO_TCP:
        if len(data) < pos + 20:
            raise TruncatedFrame("TCP header")
        sport, dport = _PORTS.unpack_from(data, pos)
        return sport, dport, data[pos + 13]
    if proto == PROTO_UDP:
        if len(data) < pos + 8:
            raise TruncatedFrame("UDP header")
        sport, dport = _PORTS.unpack_from(data, pos)
        return sport, dport, 0
    return 0, 0, 0


class PcapReader:
    """Iterate RawFrames from a classic libpcap file.

    A record cut off by EOF ends iteration; ``truncated`` is then set and
    ``warnings`` counts it instead of raising.
    """

    def __init__(self, source: Union[str, os.PathLike, BinaryIO]):
        if isinstance(source, (str, os.PathLike)):
            self._fh = open(source, "rb")
            self._owns = True
        else:
            self._fh = source
            self._owns = False
        header = self._fh.read(24)
        if len(header) < 4:
            self.close()
            raise BadMagic("file too short for a pcap header")
        magic_le = struct.unpack("<I", header[:4])[0]
        magic_be = struct.unpack(">I", header[:4])[0]
        if magic_le in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
            endian, magic = "<", magic_le
        elif magic_be in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
            endian, magic = ">", magic_be
        else:
            self.close()
            raise BadMagic(f"magic 0x{magic_le:08x}")
        if len(header) < 24:
            self.close()
            raise TruncatedCapture("global header")
        self.nanosecond = magic == PCAP_MAGIC_NSEC
        (self.version_major, self.version_minor, _tz, _sig, self.snaplen,
         self.link_type) = struct.unpack(endian + "HHiIII", header[4:])
        self._rec = struct.Struct(endian + "IIII")
        self.frames_read = 0
        self.truncated = False
        self.warnings = 0

    def __iter__(self) -> Iterator[RawFrame]:
        rec = self._rec
        read = self._fh.read
        divisor = 1000 if self.nanosecond else 1
        link_type = self.link_type
        while True:
            hdr = read(16)
            if not hdr:
                return
            if len(hdr) < 16:
                self._mark_truncated()
                return
            ts_sec, ts_frac, incl_len, orig_len = rec.unpack(hdr)
            data = read(incl_len)
            if len(data) < incl_len:
                self._mark_truncated()
                return
            self.frames_read += 1
            yield RawFrame(ts_sec * 1_000_000 + ts_frac // divisor, data, link_type, orig_len)

    def _mark_truncated(self) -> None:
        self.truncated = True
        self.warnings += 1
        log.warning("event=pcap_truncated frames_read=%d", self.frames_read)

    def close(self) -> None:
        if self._owns:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_pcap(path: Union[str, os.PathLike]) -> PcapReader:
    return PcapReader(path)


def write_pcap(path: Union[str, os.PathLike], frames: Iterable[RawFrame],
               snaplen: int = 65535, nanosecond: bool = False) -> int:
    """Write frames as a little-endian pcap file; returns the frame count.

    Frames longer than ``snaplen`` are cut, and their original length is kept
    in the record header the way a capture tool would.
    """
    rec = struct.Struct("<IIII")
    count = 0
    with open(path, "wb") as fh:
        magic = PCAP_MAGIC_NSEC if nanosecond else PCAP_MAGIC_USEC
        fh.write(struct.pack("<IHHiIII", magic, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
        for f in frames:
            sec, usec = divmod(f.timestamp, 1_000_000)
            frac = usec * 1000 if nanosecond else usec
            data = f.data[:snaplen]
            orig = f.orig_len if f.orig_len is not None else len(f.data)
            fh.write(rec.pack(sec, frac, len(data), orig))
            fh.write(data)
            count += 1
    return count


_SOL_PACKET = 263
_PACKET_STATISTICS = 6
_ETH_P_ALL = 0x0003


class LiveSource:
    """Capture frames from a network interface via a Linux packet socket.

    Iterating yields RawFrames until :meth:`stop` is called. :meth:`poll`
    returns whatever arrived within a timeout, which lets a caller run timers
    between reads.
    """

    def __init__(self, interface: str, snaplen: int = 65535):
        if not hasattr(socket, "AF_PACKET"):
            raise CaptureError("live capture needs Linux packet sockets")
        try:
            socket.if_nametoindex(interface)
        except OSError:
            raise NoSuchInterface(interface) from None
        try:
            self._sock = socket.socket(socket.AF_PACKET, socket.SOCK_RAW,
                                       socket.htons(_ETH_P_ALL))
        except PermissionError as exc:
            raise CapturePermissionDenied(str(exc)) from None
        try:
            self._sock.bind((interface, 0))
        except OSError as exc:
            self._sock.close()
            if exc.errno == errno.ENODEV:
                raise NoSuchInterface(interface) from None
            raise
        self._sock.setblocking(False)
        self.interface = interface
        self.snaplen = snaplen
        self._stopped = False
        self._drops = 0

    @property
    def drops(self) -> int:
        """Kernel-reported drops since the source was opened."""
        self._harvest_drops()
        return self._drops

    def _harvest_drops(self) -> None:
        if self._stopped:
            return
        try:
            raw = self._sock.getsockopt(_SOL_PACKET, _PACKET_STATISTICS, 8)
        except OSError:
            return
        # Reading the counters resets them in the kernel.
        self._drops += struct.unpack("II", raw)[1]

    def poll(self, timeout: float = 0.1) -> list[RawFrame]:
        if self._stopped:
            return []
        ready, _, _ = select.select([self._sock], [], [], timeout)
        frames = []
        if not ready:
            return frames
        while True:
            try:
                data = self._sock.recv(self.snaplen)
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                if self._stopped:
                    break
                raise
            frames.append(RawFrame(time.time_ns() // 1000, data, LINKTYPE_ETHERNET))
        return frames

    def __iter__(self) -> Iterator[RawFrame]:
        while not self._stopped:
            yield from self.poll()

    def stop(self) -> None:
        if not self._stopped:
            self._harvest_drops()
            self._stopped = True
            self._sock.close()

    close = stop

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def live_source(interface: str, snaplen: int = 65535) -> LiveSource:
    return LiveSource(interface, snaplen)
