"""Flow key and flow record types shared by every stage of the toolkit."""
from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17
PROTO_ICMPV6 = 58

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10


class EndReason(enum.Enum):
    IDLE = "idle"
    ACTIVE = "active"
    EOF = "eof"
    FIN_RST = "fin_rst"
    EVICTED = "evicted"


class FlowKey(NamedTuple):
    """Directional 5-tuple plus IP version. A->B and B->A are distinct keys."""

    ip_version: int
    src_ip: IPAddress
    dst_ip: IPAddress
    protocol: int
    src_port: int
    dst_port: int


@dataclass(slots=True)
class FlowRecord:
    """One unidirectional flow.

    Timestamps are milliseconds since the Unix epoch. ``end_reason`` is
    metering metadata only: it does not travel over IPFIX or into the store,
    so it is excluded from equality.
    """

    key: FlowKey
    first_seen: int
    last_seen: int
    packets: int
    bytes: int
    tcp_flags: int = 0
    end_reason: Optional[EndReason] = field(default=None, compare=False)

    @property
    def ip_version(self) -> int:
        return self.key.ip_version

    @property
    def src_ip(self) -> IPAddress:
        return self.key.src_ip

    @property
    def dst_ip(self) -> IPAddress:
        return self.key.dst_ip

    @property
    def protocol(self) -> int:
        return self.key.protocol

    @property
    def src_port(self) -> int:
        return self.key.src_port

    @property
    def dst_port(self) -> int:
        return self.key.dst_port

    @property
    def duration(self) -> int:
        return self.last_seen - self.first_seen

    def identity(self) -> tuple:
        """Hashable tuple of every persisted field, handy for multiset comparisons."""
        return (self.key, self.first_seen, self.last_seen, self.packets,
                self.bytes, self.tcp_flags)


def make_key(src_ip, dst_ip, protocol: int, src_port: int = 0, dst_port: int = 0) -> FlowKey:
    """Build a FlowKey from address strings or objects."""
    src = ipaddress.ip_address(src_ip)
    dst = ipaddress.ip_address(dst_ip)
    if src.version != dst.version:
        raise ValueError(f"mixed address families: {src} -> {dst}")
    return FlowKey(src.version, src, dst, protocol, src_port, dst_port)
