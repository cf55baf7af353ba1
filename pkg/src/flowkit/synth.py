"""
Deterministic synthetic traffic: a pcap plus the flows a correct meter must
report for it.

The expected flows are computed here from the generator's own packet list,
without decoding frames and without touching :mod:`flowkit.meter`, so a
metering bug cannot leak into the expectation.
"""
from __future__ import annotations

import ipaddress
import json
import os
import random
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

from flowkit.packet import RawFrame, write_pcap

FIN, SYN, RST, PSH, ACK = 0x01, 0x02, 0x04, 0x08, 0x10

_PROTO_NUMBERS = {"tcp": 6, "udp": 17, "icmp": None}  # icmp depends on IP version


class InvalidSpec(ValueError):
    pass


@dataclass
class SyntheticWorkloadSpec:
    seed: int = 1
    flow_count: int = 10
    packets_per_flow: tuple[int, int] = (10, 10)
    protocol_mix: dict = field(default_factory=lambda: {"tcp": 0.6, "udp": 0.3, "icmp": 0.1})
    ipv6_fraction: float = 0.2
    v4_pool: str = "10.0.0.0/16"
    v6_pool: str = "2001:db8::/112"
    start_time_us: int = 1_700_000_000_000_000
    time_span_s: float = 60.0
    gap_ms: tuple[int, int] = (0, 500)
    long_gap_probability: float = 0.0
    ip_size: tuple[int, int] = (64, 1500)
    vlan_fraction: float = 0.1
    tcp_fin_close: bool = True
    mid_flow_fin_probability: float = 0.0
    idle_timeout: float = 15.0
    active_timeout: float = 300.0
    snaplen: int = 0  # 0 keeps whole frames

    def validate(self) -> None:
        a, b = self.packets_per_flow
        if self.flow_count < 0:
            raise InvalidSpec("flow_count must be >= 0")
        if not 1 <= a <= b:
            raise InvalidSpec("packets_per_flow must satisfy 1 <= a <= b")
        if not 0 <= self.ipv6_fraction <= 1 or not 0 <= self.vlan_fraction <= 1:
            raise InvalidSpec("fractions must lie in [0, 1]")
        if not 0 <= self.long_gap_probability <= 1:
            raise InvalidSpec("long_gap_probability must lie in [0, 1]")
        if not self.protocol_mix or any(w < 0 for w in self.protocol_mix.values()) \
                or sum(self.protocol_mix.values()) <= 0:
            raise InvalidSpec("protocol_mix needs positive weights")
        unknown = set(self.protocol_mix) - set(_PROTO_NUMBERS)
        if unknown:
            raise InvalidSpec(f"unknown protocols {sorted(unknown)}")
        if not 0 <= self.gap_ms[0] <= self.gap_ms[1]:
            raise InvalidSpec("gap_ms must satisfy 0 <= min <= max")
        if not 0 < self.ip_size[0] <= self.ip_size[1] <= 9000:
            raise InvalidSpec("ip_size must satisfy 0 < min <= max <= 9000")
        if not 0 < self.idle_timeout < self.active_timeout:
            raise InvalidSpec("need 0 < idle_timeout < active_timeout")
        if self.snaplen < 0:
            raise InvalidSpec("snaplen must be >= 0")
        for pool in (self.v4_pool, self.v6_pool):
            try:
                ipaddress.ip_network(pool)
            except ValueError as exc:
                raise InvalidSpec(str(exc)) from None


@dataclass(frozen=True)
class SynthPacket:
    timestamp: int  # microseconds
    ip_version: int
    src_ip: str
    dst_ip: str
    protocol: int
    src_port: int
    dst_port: int
    tcp_flags: int
    ip_len: int
    vlan_id: Optional[int]

    @property
    def key(self) -> tuple:
        return (self.ip_version, self.src_ip, self.dst_ip, self.protocol,
                self.src_port, self.dst_port)


def _rand_addr(rng: random.Random, pool: ipaddress._BaseNetwork) -> str:
    return str(pool.network_address + rng.randrange(pool.num_addresses))


def generate_packets(spec: SyntheticWorkloadSpec) -> list[SynthPacket]:
    spec.validate()
    rng = random.Random(spec.seed)
    v4 = ipaddress.ip_network(spec.v4_pool)
    v6 = ipaddress.ip_network(spec.v6_pool)
    names = sorted(spec.protocol_mix)
    weights = [spec.protocol_mix[n] for n in names]
    idle_us = int(spec.idle_timeout * 1_000_000)
    packets: list[SynthPacket] = []
    for _ in range(spec.flow_count):
        version = 6 if rng.random() < spec.ipv6_fraction else 4
        pool = v6 if version == 6 else v4
        src, dst = _rand_addr(rng, pool), _rand_addr(rng, pool)
        name = rng.choices(names, weights)[0]
        proto = _PROTO_NUMBERS[name] or (58 if version == 6 else 1)
        sport = dport = 0
        if proto in (6, 17):
            sport = rng.randrange(1024, 65536)
            dport = rng.choice((22, 53, 80, 123, 443, 8080, rng.randrange(1, 65536)))
        vlan = rng.randrange(1, 4095) if rng.random() < spec.vlan_fraction else None
        n = rng.randint(*spec.packets_per_flow)
        t = spec.start_time_us + int(rng.random() * spec.time_span_s * 1_000_000)
        l4 = {6: 20, 17: 8}.get(proto, 8)
        min_len = (20 if version == 4 else 40) + l4
        for i in range(n):
            if i:
                if spec.long_gap_probability and rng.random() < spec.long_gap_probability:
                    # Land close to the idle threshold on either side.
                    t += rng.randint(int(idle_us * 0.8), int(idle_us * 1.3))
                else:
                    t += rng.randint(spec.gap_ms[0] * 1000, spec.gap_ms[1] * 1000)
            flags = 0
            if proto == 6:
                if i == 0:
                    flags = SYN
                elif i == n - 1 and spec.tcp_fin_close:
                    flags = FIN | ACK
                elif spec.mid_flow_fin_probability and rng.random() < spec.mid_flow_fin_probability:
                    flags = rng.choice((FIN | ACK, RST))
                else:
                    flags = ACK | (PSH if rng.random() < 0.3 else 0)
            size = rng.randint(max(min_len, spec.ip_size[0]), max(min_len, spec.ip_size[1]))
            packets.append(SynthPacket(t, version, src, dst, proto, sport, dport, flags,
                                       size, vlan))
    packets.sort(key=lambda p: p.timestamp)
    return packets


_SRC_MAC = bytes.fromhex("020000000001")
_DST_MAC = bytes.fromhex("020000000002")


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def build_frame(p: SynthPacket, ident: int = 0) -> bytes:
    """Ethernet/[802.1Q]/IP/L4 frame whose IP length field equals ``p.ip_len``."""
    if p.vlan_id is not None:
        eth = _DST_MAC + _SRC_MAC + struct.pack("!HHH", 0x8100, p.vlan_id, 0x0800 if p.ip_version == 4 else 0x86DD)
    else:
        eth = _DST_MAC + _SRC_MAC + struct.pack("!H", 0x0800 if p.ip_version == 4 else 0x86DD)
    if p.protocol == 6:
        l4 = struct.pack("!HHIIBBHHH", p.src_port, p.dst_port, 1, 0, 5 << 4, p.tcp_flags,
                         65535, 0, 0)
    elif p.protocol == 17:
        ip_hdr = 20 if p.ip_version == 4 else 40
        l4 = struct.pack("!HHHH", p.src_port, p.dst_port, p.ip_len - ip_hdr, 0)
    else:
        l4 = struct.pack("!BBHHH", 8 if p.protocol == 1 else 128, 0, 0, ident & 0xFFFF, 0)
    if p.ip_version == 4:
        hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, p.ip_len, ident & 0xFFFF, 0x4000, 64,
                          p.protocol, 0, ipaddress.IPv4Address(p.src_ip).packed,
                          ipaddress.IPv4Address(p.dst_ip).packed)
        hdr = hdr[:10] + struct.pack("!H", _checksum(hdr)) + hdr[12:]
        payload_len = p.ip_len - 20 - len(l4)
    else:
        hdr = struct.pack("!IHBB16s16s", 6 << 28, p.ip_len - 40, p.protocol, 64,
                          ipaddress.IPv6Address(p.src_ip).packed,
                          ipaddress.IPv6Address(p.dst_ip).packed)
        payload_len = p.ip_len - 40 - len(l4)
    return eth + hdr + l4 + bytes(payload_len)


def oracle_flows(packets: list[SynthPacket], idle_timeout: float, active_timeout: float,
                 tcp_finrst_expiry: bool = True) -> list[dict]:
    """Expected unidirectional flows for a time-ordered packet list.

    For each 5-tuple, a packet opens a new flow when the previous flow is
    at least ``active_timeout`` old or at least ``idle_timeout`` idle at the
    packet's (millisecond) time, or when the previous packet carried FIN or
    RST.
    """
    idle = int(round(idle_timeout * 1000))
    active = int(round(active_timeout * 1000))
    current: dict[tuple, dict] = {}
    done: list[dict] = []
    for p in packets:
        t = p.timestamp // 1000
        f = current.get(p.key)
        if f is not None and (t - f["first_ms"] >= active or t - f["last_ms"] >= idle):
            done.append(current.pop(p.key))
            f = None
        if f is None:
            f = {"ip_version": p.ip_version, "src_ip": p.src_ip, "dst_ip": p.dst_ip,
                 "protocol": p.protocol, "src_port": p.src_port, "dst_port": p.dst_port,
                 "first_ms": t, "last_ms": t, "packets": 0, "bytes": 0, "tcp_flags": 0}
            current[p.key] = f
        f["last_ms"] = max(f["last_ms"], t)
        f["packets"] += 1
        f["bytes"] += p.ip_len
        f["tcp_flags"] |= p.tcp_flags
        if tcp_finrst_expiry and p.protocol == 6 and p.tcp_flags & (FIN | RST):
            done.append(current.pop(p.key))
    done.extend(current.values())
    done.sort(key=lambda f: (f["first_ms"], f["ip_version"], f["src_ip"], f["dst_ip"],
                             f["protocol"], f["src_port"], f["dst_port"], f["last_ms"]))
    return done


@dataclass
class GeneratedWorkload:
    pcap_path: Path
    oracle_path: Path
    packets: int
    flows: int


def generate(spec: SyntheticWorkloadSpec, out_prefix: Union[str, os.PathLike]
             ) -> GeneratedWorkload:
    """Write ``<prefix>.pcap`` and ``<prefix>.oracle.json``."""
    packets = generate_packets(spec)
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    pcap_path = prefix.with_name(prefix.name + ".pcap")
    oracle_path = prefix.with_name(prefix.name + ".oracle.json")

    frame_bytes = 0

    def frames():
        nonlocal frame_bytes
        for i, p in enumerate(packets):
            data = build_frame(p, i)
            frame_bytes += len(data)
            yield RawFrame(p.timestamp, data, orig_len=len(data))

    write_pcap(pcap_path, frames(), snaplen=spec.snaplen or 65535)
    flows = oracle_flows(packets, spec.idle_timeout, spec.active_timeout)
    doc = {
        "format": "flowkit-oracle/1",
        "spec": asdict(spec),
        "ip_packets": len(packets),
        "ip_bytes": sum(p.ip_len for p in packets),
        "frame_bytes": frame_bytes,
        "flows": flows,
    }
    oracle_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return GeneratedWorkload(pcap_path, oracle_path, len(packets), len(flows))


def load_oracle(path: Union[str, os.PathLike]) -> dict:
    return json.loads(Path(path).read_text())


def parse_range(text: str) -> tuple[int, int]:
    """``"10"`` -> (10, 10); ``"5..20"`` -> (5, 20)."""
    if ".." in text:
        a, b = text.split("..", 1)
        return int(a), int(b)
    n = int(text)
    return n, n


def parse_mix(text: str) -> dict:
    """``"tcp=0.6,udp=0.3,icmp=0.1"`` -> weights dict."""
    mix = {}
    for part in text.split(","):
        name, _, weight = part.partition("=")
        mix[name.strip().lower()] = float(weight) if weight else 1.0
    return mix
