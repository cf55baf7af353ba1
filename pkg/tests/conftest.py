from __future__ import annotations

import ipaddress
import socket

import pytest
from hypothesis import strategies as st

from flowkit.flow import FlowKey, FlowRecord
from flowkit.synth import SyntheticWorkloadSpec, generate


def free_udp_port() -> int:
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


@pytest.fixture
def workload(tmp_path):
    """Factory: generate(spec) into tmp_path, returning the GeneratedWorkload."""
    counter = iter(range(10_000))

    def make(**kwargs):
        spec = SyntheticWorkloadSpec(**kwargs)
        return generate(spec, tmp_path / f"w{next(counter)}")

    return make


ipv4s = st.integers(0, 2**32 - 1).map(ipaddress.IPv4Address)
ipv6s = st.integers(0, 2**128 - 1).map(ipaddress.IPv6Address)
u8 = st.integers(0, 255)
u16 = st.integers(0, 65535)
u64 = st.integers(0, 2**64 - 1)


@st.composite
def flow_records(draw, version=None):
    v = draw(st.sampled_from([4, 6])) if version is None else version
    addrs = ipv4s if v == 4 else ipv6s
    first = draw(st.integers(0, 2**63))
    last = draw(st.integers(first, min(2**64 - 1, first + 10**9)))
    key = FlowKey(v, draw(addrs), draw(addrs), draw(u8), draw(u16), draw(u16))
    return FlowRecord(key, first, last, draw(st.integers(1, 2**64 - 1)), draw(u64), draw(u8))


def oracle_identities(doc: dict) -> list[tuple]:
    """Oracle flow dicts as sorted FlowRecord.identity() tuples."""
    out = []
    for f in doc["flows"]:
        key = FlowKey(f["ip_version"], ipaddress.ip_address(f["src_ip"]),
                      ipaddress.ip_address(f["dst_ip"]), f["protocol"],
                      f["src_port"], f["dst_port"])
        out.append((key, f["first_ms"], f["last_ms"], f["packets"], f["bytes"], f["tcp_flags"]))
    return sorted(out, key=repr)


def identities(records) -> list[tuple]:
    return sorted((r.identity() for r in records), key=repr)


# Acceptance criteria record one line each; they are echoed in the terminal
# summary so the verdicts are visible without -s.
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
