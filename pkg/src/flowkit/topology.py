"""
Launch a local meter -> tee -> collectors topology as separate processes on
loopback. Roles share nothing but UDP.
"""
from __future__ import annotations

import os
import signal
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import yaml


class TopologyError(RuntimeError):
    pass


class PortInUse(TopologyError):
    pass


class SpawnFailure(TopologyError):
    pass


@dataclass
class MeterNode:
    name: str
    pcap: str
    odid: int = 0
    args: list[str] = field(default_factory=list)


@dataclass
class CollectorNode:
    name: str
    port: int
    store: str
    args: list[str] = field(default_factory=list)


@dataclass
class TopologyConfig:
    workdir: str
    meters: list[MeterNode]
    tee_port: int
    collectors: list[CollectorNode]
    host: str = "127.0.0.1"
    ready_timeout: float = 10.0

    @classmethod
    def from_dict(cls, doc: dict, base: Union[str, os.PathLike, None] = None) -> "TopologyConfig":
        base = Path(base) if base is not None else Path.cwd()

        def path(p: str) -> str:
            return p if os.path.isabs(p) else str(base / p)

        return cls(
            workdir=path(doc.get("workdir", "topology-run")),
            meters=[MeterNode(m["name"], path(m["pcap"]), int(m.get("odid", 0)),
                              [str(a) for a in m.get("args", [])]) for m in doc["meters"]],
            tee_port=int(doc["tee_port"]),
            collectors=[CollectorNode(c["name"], int(c["port"]), path(c["store"]),
                                      [str(a) for a in c.get("args", [])])
                        for c in doc["collectors"]],
            host=doc.get("host", "127.0.0.1"),
        )

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "TopologyConfig":
        path = Path(path)
        return cls.from_dict(yaml.safe_load(path.read_text()), path.parent)


def _cli(*args: str) -> list[str]:
    return [sys.executable, "-m", "flowkit", *args]


def _check_ports(config: TopologyConfig) -> None:
    ports = [config.tee_port] + [c.port for c in config.collectors]
    dupes = sorted({p for p in ports if ports.count(p) > 1})
    if dupes:
        raise PortInUse(f"duplicate listen port(s) {dupes}")
    for port in ports:
        s = socket.socket(socket.AF_INET6 if ":" in config.host else socket.AF_INET,
                          socket.SOCK_DGRAM)
        try:
            s.bind((config.host, port))
        except OSError as exc:
            raise PortInUse(f"{config.host}:{port}: {exc}") from None
        finally:
            s.close()


class Topology:
    """Handles for the processes of one running topology."""

    def __init__(self, config: TopologyConfig):
        self.config = config
        self.workdir = Path(config.workdir)
        self.processes: dict[str, subprocess.Popen] = {}
        self.logs: dict[str, Path] = {}

    def spawn(self, name: str, argv: list[str], wait_ready: bool = False) -> subprocess.Popen:
        log_path = self.workdir / f"{name}.log"
        fh = open(log_path, "wb")
        try:
            proc = subprocess.Popen(argv, stdout=fh, stderr=subprocess.STDOUT,
                                    stdin=subprocess.DEVNULL)
        except OSError as exc:
            raise SpawnFailure(f"{name}: {exc}") from None
        finally:
            fh.close()
        self.processes[name] = proc
        self.logs[name] = log_path
        if wait_ready:
            self._wait_ready(name)
        return proc

    def _wait_ready(self, name: str) -> None:
        deadline = time.monotonic() + self.config.ready_timeout
        proc = self.processes[name]
        while time.monotonic() < deadline:
            if proc.poll() is not None:
                raise SpawnFailure(f"{name} exited with {proc.returncode}: {self.log_text(name)}")
            if b"event=listening" in self.logs[name].read_bytes():
                return
            time.sleep(0.02)
        raise SpawnFailure(f"{name} not ready after {self.config.ready_timeout}s")

    def log_text(self, name: str) -> str:
        return self.logs[name].read_text(errors="replace")

    def wait(self, name: str, timeout: Optional[float] = None) -> int:
        return self.processes[name].wait(timeout)

    def stop(self, name: str, timeout: float = 10.0) -> int:
        """Graceful stop (SIGTERM) so collectors finalize their stores."""
        proc = self.processes[name]
        if proc.poll() is None:
            proc.send_signal(signal.SIGTERM)
            try:
                proc.wait(timeout)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        return proc.returncode

    def kill(self, name: str) -> None:
        proc = self.processes[name]
        if proc.poll() is None:
            proc.kill()
            proc.wait()

    def stop_all(self) -> dict[str, int]:
        return {name: self.stop(name) for name in list(self.processes)}

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop_all()


def run_topology(config: TopologyConfig, start_meters: bool = True) -> Topology:
    """Start collectors, then the tee, then the meters.

    Collectors and the tee are started first and awaited until they listen,
    so no exported datagram is sent into a closed port.
    """
    _check_ports(config)
    topo = Topology(config)
    topo.workdir.mkdir(parents=True, exist_ok=True)
    host = config.host
    try:
        for c in config.collectors:
            topo.spawn(c.name, _cli("collect", "--listen", f"{host}:{c.port}",
                                    "--store", c.store, *c.args), wait_ready=True)
        tee_args = []
        for c in config.collectors:
            tee_args += ["--tee", f"{host}:{c.port}"]
        topo.spawn("tee", _cli("collect", "--listen", f"{host}:{config.tee_port}", *tee_args),
                   wait_ready=True)
        if start_meters:
            start_meter_nodes(topo)
    except Exception:
        topo.stop_all()
        raise
    return topo


def start_meter_nodes(topo: Topology) -> None:
    cfg = topo.config
    for m in cfg.meters:
        topo.spawn(m.name, _cli("meter", "--input", m.pcap, "--export",
                                f"{cfg.host}:{cfg.tee_port}", "--odid", str(m.odid), *m.args))
