"""
Streaming flow post-processing: enrichment, anonymization, windowed metrics
and JSON Lines serialization, chained in a configured order.

Pipeline configuration is a YAML (or JSON) document::

    stages:
      - enrich:    {table: networks.tsv}
      - anonymize: {v4_bits: 24, v6_bits: 48}
      - metrics:   {window: 60, keys: [proto], output: metrics.prom}
      - serialize: {output: "-"}          # "-" is standard output

``serialize`` may appear once and must be last. ``metrics`` observes flows
and passes them on unchanged.
"""
from __future__ import annotations

import dataclasses
import ipaddress
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional, Sequence, Union

import yaml

from flowkit.flow import FlowKey, FlowRecord, IPAddress

log = logging.getLogger(__name__)


class PipelineError(ValueError):
    pass


class InvalidMaskLength(PipelineError):
    pass


class TableParseError(PipelineError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class OverlappingExactDuplicate(TableParseError):
    pass


@dataclass(frozen=True)
class EnrichedFlow:
    flow: FlowRecord
    src_label: Optional[str] = None
    dst_label: Optional[str] = None


def as_enriched(flow: Union[FlowRecord, EnrichedFlow]) -> EnrichedFlow:
    return flow if isinstance(flow, EnrichedFlow) else EnrichedFlow(flow)


# --- serialization ----------------------------------------------------------

def to_jsonl(item: Union[FlowRecord, EnrichedFlow]) -> str:
    """One JSON object per line with a fixed key order; absent labels are omitted."""
    e = as_enriched(item)
    f, k = e.flow, e.flow.key
    obj = {
        "type": "flow",
        "time_first_ms": f.first_seen,
        "time_last_ms": f.last_seen,
        "src_ip": str(k.src_ip),
        "dst_ip": str(k.dst_ip),
        "src_port": k.src_port,
        "dst_port": k.dst_port,
        "proto": k.protocol,
        "tcp_flags": f.tcp_flags,
        "packets": f.packets,
        "bytes": f.bytes,
    }
    if e.src_label is not None:
        obj["src_label"] = e.src_label
    if e.dst_label is not None:
        obj["dst_label"] = e.dst_label
    # ensure_ascii keeps labels free of raw control characters and newlines.
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True) + "\n"


def from_jsonl(line: str) -> EnrichedFlow:
    obj = json.loads(line)
    if obj.get("type") != "flow":
        raise ValueError("not a flow record")
    src = ipaddress.ip_address(obj["src_ip"])
    dst = ipaddress.ip_address(obj["dst_ip"])
    key = FlowKey(src.version, src, dst, int(obj["proto"]), int(obj["src_port"]),
                  int(obj["dst_port"]))
    flow = FlowRecord(key, int(obj["time_first_ms"]), int(obj["time_last_ms"]),
                      int(obj["packets"]), int(obj["bytes"]), int(obj.get("tcp_flags", 0)))
    return EnrichedFlow(flow, obj.get("src_label"), obj.get("dst_label"))


def read_jsonl(stream: Iterable[str]) -> Iterator[EnrichedFlow]:
    for n, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            yield from_jsonl(line)
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("event=jsonl_skip line=%d error=%s", n, exc)


# --- anonymization ----------------------------------------------------------

def truncate_address(addr: IPAddress, bits: int) -> IPAddress:
    width = addr.max_prefixlen
    if not 0 <= bits <= width:
        raise InvalidMaskLength(f"{bits} bits for IPv{addr.version}")
    mask = ((1 << width) - 1) ^ ((1 << (width - bits)) - 1)
    return type(addr)(int(addr) & mask)


def anonymize(item: Union[FlowRecord, EnrichedFlow], v4_bits: int = 24,
              v6_bits: int = 48) -> Union[FlowRecord, EnrichedFlow]:
    """Zero all but the leading v4_bits/v6_bits of both addresses."""
    if not 0 <= v4_bits <= 32:
        raise InvalidMaskLength(f"v4_bits={v4_bits}")
    if not 0 <= v6_bits <= 128:
        raise InvalidMaskLength(f"v6_bits={v6_bits}")
    e = as_enriched(item)
    k = e.flow.key
    bits = v4_bits if k.ip_version == 4 else v6_bits
    key = k._replace(src_ip=truncate_address(k.src_ip, bits),
                     dst_ip=truncate_address(k.dst_ip, bits))
    flow = dataclasses.replace(e.flow, key=key)
    if isinstance(item, FlowRecord):
        return flow
    return dataclasses.replace(e, flow=flow)


# --- enrichment -------------------------------------------------------------

class PrefixTable:
    """CIDR -> label map with longest-prefix lookup.

    Prefixes are bucketed by (version, length); a lookup masks the address
    once per populated length, longest first.
    """

    def __init__(self, entries: Iterable[tuple[str, str]] = ()):
        self._buckets: dict[tuple[int, int], dict[int, str]] = {}
        self._lengths: dict[int, list[int]] = {4: [], 6: []}
        for cidr, label in entries:
            self.add(ipaddress.ip_network(cidr), label)

    def add(self, network, label: str) -> None:
        bucket = self._buckets.setdefault((network.version, network.prefixlen), {})
        key = int(network.network_address)
        if key in bucket:
            raise KeyError(str(network))
        bucket[key] = label
        lengths = self._lengths[network.version]
        if network.prefixlen not in lengths:
            lengths.append(network.prefixlen)
            lengths.sort(reverse=True)

    def lookup(self, addr: IPAddress) -> Optional[str]:
        width = addr.max_prefixlen
        value = int(addr)
        for plen in self._lengths[addr.version]:
            label = self._buckets[(addr.version, plen)].get(value >> (width - plen) << (width - plen))
            if label is not None:
                return label
        return None

    def __len__(self) -> int:
        return sum(len(b) for b in self._buckets.values())

    @classmethod
    def from_text(cls, text: str) -> "PrefixTable":
        table = cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t") if "\t" in line else line.split(None, 1)
            if len(parts) != 2 or not parts[1].strip():
                raise TableParseError("expected CIDR<TAB>label", n)
            cidr, label = parts[0].strip(), parts[1].strip()
            try:
                net = ipaddress.ip_network(cidr, strict=False)
            except ValueError as exc:
                raise TableParseError(str(exc), n) from None
            try:
                table.add(net, label)
            except KeyError:
                raise OverlappingExactDuplicate(f"duplicate prefix {net}", n) from None
        return table

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "PrefixTable":
        return cls.from_text(Path(path).read_text())


def enrich(item: Union[FlowRecord, EnrichedFlow], table: PrefixTable) -> EnrichedFlow:
    e = as_enriched(item)
    return dataclasses.replace(e, src_label=table.lookup(e.flow.key.src_ip),
                               dst_label=table.lookup(e.flow.key.dst_ip))


# --- metrics ----------------------------------------------------------------

METRIC_KEY_FIELDS = {
    "srcip": lambda e: str(e.flow.key.src_ip),
    "dstip": lambda e: str(e.flow.key.dst_ip),
    "srcport": lambda e: str(e.flow.key.src_port),
    "dstport": lambda e: str(e.flow.key.dst_port),
    "proto": lambda e: str(e.flow.key.protocol),
    "src_label": lambda e: e.src_label or "",
    "dst_label": lambda e: e.dst_label or "",
}


def _label_value(v: str) -> str:
    return v.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")


class MetricsWindow:
    """Tumbling-window flow/packet/byte counters grouped by key fields.

    Windows are aligned to multiples of the window length; a flow's
    last_seen decides its window. A flow older than the open window is
    added to the open window and counted in ``late_flows``.
    """

    def __init__(self, window_s: float = 60, key_fields: Sequence[str] = ()):
        if window_s <= 0:
            raise PipelineError("metrics window must be positive")
        unknown = [k for k in key_fields if k not in METRIC_KEY_FIELDS]
        if unknown:
            raise PipelineError(f"unknown metrics key field(s): {', '.join(unknown)}")
        self.window_ms = int(round(window_s * 1000))
        self.key_fields = tuple(sorted(key_fields))
        self._getters = [METRIC_KEY_FIELDS[k] for k in self.key_fields]
        self.window_start: Optional[int] = None
        self.groups: dict[tuple, list[int]] = {}
        self.late_flows = 0

    def step(self, item: Union[FlowRecord, EnrichedFlow],
             now: Optional[int] = None) -> list[str]:
        """Account one flow; returns the lines of any window this closed.

        ``now`` (ms) closes the open window first if it has passed, which is
        how a live pipeline drives windows by wall clock.
        """
        out = self.advance(now) if now is not None else []
        e = as_enriched(item)
        t = e.flow.last_seen
        start = t - t % self.window_ms
        if self.window_start is None:
            self.window_start = start
        elif start > self.window_start:
            out += self._close()
            self.window_start = start
        elif start < self.window_start:
            self.late_flows += 1
        key = tuple(g(e) for g in self._getters)
        acc = self.groups.get(key)
        if acc is None:
            self.groups[key] = [1, e.flow.packets, e.flow.bytes]
        else:
            acc[0] += 1
            acc[1] += e.flow.packets
            acc[2] += e.flow.bytes
        return out

    def advance(self, now: int) -> list[str]:
        if self.window_start is not None and now >= self.window_start + self.window_ms:
            out = self._close()
            self.window_start = now - now % self.window_ms
            return out
        return []

    def flush(self) -> list[str]:
        return self._close()

    def _close(self) -> list[str]:
        if not self.groups:
            return []
        ts = self.window_start
        rows = sorted(self.groups.items())
        lines = []
        for idx, name in enumerate(("flows_total", "packets_total", "bytes_total")):
            for key, acc in rows:
                if self.key_fields:
                    labels = ",".join(f'{k}="{_label_value(v)}"'
                                      for k, v in zip(self.key_fields, key))
                    lines.append(f"{name}{{{labels}}} {acc[idx]} {ts}\n")
                else:
                    lines.append(f"{name} {acc[idx]} {ts}\n")
        self.groups = {}
        return lines


def metrics_step(state: MetricsWindow, flow: Union[FlowRecord, EnrichedFlow],
                 now: Optional[int] = None) -> list[str]:
    return state.step(flow, now)


# --- pipeline ---------------------------------------------------------------

def _open_output(target: str) -> tuple[IO[str], bool]:
    if target in ("-", "stdout"):
        return sys.stdout, False
    return open(target, "a", encoding="utf-8"), True


class Stage:
    name = "stage"

    def process(self, e: EnrichedFlow) -> Optional[EnrichedFlow]:
        return e

    def close(self) -> None:
        pass


class EnrichStage(Stage):
    name = "enrich"

    def __init__(self, table: PrefixTable):
        self.table = table

    def process(self, e):
        return enrich(e, self.table)


class AnonymizeStage(Stage):
    name = "anonymize"

    def __init__(self, v4_bits: int = 24, v6_bits: int = 48):
        if not 0 <= v4_bits <= 32 or not 0 <= v6_bits <= 128:
            raise InvalidMaskLength(f"v4_bits={v4_bits} v6_bits={v6_bits}")
        self.v4_bits, self.v6_bits = v4_bits, v6_bits

    def process(self, e):
        return anonymize(e, self.v4_bits, self.v6_bits)


class MetricsStage(Stage):
    name = "metrics"

    def __init__(self, window: MetricsWindow, output: str = "-"):
        self.window = window
        self._out, self._owned = _open_output(output)

    def process(self, e):
        self._write(self.window.step(e))
        return e

    def tick(self, now_ms: int) -> None:
        self._write(self.window.advance(now_ms))

    def _write(self, lines: list[str]) -> None:
        if lines:
            self._out.writelines(lines)
            self._out.flush()

    def close(self):
        self._write(self.window.flush())
        if self.window.late_flows:
            log.info("event=metrics_late flows=%d", self.window.late_flows)
        if self._owned:
            self._out.close()


class SerializeStage(Stage):
    name = "serialize"

    def __init__(self, output: str = "-"):
        self._out, self._owned = _open_output(output)

    def process(self, e):
        self._out.write(to_jsonl(e))
        return e

    def close(self):
        self._out.flush()
        if self._owned:
            self._out.close()


class Pipeline:
    """Stages applied strictly in configured order to one flow stream."""

    def __init__(self, stages: Sequence[Stage]):
        serialize_at = [i for i, s in enumerate(stages) if isinstance(s, SerializeStage)]
        if len(serialize_at) > 1:
            raise PipelineError("at most one serialize stage is allowed")
        if serialize_at and serialize_at[0] != len(stages) - 1:
            raise PipelineError("serialize must be the last stage")
        self.stages = list(stages)
        self.flows_in = 0

    def process(self, item: Union[FlowRecord, EnrichedFlow]) -> Optional[EnrichedFlow]:
        self.flows_in += 1
        e: Optional[EnrichedFlow] = as_enriched(item)
        for stage in self.stages:
            e = stage.process(e)
            if e is None:
                return None
        return e

    def run(self, items: Iterable[Union[FlowRecord, EnrichedFlow]]) -> Iterator[EnrichedFlow]:
        for item in items:
            out = self.process(item)
            if out is not None:
                yield out

    def tick(self, now_ms: int) -> None:
        for stage in self.stages:
            if isinstance(stage, MetricsStage):
                stage.tick(now_ms)

    def close(self) -> None:
        for stage in self.stages:
            stage.close()

    @classmethod
    def from_config(cls, config: dict, base_dir: Union[str, os.PathLike, None] = None
                    ) -> "Pipeline":
        base = Path(base_dir) if base_dir is not None else Path.cwd()

        def resolve(p: str) -> str:
            return p if p in ("-", "stdout") or os.path.isabs(p) else str(base / p)

        entries = config.get("stages") if isinstance(config, dict) else None
        if not isinstance(entries, list):
            raise PipelineError("config needs a 'stages' list")
        stages: list[Stage] = []
        for i, entry in enumerate(entries):
            if isinstance(entry, str):
                kind, opts = entry, {}
            elif isinstance(entry, dict) and len(entry) == 1:
                kind, opts = next(iter(entry.items()))
                opts = opts or {}
            else:
                raise PipelineError(f"stage {i}: expected a single-key mapping")
            if kind == "enrich":
                if "table" not in opts:
                    raise PipelineError(f"stage {i}: enrich needs 'table'")
                stages.append(EnrichStage(PrefixTable.load(resolve(opts["table"]))))
            elif kind == "anonymize":
                stages.append(AnonymizeStage(int(opts.get("v4_bits", 24)),
                                             int(opts.get("v6_bits", 48))))
            elif kind == "metrics":
                window = MetricsWindow(float(opts.get("window", 60)), opts.get("keys", ()))
                stages.append(MetricsStage(window, resolve(str(opts.get("output", "-")))))
            elif kind == "serialize":
                stages.append(SerializeStage(resolve(str(opts.get("output", "-")))))
            else:
                raise PipelineError(f"stage {i}: unknown stage {kind!r}")
        return cls(stages)

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "Pipeline":
        path = Path(path)
        config = yaml.safe_load(path.read_text())
        return cls.from_config(config, base_dir=path.parent)
