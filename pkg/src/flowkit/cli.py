"""Command line entry point: ``flowkit meter|collect|query|pipe|gen|topology``."""
from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time
from typing import Optional, Sequence

import yaml

from flowkit import STORE_FORMAT_VERSION, __version__, logutil
from flowkit.ipfix.codec import IPFIX_VERSION

log = logging.getLogger("flowkit")


def _stop_event() -> threading.Event:
    stop = threading.Event()

    def handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    return stop


# --- meter ------------------------------------------------------------------

def cmd_meter(args) -> int:
    from flowkit.ipfix.export import Exporter, UdpSender, parse_hostport
    from flowkit.meter import MeterConfig
    from flowkit.packet import PcapReader, live_source
    from flowkit.pipeline import to_jsonl
    from flowkit.roles import meter_file, meter_live

    cfg = MeterConfig(idle_timeout=args.idle, active_timeout=args.active,
                      max_cache_entries=args.max_flows, sample_rate_n=args.sample,
                      tcp_finrst_expiry=not args.no_finrst)
    exporter = Exporter(args.odid, template_interval=args.template_interval,
                        linger=args.linger)
    sender = None
    if args.export:
        sender = UdpSender(parse_hostport(args.export), pace=args.pace)
        send = sender.send
        on_flow = None
    else:
        def send(_datagram):
            return None

        def on_flow(rec):
            sys.stdout.write(to_jsonl(rec))

    errors = 0
    try:
        if args.input:
            reader = PcapReader(args.input)
            with reader:
                run = meter_file(reader, cfg, exporter, send, on_flow)
            errors += reader.warnings
        else:
            source = live_source(args.interface)
            log.info("event=capture_started interface=%s", args.interface)
            run = meter_live(source, cfg, exporter, send, _stop_event(),
                             duration=args.duration, on_flow=on_flow)
    finally:
        if sender is not None:
            sender.close()
    s = run.stats
    dropped = sender.dropped + sender.errors if sender else 0
    log.info("event=meter_done frames=%d ip_packets=%d non_ip=%d decode_errors=%d flows=%d "
             "datagrams=%d exported_bytes=%d send_drops=%d", s.frames, s.ip_packets, s.non_ip,
             s.decode_errors, s.flows, run.datagrams, run.exported_bytes, dropped)
    errors += s.decode_errors + dropped
    return 1 if args.strict and errors else 0


# --- collect ----------------------------------------------------------------

def cmd_collect(args) -> int:
    from flowkit.ipfix.collect import (Collector, CollectorServer, JsonlSink, PipelineSink,
                                       QueuedSink, Replicator, StoreSink)
    from flowkit.ipfix.export import parse_hostport
    from flowkit.pipeline import Pipeline
    from flowkit.store import FlowStore

    tees = [parse_hostport(t) for t in args.tee]
    sinks = []
    if args.store:
        sinks.append(QueuedSink(StoreSink(FlowStore(args.store, rotate=args.rotate)),
                                name="store"))
    if args.jsonl:
        sinks.append(QueuedSink(JsonlSink(args.jsonl), name="jsonl"))
    if args.pipeline:
        sinks.append(QueuedSink(PipelineSink(Pipeline.load(args.pipeline)), name="pipeline"))
    if not sinks and not tees:
        log.error("event=config_error msg=\"need at least one sink or --tee\"")
        return 2
    collector = Collector(sinks)
    server = CollectorServer(parse_hostport(args.listen), collector,
                             Replicator(tees) if tees else None, workers=args.workers,
                             stats_interval=args.stats_interval)
    stop = _stop_event()
    log.info("event=listening addr=%s:%d tees=%d sinks=%d", *server.address, len(tees),
             len(sinks))
    thread = server.start_thread()
    while not stop.wait(0.2):
        if not thread.is_alive():
            break
    server.stop()
    thread.join()
    server.drain()
    collector.log_stats()
    server.close()
    t = collector.totals()
    tee_failed = sum(server.replicator.failed.values()) if server.replicator else 0
    overflow = sum(s.overflow for s in sinks)
    log.info("event=collector_done datagrams=%d malformed=%d flows=%d unknown_template_drops=%d "
             "tee_failures=%d sink_overflow=%d", t.datagrams, t.malformed, t.flows_decoded,
             t.unknown_template_drops, tee_failed, overflow)
    errors = t.malformed + tee_failed + overflow + server.worker_drops
    return 1 if args.strict and errors else 0


# --- query ------------------------------------------------------------------

def cmd_query(args) -> int:
    from flowkit import query as q
    from flowkit.store import scan

    try:
        expr = q.parse_filter(args.filter or "")
    except q.FilterError as exc:
        log.error("event=filter_error error=%s", exc)
        return 2
    if not os.path.isdir(args.store):
        log.error("event=no_store path=%s", args.store)
        return 2
    lo, hi = args.from_ms, args.to_ms
    # File windows follow receive time, not flow time, so they cannot be used
    # to prune without losing flows that were stored late; filter per record.
    flows = scan(args.store)
    if lo is not None or hi is not None:
        flows = (f for f in flows
                 if (lo is None or f.last_seen >= lo) and (hi is None or f.first_seen <= hi))
    flows = q.filter_flows(flows, expr)
    if args.aggregate:
        spec = q.AggregationSpec(tuple(x.strip() for x in args.aggregate.split(",") if x.strip()),
                                 args.sort or "bytes", args.top)
        rows = q.aggregate(flows, spec)
        header = list(spec.key_fields) + list(q.METRICS)
        cells = [q.aggregate_row(spec, r) for r in rows]
    else:
        header = list(q.FLOW_COLUMNS)
        cells = [q.flow_row(f) for f in q.sort_flows(flows, args.sort, args.top)]
    sys.stdout.write(q.render_csv(cells) if args.csv else q.render_table(header, cells))
    return 0


# --- pipe -------------------------------------------------------------------

def cmd_pipe(args) -> int:
    from flowkit.pipeline import Pipeline, read_jsonl
    from flowkit.store import scan

    pipeline = Pipeline.load(args.pipeline)
    if args.store:
        items = scan(args.store)
    elif args.input in (None, "-"):
        items = read_jsonl(sys.stdin)
    else:
        fh = open(args.input, encoding="utf-8")
        items = read_jsonl(fh)
    try:
        for _ in pipeline.run(items):
            pass
    finally:
        pipeline.close()
    log.info("event=pipe_done flows=%d", pipeline.flows_in)
    return 0


# --- gen --------------------------------------------------------------------

def cmd_gen(args) -> int:
    from flowkit.synth import InvalidSpec, SyntheticWorkloadSpec, generate, parse_mix, parse_range

    try:
        spec = SyntheticWorkloadSpec(
            seed=args.seed, flow_count=args.flows,
            packets_per_flow=parse_range(args.packets), protocol_mix=parse_mix(args.proto_mix),
            ipv6_fraction=args.v6_fraction, time_span_s=args.span,
            gap_ms=parse_range(args.gap), long_gap_probability=args.long_gap_prob,
            ip_size=parse_range(args.size), vlan_fraction=args.vlan_fraction,
            mid_flow_fin_probability=args.mid_fin_prob,
            idle_timeout=args.idle, active_timeout=args.active, snaplen=args.snaplen)
        out = generate(spec, args.out)
    except (InvalidSpec, ValueError) as exc:
        log.error("event=invalid_spec error=%s", exc)
        return 2
    log.info("event=generated pcap=%s oracle=%s packets=%d flows=%d", out.pcap_path,
             out.oracle_path, out.packets, out.flows)
    return 0


# --- topology ---------------------------------------------------------------

def cmd_topology(args) -> int:
    from flowkit.topology import TopologyConfig, TopologyError, run_topology

    config = TopologyConfig.load(args.config)
    try:
        topo = run_topology(config)
    except TopologyError as exc:
        log.error("event=topology_error error=%s", exc)
        return 2
    stop = _stop_event()
    rc = 0
    with topo:
        for m in config.meters:
            while topo.processes[m.name].poll() is None and not stop.wait(0.2):
                pass
            rc |= topo.processes[m.name].returncode or 0
        if not stop.is_set():
            time.sleep(args.settle)
    log.info("event=topology_done workdir=%s", config.workdir)
    return rc


# --- parser -----------------------------------------------------------------

def _int_or_none(text: Optional[str]) -> Optional[int]:
    return None if text is None else int(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowkit", description=__doc__)
    p.add_argument("--version", action="version",
                   version=f"flowkit {__version__} (ipfix version {IPFIX_VERSION}, "
                           f"store format {STORE_FORMAT_VERSION})")
    p.add_argument("--strict", action="store_true",
                   help="exit nonzero when any error was counted")
    p.add_argument("--log-level", default="info")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("meter", help="meter packets into flows and export IPFIX")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="pcap file")
    src.add_argument("--interface", help="live capture interface")
    m.add_argument("--idle", type=float, default=15.0, help="idle timeout, seconds")
    m.add_argument("--active", type=float, default=300.0, help="active timeout, seconds")
    m.add_argument("--max-flows", type=int, default=1 << 20)
    m.add_argument("--sample", type=int, default=1, help="count 1 of every N packets")
    m.add_argument("--no-finrst", action="store_true", help="do not expire flows on FIN/RST")
    m.add_argument("--export", help="IPFIX collector host:port; without it flows go to stdout "
                                    "as JSON lines")
    m.add_argument("--odid", type=int, default=0, help="observation domain id")
    m.add_argument("--template-interval", type=float, default=600.0)
    m.add_argument("--linger", type=float, default=1.0)
    m.add_argument("--pace", type=float, default=0.0, help="seconds between datagrams")
    m.add_argument("--duration", type=float, help="stop live capture after N seconds")
    m.set_defaults(func=cmd_meter)

    c = sub.add_parser("collect", help="receive IPFIX, replicate, store")
    c.add_argument("--listen", default="0.0.0.0:4739")
    c.add_argument("--tee", action="append", default=[], help="replicate to host:port")
    c.add_argument("--store", help="flow store directory")
    c.add_argument("--rotate", type=int, default=300, help="store rotation, seconds")
    c.add_argument("--jsonl", help="write flows as JSON lines to a path or '-'")
    c.add_argument("--pipeline", help="pipeline config file")
    c.add_argument("--stats-interval", type=float, default=0.0)
    c.add_argument("--workers", type=int, default=2)
    c.set_defaults(func=cmd_collect)

    q = sub.add_parser("query", help="filter and aggregate stored flows")
    q.add_argument("--store", required=True)
    q.add_argument("--from", dest="from_ms", type=int,
                   help="keep flows with last_seen >= this (epoch ms)")
    q.add_argument("--to", dest="to_ms", type=int,
                   help="keep flows with first_seen <= this (epoch ms)")
    q.add_argument("--filter", default="")
    q.add_argument("--aggregate", help="comma list of srcip,dstip,srcport,dstport,proto")
    q.add_argument("--sort", choices=("bytes", "packets", "flows"))
    q.add_argument("--top", type=int)
    q.add_argument("--csv", action="store_true")
    q.set_defaults(func=cmd_query)

    pp = sub.add_parser("pipe", help="run a flow pipeline over JSON lines or a store")
    pp.add_argument("--pipeline", required=True)
    pp.add_argument("--input", help="JSON lines file or '-'")
    pp.add_argument("--store")
    pp.set_defaults(func=cmd_pipe)

    g = sub.add_parser("gen", help="generate a synthetic pcap and its oracle")
    g.add_argument("--out", required=True, help="output prefix")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--flows", type=int, default=37)
    g.add_argument("--packets", default="10", help="N or A..B")
    g.add_argument("--proto-mix", default="tcp=0.6,udp=0.3,icmp=0.1")
    g.add_argument("--v6-fraction", type=float, default=0.2)
    g.add_argument("--span", type=float, default=60.0, help="flow start spread, seconds")
    g.add_argument("--gap", default="0..500", help="inter-packet gap ms, N or A..B")
    g.add_argument("--long-gap-prob", type=float, default=0.0)
    g.add_argument("--size", default="64..1500", help="IP packet size, N or A..B")
    g.add_argument("--vlan-fraction", type=float, default=0.1)
    g.add_argument("--mid-fin-prob", type=float, default=0.0)
    g.add_argument("--idle", type=float, default=15.0)
    g.add_argument("--active", type=float, default=300.0)
    g.add_argument("--snaplen", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("topology", help="run meter -> tee -> collectors locally")
    t.add_argument("--config", required=True)
    t.add_argument("--settle", type=float, default=2.0,
                   help="seconds to let collectors drain after the meters finish")
    t.set_defaults(func=cmd_topology)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    from flowkit.packet import PcapError
    from flowkit.store import StoreError
    from flowkit.topology import TopologyError

    args = build_parser().parse_args(argv)
    counter = logutil.setup(args.log_level)
    try:
        rc = args.func(args)
    except BrokenPipeError:
        return 0
    except (OSError, ValueError, KeyError, PcapError, StoreError, TopologyError,
            yaml.YAMLError) as exc:
        log.error("event=fatal error=%s", exc)
        return 2
    if args.strict and counter.count and rc == 0:
        rc = 1
    return rc


if __name__ == "__main__":
    sys.exit(main())
