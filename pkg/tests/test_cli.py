import json
import subprocess
import sys

import pytest

from flowkit import __version__
from flowkit.cli import main
from flowkit.store import FlowStore
from flowkit.synth import load_oracle

from conftest import oracle_identities


def run_cli(*args, check=True, timeout=60, input=None):
    proc = subprocess.run([sys.executable, "-m", "flowkit", *args], capture_output=True,
                          text=True, timeout=timeout, input=input)
    if check and proc.returncode != 0:
        raise AssertionError(proc.stderr)
    return proc


def test_version():
    out = run_cli("--version").stdout
    assert out.strip() == f"flowkit {__version__} (ipfix version 10, store format 1)"


def test_gen_then_meter_stdout_matches_oracle(tmp_path):
    prefix = tmp_path / "w"
    run_cli("gen", "--out", str(prefix), "--seed", "3", "--flows", "40", "--packets", "2..25",
            "--long-gap-prob", "0.1", "--gap", "0..2000", "--idle", "5", "--active", "30")
    proc = run_cli("meter", "--input", f"{prefix}.pcap", "--idle", "5", "--active", "30")
    from flowkit.pipeline import from_jsonl
    flows = [from_jsonl(line).flow for line in proc.stdout.splitlines()]
    doc = load_oracle(f"{prefix}.oracle.json")
    assert sorted((f.identity() for f in flows), key=repr) == oracle_identities(doc)
    assert "event=meter_done" in proc.stderr
    assert "level=info component=flowkit" in proc.stderr


def test_meter_bad_pcap_exits_2(tmp_path):
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"garbage" * 10)
    proc = run_cli("meter", "--input", str(bad), check=False)
    assert proc.returncode == 2 and "event=fatal" in proc.stderr


def test_meter_requires_source():
    with pytest.raises(SystemExit):
        main(["meter"])


def test_collect_requires_sink_or_tee():
    assert main(["collect", "--listen", "127.0.0.1:0"]) == 2


def _store_with_flows(tmp_path):
    from oracles import random_flows
    import random

    flows = random_flows(random.Random(1), 200)
    with FlowStore(tmp_path / "s") as store:
        for f in flows:
            store.append(f, 1_700_000_000)
    return flows


def test_query_table_and_csv(tmp_path, capsys):
    flows = _store_with_flows(tmp_path)
    assert main(["query", "--store", str(tmp_path / "s"), "--filter", "proto tcp",
                 "--csv"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert len(rows) == sum(f.protocol == 6 for f in flows)
    assert all(r.split(",")[2] == "tcp" for r in rows)
    assert main(["query", "--store", str(tmp_path / "s"), "--aggregate", "srcip",
                 "--sort", "bytes", "--top", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["srcip", "flows", "packets", "bytes"]
    assert len(lines) == 4


def test_query_time_range_filters_records(tmp_path, capsys):
    flows = _store_with_flows(tmp_path)
    lo, hi = 1_700_000_600_000, 1_700_001_200_000
    main(["query", "--store", str(tmp_path / "s"), "--from", str(lo), "--to", str(hi), "--csv"])
    rows = capsys.readouterr().out.splitlines()
    assert len(rows) == sum(f.last_seen >= lo and f.first_seen <= hi for f in flows)


def test_query_errors(tmp_path):
    _store_with_flows(tmp_path)
    assert main(["query", "--store", str(tmp_path / "s"), "--filter", "proto tcp and"]) == 2
    assert main(["query", "--store", str(tmp_path / "missing")]) == 2


def test_query_bad_aggregate_field(tmp_path):
    _store_with_flows(tmp_path)
    assert main(["query", "--store", str(tmp_path / "s"), "--aggregate", "color"]) == 2


def test_pipe_from_jsonl_and_store(tmp_path):
    _store_with_flows(tmp_path)
    (tmp_path / "p.yaml").write_text("stages:\n  - anonymize: {v4_bits: 8}\n"
                                     "  - serialize: {output: out.jsonl}\n")
    run_cli("pipe", "--pipeline", str(tmp_path / "p.yaml"), "--store", str(tmp_path / "s"))
    lines = (tmp_path / "out.jsonl").read_text().splitlines()
    assert len(lines) == 200
    v4 = [json.loads(x)["src_ip"] for x in lines if "." in json.loads(x)["src_ip"]]
    assert all(ip.endswith(".0.0.0") for ip in v4)
    (tmp_path / "q.yaml").write_text("stages:\n  - serialize: {output: '-'}\n")
    proc = run_cli("pipe", "--pipeline", str(tmp_path / "q.yaml"),
                   input="".join(x + "\n" for x in lines[:5]))
    assert proc.stdout.splitlines() == lines[:5]


def test_strict_mode_exit_code(tmp_path):
    pcap = tmp_path / "t.pcap"
    from flowkit.packet import RawFrame, write_pcap
    write_pcap(pcap, [RawFrame(0, b"\x00" * 10)])
    assert run_cli("meter", "--input", str(pcap), check=False).returncode == 0
    assert run_cli("--strict", "meter", "--input", str(pcap), check=False).returncode == 1
