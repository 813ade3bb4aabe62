import json

import dpkt
import pytest

from oracles import ref_frame_ok
from pnosim.bench import REPORT_HEADER, parse_report
from pnosim.cli import main


def test_run_echo_writes_report(tmp_path, capsys):
    out = tmp_path / "r.txt"
    assert main(["run", "--workload", "echo", "--connections", "3", "--messages", "30",
                 "--warmup", "3", "--report", str(out)]) == 0
    rep = parse_report(out.read_text())
    assert rep.workload == "echo" and rep.metrics["messages"] == 30
    assert "wall time" in capsys.readouterr().err


def test_run_dma_micro_json_lines_to_stdout(capsys):
    assert main(["run", "--workload", "dma_micro", "--qd", "1,10", "--sizes", "4096",
                 "--iterations", "20", "--format", "json-lines"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert json.loads(lines[0]) == {"header": REPORT_HEADER}
    rows = [json.loads(x)["value"] for x in lines if '"row"' in x]
    assert [r["qd"] for r in rows] == [1, 10]


def test_run_stream(capsys):
    assert main(["run", "--workload", "stream", "--connections", "2", "--messages", "10"]) == 0
    assert parse_report(capsys.readouterr().out).metrics["corrupt_messages"] == 0


def test_report_excludes_wall_time(tmp_path):
    paths = [tmp_path / "a", tmp_path / "b"]
    for p in paths:
        main(["run", "--connections", "2", "--messages", "20", "--seed", "3", "--report", str(p)])
    assert paths[0].read_bytes() == paths[1].read_bytes()


@pytest.mark.parametrize("argv", [
    ["run", "--connections", "0"],
    ["run", "--workload", "nope"],
    ["run", "--qd", "1,x"],
    ["frobnicate"],
])
def test_bad_arguments_exit_1(argv):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_bad_config_file_exits_1(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[dma]\nbase_latency_us = -3\n")
    assert main(["run", "--config", str(cfg)]) == 1
    cfg.write_text("[nosuch]\nx = 1\n")
    assert main(["run", "--config", str(cfg)]) == 1


def test_simulation_fault_exits_2(tmp_path):
    cfg = tmp_path / "short.ini"
    cfg.write_text("[workload]\nmax_time_us = 20\n")
    assert main(["run", "--config", str(cfg), "--connections", "2"]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == 2


def test_layout_prints_regions(capsys):
    assert main(["layout"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in ("s_ring", "data_ring", "event_ring", "info_nic"))


def test_dump_pcap_is_valid(tmp_path):
    out = tmp_path / "t.pcap"
    assert main(["dump-pcap", "--out", str(out), "--connections", "2", "--messages", "20"]) == 0
    with open(out, "rb") as fh:
        frames = [buf for _, buf in dpkt.pcap.Reader(fh)]
    assert frames and all(ref_frame_ok(f) for f in frames)
    assert all(isinstance(dpkt.ethernet.Ethernet(f).data.data, dpkt.tcp.TCP) for f in frames)
