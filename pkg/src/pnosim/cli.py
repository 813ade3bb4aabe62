"""``pno-sim`` command line.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 simulation fault.
"""

from __future__ import annotations

import argparse
import sys
import time

from . import bench, config
from .errors import PnoError
from .netsim import pcap_dump
from .rings import RingLayout, dump_layout

EXIT_OK, EXIT_CONFIG, EXIT_FAULT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pno-sim", description="Simulated transparent TCP offload over DMA message rings.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a benchmark workload and emit a report")
    run.add_argument("--workload", choices=bench.WORKLOADS)
    run.add_argument("--connections", type=int)
    run.add_argument("--msg-size", type=int)
    run.add_argument("--cores", type=int)
    run.add_argument("--messages", type=int)
    run.add_argument("--warmup", type=int)
    run.add_argument("--mode", choices=bench.MODES)
    run.add_argument("--think-us", type=float)
    run.add_argument("--batch-window-us", type=float)
    run.add_argument("--qd", type=_int_list)
    run.add_argument("--sizes", type=_int_list)
    run.add_argument("--iterations", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--config", help="INI file")
    run.add_argument("--report", help="write the report here instead of stdout")
    run.add_argument("--format", choices=("text", "json-lines"))

    dump = sub.add_parser("dump-pcap", help="capture an echo run's frames as a pcap file")
    dump.add_argument("--out", required=True)
    dump.add_argument("--connections", type=int, default=4)
    dump.add_argument("--messages", type=int, default=200)
    dump.add_argument("--msg-size", type=int, default=64)
    dump.add_argument("--seed", type=int)
    dump.add_argument("--config")

    lay = sub.add_parser("layout", help="print the byte layout of one core's ring set")
    lay.add_argument("--config")
    return p


def _load(args, workload_keys: dict) -> tuple:
    wl = {k: v for k, v in workload_keys.items() if v is not None}
    overrides = {"workload": wl}
    window = getattr(args, "batch_window_us", None)
    if window is not None:
        overrides["bridge"] = {"batch_window_us": window}
    return config.load(args.config, overrides=overrides)


def _run(args) -> int:
    sim, wl = _load(args, {
        "workload": args.workload, "connections": args.connections, "msg_size": args.msg_size,
        "cores": args.cores, "messages": args.messages, "warmup": args.warmup, "mode": args.mode,
        "think_us": args.think_us, "qd": args.qd, "sizes": args.sizes, "iterations": args.iterations,
        "seed": args.seed, "report_path": args.report, "format": args.format,
    })
    t0 = time.perf_counter()
    runner = {"echo": bench.run_echo, "stream": bench.run_stream, "dma_micro": bench.run_dma_micro}[wl.workload]
    report = runner(wl, sim)
    text = bench.emit_report(report, wl.format)
    if wl.report_path:
        with open(wl.report_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    # wall time is informational only and kept out of the report for reproducibility
    print(f"wall time {time.perf_counter() - t0:.2f} s", file=sys.stderr)
    return EXIT_OK


def _dump(args) -> int:
    sim, wl = _load(args, {"connections": args.connections, "messages": args.messages,
                           "msg_size": args.msg_size, "seed": args.seed, "warmup": 0})
    frames = bench.capture_trace(wl, sim)
    pcap_dump(args.out, frames)
    print(f"wrote {len(frames)} frames to {args.out}", file=sys.stderr)
    return EXIT_OK


def _layout(args) -> int:
    sim, _ = config.load(args.config)
    print(dump_layout(RingLayout(sim.rings)))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _run(args)
        if args.command == "dump-pcap":
            return _dump(args)
        return _layout(args)
    except config.ConfigError as exc:
        print(f"pno-sim: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PnoError, OSError) as exc:
        print(f"pno-sim: simulation fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except ValueError as exc:
        print(f"pno-sim: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
