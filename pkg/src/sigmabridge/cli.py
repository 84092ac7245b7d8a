"""Command-line entry point.

Subcommands: run (the bridge), sim-modbus, sim-legacy, proxy-tamper, and
the benchmark drivers bench-e2e, bench-internal, bench-model,
bench-resources. Exit codes: 0 ok, 2 configuration error, 3 runtime
startup error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from . import bench, sims, tamper
from .bridge import Bridge
from .config import (
    DEFAULT_CLIENT_CONFIG,
    DEFAULT_SERVER_CONFIG,
    load_configs,
)
from .model import ConfigurationError

log = logging.getLogger("sigmabridge")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STARTUP = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sigma-bridge",
                                     description="TCP-level aggregating bridge for "
                                                 "insecure legacy devices")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the bridge")
    run.add_argument("--client-config", default=DEFAULT_CLIENT_CONFIG)
    run.add_argument("--server-config", default=DEFAULT_SERVER_CONFIG)

    sim_modbus = sub.add_parser("sim-modbus", help="run the Modbus cooling-device simulator")
    sim_modbus.add_argument("--port", type=int, default=sims.DEFAULT_MODBUS_PORT)
    sim_modbus.add_argument("--fixture", type=Path, default=None)
    sim_modbus.add_argument("--seed", type=int, default=1)
    sim_modbus.add_argument("--overheat", action="store_true",
                            help="ramp the temperature past 80 C")

    sim_legacy = sub.add_parser("sim-legacy", help="run the plaintext legacy PLC simulator")
    sim_legacy.add_argument("--port", type=int, default=sims.DEFAULT_LEGACY_PORT)
    sim_legacy.add_argument("--fixture", type=Path, default=None)
    sim_legacy.add_argument("--seed", type=int, default=1)

    proxy = sub.add_parser("proxy-tamper", help="run the Modbus tamper proxy")
    proxy.add_argument("--listen", type=int, required=True)
    proxy.add_argument("--upstream", required=True, metavar="HOST:PORT")
    proxy.add_argument("--rule", action="append", default=[], metavar="ADDR=VALUE",
                       help="replace register ADDR with VALUE (repeatable)")

    bench_e2e = sub.add_parser("bench-e2e", help="end-to-end latency benchmark")
    bench_e2e.add_argument("--samples", type=int, default=1000)
    bench_e2e.add_argument("--poll-interval-ms", type=int, default=10)
    bench_e2e.add_argument("--out", type=Path, default=Path("bench-out"))

    bench_internal = sub.add_parser("bench-internal", help="internal latency benchmark")
    bench_internal.add_argument("--samples", type=int, default=1500)
    bench_internal.add_argument("--out", type=Path, default=Path("bench-out"))

    bench_model = sub.add_parser("bench-model", help="forwarding-delay model sweep")
    bench_model.add_argument("--period", type=float, default=10.0)
    bench_model.add_argument("--transmission", type=float, default=1.0)
    bench_model.add_argument("--steps", type=int, default=100)
    bench_model.add_argument("--out", type=Path, default=Path("bench-out"))

    bench_res = sub.add_parser("bench-resources", help="resource utilisation sampling")
    bench_res.add_argument("--pid", type=int, required=True)
    bench_res.add_argument("--duration", type=float, default=60.0)
    bench_res.add_argument("--out", type=Path, default=Path("bench-out"))

    return parser


def _cmd_run(args) -> int:
    try:
        clients, servers = load_configs(args.client_config, args.server_config)
    except ConfigurationError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    bridge = Bridge(clients, servers, config_dir=Path("config"))
    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    bridge.start()
    try:
        bridge.wait_serving(timeout=max(s.startup_timeout_s for s in servers.servers))
    except Exception as exc:
        log.error("startup failed: %s", exc)
        bridge.stop()
        return EXIT_STARTUP
    log.info("bridge running: %d workers, %d secure servers",
             len(bridge.workers), len(bridge.servers))
    stop.wait()
    log.info("shutting down")
    bridge.stop()
    return EXIT_OK


def _wait_for_interrupt():
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait()


def _cmd_sim_modbus(args) -> int:
    if args.fixture is not None:
        fixture = sims.modbus_fixture_from_json(args.fixture, seed=args.seed)
    else:
        fixture = sims.default_cooling_fixture(seed=args.seed, overheat=args.overheat)
    try:
        sim = sims.ModbusCoolingSim(port=args.port, fixture=fixture, seed=args.seed)
    except OSError as exc:
        log.error("cannot bind port %d: %s", args.port, exc)
        return EXIT_STARTUP
    sim.start()
    log.info("modbus cooling simulator on port %d", sim.port)
    _wait_for_interrupt()
    sim.stop()
    return EXIT_OK


def _cmd_sim_legacy(args) -> int:
    fixture = None
    if args.fixture is not None:
        fixture = sims.LegacyFixture.from_json(args.fixture, seed=args.seed)
    try:
        sim = sims.LegacyNodeSim(port=args.port, fixture=fixture, seed=args.seed)
    except OSError as exc:
        log.error("cannot bind port %d: %s", args.port, exc)
        return EXIT_STARTUP
    sim.start()
    log.info("legacy node simulator on port %d", sim.port)
    _wait_for_interrupt()
    sim.stop()
    return EXIT_OK


def _cmd_proxy(args) -> int:
    try:
        host, port_str = args.upstream.rsplit(":", 1)
        upstream_port = int(port_str)
        rules = []
        for spec in args.rule:
            addr_str, value_str = spec.split("=", 1)
            rules.append(tamper.TamperRule(int(addr_str), int(value_str)))
    except ValueError as exc:
        log.error("bad argument: %s", exc)
        return EXIT_CONFIG
    try:
        proxy = tamper.run_tamper_proxy(args.listen, host, upstream_port, rules)
    except OSError as exc:
        log.error("cannot bind port %d: %s", args.listen, exc)
        return EXIT_STARTUP
    log.info("tamper proxy on port %d -> %s (%d rules)", proxy.port, args.upstream,
             len(rules))
    _wait_for_interrupt()
    proxy.stop()
    return EXIT_OK


def _cmd_bench_e2e(args) -> int:
    samples = bench.run_e2e_latency(sample_count=args.samples,
                                    poll_interval_ms=args.poll_interval_ms)
    paths = bench.emit_report(bench.latency_rows(samples), "latency_s", args.out,
                              "e2e_latency")
    matches = sum(1 for s in samples if s.match)
    print(f"{matches}/{len(samples)} matches; report: {paths['summary']}")
    return EXIT_OK


def _cmd_bench_internal(args) -> int:
    samples = bench.record_internal_latency(sample_count=args.samples)
    paths = bench.emit_report(bench.internal_rows(samples), "tproc_ns", args.out,
                              "internal_latency")
    mean_us = sum(s.tproc_ns for s in samples) / len(samples) / 1000.0
    print(f"mean tProc {mean_us:.2f} us over {len(samples)} samples; "
          f"report: {paths['summary']}")
    return EXIT_OK


def _cmd_bench_model(args) -> int:
    rows = []
    for i in range(args.steps):
        t_s = args.period * i / args.steps
        model = bench.TimingModel(T=args.period, t_t=args.transmission, t_s=t_s)
        rows.append({"T": model.T, "t_t": model.t_t, "t_s": model.t_s,
                     "t_d": bench.forwarding_delay_sim(model)})
    paths = bench.emit_report(rows, "t_d", args.out, "forwarding_delay")
    ages = bench.data_age_bounds(args.period, args.transmission)
    print(json.dumps({
        "t_d_min": min(r["t_d"] for r in rows),
        "t_d_max": max(r["t_d"] for r in rows),
        "data_age_best": ages.best,
        "data_age_worst": ages.worst,
        "data_age_direct": ages.direct,
        "report": str(paths["summary"]),
    }, indent=2))
    return EXIT_OK


def _cmd_bench_resources(args) -> int:
    samples, truncated = bench.sample_resources(args.pid, args.duration)
    if not samples:
        log.error("no samples collected (process gone?)")
        return EXIT_STARTUP
    paths = bench.emit_report(bench.resource_rows(samples), "rss_bytes", args.out,
                              "resources")
    if truncated:
        log.warning("series truncated: target process exited mid-run")
    print(f"{len(samples)} samples; report: {paths['summary']}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "sim-modbus": _cmd_sim_modbus,
    "sim-legacy": _cmd_sim_legacy,
    "proxy-tamper": _cmd_proxy,
    "bench-e2e": _cmd_bench_e2e,
    "bench-internal": _cmd_bench_internal,
    "bench-model": _cmd_bench_model,
    "bench-resources": _cmd_bench_resources,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
