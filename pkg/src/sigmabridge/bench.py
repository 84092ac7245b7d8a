"""Benchmark harness: end-to-end latency with value-match validation,
internal store-boundary latency, the cascaded-polling forwarding-delay
model, resource sampling, and report emission."""

from __future__ import annotations

import csv
import json
import math
import queue
import random
import statistics
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import psutil

from .bridge import Bridge
from .client import InsecEndpointConfig, InternalLatencyRecorder, Protocol
from .config import ClientConfiguration, ServerConfiguration
from .model import NodeId, Kind
from .secserver import AuthMethod, SecServerConfig, ServerMode
from .sims import LegacyFixture, LegacyNodeSim, SimVariable
from .snap import SnapConnection
from .tlsutil import generate_tls_material
import ssl


class ModelViolation(ValueError):
    pass


class ReportError(ValueError):
    pass


# -- timing model ----------------------------------------------------------

@dataclass(frozen=True)
class TimingModel:
    """Two cascaded pollers: common period, one-way transmission time, phase shift."""

    T: float
    t_t: float
    t_s: float

    def __post_init__(self):
        if self.T <= 0:
            raise ModelViolation("polling period T must be positive")
        if not 0 <= self.t_t:
            raise ModelViolation("transmission time must be non-negative")
        if self.t_t >= self.T:
            raise ModelViolation("model assumes t_t < T")
        if not 0 <= self.t_s < self.T:
            raise ModelViolation("phase shift must lie in [0, T)")


def forwarding_delay_sim(model: TimingModel) -> float:
    """Event simulation of the cascaded polling loops.

    The insecure-side poller starts at k*T, each poll occupying a 2*t_t
    round trip; the captured data lands in the store at poll completion.
    The secure-side poller starts at k*T + t_s and reads the store t_t after
    its poll begins. Returned is the delay from store availability to
    arrival at the secure client.
    """
    capture_complete = 2 * model.t_t  # insecure poll k=0
    j = 0
    while True:
        store_read_at = j * model.T + model.t_s + model.t_t
        if store_read_at >= capture_complete:
            delivery = j * model.T + model.t_s + 2 * model.t_t
            return delivery - capture_complete
        j += 1


@dataclass(frozen=True)
class DataAgeBounds:
    best: float
    worst: float
    direct: float


def data_age_bounds(T: float, t_t: float) -> DataAgeBounds:
    """Best/worst data age through the bridge, plus the direct-polling reference."""
    if T <= 0:
        raise ModelViolation("polling period T must be positive")
    if t_t < 0:
        raise ModelViolation("transmission time must be non-negative")
    return DataAgeBounds(best=2 * t_t + T, worst=2 * (t_t + T), direct=t_t + T)


# -- end-to-end latency measurement loop -----------------------------------

@dataclass(frozen=True)
class LatencySample:
    latency_s: float
    match: bool
    returned_value: object
    received_value: object


@dataclass(frozen=True)
class InternalLatencySample:
    dt1_ns: int
    dt2_ns: int
    tproc_ns: int

    def __post_init__(self):
        if self.tproc_ns != self.dt1_ns + self.dt2_ns:
            raise ValueError("tProc must equal dt1 + dt2 exactly")


class _RandomOnRead:
    """Generator producing a fresh random Int64 on every read."""

    def __init__(self, seed: int):
        self._rng = random.Random(seed)

    def __call__(self, t: float) -> int:
        return self._rng.getrandbits(53)


TEST_NODE = NodeId(1, "gen")
TEST_ALIAS = "InsecTest"
TEST_USER = "bench"
TEST_PASS = "bench-secret"


class LoopbackHarness:
    """Insecure test server + bridge + secure test client on loopback."""

    def __init__(self, workdir: Path, poll_interval_ms: int = 10,
                 recorder: Optional[InternalLatencyRecorder] = None, seed: int = 7):
        self.workdir = Path(workdir)
        fixture = LegacyFixture(
            namespaces=["http://opcfoundation.org/UA/", "urn:sigma:test:insec"],
            variables=[SimVariable("Gen/Value", TEST_NODE, Kind.INT64,
                                   _RandomOnRead(seed))],
        )
        self.sim = LegacyNodeSim(port=0, fixture=fixture)
        self.generated = queue.Queue()
        self.sim.on_value_generated = lambda v, ts: self.generated.put((v, ts))
        self.sim.start()

        tls = generate_tls_material(self.workdir / "tls")
        self._tls = tls
        clients = ClientConfiguration(devices=[InsecEndpointConfig(
            alias=TEST_ALIAS, protocol=Protocol.SNAP_LEGACY,
            host="127.0.0.1", port=self.sim.port,
            poll_interval_ms=poll_interval_ms,
            node_selection=[TEST_NODE],
        )])
        servers = ServerConfiguration(servers=[SecServerConfig(
            alias=TEST_ALIAS, port=0,
            tls_cert=str(tls["server_cert"]), tls_key=str(tls["server_key"]),
            auth_method=AuthMethod.USER_PASS, username=TEST_USER, password=TEST_PASS,
        )])
        self.bridge = Bridge(clients, servers, config_dir=self.workdir / "config",
                             recorder=recorder)
        self.bridge.start().wait_serving()
        self.secure_port = self.bridge.servers[0].port

    def secure_client(self) -> SnapConnection:
        ctx = ssl.create_default_context(cafile=str(self._tls["ca"]))
        conn = SnapConnection.connect("127.0.0.1", self.secure_port,
                                      ssl_context=ctx, server_hostname="localhost")
        resp = conn.hello(TEST_USER, TEST_PASS)
        if not resp.get("ok"):
            raise RuntimeError("authentication against the loopback bridge failed")
        return conn

    def close(self):
        self.bridge.stop()
        self.sim.stop()


def run_e2e_latency(sample_count: int = 1000, poll_interval_ms: int = 10,
                    timeout_s: float = 5.0,
                    workdir: Optional[Path] = None) -> List[LatencySample]:
    """Generate a value on the insecure side per poll, spin-read the secure
    endpoint until it shows up, and record latency plus a value match flag."""
    owns_dir = workdir is None
    tmp = tempfile.TemporaryDirectory() if owns_dir else None
    workdir = Path(tmp.name) if owns_dir else Path(workdir)
    harness = LoopbackHarness(workdir, poll_interval_ms=poll_interval_ms)
    samples: List[LatencySample] = []
    try:
        client = harness.secure_client()
        # Let the poll loop settle, then drop anything generated so far.
        time.sleep(0.2)
        while not harness.generated.empty():
            harness.generated.get_nowait()
        while len(samples) < sample_count:
            returned_value, ts = harness.generated.get(timeout=timeout_s + 1)
            # If several polls queued up, measure against the freshest value.
            while not harness.generated.empty():
                returned_value, ts = harness.generated.get_nowait()
            received_value = None
            match = False
            latency = timeout_s
            while True:
                resp = client.read(TEST_NODE.ns, TEST_NODE.id)
                now = time.monotonic()
                if resp.get("ok"):
                    received_value = resp["value"]
                    if received_value == returned_value:
                        match = True
                        latency = now - ts
                        break
                # A later poll may have superseded the target value before we
                # could observe it; chase the freshest generated value so the
                # sample still measures one device-to-endpoint propagation.
                while not harness.generated.empty():
                    returned_value, ts = harness.generated.get_nowait()
                if now - ts >= timeout_s:
                    break
            samples.append(LatencySample(latency_s=latency, match=match,
                                         returned_value=returned_value,
                                         received_value=received_value))
    finally:
        harness.close()
        if tmp is not None:
            tmp.cleanup()
    return samples


def record_internal_latency(sample_count: int = 1500, poll_interval_ms: int = 5,
                            workdir: Optional[Path] = None) -> List[InternalLatencySample]:
    """Collect store-boundary write (dt1) and read (dt2) latencies."""
    recorder = InternalLatencyRecorder()
    owns_dir = workdir is None
    tmp = tempfile.TemporaryDirectory() if owns_dir else None
    workdir = Path(tmp.name) if owns_dir else Path(workdir)
    harness = LoopbackHarness(workdir, poll_interval_ms=poll_interval_ms,
                              recorder=recorder)
    try:
        client = harness.secure_client()
        deadline = time.monotonic() + 120
        while len(recorder.samples) < sample_count:
            client.read(TEST_NODE.ns, TEST_NODE.id)
            if time.monotonic() > deadline:
                raise TimeoutError("internal latency sampling did not reach the target count")
    finally:
        harness.close()
        if tmp is not None:
            tmp.cleanup()
    return [InternalLatencySample(dt1, dt2, tproc)
            for dt1, dt2, tproc in recorder.samples[:sample_count]]


# -- resource sampling -----------------------------------------------------

@dataclass(frozen=True)
class ResourceSample:
    timestamp: float
    cpu_percent: float
    rss_bytes: int


def sample_resources(pid: int, duration_s: float, interval_s: float = 1.0):
    """1 Hz CPU%/RSS samples of a process; returns (samples, truncated)."""
    try:
        proc = psutil.Process(pid)
        proc.cpu_percent(None)  # prime the counter
    except psutil.NoSuchProcess:
        return [], True
    samples = []
    end = time.monotonic() + duration_s
    while time.monotonic() < end:
        try:
            cpu = proc.cpu_percent(interval=interval_s)
            rss = proc.memory_info().rss
        except psutil.NoSuchProcess:
            return samples, True
        samples.append(ResourceSample(time.time(), cpu, rss))
    return samples, False


def run_bridge_subprocess(client_config: Path, server_config: Path, cwd: Path):
    """Launch the bridge CLI as a child process (for resource scenarios)."""
    return subprocess.Popen(
        [sys.executable, "-m", "sigmabridge", "--log-level", "WARNING", "run",
         "--client-config", str(client_config),
         "--server-config", str(server_config)],
        cwd=str(cwd),
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )


# -- reports ---------------------------------------------------------------

def summarize(values) -> dict:
    values = list(values)
    if not values:
        raise ReportError("cannot summarize an empty sample set")
    ordered = sorted(values)

    def pct(q: float):
        rank = max(1, math.ceil(q * len(ordered)))
        return ordered[rank - 1]

    return {
        "count": len(ordered),
        "min": ordered[0],
        "max": ordered[-1],
        "mean": statistics.fmean(ordered),
        "stddev": statistics.pstdev(ordered) if len(ordered) > 1 else 0.0,
        "p50": pct(0.50),
        "p99": pct(0.99),
    }


def text_histogram(values, bins: int = 20, width: int = 50) -> str:
    values = list(values)
    if not values:
        raise ReportError("cannot plot an empty sample set")
    lo, hi = min(values), max(values)
    if hi == lo:
        return f"[{lo:g}, {hi:g}] {'#' * width} {len(values)}\n"
    counts = [0] * bins
    span = hi - lo
    for v in values:
        idx = min(int((v - lo) / span * bins), bins - 1)
        counts[idx] += 1
    peak = max(counts)
    lines = []
    for i, c in enumerate(counts):
        left = lo + span * i / bins
        right = lo + span * (i + 1) / bins
        bar = "#" * max(0, round(c / peak * width))
        lines.append(f"[{left:12.6g}, {right:12.6g}) {bar} {c}")
    return "\n".join(lines) + "\n"


def emit_report(rows, value_key: str, out_dir: Path, name: str) -> dict:
    """CSV (one row per sample) + summary JSON + text histogram."""
    rows = [dict(r) for r in rows]
    if not rows:
        raise ReportError("cannot emit a report for an empty sample set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = list(rows[0].keys())
    csv_path = out_dir / f"{name}.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    values = [row[value_key] for row in rows]
    summary_path = out_dir / f"{name}_summary.json"
    summary_path.write_text(json.dumps(summarize(values), indent=2) + "\n",
                            encoding="utf-8")
    hist_path = out_dir / f"{name}_histogram.txt"
    hist_path.write_text(text_histogram(values), encoding="utf-8")
    return {"csv": csv_path, "summary": summary_path, "histogram": hist_path}


def latency_rows(samples: List[LatencySample]):
    return [{
        "latency_s": s.latency_s,
        "match": s.match,
        "returned_value": s.returned_value,
        "received_value": s.received_value,
    } for s in samples]


def internal_rows(samples: List[InternalLatencySample]):
    return [{
        "dt1_ns": s.dt1_ns,
        "dt2_ns": s.dt2_ns,
        "tproc_ns": s.tproc_ns,
    } for s in samples]


def resource_rows(samples: List[ResourceSample]):
    return [{
        "timestamp": s.timestamp,
        "cpu_percent": s.cpu_percent,
        "rss_bytes": s.rss_bytes,
    } for s in samples]
