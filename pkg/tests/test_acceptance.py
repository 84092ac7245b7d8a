"""Acceptance suite: one test per release criterion, each printing a
single PASS line with the measured evidence when it holds."""

import json
import random
import socket
import statistics
import threading
import time
from fractions import Fraction

import pytest

from conftest import secure_connect
from sigmabridge import bench, modbus, sims, snap, tamper
from sigmabridge.bridge import Bridge
from sigmabridge.client import InsecEndpointConfig, Protocol
from sigmabridge.config import ClientConfiguration, ServerConfiguration
from sigmabridge.modbus import RegisterBinding
from sigmabridge.model import (
    Kind,
    NamespaceTable,
    NodeDescriptor,
    NodeId,
    STANDARD_NAMESPACE_URI,
)
from sigmabridge.secserver import AuthMethod, SecServerConfig
from sigmabridge.store import DataStore


def report(criterion, text):
    print(f"[acceptance {criterion:02d}] PASS: {text}")


def measure_loopback_transmission_s(pings=200):
    """Half the median TCP round trip of a 16-byte echo on loopback."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)

    def echo():
        conn, _ = listener.accept()
        with conn:
            while True:
                data = conn.recv(64)
                if not data:
                    return
                conn.sendall(data)

    thread = threading.Thread(target=echo, daemon=True)
    thread.start()
    rtts = []
    with socket.create_connection(listener.getsockname(), timeout=5) as sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        payload = b"x" * 16
        for _ in range(pings):
            t0 = time.perf_counter()
            sock.sendall(payload)
            while len(sock.recv(64)) < 16:
                pass
            rtts.append(time.perf_counter() - t0)
    listener.close()
    return statistics.median(rtts) / 2


@pytest.fixture(scope="module")
def e2e_run(tmp_path_factory):
    start = time.monotonic()
    samples = bench.run_e2e_latency(sample_count=1000, poll_interval_ms=10,
                                    workdir=tmp_path_factory.mktemp("e2e"))
    return samples, time.monotonic() - start


def test_criterion_01_end_to_end_match_rate(e2e_run):
    samples, duration = e2e_run
    matches = sum(1 for s in samples if s.match)
    assert len(samples) == 1000
    assert matches == 1000
    assert duration <= 120
    report(1, f"{matches}/1000 value matches in {duration:.1f}s")


def test_criterion_02_end_to_end_latency_bound(e2e_run):
    samples, _ = e2e_run
    t_t = measure_loopback_transmission_s()
    bound = 2 * (t_t + 0.010)
    latencies = sorted(s.latency_s for s in samples)
    p99 = latencies[int(0.99 * len(latencies)) - 1]
    timeouts = sum(1 for s in samples if s.latency_s >= 5.0)
    assert timeouts == 0
    assert p99 <= bound
    report(2, f"p99 latency {p99 * 1000:.2f}ms <= bound {bound * 1000:.2f}ms "
              f"(loopback t_t {t_t * 1e6:.1f}us), 0 timeouts")


def test_criterion_03_internal_latency(tmp_path):
    samples = bench.record_internal_latency(sample_count=1500, workdir=tmp_path)
    assert len(samples) >= 1500
    assert all(s.tproc_ns == s.dt1_ns + s.dt2_ns for s in samples)
    mean_us = statistics.fmean(s.tproc_ns for s in samples) / 1000.0
    assert mean_us < 500
    report(3, f"{len(samples)} samples, mean tProc {mean_us:.2f}us < 500us, "
              "tProc = dt1 + dt2 for every sample")


def test_criterion_04_forwarding_delay_law():
    start = time.monotonic()
    rng = random.Random(20240817)
    for _ in range(10_000):
        T = rng.uniform(0.5, 100.0)
        t_t = rng.uniform(0.0, 0.999) * T
        t_s = rng.uniform(0.0, 0.999) * T
        t_d = bench.forwarding_delay_sim(bench.TimingModel(T, t_t, t_s))
        assert t_t <= t_d < t_t + T

    sweep = [bench.forwarding_delay_sim(bench.TimingModel(10.0, 1.0, i / 100))
             for i in range(1000)]
    elapsed = time.monotonic() - start
    assert min(sweep) == pytest.approx(1.0, abs=0.011)
    assert max(sweep) > 10.9
    assert elapsed <= 10
    report(4, f"10000/10000 delays in [t_t, t_t + T); T=10, t_t=1 sweep min "
              f"{min(sweep):.2f}, max {max(sweep):.2f}; {elapsed:.1f}s")


def test_criterion_05_data_age_formulas():
    rng = random.Random(5)
    for _ in range(100):
        # Dyadic inputs keep both the float pipeline and the exact oracle
        # free of rounding, so equality can be checked bit-for-bit.
        T = rng.randint(1, 640_000) / 64
        t_t = rng.randint(0, 640_000) / 64
        ages = bench.data_age_bounds(T, t_t)
        Tf, tf = Fraction(T), Fraction(t_t)
        assert ages.best == float(2 * tf + Tf)
        assert ages.worst == float(2 * (tf + Tf))
        assert ages.direct == float(tf + Tf)
    report(5, "best/worst/direct data-age formulas match exact arithmetic "
              "for 100 random inputs")


def test_criterion_06_modbus_golden_bytes():
    frame = modbus.encode_read_request(1, 1, modbus.ReadHoldingRegsRequest(0, 2))
    assert frame.hex() == "000100000006010300000002"
    regs = modbus.decode_response(bytes.fromhex("00010000000701030400eb04b0"))
    assert regs.registers == (235, 1200)
    exc = modbus.decode_response(bytes.fromhex("000100000003018302"))
    assert isinstance(exc, modbus.ExceptionResponse)
    assert exc.exception_code == modbus.EXC_ILLEGAL_DATA_ADDRESS
    for qty in range(1, 126):
        req = modbus.ReadHoldingRegsRequest(7, qty)
        _, decoded = modbus.decode_read_request(
            modbus.encode_read_request(qty, 1, req))
        assert decoded == req
        values = [(qty * 31 + i) & 0xFFFF for i in range(qty)]
        resp = modbus.decode_response(modbus.encode_read_response(qty, 1, values))
        assert resp.registers == tuple(values)
    report(6, "golden request/response/exception frames byte-exact; "
              "round trip holds for qty 1..125")


def _legacy_device(uri, temp_value, n_extra=0):
    variables = [sims.SimVariable("Machine/Temp", NodeId(2, 1001),
                                  Kind.DOUBLE, sims.const(temp_value))]
    variables += [sims.SimVariable(f"Array/Pt{i}", NodeId(2, 2000 + i),
                                   Kind.DOUBLE, sims.const(float(i)))
                  for i in range(n_extra)]
    fixture = sims.LegacyFixture(
        namespaces=[STANDARD_NAMESPACE_URI, "urn:accept:shared", uri],
        variables=variables,
    )
    sim = sims.LegacyNodeSim(port=0, fixture=fixture)
    sim.start()
    return sim


def test_criterion_07_namespace_isolation(tmp_path, tls_material,
                                          client_ssl_context):
    sim_a = _legacy_device("urn:accept:line-a", 11.5)
    sim_b = _legacy_device("urn:accept:line-b", 99.25)
    clients = ClientConfiguration(devices=[
        InsecEndpointConfig(alias="LineA", protocol=Protocol.SNAP_LEGACY,
                            host="127.0.0.1", port=sim_a.port, poll_interval_ms=50),
        InsecEndpointConfig(alias="LineB", protocol=Protocol.SNAP_LEGACY,
                            host="127.0.0.1", port=sim_b.port, poll_interval_ms=50),
    ])
    servers = ServerConfiguration(servers=[
        SecServerConfig(alias="LineA", port=4841,
                        tls_cert=str(tls_material["server_cert"]),
                        tls_key=str(tls_material["server_key"]),
                        auth_method=AuthMethod.USER_PASS,
                        username="op", password="pw"),
        SecServerConfig(alias="LineB", port=4842,
                        tls_cert=str(tls_material["server_cert"]),
                        tls_key=str(tls_material["server_key"]),
                        auth_method=AuthMethod.USER_PASS,
                        username="op", password="pw"),
    ])
    bridge = Bridge(clients, servers, config_dir=tmp_path / "config")
    try:
        bridge.start().wait_serving(timeout=30)
        time.sleep(0.3)
        values = {}
        uri_hits = 0
        for port, alias in ((4841, "LineA"), (4842, "LineB")):
            conn = secure_connect(port, client_ssl_context, "op", "pw")
            values[alias] = conn.read(2, 1001)["value"]
            uri_hits += conn.read_namespace_array().count(STANDARD_NAMESPACE_URI)
            conn.close()
        assert values == {"LineA": 11.5, "LineB": 99.25}
        assert uri_hits == 0
        reader = bridge.store.reader()
        keys_a = set(reader.keys_for_alias("LineA"))
        keys_b = set(reader.keys_for_alias("LineB"))
        assert keys_a and keys_b and not (keys_a & keys_b)
    finally:
        bridge.stop()
        sim_a.stop()
        sim_b.stop()
    report(7, "identical (ns=2,id=1001) on ports 4841/4842 served "
              "independently; rebuilt tables free of the standard URI; "
              "store key sets disjoint")


def test_criterion_08_mirror_round_trip(tmp_path):
    alias = "Mill"
    table = NamespaceTable((STANDARD_NAMESPACE_URI, "urn:mill:line", "urn:mill:aux"))
    nodes = tuple(
        NodeDescriptor(NodeId(1, f"axis{i}"), f"Axis{i}", f"Axis {i} position",
                       Kind.DOUBLE, f"Axis{i}", f"Objects/{alias}/Axes/Axis{i}")
        for i in range(7)
    ) + tuple(
        NodeDescriptor(NodeId(2, 9000 + i), f"Aux{i}", "", Kind.INT32,
                       f"Aux{i}", f"Objects/{alias}/Aux/Aux{i}")
        for i in range(4)
    )
    assert len(nodes) >= 10 and len(table) >= 2
    store = DataStore(config_dir=tmp_path / "config")
    store.writer().put_structure(alias, table, nodes)
    for ns in (1, 2):
        assert (tmp_path / "config" / alias / f"namespace{ns}.json").is_file()
    loaded_table, loaded_nodes = store.mirror_load(alias)
    assert loaded_table == table
    assert loaded_nodes == nodes
    report(8, f"{len(nodes)} nodes over {len(table)} namespaces survive the "
              f"mirror round trip at config/{alias}/namespace<N>.json")


def test_criterion_09_tamper_scenario(tmp_path, tls_material, client_ssl_context):
    sim = sims.ModbusCoolingSim(port=0, fixture=sims.ModbusFixture(
        registers={0: sims.const(850)}))
    sim.start()
    proxy = tamper.run_tamper_proxy(0, "127.0.0.1", sim.port,
                                    rules=[tamper.TamperRule(0, 235)])
    poll_ms = 100
    clients = ClientConfiguration(devices=[InsecEndpointConfig(
        alias="Cooler", protocol=Protocol.MODBUS_TCP, host="127.0.0.1",
        port=proxy.port, poll_interval_ms=poll_ms,
        bindings=[RegisterBinding(address=0, scale="0.1", target_kind=Kind.DOUBLE,
                                  node_id=NodeId(1, "temp"), browse_name="Temp")])])
    servers = ServerConfiguration(servers=[SecServerConfig(
        alias="Cooler", port=0,
        tls_cert=str(tls_material["server_cert"]),
        tls_key=str(tls_material["server_key"]),
        auth_method=AuthMethod.USER_PASS, username="op", password="pw")])
    bridge = Bridge(clients, servers, config_dir=tmp_path / "config")
    try:
        bridge.start().wait_serving(timeout=30)
        conn = secure_connect(bridge.servers[0].port, client_ssl_context,
                              "op", "pw")
        deadline = time.monotonic() + poll_ms / 1000.0
        while True:
            resp = conn.read(1, "temp")
            if resp.get("ok"):
                break
            assert time.monotonic() < deadline, \
                "no value within one polling period"
        assert resp["value"] == 23.5
        conn.close()
    finally:
        bridge.stop()
        proxy.stop()

    # With no rules the relay is byte-exact against a direct connection.
    plain = tamper.run_tamper_proxy(0, "127.0.0.1", sim.port)

    def query(port, txn, addr, qty):
        with socket.create_connection(("127.0.0.1", port), timeout=2) as sock:
            sock.sendall(modbus.encode_read_request(
                txn, 1, modbus.ReadHoldingRegsRequest(addr, qty)))
            buf = bytearray()
            while True:
                frame, _ = modbus.try_decode_adu(buf)
                if frame is not None:
                    return frame
                buf.extend(sock.recv(4096))

    try:
        for txn in (1, 2, 3):
            assert query(plain.port, txn, 0, 1) == query(sim.port, txn, 0, 1)
    finally:
        plain.stop()
        sim.stop()
    report(9, "register 0 (real 850 = 85.0C) served as 23.5 within one "
              "polling period under the rewrite rule; rule-free relay is "
              "byte-identical")


def test_criterion_10_reconnection_liveness(tmp_path, tls_material):
    poll_s = 0.2
    sim = sims.ModbusCoolingSim(port=0, fixture=sims.ModbusFixture(
        registers={0: sims.const(100)}))
    sim.start()
    port = sim.port
    clients = ClientConfiguration(devices=[InsecEndpointConfig(
        alias="Cooler", protocol=Protocol.MODBUS_TCP, host="127.0.0.1",
        port=port, poll_interval_ms=int(poll_s * 1000),
        bindings=[RegisterBinding(address=0, scale="1", target_kind=Kind.INT32,
                                  node_id=NodeId(1, "temp"), browse_name="Temp")])])
    servers = ServerConfiguration(servers=[SecServerConfig(
        alias="Cooler", port=0,
        tls_cert=str(tls_material["server_cert"]),
        tls_key=str(tls_material["server_key"]),
        auth_method=AuthMethod.USER_PASS, username="op", password="pw")])
    bridge = Bridge(clients, servers, config_dir=tmp_path / "config")
    try:
        bridge.start().wait_serving(timeout=30)
        reader = bridge.store.reader()
        deadline = time.monotonic() + 10
        while reader.get_value("Cooler:1:temp") is None:
            assert time.monotonic() < deadline
            time.sleep(0.01)
        sim.stop()
        time.sleep(3 * poll_s)  # let the worker notice and enter its retry loop

        sim = sims.ModbusCoolingSim(port=port, fixture=sims.ModbusFixture(
            registers={0: sims.const(200)}))
        sim.start()
        restarted = time.monotonic()
        while True:
            value = reader.get_value("Cooler:1:temp")
            if value is not None and value.variant.value == 200:
                recovery = time.monotonic() - restarted
                break
            assert time.monotonic() - restarted < 3 * poll_s, \
                "no fresh value within 3 polling periods of the restart"
            time.sleep(0.005)
        assert recovery <= 3 * poll_s
    finally:
        bridge.stop()
        sim.stop()
    report(10, f"fresh value {recovery * 1000:.0f}ms after device restart "
               f"(limit {3 * poll_s * 1000:.0f}ms), no operator action")


def _resource_scenario(tmp_path, tls_material, n_servers, with_modbus):
    """Run the bridge as a child process and return its mean RSS over 60 s."""
    scenario_dir = tmp_path / f"servers{n_servers}_modbus{int(with_modbus)}"
    scenario_dir.mkdir()
    # Each device carries a wide address space so every extra server adds
    # megabytes of RSS, keeping the comparison well above allocator noise.
    device_sims = [_legacy_device(f"urn:accept:res{i}", 1.0 + i, n_extra=600)
                   for i in range(n_servers)]
    devices = [
        {"alias": f"Dev{i}", "protocol": "snap-legacy", "host": "127.0.0.1",
         "port": sim.port, "pollIntervalMs": 100}
        for i, sim in enumerate(device_sims)
    ]
    if with_modbus:
        n_regs = 120
        fixture = sims.ModbusFixture(
            registers={a: (lambda t, a=a: (a * 7) & 0xFFFF)
                       for a in range(n_regs)})
        modbus_sim = sims.ModbusCoolingSim(port=0, fixture=fixture)
        modbus_sim.start()
        device_sims.append(modbus_sim)
        devices.append({
            "alias": "Cooler", "protocol": "modbus-tcp", "host": "127.0.0.1",
            "port": modbus_sim.port, "pollIntervalMs": 100,
            "registers": [{"address": a, "scale": 0.1, "type": "Double",
                           "nodeId": {"ns": 1, "id": f"reg{a}"},
                           "browseName": f"Reg{a}"}
                          for a in range(n_regs)]})
    server_entries = [
        {"alias": f"Dev{i}", "port": 24841 + i,
         "tls": {"cert": str(tls_material["server_cert"]),
                 "key": str(tls_material["server_key"])},
         "auth": {"method": "userpass", "user": "op", "pass": "pw"}}
        for i in range(n_servers)
    ]
    cpath = scenario_dir / "client.json"
    spath = scenario_dir / "server.json"
    cpath.write_text(json.dumps({"devices": devices}))
    spath.write_text(json.dumps({"servers": server_entries}))
    proc = bench.run_bridge_subprocess(cpath, spath, cwd=scenario_dir)
    try:
        deadline = time.monotonic() + 30
        mirror = scenario_dir / "config" / f"Dev{n_servers - 1}"
        while time.monotonic() < deadline and not mirror.exists():
            assert proc.poll() is None, "bridge process exited during startup"
            time.sleep(0.1)
        assert mirror.exists(), "bridge did not finish startup"
        samples, truncated = bench.sample_resources(proc.pid, duration_s=60.0)
        assert not truncated and samples
        return statistics.fmean(s.rss_bytes for s in samples)
    finally:
        proc.terminate()
        proc.wait(timeout=10)
        for sim in device_sims:
            sim.stop()


def test_criterion_11_resource_scaling(tmp_path, tls_material):
    rss = [
        _resource_scenario(tmp_path, tls_material, n_servers, with_modbus)
        for n_servers, with_modbus in ((1, False), (2, False), (3, False),
                                       (3, True))
    ]
    assert rss[3] < 4 * rss[0]
    assert rss[0] < rss[1] < rss[2] < rss[3]
    mib = [v / (1024 * 1024) for v in rss]
    report(11, "mean RSS over 60s runs: "
               f"{mib[0]:.1f}/{mib[1]:.1f}/{mib[2]:.1f}/{mib[3]:.1f} MiB "
               "(1, 2, 3 servers; 3 + modbus): monotonic and largest < 4x "
               "smallest")


def test_criterion_12_security_gate(tmp_path, tls_material, client_ssl_context):
    sim = _legacy_device("urn:accept:gate", 7.5)
    clients = ClientConfiguration(devices=[InsecEndpointConfig(
        alias="Gate", protocol=Protocol.SNAP_LEGACY, host="127.0.0.1",
        port=sim.port, poll_interval_ms=50)])
    servers = ServerConfiguration(servers=[SecServerConfig(
        alias="Gate", port=0,
        tls_cert=str(tls_material["server_cert"]),
        tls_key=str(tls_material["server_key"]),
        auth_method=AuthMethod.USER_PASS, username="op", password="pw")])
    bridge = Bridge(clients, servers, config_dir=tmp_path / "config")
    try:
        bridge.start().wait_serving(timeout=30)
        port = bridge.servers[0].port

        conn = secure_connect(port, client_ssl_context)
        rejected = 0
        for node in ((2, 1001), (0, 2255), (0, 85)):
            for op in (conn.read, conn.attrs, conn.browse):
                assert op(*node)["err"] == snap.BAD_AUTH
                rejected += 1
        conn.close()

        # A plaintext client must be cut off below the SNAP layer.
        with socket.create_connection(("127.0.0.1", port), timeout=2) as sock:
            sock.sendall(snap.encode_frame(snap.make_read(1, 2, 1001)))
            sock.settimeout(3)
            received = b""
            try:
                while True:
                    chunk = sock.recv(4096)
                    if not chunk:
                        break
                    received += chunk
            except (ConnectionError, OSError):
                pass
        if received:
            assert received[0] == 0x15  # TLS alert, not a SNAP frame

        # The session still works once properly authenticated over TLS.
        conn = secure_connect(port, client_ssl_context, "op", "pw")
        deadline = time.monotonic() + 5
        while True:
            resp = conn.read(2, 1001)
            if resp.get("ok"):
                break
            assert time.monotonic() < deadline
        assert resp["value"] == 7.5
        conn.close()
    finally:
        bridge.stop()
        sim.stop()
    report(12, f"{rejected} pre-auth requests all rejected with BAD_AUTH; "
               "plaintext connection never reached the frame layer")
