import ssl

import pytest

from sigmabridge.snap import SnapConnection
from sigmabridge.tlsutil import generate_tls_material


@pytest.fixture(scope="session")
def tls_material(tmp_path_factory):
    """CA + server cert/key + one client cert, shared by all TLS tests."""
    return generate_tls_material(tmp_path_factory.mktemp("tls"),
                                 client_names=("operator",))


@pytest.fixture(scope="session")
def client_ssl_context(tls_material):
    return ssl.create_default_context(cafile=str(tls_material["ca"]))


def secure_connect(port, ssl_context, user=None, password=None):
    """TLS-connect to a secure endpoint on loopback, optionally authenticating."""
    conn = SnapConnection.connect("127.0.0.1", port, ssl_context=ssl_context,
                                  server_hostname="localhost")
    if user is not None:
        resp = conn.hello(user, password)
        assert resp.get("ok"), f"authentication failed: {resp}"
    return conn
