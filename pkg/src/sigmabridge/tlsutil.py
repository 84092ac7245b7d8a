"""Self-signed certificate generation for the secure endpoints.

Produces a CA, a server certificate, and optionally client certificates,
written as PEM files. Used by tests, benchmarks, and the demo configs; a
production deployment would supply its own material.
"""

from __future__ import annotations

import datetime
import ipaddress
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID


def _new_key():
    return ec.generate_private_key(ec.SECP256R1())


def _name(cn: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])


def _write_key(path: Path, key) -> None:
    path.write_bytes(key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    ))


def _base_builder(subject, issuer, public_key, days: int):
    now = datetime.datetime.now(datetime.timezone.utc)
    return (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(issuer)
        .public_key(public_key)
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=days))
    )


def generate_tls_material(out_dir: Path, server_cn: str = "localhost",
                          client_names=()) -> dict:
    """Create CA + server cert/key (+ client certs) under out_dir.

    Returns a dict of paths: ca, server_cert, server_key, and per client
    name ("<name>_cert", "<name>_key").
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    ca_key = _new_key()
    ca_name = _name("sigma-bridge test CA")
    ca_cert = (
        _base_builder(ca_name, ca_name, ca_key.public_key(), 365)
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .sign(ca_key, hashes.SHA256())
    )
    paths["ca"] = out_dir / "ca.pem"
    paths["ca"].write_bytes(ca_cert.public_bytes(serialization.Encoding.PEM))
    ca_key_path = out_dir / "ca_key.pem"
    _write_key(ca_key_path, ca_key)

    server_key = _new_key()
    san = x509.SubjectAlternativeName([
        x509.DNSName(server_cn),
        x509.DNSName("localhost"),
        x509.IPAddress(ipaddress.ip_address("127.0.0.1")),
    ])
    server_cert = (
        _base_builder(_name(server_cn), ca_name, server_key.public_key(), 365)
        .add_extension(san, critical=False)
        .sign(ca_key, hashes.SHA256())
    )
    paths["server_cert"] = out_dir / "server_cert.pem"
    paths["server_key"] = out_dir / "server_key.pem"
    paths["server_cert"].write_bytes(server_cert.public_bytes(serialization.Encoding.PEM))
    _write_key(paths["server_key"], server_key)

    for name in client_names:
        key = _new_key()
        cert = (
            _base_builder(_name(name), ca_name, key.public_key(), 365)
            .sign(ca_key, hashes.SHA256())
        )
        cert_path = out_dir / f"{name}_cert.pem"
        key_path = out_dir / f"{name}_key.pem"
        cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        _write_key(key_path, key)
        paths[f"{name}_cert"] = cert_path
        paths[f"{name}_key"] = key_path

    return paths
