"""Bridge assembly: store + one polling worker per device + one secure
server per configured alias."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

from .client import InsecWorker, InternalLatencyRecorder
from .config import ClientConfiguration, ServerConfiguration
from .secserver import SecureNodeServer
from .store import DataStore

log = logging.getLogger(__name__)


class Bridge:
    """A running bridge instance; workers write, servers read, nothing else
    touches the store."""

    def __init__(self, clients: ClientConfiguration, servers: ServerConfiguration,
                 config_dir: Optional[Path] = "config",
                 recorder: Optional[InternalLatencyRecorder] = None):
        self.store = DataStore(config_dir=config_dir)
        self.recorder = recorder
        self.workers = [
            InsecWorker(cfg, self.store.writer(), recorder=recorder)
            for cfg in clients.devices
        ]
        self.servers = [
            SecureNodeServer(cfg, self.store.reader(), recorder=recorder)
            for cfg in servers.servers
        ]

    def start(self):
        for worker in self.workers:
            worker.start()
        for server in self.servers:
            server.start()
        return self

    def wait_serving(self, timeout: float = 30.0):
        """Block until every secure server accepts connections (or raise)."""
        for server in self.servers:
            if not server.started_serving.wait(timeout):
                if server.startup_error is not None:
                    raise server.startup_error
                raise TimeoutError(f"secure server {server.cfg.alias} did not start")
        return self

    def stop(self):
        for worker in self.workers:
            worker.stop()
        for server in self.servers:
            server.stop()

    def server_for(self, alias: str) -> SecureNodeServer:
        for server in self.servers:
            if server.cfg.alias == alias:
                return server
        raise KeyError(alias)

    def worker_for(self, alias: str) -> InsecWorker:
        for worker in self.workers:
            if worker.cfg.alias == alias:
                return worker
        raise KeyError(alias)
