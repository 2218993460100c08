"""Node configuration: JSON (or TOML on Python 3.11+) file, environment
variable overrides for ports and data dir, flag overrides on top."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

from lskv.types import ConfigError


@dataclass
class NodeConfig:
    node_id: str = "node0"
    listen_host: str = "127.0.0.1"
    port: int = 2379
    peer_port: int = 2380
    # node_id -> {"client": "host:port", "peer": "host:port"}; must include self
    peers: dict = field(default_factory=dict)
    data_dir: str = "./lskv-data"
    keys_dir: str = "./lskv-keys"
    signature_interval: float = 1.0
    worker_threads: int = 2
    batch_count: int = 128
    batch_time: float = 0.005
    index_tick: float = 0.1
    election_timeout_min: float = 0.15
    election_timeout_max: float = 0.30
    heartbeat_interval: float = 0.05
    watch_buffer: int = 1024
    public_prefixes: list = field(default_factory=list)  # utf-8 strings
    client_token: str = ""

    def validate(self) -> None:
        if self.signature_interval <= 0:
            raise ConfigError("signature interval must be > 0")
        if not self.node_id:
            raise ConfigError("node_id required")
        if self.node_id not in self.peers:
            self.peers[self.node_id] = {
                "client": f"{self.listen_host}:{self.port}",
                "peer": f"{self.listen_host}:{self.peer_port}",
            }
        if self.election_timeout_min >= self.election_timeout_max:
            raise ConfigError("election timeout range must be increasing")

    @property
    def ledger_path(self) -> str:
        return os.path.join(self.data_dir, f"{self.node_id}.ledger")

    def key_path(self, name: str) -> str:
        return os.path.join(self.keys_dir, name)

    def client_addr(self, node_id: str) -> str:
        return self.peers[node_id]["client"]

    def peer_addr(self, node_id: str) -> str:
        return self.peers[node_id]["peer"]


def _read_config_file(path: str) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError as exc:
            raise ConfigError("TOML configs need Python 3.11+; use JSON") from exc
        return tomllib.loads(raw.decode())
    return json.loads(raw)


def load_config(path: str = None, overrides: dict = None) -> NodeConfig:
    data = _read_config_file(path) if path else {}
    known = {f.name for f in fields(NodeConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    cfg = NodeConfig(**data)
    if os.environ.get("LSKV_PORT"):
        cfg.port = int(os.environ["LSKV_PORT"])
    if os.environ.get("LSKV_PEER_PORT"):
        cfg.peer_port = int(os.environ["LSKV_PEER_PORT"])
    if os.environ.get("LSKV_DATA_DIR"):
        cfg.data_dir = os.environ["LSKV_DATA_DIR"]
    for key, value in (overrides or {}).items():
        if value is not None:
            if key not in known:
                raise ConfigError(f"unknown override {key!r}")
            setattr(cfg, key, value)
    cfg.validate()
    return cfg


def write_local_cluster_configs(n: int, out_dir: str, base_port: int = 2379, keys_dir: str = None) -> list:
    """Convenience: configs for an n-node loopback cluster; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    node_ids = [f"n{i}" for i in range(n)]
    peers = {
        nid: {
            "client": f"127.0.0.1:{base_port + 2 * i}",
            "peer": f"127.0.0.1:{base_port + 2 * i + 1}",
        }
        for i, nid in enumerate(node_ids)
    }
    paths = []
    for i, nid in enumerate(node_ids):
        cfg = {
            "node_id": nid,
            "listen_host": "127.0.0.1",
            "port": base_port + 2 * i,
            "peer_port": base_port + 2 * i + 1,
            "peers": peers,
            "data_dir": os.path.join(out_dir, "data"),
            "keys_dir": keys_dir or os.path.join(out_dir, "keys"),
        }
        path = os.path.join(out_dir, f"{nid}.json")
        with open(path, "w") as f:
            json.dump(cfg, f, indent=2)
        paths.append(path)
    return paths
