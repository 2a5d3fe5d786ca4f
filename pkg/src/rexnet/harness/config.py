"""Experiment configuration: flat ``key = value`` files plus overrides."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace

from ..errors import ConfigError

PARTITIONS = ("one-per-user", "multi-user")
TOPOLOGIES = ("sw", "er", "complete")
SCHEMES = ("rmw", "dpsgd")
MODES = ("ds", "ms")
TRANSPORTS = ("simulated", "tcp")


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "synthetic"          # ratings.csv path, or "synthetic"
    synthetic_users: int = 100
    max_users: int = 0                  # keep only the first N users (0 = all)
    train_fraction: float = 0.7
    partition: str = "multi-user"
    n_nodes: int = 8                    # ignored for one-per-user
    # topology
    topology: str = "sw"
    sw_close_k: int = 6
    sw_p_far: float = 0.03
    er_p: float = 0.05
    topology_seed: int = -1             # -1: derive from seed
    topology_file: str = ""             # load "i j" edge list instead of generating
    # learning
    scheme: str = "dpsgd"
    mode: str = "ds"
    share_count: int = 300
    k: int = 10
    learning_rate: float = 0.005
    regularization: float = 0.1
    steps_per_epoch: int = 0            # 0: 4 x mean local partition size
    max_epochs: int = 100
    test_every: int = 1
    # transport
    transport: str = "simulated"
    tcp_addresses: str = ""             # "0=host:port,1=host:port,..."; empty: loopback, ephemeral ports
    tcp_local_nodes: str = ""           # node ids hosted by this process; empty: all
    connect_timeout: float = 10.0
    max_frame: int = 64 * 1024 * 1024
    # simulated-time model (ms per hop, uniform jitter, link bandwidth; 0 disables)
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    bandwidth_mbps: float = 0.0
    # trust
    deployment: str = "rexnet"
    rogue_nodes: str = ""               # ids whose measurement is deliberately wrong
    # output
    metrics_out: str = ""
    summary_out: str = ""
    target_rmse: float = 0.0
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        def one_of(name, allowed):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

        one_of("partition", PARTITIONS)
        one_of("topology", TOPOLOGIES)
        one_of("scheme", SCHEMES)
        one_of("mode", MODES)
        one_of("transport", TRANSPORTS)
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.k < 1 or self.max_epochs < 0 or self.share_count < 0 or self.test_every < 1:
            raise ConfigError("k >= 1, max_epochs >= 0, share_count >= 0 and test_every >= 1 required")
        if self.learning_rate < 0 or self.regularization < 0 or self.steps_per_epoch < 0:
            raise ConfigError("learning_rate, regularization and steps_per_epoch must be non-negative")
        if self.partition == "multi-user" and self.n_nodes < 1:
            raise ConfigError("n_nodes must be >= 1")
        parse_id_list(self.rogue_nodes)
        parse_id_list(self.tcp_local_nodes)
        parse_addresses(self.tcp_addresses)
        return self

    def as_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


_DEFAULTS = ExperimentConfig()
KEYS = tuple(f.name for f in fields(ExperimentConfig))


def apply_overrides(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    changes = {}
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, raw, getattr(_DEFAULTS, key))
    return replace(cfg, **changes)


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = apply_overrides(cfg, parse_config_text(text))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def parse_id_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"bad node id list {text!r}") from None


def parse_addresses(text: str) -> dict[int, tuple[str, int]]:
    out = {}
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        try:
            nid, hostport = item.split("=", 1)
            host, port = hostport.rsplit(":", 1)
            out[int(nid)] = (host.strip(), int(port))
        except ValueError:
            raise ConfigError(f"bad address entry {item!r}, expected id=host:port") from None
    return out
