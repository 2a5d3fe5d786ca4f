"""Build a network of nodes from an :class:`ExperimentConfig` and run it."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import secure_channel as sc
from ..dataset import ONE_PER_USER, RatingSet, assign_users, first_users, parse_ratings, partition, split_train_test
from ..errors import ConfigError, RexError
from ..mf import TrainConfig
from ..node import Mode, NodeConfig, RexNode, Scheme
from ..synthetic import movielens_like
from ..topology import Topology, complete_graph, gen_erdos_renyi, gen_small_world
from .config import ExperimentConfig, parse_addresses, parse_id_list
from .metrics import MetricsRecord, per_epoch, records_to_csv
from .transport import SimulatedTransport, TcpTransport

log = logging.getLogger(__name__)


class ExperimentFailed(RexError):
    """A node aborted or the transport broke; ``result`` holds partial output."""

    def __init__(self, message: str, result: "ExperimentResult"):
        super().__init__(message)
        self.result = result


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    topology: Topology
    nodes: dict[int, RexNode]
    records: list[MetricsRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    transport: object = None

    @property
    def csv(self) -> str:
        return records_to_csv(self.records)


def load_dataset(cfg: ExperimentConfig) -> RatingSet:
    if cfg.dataset == "synthetic":
        data = movielens_like(cfg.synthetic_users, seed=cfg.seed)
    else:
        data = parse_ratings(cfg.dataset)
    if cfg.max_users:
        data = first_users(data, cfg.max_users)
    return data


def build_topology(cfg: ExperimentConfig, n: int) -> Topology:
    seed = cfg.seed if cfg.topology_seed < 0 else cfg.topology_seed
    if cfg.topology_file:
        with open(cfg.topology_file) as fh:
            topo = Topology.from_text(fh.read(), n)
        if topo.n != n:
            raise ConfigError(f"topology file has {topo.n} nodes, experiment needs {n}")
        return topo
    if cfg.topology == "complete":
        return complete_graph(n)
    if cfg.topology == "sw":
        return gen_small_world(n, cfg.sw_close_k, cfg.sw_p_far, seed)
    return gen_erdos_renyi(n, cfg.er_p, seed)


def build_nodes(cfg: ExperimentConfig, data: RatingSet | None = None):
    """Everything up to (not including) the message loop."""
    if data is None:
        data = load_dataset(cfg)
    n_nodes = len(data.distinct_users()) if cfg.partition == ONE_PER_USER else cfg.n_nodes
    try:
        owner = assign_users(data, n_nodes, cfg.partition)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train, test = split_train_test(data, cfg.train_fraction, seed=cfg.seed)
    train_parts = partition(train, n_nodes, cfg.partition, owner)
    test_parts = partition(test, n_nodes, cfg.partition, owner)
    topo = build_topology(cfg, n_nodes)

    steps = cfg.steps_per_epoch or max(1, math.ceil(4 * len(train) / n_nodes))
    scheme, mode = Scheme(cfg.scheme), Mode(cfg.mode)
    root = sc.make_root_key(cfg.seed)
    measurement = sc.compute_measurement(scheme.value, mode.value, cfg.k)
    rogue = set(parse_id_list(cfg.rogue_nodes))
    context = cfg.deployment.encode()

    nodes = {}
    for nid in range(n_nodes):
        m = measurement
        if nid in rogue:
            m = sc.compute_measurement(scheme.value, mode.value, cfg.k, build_id=sc.BUILD_ID + b"+rogue")
        # ECDH keys are fresh per run; they never influence model bytes
        att = sc.AttestationManager(nid, sc.Identity.generate(m), root, root.public_key(), context)
        train_seed = int(np.random.SeedSequence([cfg.seed, nid, 1]).generate_state(1)[0])
        ncfg = NodeConfig(
            node_id=nid, scheme=scheme, mode=mode, share_count=cfg.share_count,
            train=TrainConfig(cfg.learning_rate, cfg.regularization, steps, train_seed),
            max_epochs=cfg.max_epochs, neighbors=topo.neighbors(nid), k=cfg.k,
            seed=cfg.seed, test_every=cfg.test_every)
        nodes[nid] = RexNode(ncfg, train_parts[nid], test_parts[nid], att)
    return topo, nodes, {"n_train": len(train), "n_test": len(test), "n_users": data.n_users,
                         "n_items": data.n_items, "steps_per_epoch": steps}


def simulated_elapsed_ms(records, cfg: ExperimentConfig) -> dict[int, float]:
    """Cumulative per-epoch max over nodes of phase time plus modeled link delay.

    Link delay per epoch is ``latency + U(0, jitter) + bytes * 8 / bandwidth``
    using the busiest sender's bytes for that epoch.
    """
    rng = np.random.default_rng([cfg.seed, 0x7A])
    total, out = 0.0, {}
    for e, rows in per_epoch(records).items():
        step = max(r.round_ms for r in rows)
        if e > 0:
            step += cfg.latency_ms + (rng.uniform(0.0, cfg.jitter_ms) if cfg.jitter_ms > 0 else 0.0)
            if cfg.bandwidth_mbps > 0:
                step += max(r.bytes_sent for r in rows) * 8 / (cfg.bandwidth_mbps * 1e3)
        total += step
        out[e] = total
    return out


def _summary(result: ExperimentResult, wall_s: float, info: dict, honest: list[int]) -> dict:
    cfg = result.config
    recs = result.records
    by_epoch = per_epoch(recs)
    mean_rmse = {}
    mean_clamped = {}
    for e in by_epoch:
        vals = [result.nodes[n].rmse_history().get(e, math.nan) for n in honest]
        cl = [result.nodes[n].rmse_history(clamped=True).get(e, math.nan) for n in honest]
        vals = [v for v in vals if not math.isnan(v)]
        cl = [v for v in cl if not math.isnan(v)]
        if vals:
            mean_rmse[e] = sum(vals) / len(vals)
            mean_clamped[e] = sum(cl) / len(cl)
    elapsed = simulated_elapsed_ms(recs, cfg)
    cum_bytes, acc = {}, 0
    for e, rows in by_epoch.items():
        acc += sum(r.bytes_sent for r in rows)
        cum_bytes[e] = acc
    last = max(mean_rmse) if mean_rmse else None
    summary = {
        "status": "ok",
        "final_epoch": last,
        "final_mean_rmse": mean_rmse.get(last) if last is not None else None,
        "final_mean_rmse_clamped": mean_clamped.get(last) if last is not None else None,
        "total_bytes_sent": sum(r.bytes_sent for r in recs),
        "total_bytes_received": sum(r.bytes_received for r in recs),
        "wall_time_s": wall_s,
        "simulated_elapsed_ms": elapsed.get(max(elapsed)) if elapsed else 0.0,
        "elapsed_model": "cumulative per-epoch max over nodes of (merge+train+share+test ms) "
                         "+ latency_ms + U(0, jitter_ms) + max bytes_sent*8/bandwidth",
        "mean_rmse_by_epoch": {str(e): v for e, v in mean_rmse.items()},
        "cumulative_bytes_by_epoch": {str(e): v for e, v in cum_bytes.items()},
        "seeds": {"global": cfg.seed,
                  "topology": cfg.seed if cfg.topology_seed < 0 else cfg.topology_seed,
                  "split": cfg.seed, "root_key": cfg.seed},
        "nodes": len(result.nodes),
        "edges": result.topology.n_edges,
        "rejected_peers": {str(n): node.attestation.rejections
                           for n, node in result.nodes.items() if node.attestation.rejections},
        "counters": {str(n): dict(node.counters) for n, node in result.nodes.items() if node.counters},
        **info,
    }
    if cfg.target_rmse > 0:
        hit = next((e for e, v in mean_rmse.items() if v <= cfg.target_rmse), None)
        summary["time_to_target"] = None if hit is None else {
            "epoch": hit, "simulated_elapsed_ms": elapsed[hit], "cumulative_bytes": cum_bytes[hit]}
    return summary


def _write_outputs(result: ExperimentResult) -> None:
    cfg = result.config
    if cfg.metrics_out:
        with open(cfg.metrics_out, "w", newline="") as fh:
            fh.write(result.csv)
    if cfg.summary_out:
        with open(cfg.summary_out, "w") as fh:
            json.dump({"config": cfg.as_dict(), **result.summary}, fh, indent=2, sort_keys=True, default=str)


def run_experiment(cfg: ExperimentConfig, data: RatingSet | None = None,
                   capture_frames: bool = False) -> ExperimentResult:
    cfg.validate()
    topo, nodes, info = build_nodes(cfg, data)
    rogue = set(parse_id_list(cfg.rogue_nodes))
    hosted = set(parse_id_list(cfg.tcp_local_nodes)) or set(nodes)

    if cfg.transport == "simulated":
        transport = SimulatedTransport(topo, seed=cfg.seed, max_frame=cfg.max_frame, capture=capture_frames)
    else:
        addresses = parse_addresses(cfg.tcp_addresses)
        if cfg.tcp_addresses and not set(range(len(nodes))) <= addresses.keys():
            raise ConfigError("tcp_addresses must list every node")
        transport = TcpTransport(topo, addresses, connect_timeout=cfg.connect_timeout,
                                 max_frame=cfg.max_frame)
    for nid in sorted(hosted):
        transport.attach(nodes[nid])
    local_nodes = {n: nodes[n] for n in sorted(hosted)}

    result = ExperimentResult(cfg, topo, local_nodes, transport=transport)
    honest = [n for n in local_nodes if n not in rogue]
    error: BaseException | None = None
    t0 = time.perf_counter()
    try:
        transport.run()
        stuck = [n for n in honest if not local_nodes[n].finished]
        if stuck:
            raise RexError(f"nodes {stuck} stalled before epoch {cfg.max_epochs} (barrier never satisfied)")
    except RexError as exc:
        error = exc
    wall = time.perf_counter() - t0

    result.records = [r for node in local_nodes.values() for r in node.metrics()]
    result.summary = _summary(result, wall, info, honest)
    if error is not None:
        result.summary["status"] = "failed"
        result.summary["error"] = str(error)
    _write_outputs(result)
    if error is not None:
        raise ExperimentFailed(str(error), result) from error
    return result
