import json
import socket
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from rexnet.cli import main
from rexnet.errors import ConfigError, TransportError
from rexnet.harness.config import ExperimentConfig, load_config, parse_addresses, parse_config_text
from rexnet.harness.experiment import ExperimentFailed, run_experiment, simulated_elapsed_ms
from rexnet.harness.metrics import CSV_HEADER, MetricsRecord, read_csv, records_to_csv, strip_timing, summarize
from rexnet.harness.transport import SimulatedTransport, TcpTransport
from rexnet.mf import encode_model
from rexnet.topology import Topology, complete_graph
from rexnet.wire import Envelope, Kind

SMALL = ExperimentConfig(synthetic_users=24, n_nodes=4, topology="complete", share_count=20,
                         max_epochs=4, k=4)


class Recorder:
    """Minimal node: records deliveries and bounces a fixed script."""

    def __init__(self, nid, script=()):
        self.id = nid
        self.script = list(script)
        self.got = []
        self.finished = False

    def on_init(self):
        return self.script

    def on_message(self, env):
        self.got.append(env)
        return []


class TestConfig:
    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "exp.conf"
        path.write_text("# comment\nscheme = rmw   # trailing\nk=20\n\nlearning_rate = 0.01\n")
        cfg = load_config(path, {"k": "30", "max-epochs": "7"})
        assert (cfg.scheme, cfg.k, cfg.learning_rate, cfg.max_epochs) == ("rmw", 30, 0.01, 7)

    @pytest.mark.parametrize("text", ["nokey\n", "unknown_key = 1\n", "k = ten\n", "scheme = gossip\n",
                                      "train_fraction = 1.0\n", "rogue_nodes = a,b\n", "tcp_addresses = 0=foo\n"])
    def test_errors(self, tmp_path, text):
        path = tmp_path / "bad.conf"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.conf")

    def test_parse_helpers(self):
        assert parse_config_text("a = b = c\n") == {"a": "b = c"}
        assert parse_addresses("0=127.0.0.1:9000, 1=host:1") == {0: ("127.0.0.1", 9000), 1: ("host", 1)}

    def test_shipped_example_loads(self):
        import pathlib
        example = pathlib.Path(__file__).parents[1] / "configs" / "example.conf"
        cfg = load_config(example)
        assert cfg.topology == "sw" and cfg.sw_close_k == 6


class TestSimulatedTransport:
    def test_fifo_per_pair(self):
        topo = complete_graph(3)
        net = SimulatedTransport(topo, seed=4)
        script = [Envelope(Kind.TICK, 0, 1, e) for e in range(50)] + [Envelope(Kind.TICK, 0, 2, e) for e in range(50)]
        nodes = [Recorder(0, script), Recorder(1), Recorder(2)]
        for n in nodes:
            net.attach(n)
        net.run()
        assert [e.epoch for e in nodes[1].got] == list(range(50))
        assert [e.epoch for e in nodes[2].got] == list(range(50))

    def test_interleaving_depends_on_seed_only(self):
        def order(seed):
            net = SimulatedTransport(complete_graph(3), seed=seed)
            script = [Envelope(Kind.TICK, 0, 1, e) for e in range(20)]
            nodes = [Recorder(0, script), Recorder(1), Recorder(2, [Envelope(Kind.TICK, 2, 1, 100 + e) for e in range(20)])]
            for n in nodes:
                net.attach(n)
            net.run()
            return [e.epoch for e in nodes[1].got]
        assert order(1) == order(1)
        assert order(1) != order(2)

    def test_non_neighbor_rejected(self):
        net = SimulatedTransport(Topology.from_edges(3, [(0, 1), (1, 2)]))
        with pytest.raises(TransportError):
            net.send(Envelope(Kind.TICK, 0, 2, 0))

    def test_lossless_accounting_eight_nodes(self):
        cfg = replace(SMALL, synthetic_users=40, n_nodes=8, topology="sw", sw_close_k=4, mode="ms")
        result = run_experiment(cfg)
        net = result.transport
        assert net.sent == net.delivered and net.in_flight == 0
        assert sum(net.bytes_sent.values()) == sum(net.bytes_delivered.values())
        assert result.summary["total_bytes_sent"] == result.summary["total_bytes_received"]
        assert sum(net.bytes_sent.values()) == result.summary["total_bytes_sent"]


def test_tcp_unreachable_peer_is_startup_error():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    tcp = TcpTransport(complete_graph(2), {1: ("127.0.0.1", port)}, connect_timeout=0.5)
    tcp.attach(Recorder(0))
    with pytest.raises(TransportError, match="could not reach"):
        tcp.run()


@pytest.mark.parametrize("mode", ["ms", "ds"])
def test_tcp_matches_simulated(mode):
    cfg = replace(SMALL, n_nodes=2, mode=mode)
    sim = run_experiment(cfg)
    tcp = run_experiment(replace(cfg, transport="tcp"))
    for nid in sim.nodes:
        assert encode_model(sim.nodes[nid].model) == encode_model(tcp.nodes[nid].model)
    assert strip_timing(sim.csv) == strip_timing(tcp.csv)


def test_tcp_four_nodes_multi_process_style():
    # two transports in one process, each hosting half the nodes over real sockets
    import threading
    ports = []
    for _ in range(4):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            ports.append(s.getsockname()[1])
    addrs = ",".join(f"{i}=127.0.0.1:{p}" for i, p in enumerate(ports))
    base = replace(SMALL, transport="tcp", tcp_addresses=addrs, mode="ds")
    results, errors = {}, []

    def host(ids):
        try:
            results[ids] = run_experiment(replace(base, tcp_local_nodes=ids))
        except Exception as exc:  # surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=host, args=(ids,)) for ids in ("0,1", "2,3")]
    for t in threads:
        t.start()
    for t in threads:
        t.join(60)
    assert not errors and len(results) == 2
    sim = run_experiment(SMALL)
    for ids, res in results.items():
        for nid, node in res.nodes.items():
            assert encode_model(node.model) == encode_model(sim.nodes[nid].model)


class TestExperiment:
    def test_two_node_row_count(self, tmp_path):
        cfg = replace(SMALL, n_nodes=2, mode="ms", metrics_out=str(tmp_path / "m.csv"),
                      summary_out=str(tmp_path / "s.json"), target_rmse=5.0)
        result = run_experiment(cfg)
        rows = read_csv(tmp_path / "m.csv")
        assert len(rows) == 2 * (cfg.max_epochs + 1)
        summary = json.loads((tmp_path / "s.json").read_text())
        assert summary["status"] == "ok" and summary["seeds"]["global"] == 0
        assert summary["time_to_target"]["epoch"] == 0
        assert summary["config"]["mode"] == "ms"
        assert result.summary["final_mean_rmse"] > 0

    def test_deterministic_csv(self):
        a, b = run_experiment(SMALL), run_experiment(SMALL)
        assert strip_timing(a.csv) == strip_timing(b.csv)
        c = run_experiment(replace(SMALL, seed=1))
        assert strip_timing(a.csv) != strip_timing(c.csv)

    def test_one_per_user(self):
        cfg = replace(SMALL, partition="one-per-user", synthetic_users=6, topology="er", er_p=0.5)
        result = run_experiment(cfg)
        assert len(result.nodes) == 6

    def test_topology_file(self, tmp_path):
        path = tmp_path / "t.txt"
        Topology.from_edges(4, [(0, 1), (1, 2), (2, 3)]).dump(path)
        result = run_experiment(replace(SMALL, topology_file=str(path)))
        assert result.topology.n_edges == 3

    def test_failure_flushes_partial_metrics(self, tmp_path):
        cfg = replace(SMALL, learning_rate=1e6, metrics_out=str(tmp_path / "m.csv"),
                      summary_out=str(tmp_path / "s.json"), max_epochs=20)
        with pytest.raises(ExperimentFailed) as info:
            run_experiment(cfg)
        assert info.value.result.summary["status"] == "failed"
        assert json.loads((tmp_path / "s.json").read_text())["status"] == "failed"
        assert (tmp_path / "m.csv").read_text().startswith(",".join(CSV_HEADER))

    def test_elapsed_model(self):
        recs = [MetricsRecord(e, n, 1.0, 2.0, 0.0, 0.0, 1000, 1000, 1.0) for e in range(3) for n in range(2)]
        cfg = replace(SMALL, latency_ms=5.0, bandwidth_mbps=8.0)
        # epoch 0: 3ms; later epochs add 5ms latency and 1000 bytes at 8 Mbit/s = 1ms
        assert simulated_elapsed_ms(recs, cfg) == {0: 3.0, 1: 12.0, 2: 21.0}
        jitter = simulated_elapsed_ms(recs, replace(cfg, jitter_ms=2.0))
        assert 21.0 <= jitter[2] <= 25.0


class TestMetrics:
    def test_csv_round_trip(self, tmp_path):
        recs = [MetricsRecord(1, 0, 0.5, 1.25, 0.0, 0.1, 10, 20, float("nan")),
                MetricsRecord(0, 1, 0.5, 1.0, 0.0, 0.1, 10, 20, 0.9)]
        text = records_to_csv(recs)
        assert text.splitlines()[0] == ",".join(CSV_HEADER)
        assert text.splitlines()[1].startswith("0,1,")
        path = tmp_path / "m.csv"
        path.write_text(text)
        back = read_csv(path)
        assert back[0] == recs[1] and np.isnan(back[1].local_rmse)
        assert strip_timing(text).splitlines()[0] == "epoch,node_id,bytes_sent,bytes_received,local_rmse"

    def test_summarize(self):
        recs = [MetricsRecord(e, n, 1.0, 1.0, 1.0, 1.0, 100, 100, 1.0 - 0.1 * e) for e in range(3) for n in range(2)]
        s = summarize(recs)
        assert s["epochs"] == 3 and s["nodes"] == 2 and s["total_bytes_sent"] == 600
        assert s["final_mean_rmse"] == pytest.approx(0.8)


class TestCli:
    def test_run_and_summarize(self, tmp_path, capsys):
        out = tmp_path / "m.csv"
        code = main(["run", "--synthetic-users", "12", "--n-nodes", "2", "--topology", "complete",
                     "--max-epochs", "2", "--override", f"metrics_out={out}", "--k", "3"])
        assert code == 0 and out.exists()
        assert main(["summarize", str(out)]) == 0
        printed = capsys.readouterr().out
        assert json.loads(printed[printed.index("{"):])["epochs"] == 3

    def test_flag_beats_override_beats_file(self, tmp_path, monkeypatch):
        conf = tmp_path / "c.conf"
        conf.write_text("k = 2\nmax_epochs = 1\n")
        seen = []

        def fake_run(cfg):
            seen.append(cfg)
            raise KeyboardInterrupt

        import rexnet.cli as cli
        monkeypatch.setattr(cli, "run_experiment", fake_run)
        with pytest.raises(KeyboardInterrupt):
            main(["run", "--config", str(conf), "--override", "k=3", "--k", "4"])
        assert seen[0].k == 4 and seen[0].max_epochs == 1

    def test_config_error_exit_code(self, tmp_path):
        assert main(["run", "--override", "scheme=bogus"]) == 2
        assert main(["run", "--override", "nonsense=1"]) == 2
        assert main(["summarize", str(tmp_path / "missing.csv")]) == 2
        with pytest.raises(SystemExit) as info:
            main(["run", "--override", "novalue"])
        assert info.value.code == 2

    def test_runtime_error_exit_code(self, capsys):
        code = main(["run", "--synthetic-users", "12", "--n-nodes", "2", "--topology", "complete",
                     "--max-epochs", "5", "--learning-rate", "1e6"])
        assert code == 3
        assert "failed" in capsys.readouterr().err

    def test_gen_topology(self, tmp_path):
        out = tmp_path / "sw.txt"
        assert main(["gen-topology", "--kind", "sw", "--n", "20", "--close-k", "4", "--out", str(out)]) == 0
        topo = Topology.from_text(out.read_text(), 20)
        assert topo.is_connected() and topo.n_edges >= 40
        assert main(["gen-topology", "--kind", "er", "--n", "1", "--out", str(out)]) == 2

    def test_console_script_entry(self):
        proc = subprocess.run([sys.executable, "-m", "rexnet.cli", "gen-topology", "--kind", "er",
                               "--n", "5", "--p", "1", "--out", "/dev/null"], capture_output=True, text=True)
        assert proc.returncode == 0 and "10 edges" in proc.stdout
