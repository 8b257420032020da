import json
import hashlib

import pytest

from ndcp.cli import main
from ndcp.conformal import PredictorConfig
from ndcp.data import PartitionPlan, partition, train_test_split
from ndcp.node import NodeServer


@pytest.fixture()
def experiment_config(tmp_path, benchmark_csv):
    cfg = {
        "dataset": str(benchmark_csv),
        "schemes": ["equal"],
        "source_counts": [2],
        "repetitions": 1,
        "significances": [0.05],
        "predictor": {"kind": "icp", "family": "kernel_ridge", "params": {"gamma": 0.05, "lam": 0.1}},
        "seed": 3,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


class TestExperimentCommand:
    def test_writes_reports_and_summary(self, tmp_path, experiment_config, capsys):
        out = tmp_path / "out"
        code = main(["experiment", "--config", str(experiment_config), "--output-dir", str(out)])
        assert code == 0
        assert (out / "report.json").is_file()
        assert (out / "report.csv").is_file()
        stdout = capsys.readouterr().out
        assert "NDCP" in stdout and "Pooled" in stdout
        payload = json.loads((out / "report.json").read_text())
        assert payload["config"]["seed"] == 3

    def test_missing_config_exits_1(self, tmp_path, capsys):
        code = main(["experiment", "--config", str(tmp_path / "missing.json")])
        assert code == 1
        assert "not found" in capsys.readouterr().err

    def test_unknown_flag_exits_1(self, capsys):
        code = main(["experiment", "--frobnicate"])
        assert code == 1
        assert "usage" in capsys.readouterr().err

    def test_no_dataset_exits_1(self, capsys):
        code = main(["experiment", "--repetitions", "1"])
        assert code == 1

    def test_runtime_failure_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n1,2,3\n")
        code = main([
            "experiment", "--dataset", str(bad), "--repetitions", "1",
            "--schemes", "equal", "--source-counts", "2",
        ])
        assert code == 2
        assert "row 3" in capsys.readouterr().err

    def test_flag_overrides_and_determinism(self, tmp_path, experiment_config, capsys):
        digests = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = main([
                "experiment", "--config", str(experiment_config),
                "--repetitions", "1", "--seed", "7", "--output-dir", str(out),
            ])
            assert code == 0
            digests.append(hashlib.sha256((out / "report.csv").read_bytes()).hexdigest())
            payload = json.loads((out / "report.json").read_text())
            assert payload["config"]["seed"] == 7
        assert digests[0] == digests[1]
        capsys.readouterr()

    def test_env_seed_fallback(self, tmp_path, benchmark_csv, monkeypatch, capsys):
        monkeypatch.setenv("NDCP_SEED", "99")
        out = tmp_path / "env"
        code = main([
            "experiment", "--dataset", str(benchmark_csv), "--repetitions", "1",
            "--schemes", "equal", "--source-counts", "2", "--significances", "0.2",
            "--output-dir", str(out),
        ])
        assert code == 0
        payload = json.loads((out / "report.json").read_text())
        assert payload["config"]["seed"] == 99
        capsys.readouterr()


class TestNodeCommand:
    def test_missing_shard_exits_2(self, capsys):
        code = main(["node", "--shard", "/nonexistent/shard.csv", "--bind", "127.0.0.1:0"])
        assert code == 2


class TestAggregateCommand:
    def test_aggregate_against_live_nodes(self, tmp_path, benchmark_dataset, capsys):
        train, test = train_test_split(benchmark_dataset, 0.1, seed=6)
        parts = partition(train, PartitionPlan("equal", 2, seed=6))
        pred = PredictorConfig(params={"gamma": 0.05, "lam": 0.1})
        servers = [NodeServer(s, pred, seed=j).start() for j, s in enumerate(parts)]
        try:
            input_csv = tmp_path / "points.csv"
            header = ",".join(f"f{i}" for i in range(8))
            lines = [header] + [
                ",".join(repr(float(v)) for v in x) for x in test.features[:4]
            ]
            input_csv.write_text("\n".join(lines) + "\n")
            out_path = tmp_path / "intervals.ndjson"
            code = main([
                "aggregate",
                "--nodes", ",".join(s.address for s in servers),
                "--eps", "0.05",
                "--input", str(input_csv),
                "--output", str(out_path),
            ])
            assert code == 0
            got = [json.loads(line) for line in out_path.read_text().splitlines()]
            assert len(got) == 4
            assert all(row["lo"] < row["hi"] for row in got)
        finally:
            for s in servers:
                s.shutdown()

    def test_all_nodes_down_exits_2(self, tmp_path, capsys):
        input_csv = tmp_path / "points.csv"
        input_csv.write_text("a\n1.0\n")
        code = main([
            "aggregate", "--nodes", "127.0.0.1:1", "--eps", "0.1",
            "--input", str(input_csv), "--timeout", "0.5",
        ])
        assert code == 2


class TestPredictCommand:
    def test_offline_predict(self, tmp_path, benchmark_csv, capsys):
        points = tmp_path / "points.csv"
        # reuse first data row; trailing label column is ignored
        lines = benchmark_csv.read_text().splitlines()
        points.write_text("\n".join(lines[:3]) + "\n")
        code = main([
            "predict", "--data", str(benchmark_csv), "--input", str(points),
            "--eps", "0.1", "--scheme", "equal", "--sources", "2", "--seed", "1",
        ])
        assert code == 0
        out_lines = capsys.readouterr().out.strip().splitlines()
        assert len(out_lines) == 2
        first = json.loads(out_lines[0])
        assert first["lo"] < first["hi"]
