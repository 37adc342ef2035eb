"""Command-line pipeline: generate, match, train, eval."""

import csv
import json

import pytest

from mapmatch.cli import main


def run(args):
    return main([str(a) for a in args])


def generate_args(out, rows=6, cols=6, sigma=10.0, duration=240.0, vehicles=3, seed=7, **kw):
    args = [
        "generate", "--rows", rows, "--cols", cols, "--block-length", 200.0,
        "--sigma", sigma, "--duration", duration, "--vehicles", vehicles,
        "--seed", seed, "--out-dir", out,
    ]
    for k, v in kw.items():
        args += [f"--{k.replace('_', '-')}", v]
    return args


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cliwork")
    assert run(generate_args(out)) == 0
    return out


class TestGenerate:
    def test_writes_three_files(self, workdir):
        for name in ("network.json", "probes.csv", "truth.json"):
            assert (workdir / name).exists()

    def test_reproducible_byte_identical(self, workdir, tmp_path):
        assert run(generate_args(tmp_path)) == 0
        for name in ("network.json", "probes.csv", "truth.json"):
            assert (tmp_path / name).read_bytes() == (workdir / name).read_bytes()

    def test_different_seed_differs(self, workdir, tmp_path):
        assert run(generate_args(tmp_path, seed=8)) == 0
        assert (tmp_path / "probes.csv").read_bytes() != (workdir / "probes.csv").read_bytes()

    def test_zero_sigma_probes_equal_truth(self, tmp_path):
        assert run(generate_args(tmp_path, sigma=0.0, vehicles=1, duration=60.0)) == 0
        truth = json.loads((tmp_path / "truth.json").read_text())
        points = truth["vehicles"][0]["points"]
        with open(tmp_path / "probes.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(points)
        for row, (x, y) in zip(rows, points):
            assert float(row["x"]) == pytest.approx(x)
            assert float(row["y"]) == pytest.approx(y)

    def test_missing_required_flag_is_usage_error(self, tmp_path, capsys):
        code = run(["generate", "--cols", 4, "--sigma", 10, "--duration", 60, "--out-dir", tmp_path])
        assert code == 1

    def test_probe_period_decimates(self, tmp_path):
        assert run(generate_args(tmp_path, vehicles=1, duration=120.0, period=60.0)) == 0
        with open(tmp_path / "probes.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["timestamp"]) for r in rows] == [0.0, 60.0, 120.0]


class TestMatch:
    def match_args(self, workdir, out, strategy="offline", extra=()):
        return [
            "match", "--network", workdir / "network.json", "--probes", workdir / "probes.csv",
            "--baseline", "closest-point", "--strategy", strategy, "--out", out, *extra,
        ]

    def test_record_per_observation(self, workdir, tmp_path):
        out = tmp_path / "matched.jsonl"
        assert run(self.match_args(workdir, out)) == 0
        records = [json.loads(line) for line in out.read_text().splitlines()]
        with open(workdir / "probes.csv") as fh:
            n_probes = len(list(csv.DictReader(fh)))
        assert len(records) == n_probes
        first = records[0]
        assert {"vehicle_id", "t", "best_state", "state_marginals", "best_path", "path_marginals"} <= set(first)
        probs = [m["p"] for m in first["state_marginals"]]
        assert sum(probs) == pytest.approx(1.0)

    def test_offline_equals_long_lag(self, workdir, tmp_path):
        a = tmp_path / "off.jsonl"
        b = tmp_path / "lag.jsonl"
        assert run(self.match_args(workdir, a, strategy="offline")) == 0
        assert run(self.match_args(workdir, b, strategy="lag999")) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_viterbi_straight_road(self, workdir, tmp_path):
        out = tmp_path / "vit.jsonl"
        assert run(self.match_args(workdir, out, strategy="viterbi")) == 0
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert all("best_state" in r or r.get("skipped") for r in records)

    def test_deterministic(self, workdir, tmp_path):
        a = tmp_path / "m1.jsonl"
        b = tmp_path / "m2.jsonl"
        assert run(self.match_args(workdir, a)) == 0
        assert run(self.match_args(workdir, b)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_missing_model_is_data_error(self, workdir, tmp_path):
        code = run([
            "match", "--network", workdir / "network.json", "--probes", workdir / "probes.csv",
            "--strategy", "offline",
        ])
        assert code == 2

    def test_unreadable_network_is_data_error(self, workdir, tmp_path):
        code = run([
            "match", "--network", tmp_path / "nope.json", "--probes", workdir / "probes.csv",
            "--baseline", "closest-point",
        ])
        assert code == 2


class TestTrain:
    def test_supervised_writes_model_and_report(self, workdir, tmp_path):
        model = tmp_path / "model.json"
        report = tmp_path / "report.json"
        code = run([
            "train", "--network", workdir / "network.json", "--probes", workdir / "probes.csv",
            "--truth", workdir / "truth.json", "--mode", "supervised", "--features", "simple",
            "--out", model, "--report", report,
        ])
        assert code == 0
        doc = json.loads(model.read_text())
        assert doc["feature_set"] == "simple"
        assert len(doc["mu"]) == 1
        assert doc["sigma"] > 0
        rep = json.loads(report.read_text())
        assert rep and {"iter", "objective", "theta", "wallclock_s"} <= set(rep[0])

    def test_supervised_requires_truth(self, workdir, tmp_path):
        code = run([
            "train", "--network", workdir / "network.json", "--probes", workdir / "probes.csv",
            "--mode", "supervised", "--out", tmp_path / "m.json",
        ])
        assert code == 2

    def test_em_mode(self, workdir, tmp_path):
        model = tmp_path / "em.json"
        report = tmp_path / "emrep.json"
        code = run([
            "train", "--network", workdir / "network.json", "--probes", workdir / "probes.csv",
            "--mode", "em", "--em-iters", 2, "--out", model, "--report", report,
        ])
        assert code == 0
        rep = json.loads(report.read_text())
        assert len(rep) == 2
        assert rep[1]["objective"] >= rep[0]["objective"] - 1e-6


class TestEval:
    def test_row_counts_and_outputs(self, workdir, tmp_path):
        out_json = tmp_path / "report.json"
        out_csv = tmp_path / "report.csv"
        code = run([
            "eval", "--network", workdir / "network.json", "--truth", workdir / "truth.json",
            "--probes", workdir / "probes.csv", "--periods", "60,120", "--strategies", "online,offline",
            "--baselines", "shortest-path,closest-point", "--out-json", out_json, "--out-csv", out_csv,
        ])
        assert code == 0
        reports = json.loads(out_json.read_text())
        # periods x strategies x folds x models
        assert len(reports) == 2 * 2 * 1 * 2
        with open(out_csv) as fh:
            rows = list(csv.DictReader(fh))
        # one CSV row per trajectory per report
        assert len(rows) == len(reports) * 3
        assert {"period", "fold", "model", "strategy", "trajectory", "point_miss_rate", "path_miss_rate"} <= set(rows[0])

    def test_identity_period_low_misses(self, workdir, tmp_path):
        """Evaluating noise-free probes at the base period."""
        clean = tmp_path / "clean"
        clean.mkdir()
        assert run(generate_args(clean, sigma=2.0, vehicles=2, duration=120.0, sampler="local")) == 0
        out_csv = tmp_path / "r.csv"
        code = run([
            "eval", "--network", clean / "network.json", "--truth", clean / "truth.json",
            "--probes", clean / "probes.csv", "--periods", "1", "--strategies", "viterbi",
            "--baselines", "closest-point", "--proj-sigma", 2.0, "--radius", 12.0,
            "--backward-policy", "grid_forward_only", "--out-csv", out_csv,
        ])
        assert code == 0
        with open(out_csv) as fh:
            rows = list(csv.DictReader(fh))
        pooled = sum(float(r["point_miss_rate"]) for r in rows) / len(rows)
        assert pooled <= 0.05

    def test_non_multiple_period_rejected(self, workdir):
        code = run([
            "eval", "--network", workdir / "network.json", "--truth", workdir / "truth.json",
            "--periods", "2.5", "--strategies", "offline", "--baselines", "closest-point",
        ])
        assert code == 2


def test_config_file_supplies_defaults(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"strategy": "viterbi", "baseline": "closest-point"}))
    out = tmp_path / "out.jsonl"
    code = run([
        "match", "--network", workdir / "network.json", "--probes", workdir / "probes.csv",
        "--config", cfg, "--out", out,
    ])
    assert code == 0
    rec = json.loads(out.read_text().splitlines()[0])
    assert rec["state_marginals"] == []  # viterbi emits no marginals