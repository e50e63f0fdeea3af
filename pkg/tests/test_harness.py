import csv
import dataclasses
import json
import shutil

import pytest

from fedtraffic import cli, harness
from fedtraffic.config import loads
from fedtraffic.errors import ComparisonError

SMALL = """
[scenario]
k_users = 60
strategies = {strategies}

[fl]
rounds = 4
k_select = 8

[task]
n_examples = 1200
n_eval = 200
n_features = 12
n_classes = 10

[mlr]
max_epochs = 300

[report]
grid_resolution = 12, 10
mc_draws = 20000
trace_windows = 3
"""


@pytest.fixture
def small_ini(tmp_path):
    def make(strategies="cluster, availability, random"):
        path = tmp_path / f"small_{strategies.replace(', ', '_')}.ini"
        path.write_text(SMALL.format(strategies=strategies))
        return path

    return make


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = loads(SMALL.format(strategies="cluster, availability, random")).replace(output_dir=str(out))
    return harness.run_scenario(cfg), out


def test_run_writes_outputs(small_run):
    manifest, out = small_run
    assert not manifest.partial
    for name in ["scenario.ini", "manifest.json", "class_grid.csv", "population.csv", "mlr_model.txt"]:
        assert (out / name).exists()
    for s in ("cluster", "availability", "random"):
        assert (out / f"metrics_{s}.csv").exists()
        summary = json.loads((out / f"summary_{s}.json").read_text())
        assert summary["rounds_run"] == 4
    with open(out / "metrics_cluster.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["round"]) for r in rows] == [1, 2, 3, 4]
    assert list(rows[0]) == ["round", "strategy", "train_loss", "eval_acc", "selection_divergence", "n_selected"]
    grid = (out / "class_grid.csv").read_text().splitlines()
    assert grid[0] == "b_value,count_value,class_index" and len(grid) == 1 + 12 * 10


def test_manifest_round_trip(small_run):
    manifest, out = small_run
    loaded = harness.RunManifest.load(out / "manifest.json")
    assert loaded.config_hash == manifest.config_hash
    assert loaded.strategies == manifest.strategies
    assert loaded.resolve("metrics_cluster.csv") == out / "metrics_cluster.csv"


def test_comparison_recomputed(small_run):
    manifest, out = small_run
    comp = harness.compare_strategies(manifest)
    cl = harness.read_metrics(out / "metrics_cluster.csv")["train_loss"]
    av = harness.read_metrics(out / "metrics_availability.csv")["train_loss"]
    assert comp.final["availability"] == pytest.approx((av[-1] - cl[-1]) / av[-1], rel=1e-9, abs=1e-12)
    assert set(comp.final) == {"availability", "random"}
    harness.write_comparison(comp, out)
    data = json.loads((out / "comparison.json").read_text())
    assert set(data["reaches_20pct"]) == {"availability", "random"}


def copy_manifest(manifest, out, tmp_path, strategies):
    for s, src in strategies.items():
        shutil.copy(out / f"metrics_{src}.csv", tmp_path / f"metrics_{s}.csv")
    m = harness.RunManifest(manifest.config_hash, manifest.version, manifest.seed, manifest.target_accuracy)
    m.strategies = {s: {"metrics": f"metrics_{s}.csv"} for s in strategies}
    m.path = tmp_path / "manifest.json"
    return m


def test_identical_files_zero_reduction(small_run, tmp_path):
    manifest, out = small_run
    m = copy_manifest(manifest, out, tmp_path, {"cluster": "random", "availability": "random"})
    comp = harness.compare_strategies(m)
    assert comp.final["availability"] == 0.0
    assert all(r["relative_reduction"] == 0.0 for r in comp.rows)
    assert comp.divergence_always_lower["availability"] is False


def test_mismatched_rounds(small_run, tmp_path):
    manifest, out = small_run
    m = copy_manifest(manifest, out, tmp_path, {"cluster": "cluster", "availability": "availability"})
    lines = (tmp_path / "metrics_availability.csv").read_text().splitlines()
    (tmp_path / "metrics_availability.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ComparisonError, match="round"):
        harness.compare_strategies(m)


def test_single_strategy_comparison_error(small_run, tmp_path):
    manifest, out = small_run
    m = copy_manifest(manifest, out, tmp_path, {"cluster": "cluster"})
    with pytest.raises(ComparisonError):
        harness.compare_strategies(m)


def test_cli_single_strategy(small_ini, tmp_path, capsys):
    out = tmp_path / "single"
    assert cli.main(["run", str(small_ini("random")), "--out", str(out), "--rounds", "2"]) == 0
    assert sorted(p.name for p in out.glob("metrics_*.csv")) == ["metrics_random.csv"]
    assert not (out / "comparison.csv").exists()
    assert cli.main(["compare", str(out / "manifest.json")]) == 2
    assert "[compare]" in capsys.readouterr().err


def test_cli_run_and_compare(small_ini, tmp_path, capsys):
    out = tmp_path / "pair"
    assert cli.main(["run", str(small_ini("cluster, availability")), "--out", str(out), "--seed", "3"]) == 0
    assert (out / "comparison.csv").exists()
    first = (out / "comparison.csv").read_text()
    assert cli.main(["compare", str(out / "manifest.json")]) == 0
    assert (out / "comparison.csv").read_text() == first
    assert "availability" in capsys.readouterr().out
    assert json.loads((out / "manifest.json").read_text())["seed"] == 3


def test_cli_classify(small_ini, tmp_path, capsys):
    out = tmp_path / "cls"
    assert cli.main(["classify", str(small_ini()), "--out", str(out)]) == 0
    assert (out / "mlr_model.txt").exists() and not list(out.glob("metrics_*"))
    printed = capsys.readouterr().out
    assert "train accuracy" in printed and "held-out accuracy" in printed
    info = json.loads((out / "manifest.json").read_text())["classifier"]
    # six classes: both scores must beat chance even with a short training budget
    assert info["holdout_accuracy"] > 1 / 6 and info["train_accuracy"] > 1 / 6


def test_cli_traffic_check(small_ini, tmp_path):
    out = tmp_path / "tc"
    assert cli.main(["traffic-check", str(small_ini()), "--out", str(out)]) == 0
    with open(out / "traffic_check.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and all(r["agrees"] == "True" for r in rows)
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0] == "user_id,window_index,packet_count" and len(trace) == 1 + 6 * 3


def test_cli_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[scenario]\nk_users = 0\n")
    assert cli.main(["run", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "k_users" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.ini")]) == 2


def test_stage_error_writes_partial_manifest(tmp_path):
    cfg = loads(SMALL.format(strategies="random")).replace(output_dir=str(tmp_path / "p"))
    # validation is bypassed so the failure surfaces in the partition stage
    cfg = cfg.replace(task=dataclasses.replace(cfg.task, n_examples=30))
    with pytest.raises(harness.StageError) as info:
        harness.run_scenario(cfg)
    assert info.value.stage == "partition"
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert manifest["partial"] is True and "partition" in manifest["error"]


def test_cli_stage_failure_exit_code(small_ini, tmp_path, monkeypatch, capsys):
    def boom(cfg):
        raise harness.StageError("train:random", RuntimeError("diverged"))

    monkeypatch.setattr(harness, "run_scenario", boom)
    assert cli.main(["run", str(small_ini("random")), "--out", str(tmp_path / "x")]) == 3
    assert "[train:random]" in capsys.readouterr().err
