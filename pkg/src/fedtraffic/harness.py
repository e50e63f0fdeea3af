"""Scenario pipeline: population -> MLR clusters -> FedAvg comparison -> files."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, classifier, fl_engine, selection, traffic_model
from .config import ScenarioConfig, config_hash, dumps as dump_config
from .errors import ComparisonError

log = logging.getLogger(__name__)

# stream tags for seeds derived from master_seed
_DATA_STREAM = 1
_INIT_STREAM = 4
_MC_STREAM = 5
_HOLDOUT_STREAM = 6


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


@dataclass
class Classification:
    members: list
    labels: np.ndarray
    threshold_labels: np.ndarray
    model: classifier.MlrModel
    assignments: list
    train_accuracy: float
    threshold_agreement: float | None
    holdout_accuracy: float | None = None


@dataclass
class FlSetup:
    shards: dict
    eval_data: fl_engine.Dataset
    initial: fl_engine.FlModel
    mixtures: fl_engine.LabelMixtures


@dataclass
class RunManifest:
    config_hash: str
    version: str
    seed: int
    target_accuracy: float
    strategies: dict = field(default_factory=dict)  # name -> {"metrics": ..., "summary": ...}
    exports: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    partial: bool = False
    error: str | None = None
    path: Path | None = None

    def to_json(self) -> str:
        data = {k: v for k, v in self.__dict__.items() if k != "path"}
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        return cls(**data, path=path)

    def resolve(self, name: str) -> Path:
        base = self.path.parent if self.path else Path(".")
        return base / name


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc

        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner

    return wrap


def class_names(cfg: ScenarioConfig) -> list[str]:
    if cfg.label_source == "archetype":
        return [a.name for a in cfg.archetypes]
    return list(selection.CLASS_NAMES)


@_stage("population")
def build_population(cfg: ScenarioConfig):
    return selection.generate_population(
        cfg.archetypes, cfg.k_users, cfg.window_s, cfg.master_seed, cfg.link
    )


@_stage("classify")
def classify_population(cfg: ScenarioConfig, members) -> Classification:
    X = selection.feature_matrix(members)
    th = selection.label_by_thresholds([m.stats for m in members], cfg.volume_cuts, cfg.bursty_cut)
    truth = selection.true_labels(members)
    agreement = None
    arch_names = [a.name for a in cfg.archetypes]
    if set(arch_names) <= set(selection.CLASS_NAMES):
        mapped = np.array([selection.CLASS_NAMES.index(arch_names[t]) for t in truth])
        agreement = float(np.mean(mapped == th))
    labels = truth if cfg.label_source == "archetype" else th
    model = classifier.train(X, labels, class_names(cfg), cfg.mlr)
    assignments = selection.cluster_users(model, X, [m.profile.user_id for m in members])
    acc = classifier.accuracy(model, X, labels)
    return Classification(members, labels, th, model, assignments, acc, agreement, _holdout_accuracy(cfg, X, labels))


def _holdout_accuracy(cfg: ScenarioConfig, X, labels) -> float | None:
    """Accuracy of a second model fitted without a random held-out fraction of users."""
    n_test = int(round(cfg.report.mlr_holdout * len(labels)))
    if n_test == 0:
        return None
    order = np.random.default_rng([cfg.master_seed, _HOLDOUT_STREAM]).permutation(len(labels))
    test, fit = order[:n_test], order[n_test:]
    if np.unique(labels[fit]).size < 2:
        return None
    model = classifier.train(X[fit], labels[fit], class_names(cfg), cfg.mlr)
    return classifier.accuracy(model, X[test], labels[test])


@_stage("partition")
def build_fl_setup(cfg: ScenarioConfig, members) -> FlSetup:
    """Label mixtures, global/eval data and shards shared by every strategy."""
    t = cfg.task
    rng = np.random.default_rng([cfg.master_seed, _DATA_STREAM])
    user_arch = {m.profile.user_id: m.profile.true_archetype for m in members}
    mixtures = fl_engine.draw_label_mixtures(
        user_arch, len(cfg.archetypes), t.n_classes, cfg.coupling, rng
    )
    aggregate = sum(mixtures.user_dists[u] for u in sorted(user_arch))
    train_labels = np.repeat(np.arange(t.n_classes), fl_engine.largest_remainder(aggregate, t.n_examples))
    eval_labels = np.repeat(np.arange(t.n_classes), fl_engine.largest_remainder(aggregate, t.n_eval))
    data = fl_engine.make_gaussian_mixture(train_labels, t.n_features, t.n_classes, t.separation, rng)
    eval_data = fl_engine.make_gaussian_mixture(eval_labels, t.n_features, t.n_classes, t.separation, rng)
    shards = fl_engine.partition_dataset(
        data, user_arch, cfg.coupling, rng, mixtures=mixtures, min_shard_size=t.min_shard_size
    )
    layout = fl_engine.Layout(t.n_features, t.n_classes, cfg.fl.hidden)
    initial = fl_engine.init_model(layout, np.random.default_rng([cfg.master_seed, _INIT_STREAM]))
    return FlSetup(shards, eval_data, initial, mixtures)


def write_metrics(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(fl_engine.METRICS_HEADER + "\n")
        for m in history:
            fh.write(m.csv_row() + "\n")


def rounds_to_target(accuracies, target) -> int | None:
    for i, acc in enumerate(accuracies, start=1):
        if acc >= target:
            return i
    return None


def run_summary(cfg: ScenarioConfig, strategy: str, history) -> dict:
    last = history[-1]
    return {
        "strategy": strategy,
        "seed": cfg.master_seed,
        "config_hash": config_hash(cfg),
        "rounds_run": len(history),
        "final_train_loss": last.train_loss,
        "final_eval_accuracy": last.eval_accuracy,
        "final_eval_loss": last.eval_loss,
        "final_population_loss": last.population_loss,
        "mean_selection_divergence": float(np.mean([m.selection_divergence for m in history])),
        "rounds_to_target": rounds_to_target([m.eval_accuracy for m in history], cfg.fl.target_accuracy),
        "shortfall_rounds": sum(m.shortfall for m in history),
    }


def write_classification(cfg: ScenarioConfig, result: Classification, out: Path) -> dict:
    X = selection.feature_matrix(result.members)
    lo, hi = X.min(axis=0), X.max(axis=0)
    pad = 0.05 * (hi - lo)
    bounds = ((max(lo[0] - pad[0], 0.0), hi[0] + pad[0]), (max(lo[1] - pad[1], 0.0), hi[1] + pad[1]))
    b_axis, c_axis, grid = classifier.decision_boundary_grid(result.model, bounds, cfg.report.grid_resolution)
    with open(out / "class_grid.csv", "w") as fh:
        classifier.write_grid(fh, b_axis, c_axis, grid)
    with open(out / "population.csv", "w") as fh:
        selection.write_population(
            fh,
            result.members,
            [a.predicted_class for a in result.assignments],
            [a.name for a in cfg.archetypes],
        )
    (out / "mlr_model.txt").write_text(classifier.dumps(result.model))
    return {"grid": "class_grid.csv", "population": "population.csv", "model": "mlr_model.txt"}


def _classifier_info(result: Classification) -> dict:
    sizes = selection.cluster_members(result.assignments)
    return {
        "train_accuracy": result.train_accuracy,
        "holdout_accuracy": result.holdout_accuracy,
        "epochs": result.model.epochs,
        "final_loss": result.model.final_loss,
        "threshold_agreement": result.threshold_agreement,
        "cluster_sizes": {result.model.class_names[c]: len(v) for c, v in sizes.items()},
    }


def _write_manifest(manifest: RunManifest, out: Path) -> None:
    manifest.path = out / "manifest.json"
    manifest.path.write_text(manifest.to_json())


def run_scenario(cfg: ScenarioConfig) -> RunManifest:
    """Run every configured strategy on the same population, data and initial model."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash(cfg), __version__, cfg.master_seed, cfg.fl.target_accuracy)
    (out / "scenario.ini").write_text(dump_config(cfg))
    manifest.exports["config"] = "scenario.ini"
    traffic_model.diagnostics.clear()
    stage = "population"
    try:
        t0 = time.perf_counter()
        members = build_population(cfg)
        result = classify_population(cfg, members)
        manifest.classifier = _classifier_info(result)
        manifest.exports.update(write_classification(cfg, result, out))
        manifest.wall_clock["classification"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        setup = build_fl_setup(cfg, members)
        manifest.wall_clock["partition"] = time.perf_counter() - t0
        users = [m.profile for m in members]
        for strategy in cfg.strategies:
            stage = f"train:{strategy}"
            t0 = time.perf_counter()
            log.info("training with %s selection", strategy)
            try:
                history = fl_engine.run_training(
                    strategy, setup.shards, users, result.assignments, setup.eval_data,
                    setup.initial, cfg.fl, cfg.master_seed, cfg.workers,
                )
            except Exception as exc:
                raise StageError(stage, exc) from exc
            metrics = f"metrics_{strategy}.csv"
            summary = f"summary_{strategy}.json"
            write_metrics(out / metrics, history)
            (out / summary).write_text(json.dumps(run_summary(cfg, strategy, history), indent=2, sort_keys=True) + "\n")
            manifest.strategies[strategy] = {"metrics": metrics, "summary": summary}
            manifest.wall_clock[strategy] = time.perf_counter() - t0
    except StageError as exc:
        manifest.partial = True
        manifest.error = str(exc)
        manifest.diagnostics = dict(traffic_model.diagnostics)
        _write_manifest(manifest, out)
        raise
    manifest.diagnostics = dict(traffic_model.diagnostics)
    _write_manifest(manifest, out)
    return manifest


def run_classification(cfg: ScenarioConfig) -> RunManifest:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash(cfg), __version__, cfg.master_seed, cfg.fl.target_accuracy)
    t0 = time.perf_counter()
    members = build_population(cfg)
    result = classify_population(cfg, members)
    manifest.classifier = _classifier_info(result)
    manifest.exports.update(write_classification(cfg, result, out))
    manifest.wall_clock["classification"] = time.perf_counter() - t0
    _write_manifest(manifest, out)
    return manifest


@_stage("traffic-check")
def traffic_check(cfg: ScenarioConfig, users_per_archetype: int = 1) -> list[dict]:
    """Monte-Carlo vs closed-form rate moments for sample users of each archetype.

    Writes ``traffic_check.csv`` and a Poisson packet-count trace
    ``trace.csv`` for the same users.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    members = build_population(cfg)
    picked = []
    for idx in range(len(cfg.archetypes)):
        picked += [m for m in members if m.profile.true_archetype == idx][:users_per_archetype]
    rows = []
    for m in picked:
        p = m.profile
        rng = np.random.default_rng([cfg.master_seed, _MC_STREAM, p.user_id])
        check = traffic_model.monte_carlo_moments(
            m.stats.rate_bps, p.packet_dist, m.stats.ber, cfg.report.mc_draws, rng
        )
        rows.append(
            {
                "archetype": cfg.archetypes[p.true_archetype].name,
                "user_id": p.user_id,
                "rate_bps": m.stats.rate_bps,
                "ber": m.stats.ber,
                "s_pb": p.packet_dist.mean_size * m.stats.ber,
                "analytic_mean": check.analytic_mean,
                "mc_mean": check.mc_mean,
                "mean_z": check.mean_z,
                "analytic_var": check.analytic_var,
                "mc_var": check.mc_var,
                "var_z": check.var_z,
                "agrees": check.agrees(),
            }
        )
    with open(out / "traffic_check.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["archetype"])
        writer.writeheader()
        writer.writerows(rows)
    with open(out / "trace.csv", "w") as fh:
        traffic_model.write_trace(
            fh,
            [(m.profile.user_id, m.stats.exp_lambda) for m in picked],
            cfg.report.trace_windows,
            cfg.window_s,
            cfg.master_seed,
        )
    return rows


# -- comparison --------------------------------------------------------------------


def read_metrics(path) -> dict[str, list]:
    cols: dict[str, list] = {"round": [], "train_loss": [], "eval_acc": [], "selection_divergence": []}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cols["round"].append(int(row["round"]))
            for key in ("train_loss", "eval_acc", "selection_divergence"):
                cols[key].append(float(row[key]))
    return cols


@dataclass
class Comparison:
    rows: list[dict]  # per round and baseline
    final: dict[str, float]  # baseline -> relative reduction at the last round
    max_reduction: dict[str, float]
    rounds_to_target: dict[str, int | None]
    divergence_always_lower: dict[str, bool]


def compare_strategies(manifest: RunManifest, reference: str = "cluster") -> Comparison:
    """Relative training-loss reduction of ``reference`` against every other strategy."""
    if len(manifest.strategies) < 2:
        raise ComparisonError("need at least two strategy metric files")
    if reference not in manifest.strategies:
        raise ComparisonError(f"manifest has no {reference!r} strategy")
    metrics = {s: read_metrics(manifest.resolve(v["metrics"])) for s, v in manifest.strategies.items()}
    ref = metrics[reference]
    rows, final, best, lower = [], {}, {}, {}
    for name, base in metrics.items():
        if name == reference:
            continue
        if base["round"] != ref["round"]:
            raise ComparisonError(
                f"round counts differ: {reference} has {len(ref['round'])}, {name} has {len(base['round'])}"
            )
        reductions = []
        for r, c_loss, b_loss in zip(ref["round"], ref["train_loss"], base["train_loss"]):
            red = (b_loss - c_loss) / b_loss
            reductions.append(red)
            rows.append(
                {"round": r, "baseline": name, "cluster_loss": c_loss, "baseline_loss": b_loss, "relative_reduction": red}
            )
        final[name] = reductions[-1]
        best[name] = max(reductions)
        lower[name] = all(
            c < b for c, b in zip(ref["selection_divergence"], base["selection_divergence"])
        )
    ttt = {s: rounds_to_target(m["eval_acc"], manifest.target_accuracy) for s, m in metrics.items()}
    return Comparison(rows, final, best, ttt, lower)


def write_comparison(comp: Comparison, out: Path) -> None:
    with open(out / "comparison.csv", "w", newline="") as fh:
        fh.write("round,baseline,cluster_loss,baseline_loss,relative_reduction\n")
        for r in comp.rows:
            fh.write(
                f"{r['round']},{r['baseline']},{r['cluster_loss']!r},{r['baseline_loss']!r},{r['relative_reduction']!r}\n"
            )
    summary = {
        "final_relative_reduction": comp.final,
        "max_relative_reduction": comp.max_reduction,
        "reaches_20pct": {k: v >= 0.20 for k, v in comp.max_reduction.items()},
        "rounds_to_target": comp.rounds_to_target,
        "divergence_always_lower": comp.divergence_always_lower,
    }
    (out / "comparison.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def format_comparison(comp: Comparison) -> str:
    lines = [f"{'baseline':<14}{'final':>10}{'max':>10}  divergence lower every round"]
    for name in comp.final:
        lines.append(
            f"{name:<14}{comp.final[name]:>10.2%}{comp.max_reduction[name]:>10.2%}  {comp.divergence_always_lower[name]}"
        )
    lines.append("rounds to target: " + ", ".join(f"{k}={v}" for k, v in comp.rounds_to_target.items()))
    return "\n".join(lines)
