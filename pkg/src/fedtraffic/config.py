"""Scenario configuration: INI-style ``key = value`` sections.

Sections: [scenario], [link], [mlr], [fl], [task], [coupling], [report] and
zero or more [archetype:NAME] sections. When any archetype section is
present it replaces the built-in six-archetype table. Unknown sections and
keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

from .classifier import TrainingParams
from .errors import ConfigError, DomainError
from .fl_engine import STRATEGIES, Coupling, FlParams
from .selection import DEFAULT_ARCHETYPES, ArchetypeSpec, ClusterPolicy, LinkDefaults
from .traffic_model import BER_MODES, NOISE_MODES, VALID_QAM

LABEL_SOURCES = ("archetype", "threshold")


@dataclass(frozen=True)
class TaskParams:
    """Synthetic Gaussian-mixture classification task for the FL loop."""

    n_examples: int = 20000
    n_eval: int = 2000
    n_features: int = 32
    n_classes: int = 10
    separation: float = 2.5
    min_shard_size: int = 1


@dataclass(frozen=True)
class ReportParams:
    grid_resolution: tuple[int, int] = (100, 100)
    mc_draws: int = 1_000_000
    trace_windows: int = 10
    mlr_holdout: float = 0.2  # fraction held out to score the classifier; 0 disables


@dataclass(frozen=True)
class ScenarioConfig:
    master_seed: int = 1
    k_users: int = 1000
    window_s: float = 1.0
    strategies: tuple[str, ...] = STRATEGIES
    output_dir: str = "out"
    workers: int = 1
    label_source: str = "archetype"
    volume_cuts: tuple[float, float] = (1 / 3, 2 / 3)
    bursty_cut: float = 0.5
    link: LinkDefaults = LinkDefaults()
    mlr: TrainingParams = TrainingParams()
    fl: FlParams = FlParams(rounds=50)
    task: TaskParams = TaskParams()
    coupling: Coupling = Coupling()
    report: ReportParams = ReportParams()
    archetypes: tuple[ArchetypeSpec, ...] = DEFAULT_ARCHETYPES

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, *, seed=None, rounds=None, out=None, workers=None) -> "ScenarioConfig":
        cfg = self
        if seed is not None:
            cfg = cfg.replace(master_seed=seed)
        if rounds is not None:
            cfg = cfg.replace(fl=dataclasses.replace(cfg.fl, rounds=rounds))
        if out is not None:
            cfg = cfg.replace(output_dir=str(out))
        if workers is not None:
            cfg = cfg.replace(workers=workers)
        validate(cfg)
        return cfg


# -- value parsing ----------------------------------------------------------------


def _int(key, text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {text!r}") from None


def _float(key, text):
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(key, f"expected a number, got {text!r}") from None
    if not math.isfinite(value):
        raise ConfigError(key, "must be finite")
    return value


def _str(key, text):
    return text.strip()


def _floats(key, text):
    return tuple(_float(key, part) for part in text.split(","))


def _pair(key, text):
    values = _floats(key, text)
    if len(values) == 1:
        return (values[0], values[0])
    if len(values) != 2:
        raise ConfigError(key, "expected 'low, high'")
    return values


def _int_pair(key, text):
    parts = [p for p in text.replace("x", ",").split(",")]
    if len(parts) != 2:
        raise ConfigError(key, "expected two integers")
    return tuple(_int(key, p) for p in parts)


def _names(key, text):
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (attribute path, parser)
_SCHEMA = {
    "scenario": {
        "master_seed": ("master_seed", _int),
        "k_users": ("k_users", _int),
        "window_s": ("window_s", _float),
        "strategies": ("strategies", _names),
        "output_dir": ("output_dir", _str),
        "workers": ("workers", _int),
        "label_source": ("label_source", _str),
        "volume_cuts": ("volume_cuts", _pair),
        "bursty_cut": ("bursty_cut", _float),
    },
    "link": {
        "bandwidth_hz": ("link.bandwidth_hz", _float),
        "tx_power_w": ("link.tx_power_w", _float),
        "noise_psd": ("link.noise_psd", _float),
        "constellation_size": ("link.constellation_size", _int),
        "ber_mode": ("link.ber_mode", _str),
        "noise_mode": ("link.noise_mode", _str),
        "availability_range": ("link.availability_range", _pair),
    },
    "mlr": {
        "learning_rate": ("mlr.learning_rate", _float),
        "tolerance": ("mlr.tolerance", _float),
        "max_epochs": ("mlr.max_epochs", _int),
        "weight_decay": ("mlr.weight_decay", _float),
        "seed": ("mlr.seed", _int),
    },
    "fl": {
        "rounds": ("fl.rounds", _int),
        "k_select": ("fl.k_select", _int),
        "local_epochs": ("fl.local.epochs", _int),
        "batch_size": ("fl.local.batch_size", _int),
        "local_lr": ("fl.local.lr", _float),
        "target_accuracy": ("fl.target_accuracy", _float),
        "hidden": ("fl.hidden", _int),
        "cluster_policy": ("fl.cluster_policy", _str),
        "weighting": ("fl.weighting", _str),
    },
    "task": {
        "n_examples": ("task.n_examples", _int),
        "n_eval": ("task.n_eval", _int),
        "n_features": ("task.n_features", _int),
        "n_classes": ("task.n_classes", _int),
        "separation": ("task.separation", _float),
        "min_shard_size": ("task.min_shard_size", _int),
    },
    "coupling": {
        "alpha_class": ("coupling.alpha_class", _float),
        "alpha_user": ("coupling.alpha_user", _float),
    },
    "report": {
        "grid_resolution": ("report.grid_resolution", _int_pair),
        "mc_draws": ("report.mc_draws", _int),
        "trace_windows": ("report.trace_windows", _int),
        "mlr_holdout": ("report.mlr_holdout", _float),
    },
}

_ARCHETYPE_KEYS = {
    "mu": "mu_range",
    "sigma_sq": "sigma_sq_range",
    "eb_n0": "eb_n0_range",
    "los_power": "los_power_range",
    "nlos_scale_sq": "nlos_scale_range",
    "weight": "population_weight",
}


def _get(obj, path):
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def _set(obj, path, value):
    head, _, rest = path.partition(".")
    if not rest:
        return dataclasses.replace(obj, **{head: value})
    return dataclasses.replace(obj, **{head: _set(getattr(obj, head), rest, value)})


def loads(text: str) -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", f"parse error: {exc}") from None

    cfg = ScenarioConfig()
    archetypes = []
    for section in parser.sections():
        items = dict(parser.items(section))
        if section.startswith("archetype:"):
            archetypes.append(_parse_archetype(section, items))
            continue
        schema = _SCHEMA.get(section)
        if schema is None:
            raise ConfigError(f"[{section}]", "unknown section")
        for key, raw in items.items():
            if key not in schema:
                raise ConfigError(f"{section}.{key}", "unknown key")
            path, parse = schema[key]
            cfg = _set(cfg, path, parse(f"{section}.{key}", raw))
    if archetypes:
        total = sum(a.population_weight for a in archetypes)
        if not total > 0:
            raise ConfigError("archetype.weight", "weights must have a positive sum")
        if not math.isclose(total, 1.0, rel_tol=1e-12):
            archetypes = [dataclasses.replace(a, population_weight=a.population_weight / total) for a in archetypes]
        cfg = cfg.replace(archetypes=tuple(archetypes))
    validate(cfg)
    return cfg


def _parse_archetype(section, items) -> ArchetypeSpec:
    name = section.split(":", 1)[1].strip()
    if not name:
        raise ConfigError(section, "archetype needs a name")
    kwargs = {"name": name}
    for key, raw in items.items():
        if key not in _ARCHETYPE_KEYS:
            raise ConfigError(f"{section}.{key}", "unknown key")
        full = f"{section}.{key}"
        kwargs[_ARCHETYPE_KEYS[key]] = _float(full, raw) if key == "weight" else _pair(full, raw)
    missing = set(_ARCHETYPE_KEYS.values()) - set(kwargs)
    if missing:
        raise ConfigError(section, f"missing keys {sorted(missing)}")
    try:
        return ArchetypeSpec(**kwargs)
    except DomainError as exc:
        raise ConfigError(section, str(exc)) from None


def load_config(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from None
    return loads(text)


def dumps(cfg: ScenarioConfig, *, include_runtime: bool = True) -> str:
    """Serialize to the INI format; ``include_runtime=False`` drops output_dir and workers."""
    lines = []
    for section, schema in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (path, _) in schema.items():
            if not include_runtime and path in ("output_dir", "workers"):
                continue
            lines.append(f"{key} = {_fmt(_get(cfg, path))}")
        lines.append("")
    inverse = {v: k for k, v in _ARCHETYPE_KEYS.items()}
    for a in cfg.archetypes:
        lines.append(f"[archetype:{a.name}]")
        for attr, key in inverse.items():
            lines.append(f"{key} = {_fmt(getattr(a, attr))}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(dumps(cfg, include_runtime=False).encode()).hexdigest()[:16]


def _require(ok, key, constraint):
    if not ok:
        raise ConfigError(key, constraint)


def validate(cfg: ScenarioConfig) -> None:
    _require(cfg.k_users >= 1, "scenario.k_users", "must be >= 1")
    _require(cfg.window_s > 0, "scenario.window_s", "must be > 0")
    _require(cfg.workers >= 1, "scenario.workers", "must be >= 1")
    _require(len(cfg.strategies) >= 1, "scenario.strategies", "need at least one strategy")
    _require(len(set(cfg.strategies)) == len(cfg.strategies), "scenario.strategies", "duplicate strategy")
    for s in cfg.strategies:
        _require(s in STRATEGIES, "scenario.strategies", f"unknown strategy {s!r}; choose from {STRATEGIES}")
    _require(cfg.label_source in LABEL_SOURCES, "scenario.label_source", f"one of {LABEL_SOURCES}")
    lo, hi = cfg.volume_cuts
    _require(0 < lo < hi < 1, "scenario.volume_cuts", "need 0 < low < high < 1")
    _require(0 < cfg.bursty_cut < 1, "scenario.bursty_cut", "must lie in (0, 1)")

    link = cfg.link
    for key in ("bandwidth_hz", "tx_power_w", "noise_psd"):
        _require(getattr(link, key) > 0, f"link.{key}", "must be > 0")
    _require(link.constellation_size in VALID_QAM, "link.constellation_size", f"one of {VALID_QAM}")
    _require(link.ber_mode in BER_MODES, "link.ber_mode", f"one of {BER_MODES}")
    _require(link.noise_mode in NOISE_MODES, "link.noise_mode", f"one of {NOISE_MODES}")
    a_lo, a_hi = link.availability_range
    _require(0 <= a_lo <= a_hi <= 1, "link.availability_range", "need 0 <= low <= high <= 1")

    m = cfg.mlr
    _require(m.learning_rate > 0, "mlr.learning_rate", "must be > 0")
    _require(m.tolerance > 0, "mlr.tolerance", "must be > 0")
    _require(m.max_epochs >= 1, "mlr.max_epochs", "must be >= 1")
    _require(m.weight_decay >= 0, "mlr.weight_decay", "must be >= 0")

    f = cfg.fl
    _require(f.rounds >= 1, "fl.rounds", "must be >= 1")
    _require(f.k_select >= 1, "fl.k_select", "must be >= 1")
    _require(f.local.epochs >= 0, "fl.local_epochs", "must be >= 0")
    _require(f.local.batch_size >= 0, "fl.batch_size", "must be >= 0 (0 = full batch)")
    _require(f.local.lr > 0, "fl.local_lr", "must be > 0")
    _require(0 < f.target_accuracy <= 1, "fl.target_accuracy", "must lie in (0, 1]")
    _require(f.hidden >= 0, "fl.hidden", "must be >= 0")
    _require(f.weighting in ("equal", "size"), "fl.weighting", "one of ('equal', 'size')")
    try:
        ClusterPolicy.parse(f.cluster_policy)
    except (DomainError, ValueError):
        raise ConfigError("fl.cluster_policy", "largest, round_robin or fixed(j)") from None

    t = cfg.task
    _require(t.n_classes >= 2, "task.n_classes", "must be >= 2")
    _require(t.n_features >= t.n_classes, "task.n_features", "must be >= n_classes")
    _require(t.separation > 0, "task.separation", "must be > 0")
    _require(t.min_shard_size >= 1, "task.min_shard_size", "must be >= 1")
    _require(
        t.n_examples >= cfg.k_users * t.min_shard_size,
        "task.n_examples",
        "must be >= k_users * min_shard_size",
    )
    _require(t.n_eval >= 1, "task.n_eval", "must be >= 1")

    _require(cfg.coupling.alpha_class > 0, "coupling.alpha_class", "must be > 0")
    _require(cfg.coupling.alpha_user > 0, "coupling.alpha_user", "must be > 0")

    r = cfg.report
    _require(min(r.grid_resolution) >= 2, "report.grid_resolution", "must be at least 2x2")
    _require(r.mc_draws >= 2, "report.mc_draws", "must be >= 2")
    _require(r.trace_windows >= 1, "report.trace_windows", "must be >= 1")
    _require(0 <= r.mlr_holdout < 1, "report.mlr_holdout", "must lie in [0, 1)")

    _require(len(cfg.archetypes) >= 1, "archetype", "need at least one archetype")
    names = [a.name for a in cfg.archetypes]
    _require(len(set(names)) == len(names), "archetype", "duplicate archetype names")
    _require(
        math.isclose(sum(a.population_weight for a in cfg.archetypes), 1.0, rel_tol=1e-9),
        "archetype.weight",
        "weights must sum to 1",
    )
    if cfg.label_source == "archetype":
        _require(
            len(cfg.archetypes) >= 2,
            "scenario.label_source",
            "archetype labels need >= 2 archetypes; use label_source = threshold",
        )
