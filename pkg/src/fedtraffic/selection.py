"""Traffic-class client selection.

Builds a synthetic user population from six traffic archetypes, computes
each user's (burstiness, expected count) features, clusters users with a
trained MLR model and nominates same-cluster cohorts for FL rounds. Also
hosts the availability-aware baseline selector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import classifier
from .classifier import FeatureVector, MlrModel
from .errors import DomainError, ThresholdError, UndefinedBurstinessError
from .traffic_model import (
    ChannelState,
    LinkBudget,
    PacketSizeDist,
    TrafficStats,
    compute_traffic_stats,
)

# Class index order used throughout: volume level x burstiness.
CLASS_NAMES = (
    "high_steady",
    "high_bursty",
    "low_bursty",
    "low_steady",
    "moderate_steady",
    "moderate_bursty",
)
CLASS_DESCRIPTIONS = {
    "high_steady": "High Traffic Volume, non-Bursty",
    "high_bursty": "High Traffic Volume, Bursty",
    "low_bursty": "Low Traffic Volume, Bursty",
    "low_steady": "Low Traffic Volume, non-Bursty",
    "moderate_steady": "Moderate Traffic Volume, non-Bursty",
    "moderate_bursty": "Moderate Traffic Volume, Bursty",
}
_VOLUME_LEVELS = ("low", "moderate", "high")


def class_index(volume_level: int, bursty: bool) -> int:
    """Map (0=low, 1=moderate, 2=high volume; bursty flag) to a class index."""
    name = f"{_VOLUME_LEVELS[volume_level]}_{'bursty' if bursty else 'steady'}"
    return CLASS_NAMES.index(name)


@dataclass(frozen=True)
class ArchetypeSpec:
    name: str
    mu_range: tuple[float, float]
    sigma_sq_range: tuple[float, float]
    eb_n0_range: tuple[float, float]
    los_power_range: tuple[float, float]
    nlos_scale_range: tuple[float, float]
    population_weight: float

    def __post_init__(self):
        for attr in ("mu_range", "sigma_sq_range", "eb_n0_range", "los_power_range", "nlos_scale_range"):
            lo, hi = getattr(self, attr)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise DomainError(f"{self.name}.{attr}: need finite lo <= hi, got ({lo}, {hi})")
        if self.sigma_sq_range[0] < 0 or self.eb_n0_range[0] <= 0:
            raise DomainError(f"{self.name}: sigma_sq must be >= 0 and eb_n0 > 0")
        if self.los_power_range[0] < 0 or self.nlos_scale_range[0] < 0:
            raise DomainError(f"{self.name}: channel powers must be >= 0")
        if self.population_weight < 0:
            raise DomainError(f"{self.name}: population_weight must be >= 0")


# Packet-size location sets the volume level (large packets -> fewer arrivals);
# bursty rows shift mu up by about sigma_sq/2 so E[1/S] stays on the volume level.
_STEADY = (0.02, 0.15)
_BURSTY = (0.8, 1.2)
_EB_N0 = (10.0, 30.0)
_LOS = (0.8, 1.0)
_NLOS = (0.02, 0.08)

DEFAULT_ARCHETYPES = (
    ArchetypeSpec("high_steady", (6.06, 6.36), _STEADY, _EB_N0, _LOS, _NLOS, 1 / 6),
    ArchetypeSpec("high_bursty", (6.56, 6.86), _BURSTY, _EB_N0, _LOS, _NLOS, 1 / 6),
    ArchetypeSpec("low_bursty", (8.76, 9.06), _BURSTY, _EB_N0, _LOS, _NLOS, 1 / 6),
    ArchetypeSpec("low_steady", (8.26, 8.56), _STEADY, _EB_N0, _LOS, _NLOS, 1 / 6),
    ArchetypeSpec("moderate_steady", (7.16, 7.46), _STEADY, _EB_N0, _LOS, _NLOS, 1 / 6),
    ArchetypeSpec("moderate_bursty", (7.66, 7.96), _BURSTY, _EB_N0, _LOS, _NLOS, 1 / 6),
)


@dataclass(frozen=True)
class LinkDefaults:
    """Allocation shared by every user (equal power and bandwidth)."""

    bandwidth_hz: float = 1e6
    tx_power_w: float = 1.0
    noise_psd: float = 1e-8
    constellation_size: int = 4
    ber_mode: str = "standard"
    noise_mode: str = "band"
    availability_range: tuple[float, float] = (0.5, 1.0)


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    link: LinkBudget
    channel: ChannelState
    packet_dist: PacketSizeDist
    true_archetype: int
    availability_prob: float


@dataclass(frozen=True)
class PopulationMember:
    profile: UserProfile
    stats: TrafficStats
    features: FeatureVector


@dataclass(frozen=True)
class ClusterAssignment:
    user_id: int
    predicted_class: int
    posterior: np.ndarray


@dataclass(frozen=True)
class Selection:
    user_ids: tuple[int, ...]
    cluster: int | None = None
    shortfall: bool = False

    def __len__(self):
        return len(self.user_ids)

    def __iter__(self):
        return iter(self.user_ids)


def user_rng(seed: int, user_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, user_id])


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def generate_population(
    archetypes: Sequence[ArchetypeSpec],
    k_users: int,
    window_s: float,
    seed: int,
    link_defaults: LinkDefaults = LinkDefaults(),
    max_retries: int = 20,
) -> list[PopulationMember]:
    """Draw ``k_users`` users, each from its own stream keyed by (seed, user_id)."""
    if k_users < 1:
        raise DomainError("k_users must be >= 1")
    weights = np.array([a.population_weight for a in archetypes], dtype=float)
    if weights.size == 0 or not math.isclose(weights.sum(), 1.0, rel_tol=1e-9):
        raise DomainError(f"archetype weights must sum to 1, got {weights.sum()}")
    weights = weights / weights.sum()

    members = []
    for uid in range(k_users):
        rng = user_rng(seed, uid)
        arch_idx = int(rng.choice(len(archetypes), p=weights))
        spec = archetypes[arch_idx]
        availability = _uniform(rng, link_defaults.availability_range)
        for _ in range(max_retries):
            link = LinkBudget(
                link_defaults.bandwidth_hz,
                link_defaults.tx_power_w,
                link_defaults.noise_psd,
                _uniform(rng, spec.eb_n0_range),
                link_defaults.constellation_size,
            )
            channel = ChannelState(_uniform(rng, spec.los_power_range), _uniform(rng, spec.nlos_scale_range))
            dist = PacketSizeDist(_uniform(rng, spec.mu_range), _uniform(rng, spec.sigma_sq_range))
            try:
                stats = compute_traffic_stats(
                    link, channel, dist, window_s,
                    ber_mode=link_defaults.ber_mode, noise_mode=link_defaults.noise_mode,
                )
            except UndefinedBurstinessError:
                continue
            break
        else:
            raise UndefinedBurstinessError(
                f"user {uid}: zero expected rate after {max_retries} draws from {spec.name}"
            )
        profile = UserProfile(uid, link, channel, dist, arch_idx, availability)
        members.append(PopulationMember(profile, stats, FeatureVector(stats.burstiness, stats.exp_count)))
    return members


def feature_matrix(members: Sequence[PopulationMember]) -> np.ndarray:
    return classifier.as_matrix([m.features for m in members])


def true_labels(members: Sequence[PopulationMember]) -> np.ndarray:
    return np.array([m.profile.true_archetype for m in members], dtype=int)


def label_by_thresholds(
    stats: Sequence[TrafficStats],
    volume_cuts: tuple[float, float] = (1 / 3, 2 / 3),
    bursty_cut: float = 0.5,
) -> np.ndarray:
    """Quantile-based labels: volume terciles crossed with a burstiness split.

    A user is in the upper volume level when its expected count exceeds the
    cut, and bursty when its burstiness exceeds the burstiness cut.
    """
    if len(stats) == 0:
        raise DomainError("no stats to label")
    volume = np.array([s.exp_count for s in stats])
    burst = np.array([s.burstiness for s in stats])
    if np.ptp(volume) == 0 or np.ptp(burst) == 0:
        raise ThresholdError("degenerate feature distribution; cannot place thresholds")
    q_lo, q_hi = np.quantile(volume, volume_cuts)
    b_cut = np.quantile(burst, bursty_cut)
    if not q_lo < q_hi:
        raise ThresholdError("volume quantile cuts coincide")
    level = (volume > q_lo).astype(int) + (volume > q_hi).astype(int)
    bursty = burst > b_cut
    return np.array([class_index(lv, bool(bu)) for lv, bu in zip(level, bursty)], dtype=int)


def cluster_users(model: MlrModel, features, user_ids: Sequence[int] | None = None) -> list[ClusterAssignment]:
    X = classifier.as_matrix(features)
    if X.shape[0] == 0:
        return []
    ids = range(X.shape[0]) if user_ids is None else user_ids
    P = classifier.softmax_probs(model, X)
    classes = np.argmax(P, axis=1)
    return [ClusterAssignment(int(u), int(c), p) for u, c, p in zip(ids, classes, P)]


def cluster_members(assignments: Sequence[ClusterAssignment]) -> dict[int, list[int]]:
    clusters: dict[int, list[int]] = {}
    for a in assignments:
        clusters.setdefault(a.predicted_class, []).append(a.user_id)
    return dict(sorted(clusters.items()))


@dataclass(frozen=True)
class ClusterPolicy:
    """How a cluster is chosen each round: 'largest', 'fixed' or 'round_robin'."""

    kind: str = "largest"
    fixed_class: int | None = None

    def __post_init__(self):
        if self.kind not in ("largest", "fixed", "round_robin"):
            raise DomainError(f"unknown cluster policy {self.kind!r}")
        if self.kind == "fixed" and self.fixed_class is None:
            raise DomainError("fixed policy needs a class index")

    @classmethod
    def parse(cls, text: str) -> "ClusterPolicy":
        text = text.strip()
        if text.startswith("fixed(") and text.endswith(")"):
            return cls("fixed", int(text[6:-1]))
        return cls(text)

    def __str__(self):
        return f"fixed({self.fixed_class})" if self.kind == "fixed" else self.kind


def choose_cluster(clusters: dict[int, list[int]], policy: ClusterPolicy, round_index: int = 0) -> int:
    if policy.kind == "largest":
        # ties -> lowest class index
        return max(clusters, key=lambda c: (len(clusters[c]), -c))
    if policy.kind == "fixed":
        if policy.fixed_class not in clusters:
            raise DomainError(f"cluster {policy.fixed_class} is empty")
        return policy.fixed_class
    nonempty = sorted(clusters)
    return nonempty[round_index % len(nonempty)]


def select_clients(
    assignments: Sequence[ClusterAssignment],
    policy: ClusterPolicy,
    k_select: int,
    rng: np.random.Generator,
    round_index: int = 0,
) -> Selection:
    """Sample up to ``k_select`` users uniformly from one cluster chosen by ``policy``."""
    if not assignments:
        raise DomainError("no cluster assignments to select from")
    if k_select < 1:
        raise DomainError("k_select must be >= 1")
    clusters = cluster_members(assignments)
    chosen = choose_cluster(clusters, policy, round_index)
    pool = np.array(clusters[chosen])
    take = min(k_select, pool.size)
    picked = rng.choice(pool, size=take, replace=False)
    return Selection(tuple(sorted(int(u) for u in picked)), chosen, shortfall=take < k_select)


def baseline_availability_select(
    users: Sequence[UserProfile], k_select: int, rng: np.random.Generator
) -> Selection:
    """Uniform pick among users that pass an independent availability draw."""
    if k_select < 1:
        raise DomainError("k_select must be >= 1")
    probs = np.array([u.availability_prob for u in users], dtype=float)
    available = np.array([u.user_id for u in users])[rng.random(len(users)) < probs]
    take = min(k_select, available.size)
    picked = rng.choice(available, size=take, replace=False) if take else []
    return Selection(tuple(sorted(int(u) for u in picked)), None, shortfall=take < k_select)


def random_select(users: Sequence[UserProfile], k_select: int, rng: np.random.Generator) -> Selection:
    if k_select < 1:
        raise DomainError("k_select must be >= 1")
    ids = np.array([u.user_id for u in users])
    take = min(k_select, ids.size)
    picked = rng.choice(ids, size=take, replace=False)
    return Selection(tuple(sorted(int(u) for u in picked)), None, shortfall=take < k_select)


def mean_pairwise_tv(histograms) -> float:
    """Mean total-variation distance over all pairs of normalized histograms."""
    H = np.asarray(histograms, dtype=float)
    if H.shape[0] < 2:
        return 0.0
    H = H / H.sum(axis=1, keepdims=True)
    i, j = np.triu_indices(H.shape[0], k=1)
    return float(0.5 * np.abs(H[i] - H[j]).sum(axis=1).mean())


def write_population(out, members: Sequence[PopulationMember], predicted: Sequence[int], archetype_names=CLASS_NAMES) -> None:
    out.write("user_id,archetype,E_N,B,predicted_class\n")
    for m, c in zip(members, predicted):
        name = archetype_names[m.profile.true_archetype]
        out.write(f"{m.profile.user_id},{name},{m.stats.exp_count!r},{m.stats.burstiness!r},{int(c)}\n")
