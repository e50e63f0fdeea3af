"""FedAvg over non-IID client shards.

Each round the server broadcasts a flat parameter vector, selected clients
run local mini-batch SGD from it and upload the parameter delta, and the
server adds the mean delta to the global vector.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, LocalDivergenceError, PartitionError
from .selection import (
    ClusterAssignment,
    ClusterPolicy,
    UserProfile,
    baseline_availability_select,
    mean_pairwise_tv,
    random_select,
    select_clients,
)

STRATEGIES = ("cluster", "availability", "random")

# stream tags for derived generators
_SELECT_STREAM = 2
_CLIENT_STREAM = 3


# -- data -----------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class LocalDataset:
    user_id: int
    indices: np.ndarray  # rows of the global dataset
    X: np.ndarray
    y: np.ndarray
    label_histogram: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class Coupling:
    """Dirichlet concentrations binding traffic archetypes to label mixes."""

    alpha_class: float = 0.3
    alpha_user: float = 20.0


@dataclass(frozen=True)
class LabelMixtures:
    archetype_priors: np.ndarray  # (n_archetypes, n_classes)
    user_dists: dict[int, np.ndarray]


def class_means(n_classes: int, n_features: int, separation: float) -> np.ndarray:
    """Class centers at ``separation`` times the first unit vectors (simplex vertices)."""
    if n_classes > n_features:
        raise DomainError("need n_features >= n_classes for simplex class means")
    return separation * np.eye(n_classes, n_features)


def make_gaussian_mixture(
    labels: np.ndarray, n_features: int, n_classes: int, separation: float, rng: np.random.Generator
) -> Dataset:
    """Unit-variance Gaussian features around per-class centers, for given labels."""
    labels = np.asarray(labels, dtype=int)
    means = class_means(n_classes, n_features, separation)
    X = means[labels] + rng.standard_normal((labels.size, n_features))
    return Dataset(X, labels)


_ALPHA_FLOOR = 1e-3


def draw_label_mixtures(
    user_archetypes: Mapping[int, int],
    n_archetypes: int,
    n_classes: int,
    coupling: Coupling,
    rng: np.random.Generator,
) -> LabelMixtures:
    """Archetype priors ~ Dir(alpha_class), user mixes ~ Dir(alpha_user * prior)."""
    priors = rng.dirichlet(np.full(n_classes, coupling.alpha_class), size=n_archetypes)
    dists = {}
    for uid in sorted(user_archetypes):
        alpha = np.maximum(coupling.alpha_user * priors[user_archetypes[uid]], _ALPHA_FLOOR)
        dists[uid] = rng.dirichlet(alpha)
    return LabelMixtures(priors, dists)


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` in proportion to ``weights``."""
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    if total == 0 or s <= 0:
        out = np.zeros(w.size, dtype=int)
        if total:
            out[0] = total
        return out
    exact = w / s * total
    base = np.floor(exact).astype(int)
    short = total - int(base.sum())
    if short:
        # stable order: largest fractional part first, lowest index on ties
        order = np.lexsort((np.arange(w.size), -(exact - base)))
        base[order[:short]] += 1
    return base


def _fit_margins(D: np.ndarray, rows: np.ndarray, cols: np.ndarray, iters: int = 500) -> np.ndarray:
    """Iterative proportional fitting of a positive matrix to row/column sums."""
    D = D.copy()
    active = cols > 0
    D[:, ~active] = 0.0
    for _ in range(iters):
        D *= (rows / D.sum(axis=1))[:, None]
        colsum = D.sum(axis=0)
        D[:, active] *= cols[active] / colsum[active]
        if np.allclose(D.sum(axis=1), rows, rtol=1e-10, atol=1e-9):
            break
    return D


def partition_dataset(
    data: Dataset,
    user_archetypes: Mapping[int, int],
    coupling: Coupling,
    rng: np.random.Generator,
    *,
    n_archetypes: int | None = None,
    mixtures: LabelMixtures | None = None,
    min_shard_size: int = 1,
) -> dict[int, LocalDataset]:
    """Split ``data`` into disjoint per-user shards that cover it exactly.

    Shard sizes are equal up to one example. Each user's label counts target
    its Dirichlet mix, rescaled so the class totals match what the dataset
    holds, then rounded by largest remainder; rounding leftovers go to the
    users whose mix favors them most.
    """
    uids = sorted(user_archetypes)
    K, N = len(uids), len(data)
    if N == 0 or K == 0:
        raise PartitionError("need a nonempty dataset and at least one user")
    if K * min_shard_size > N:
        raise PartitionError(f"{K} users x {min_shard_size} examples exceed dataset size {N}")
    if mixtures is not None:
        n_classes = mixtures.archetype_priors.shape[1]
    else:
        n_classes = int(data.y.max()) + 1
    if mixtures is None:
        if n_archetypes is None:
            n_archetypes = max(user_archetypes.values()) + 1
        mixtures = draw_label_mixtures(user_archetypes, n_archetypes, n_classes, coupling, rng)

    sizes = np.full(K, N // K)
    sizes[: N % K] += 1
    supply = np.bincount(data.y, minlength=n_classes).astype(float)
    P = np.array([mixtures.user_dists[u][:n_classes] for u in uids]) + 1e-12
    D = _fit_margins(P * sizes[:, None], sizes.astype(float), supply)
    targets = np.array([largest_remainder(D[i], int(sizes[i])) for i in range(K)])

    pools = [list(rng.permutation(np.flatnonzero(data.y == c))) for c in range(n_classes)]
    assigned: list[list[int]] = [[] for _ in range(K)]
    for c in range(n_classes):
        for i in range(K):
            take = min(int(targets[i, c]), len(pools[c]))
            if take:
                assigned[i].extend(pools[c][:take])
                del pools[c][:take]
    for i in range(K):
        while len(assigned[i]) < sizes[i]:
            avail = [c for c in range(n_classes) if pools[c]]
            c = max(avail, key=lambda c: (P[i, c], -c))
            assigned[i].append(pools[c].pop(0))

    shards = {}
    for i, uid in enumerate(uids):
        idx = np.sort(np.array(assigned[i], dtype=int))
        y = data.y[idx]
        shards[uid] = LocalDataset(uid, idx, data.X[idx], y, np.bincount(y, minlength=n_classes))
    return shards


# -- model ----------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    """Dimensions of the classifier: hidden=0 means multinomial regression."""

    n_features: int
    n_classes: int
    hidden: int = 0

    @property
    def size(self) -> int:
        d, c, h = self.n_features, self.n_classes, self.hidden
        if h == 0:
            return c * d + c
        return h * d + h + c * h + c


@dataclass
class FlModel:
    params: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (self.layout.size,):
            raise DomainError(f"params length {self.params.size} != layout size {self.layout.size}")

    def copy(self) -> "FlModel":
        return FlModel(self.params.copy(), self.layout)


def init_model(layout: Layout, rng: np.random.Generator | None = None) -> FlModel:
    """Zero weights for regression; scaled-normal hidden layer for the MLP."""
    if layout.hidden == 0:
        return FlModel(np.zeros(layout.size), layout)
    if rng is None:
        raise DomainError("hidden-layer init needs a random generator")
    d, c, h = layout.n_features, layout.n_classes, layout.hidden
    W1 = rng.standard_normal((h, d)) / math.sqrt(d)
    W2 = rng.standard_normal((c, h)) / math.sqrt(h)
    return FlModel(np.concatenate([W1.ravel(), np.zeros(h), W2.ravel(), np.zeros(c)]), layout)


def _unpack(params, layout):
    d, c, h = layout.n_features, layout.n_classes, layout.hidden
    if h == 0:
        return params[: c * d].reshape(c, d), params[c * d :]
    o = 0
    W1 = params[o : o + h * d].reshape(h, d); o += h * d
    b1 = params[o : o + h]; o += h
    W2 = params[o : o + c * h].reshape(c, h); o += c * h
    return W1, b1, W2, params[o:]


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward_logits(params: np.ndarray, layout: Layout, X: np.ndarray) -> np.ndarray:
    if layout.hidden == 0:
        W, b = _unpack(params, layout)
        return X @ W.T + b
    W1, b1, W2, b2 = _unpack(params, layout)
    return np.tanh(X @ W1.T + b1) @ W2.T + b2


def loss_and_grad(params: np.ndarray, layout: Layout, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over (X, y) and its gradient w.r.t. the flat params."""
    n = len(y)
    rows = np.arange(n)
    if layout.hidden == 0:
        W, b = _unpack(params, layout)
        logp = _log_softmax(X @ W.T + b)
        R = np.exp(logp)
        R[rows, y] -= 1.0
        R /= n
        grad = np.concatenate([(R.T @ X).ravel(), R.sum(axis=0)])
        return -float(logp[rows, y].mean()), grad
    W1, b1, W2, b2 = _unpack(params, layout)
    A = np.tanh(X @ W1.T + b1)
    logp = _log_softmax(A @ W2.T + b2)
    R = np.exp(logp)
    R[rows, y] -= 1.0
    R /= n
    dA = (R @ W2) * (1 - A**2)
    grad = np.concatenate([(dA.T @ X).ravel(), dA.sum(axis=0), (R.T @ A).ravel(), R.sum(axis=0)])
    return -float(logp[rows, y].mean()), grad


def evaluate(model: FlModel, X: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy."""
    y = np.asarray(y, dtype=int)
    if y.size == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    logp = _log_softmax(forward_logits(model.params, model.layout, X))
    loss = -float(logp[np.arange(y.size), y].mean())
    acc = float(np.mean(np.argmax(logp, axis=1) == y))
    return loss, acc


# -- FedAvg ---------------------------------------------------------------------


@dataclass(frozen=True)
class LocalParams:
    epochs: int = 2
    batch_size: int = 32
    lr: float = 0.05


def local_update(
    global_model: FlModel, shard: LocalDataset, hp: LocalParams, rng: np.random.Generator
) -> FlModel:
    """Run local mini-batch SGD from the broadcast params; return the delta."""
    if shard.X.shape[1] != global_model.layout.n_features:
        raise DomainError("shard feature dimension does not match the model")
    params = global_model.params.copy()
    n = len(shard)
    batch = n if hp.batch_size <= 0 else hp.batch_size
    # overflow is reported through LocalDivergenceError, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(hp.epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch):
                idx = order[start : start + batch]
                loss, grad = loss_and_grad(params, global_model.layout, shard.X[idx], shard.y[idx])
                if not math.isfinite(loss):
                    raise LocalDivergenceError(shard.user_id)
                params -= hp.lr * grad
    if not np.all(np.isfinite(params)):
        raise LocalDivergenceError(shard.user_id, "non-finite local parameters")
    return FlModel(params - global_model.params, global_model.layout)


def aggregate(
    global_model: FlModel, updates: Sequence[FlModel], weights: Sequence[float] | None = None
) -> FlModel:
    """q + mean(z_k); with ``weights`` the mean is weighted (normalized)."""
    if not updates:
        raise DomainError("no updates to aggregate")
    for z in updates:
        if z.layout != global_model.layout:
            raise DomainError("update layout does not match the global model")
    Z = np.stack([z.params for z in updates])
    if weights is None:
        step = Z.sum(axis=0) / len(updates)
    else:
        w = np.asarray(weights, dtype=float)
        step = (w[:, None] * Z).sum(axis=0) / w.sum()
    return FlModel(global_model.params + step, global_model.layout)


@dataclass(frozen=True)
class FlParams:
    rounds: int = 100
    k_select: int = 50
    local: LocalParams = LocalParams()
    target_accuracy: float = 0.95
    hidden: int = 0
    cluster_policy: str = "largest"
    weighting: str = "equal"  # or "size"


@dataclass
class RoundMetrics:
    round_index: int
    strategy: str
    selected_ids: tuple[int, ...]
    train_loss: float  # global model on the selected clients' training data
    eval_accuracy: float
    eval_loss: float
    population_loss: float  # global model on all clients' training data
    selection_divergence: float
    shortfall: bool = False
    wall_time: float = field(default=0.0, compare=False)

    def csv_row(self) -> str:
        return (
            f"{self.round_index},{self.strategy},{self.train_loss!r},{self.eval_accuracy!r},"
            f"{self.selection_divergence!r},{len(self.selected_ids)}"
        )


METRICS_HEADER = "round,strategy,train_loss,eval_acc,selection_divergence,n_selected"


def client_rng(seed: int, round_index: int, user_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, _CLIENT_STREAM, round_index, user_id])


def _select(strategy, round_index, users, assignments, hp, rng):
    if strategy == "cluster":
        return select_clients(assignments, ClusterPolicy.parse(hp.cluster_policy), hp.k_select, rng, round_index)
    if strategy == "availability":
        return baseline_availability_select(users, hp.k_select, rng)
    if strategy == "random":
        return random_select(users, hp.k_select, rng)
    raise DomainError(f"unknown strategy {strategy!r}")


def run_training(
    strategy: str,
    shards: Mapping[int, LocalDataset],
    users: Sequence[UserProfile],
    assignments: Sequence[ClusterAssignment],
    eval_data: Dataset,
    initial: FlModel,
    hp: FlParams,
    seed: int,
    workers: int = 1,
) -> list[RoundMetrics]:
    """FedAvg rounds 1..hp.rounds, stopping early at the target eval accuracy.

    Local updates may run on ``workers`` threads; each client owns a stream
    keyed by (seed, round, user_id) and deltas are summed in ascending
    user-id order, so results do not depend on the thread count.
    """
    if strategy not in STRATEGIES:
        raise DomainError(f"unknown strategy {strategy!r}")
    uids = sorted(shards)
    all_X = np.concatenate([shards[u].X for u in uids])
    all_y = np.concatenate([shards[u].y for u in uids])
    model = initial.copy()
    history: list[RoundMetrics] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for n in range(1, hp.rounds + 1):
            t0 = time.perf_counter()
            sel_rng = np.random.default_rng([seed, _SELECT_STREAM, n])
            try:
                selection = _select(strategy, n, users, assignments, hp, sel_rng)
            except DomainError as exc:
                raise DomainError(f"round {n}: selection failed: {exc}") from exc
            ids = sorted(selection.user_ids)
            if ids:
                def work(uid, _n=n, _model=model):
                    return local_update(_model, shards[uid], hp.local, client_rng(seed, _n, uid))

                try:
                    updates = list(pool.map(work, ids)) if pool else [work(u) for u in ids]
                except LocalDivergenceError as exc:
                    raise LocalDivergenceError(exc.user_id, f"round {n}: {exc}") from exc
                weights = [len(shards[u]) for u in ids] if hp.weighting == "size" else None
                model = aggregate(model, updates, weights)
                cohort_X = np.concatenate([shards[u].X for u in ids])
                cohort_y = np.concatenate([shards[u].y for u in ids])
                train_loss, _ = evaluate(model, cohort_X, cohort_y)
            else:
                train_loss = float("nan")
            eval_loss, eval_acc = evaluate(model, eval_data.X, eval_data.y)
            pop_loss, _ = evaluate(model, all_X, all_y)
            history.append(
                RoundMetrics(
                    round_index=n,
                    strategy=strategy,
                    selected_ids=tuple(ids),
                    train_loss=train_loss,
                    eval_accuracy=eval_acc,
                    eval_loss=eval_loss,
                    population_loss=pop_loss,
                    selection_divergence=mean_pairwise_tv([shards[u].label_histogram for u in ids]),
                    shortfall=selection.shortfall,
                    wall_time=time.perf_counter() - t0,
                )
            )
            if eval_acc >= hp.target_accuracy:
                break
    finally:
        if pool:
            pool.shutdown()
    return history
