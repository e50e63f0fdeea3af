"""Multinomial logistic regression over the (burstiness, expected count) plane."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from .errors import DomainError, TrainingDivergedError

N_FEATURES = 2


@dataclass(frozen=True)
class FeatureVector:
    burstiness: float
    exp_count: float

    def as_array(self) -> np.ndarray:
        return np.array([self.burstiness, self.exp_count], dtype=float)


def as_matrix(features) -> np.ndarray:
    """Stack FeatureVectors (or pass through an (N, 2) array) as a float matrix."""
    if isinstance(features, np.ndarray):
        X = np.asarray(features, dtype=float)
    else:
        features = list(features)
        if not features:
            return np.empty((0, N_FEATURES))
        X = np.array([[f.burstiness, f.exp_count] for f in features], dtype=float)
    return np.atleast_2d(X)


@dataclass
class MlrModel:
    weights: np.ndarray  # (J, 2), acts on standardized features
    biases: np.ndarray  # (J,)
    class_names: list[str]
    scaler_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    scaler_std: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))
    final_loss: float = float("nan")
    epochs: int = 0
    loss_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.biases = np.asarray(self.biases, dtype=float)
        self.scaler_mean = np.asarray(self.scaler_mean, dtype=float)
        self.scaler_std = np.asarray(self.scaler_std, dtype=float)
        J = len(self.class_names)
        if J < 2:
            raise DomainError("need at least two classes")
        if self.weights.shape != (J, N_FEATURES) or self.biases.shape != (J,):
            raise DomainError("weight/bias shapes do not match class count")
        if np.any(self.scaler_std <= 0):
            raise DomainError("scaler standard deviations must be positive")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @classmethod
    def zeros(cls, class_names: Sequence[str], scaler_mean=None, scaler_std=None) -> "MlrModel":
        J = len(class_names)
        return cls(
            weights=np.zeros((J, N_FEATURES)),
            biases=np.zeros(J),
            class_names=list(class_names),
            scaler_mean=np.zeros(N_FEATURES) if scaler_mean is None else scaler_mean,
            scaler_std=np.ones(N_FEATURES) if scaler_std is None else scaler_std,
        )

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.scaler_mean) / self.scaler_std


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logits(model: MlrModel, X: np.ndarray) -> np.ndarray:
    logits = model.standardize(X) @ model.weights.T + model.biases
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    return logits


def softmax_probs(model: MlrModel, x) -> np.ndarray:
    """Class posteriors; a single feature vector gives a (J,) vector, a batch (N, J)."""
    if isinstance(x, FeatureVector):
        x = x.as_array()
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    P = softmax(_logits(model, np.atleast_2d(X)))
    return P[0] if single else P


def _check_data(X, y, n_classes):
    X = as_matrix(X)
    y = np.asarray(y, dtype=int)
    if X.shape[0] == 0:
        raise DomainError("empty dataset")
    if y.shape != (X.shape[0],):
        raise DomainError("labels do not match features")
    if y.min() < 0 or y.max() >= n_classes:
        raise DomainError("label out of range")
    return X, y


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_loss(model: MlrModel, X, y, *, mean: bool = False) -> float:
    """Summed negative log-likelihood of the labels; ``mean=True`` divides by N."""
    X, y = _check_data(X, y, model.n_classes)
    logp = _log_softmax(_logits(model, X))
    # exactly rounded sum, so equal per-sample losses total to N times one loss
    total = -math.fsum(logp[np.arange(len(y)), y])
    return total / len(y) if mean else total


def loss_gradient(model: MlrModel, X, y) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the summed loss w.r.t. (weights, biases)."""
    X, y = _check_data(X, y, model.n_classes)
    Xs = model.standardize(X)
    R = softmax(_logits(model, X))
    R[np.arange(len(y)), y] -= 1.0
    return R.T @ Xs, R.sum(axis=0)


@dataclass(frozen=True)
class TrainingParams:
    learning_rate: float = 0.1
    tolerance: float = 1e-6
    max_epochs: int = 5000
    weight_decay: float = 0.0
    seed: int = 0
    patience: int = 10


def train(X, y, class_names: Sequence[str], hp: TrainingParams = TrainingParams()) -> MlrModel:
    """Fit by full-batch gradient descent from zero weights.

    Steps use the per-sample mean gradient so the learning rate does not
    depend on the dataset size. Stops when the relative loss change falls
    under ``hp.tolerance`` or after ``hp.max_epochs`` epochs. Raises
    TrainingDivergedError if the loss rises ``hp.patience`` epochs in a row.
    """
    J = len(class_names)
    X, y = _check_data(X, y, J)
    if not hp.learning_rate > 0:
        raise DomainError("learning rate must be positive")
    if np.unique(y).size < 2:
        raise DomainError("training data must contain at least two distinct labels")
    std = X.std(axis=0)
    std[std == 0] = 1.0
    model = MlrModel.zeros(class_names, X.mean(axis=0), std)
    n = len(y)

    def objective(m):
        loss = cross_entropy_loss(m, X, y, mean=True)
        if hp.weight_decay:
            loss += 0.5 * hp.weight_decay * float(np.sum(m.weights**2))
        return loss

    loss = objective(model)
    history = [loss]
    rises = 0
    epoch = 0
    for epoch in range(1, hp.max_epochs + 1):
        gW, gb = loss_gradient(model, X, y)
        gW = gW / n + hp.weight_decay * model.weights
        model.weights = model.weights - hp.learning_rate * gW
        model.biases = model.biases - hp.learning_rate * (gb / n)
        new_loss = objective(model)
        history.append(new_loss)
        if not np.isfinite(new_loss):
            raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}")
        rises = rises + 1 if new_loss > loss else 0
        if rises >= hp.patience:
            raise TrainingDivergedError(f"loss increased for {rises} consecutive epochs")
        converged = abs(loss - new_loss) / max(loss, 1e-300) < hp.tolerance
        loss = new_loss
        if converged:
            break
    model.final_loss = loss
    model.epochs = epoch
    model.loss_history = history
    return model


def predict(model: MlrModel, x) -> np.ndarray | int:
    """Most probable class; ties go to the lowest index (np.argmax semantics)."""
    P = softmax_probs(model, x)
    if P.ndim == 1:
        return int(np.argmax(P))
    return np.argmax(P, axis=1)


def accuracy(model: MlrModel, X, y) -> float:
    return float(np.mean(predict(model, as_matrix(X)) == np.asarray(y)))


def decision_boundary_grid(
    model: MlrModel,
    bounds: tuple[tuple[float, float], tuple[float, float]],
    resolution: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predicted class over a regular grid in raw feature space.

    ``bounds`` is ((b_min, b_max), (count_min, count_max)); ``resolution`` is
    (n_b, n_count). Returns the burstiness axis, the count axis and an
    (n_count, n_b) label matrix.
    """
    nb, nc = resolution
    if nb < 2 or nc < 2:
        raise DomainError("grid resolution must be at least 2x2")
    b_axis = np.linspace(*bounds[0], nb)
    c_axis = np.linspace(*bounds[1], nc)
    B, C = np.meshgrid(b_axis, c_axis)
    labels = predict(model, np.column_stack([B.ravel(), C.ravel()]))
    return b_axis, c_axis, labels.reshape(nc, nb)


def write_grid(out: TextIO, b_axis, c_axis, labels) -> None:
    out.write("b_value,count_value,class_index\n")
    for i, c in enumerate(c_axis):
        for j, b in enumerate(b_axis):
            out.write(f"{float(b)!r},{float(c)!r},{int(labels[i, j])}\n")


# -- serialization --------------------------------------------------------------


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in np.ravel(values))


def dumps(model: MlrModel) -> str:
    lines = [
        f"J = {model.n_classes}",
        f"class_names = {','.join(model.class_names)}",
        f"scaler_mean = {_floats(model.scaler_mean)}",
        f"scaler_std = {_floats(model.scaler_std)}",
        f"W = {_floats(model.weights)}",
        f"b = {_floats(model.biases)}",
        f"final_loss = {model.final_loss!r}",
        f"epochs = {model.epochs}",
    ]
    return "\n".join(lines) + "\n"


def loads(text: str) -> MlrModel:
    kv = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DomainError(f"malformed model line: {line!r}")
        kv[key.strip()] = value.strip()

    def floats(key):
        return np.array([float(v) for v in kv[key].split(",")])

    try:
        J = int(kv["J"])
        names = kv["class_names"].split(",")
        if len(names) != J:
            raise DomainError("class_names length does not match J")
        return MlrModel(
            weights=floats("W").reshape(J, N_FEATURES),
            biases=floats("b"),
            class_names=names,
            scaler_mean=floats("scaler_mean"),
            scaler_std=floats("scaler_std"),
            final_loss=float(kv.get("final_loss", "nan")),
            epochs=int(kv.get("epochs", 0)),
        )
    except KeyError as exc:
        raise DomainError(f"model text lacks key {exc}") from None
