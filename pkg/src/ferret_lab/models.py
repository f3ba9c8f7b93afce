"""Small differentiable tasks with exact per-example gradients.

Three kinds share one interface: linear regression under the half-MSE
loss, binary logistic regression, and a one-hidden-layer tanh MLP
classifier. Parameters are an ordered tuple of flat float64 tensors, which
is what the grouping schemes partition.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import math
from pathlib import Path

import numpy as np

from .errors import DomainError
from .rng import Domain, RngStream

# slots of the Init domain; model initialization uses step 0
_INIT_MODEL = 0
_DATA_TEACHER = 1
_DATA_FEATURES = 2
_DATA_NOISE = 3


class ModelKind(str, enum.Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"
    MLP = "mlp"


class Split(str, enum.Enum):
    MEMBER = "member"
    NONMEMBER = "nonmember"


@dataclasses.dataclass(frozen=True, eq=False)
class ToyModel:
    kind: ModelKind
    d: int
    tensors: tuple[np.ndarray, ...]
    names: tuple[str, ...]
    hidden: int = 0

    def __post_init__(self):
        if len(self.tensors) < 1 or any(t.size < 1 for t in self.tensors):
            raise DomainError("a model needs at least one non-empty tensor")
        if len(self.names) != len(self.tensors):
            raise DomainError("one name per tensor")

    @property
    def shapes(self) -> list[tuple[str, int]]:
        return [(n, t.size) for n, t in zip(self.names, self.tensors)]

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.tensors)

    def with_flat(self, flat) -> ToyModel:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise DomainError(f"expected {self.n_params} parameters, got {flat.shape}")
        parts = np.split(flat.copy(), np.cumsum([t.size for t in self.tensors])[:-1])
        return dataclasses.replace(self, tensors=tuple(parts))


def _tensor_layout(kind: ModelKind, d: int, hidden: int, bias: bool):
    if kind is ModelKind.MLP:
        return [("W1", hidden * d), ("b1", hidden), ("w2", hidden), ("b2", 1)]
    return [("w", d), ("b", 1)] if bias else [("w", d)]


def make_model(kind, d: int, params=None, *, hidden: int = 16, bias: bool = True) -> ToyModel:
    """Model with explicit flat ``params`` (zeros if omitted)."""
    kind = ModelKind(kind)
    if d < 1:
        raise DomainError(f"feature dimension must be >= 1, got {d}")
    if kind is ModelKind.MLP and hidden < 1:
        raise DomainError(f"hidden width must be >= 1, got {hidden}")
    if kind is ModelKind.MLP and not bias:
        raise DomainError("the MLP always carries biases")
    layout = _tensor_layout(kind, d, hidden, bias)
    total = sum(n for _, n in layout)
    flat = np.zeros(total) if params is None else np.asarray(params, dtype=np.float64).ravel()
    if flat.shape != (total,):
        raise DomainError(f"expected {total} parameters, got {flat.shape}")
    parts = np.split(flat.copy(), np.cumsum([n for _, n in layout])[:-1])
    return ToyModel(kind, d, tuple(parts), tuple(n for n, _ in layout),
                    hidden if kind is ModelKind.MLP else 0)


def init_model(kind, d: int, seed: int, *, hidden: int = 16, bias: bool = True) -> ToyModel:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    model = make_model(kind, d, hidden=hidden, bias=bias)
    z = RngStream(seed, Domain.INIT, _INIT_MODEL).normals(model.n_params)
    parts = np.split(z, np.cumsum([t.size for t in model.tensors])[:-1])
    scaled = []
    for name, part in zip(model.names, parts):
        if name.startswith("b"):
            scaled.append(np.zeros_like(part))
        elif name == "w2":
            scaled.append(part / math.sqrt(model.hidden))
        else:
            scaled.append(part / math.sqrt(d))
    return dataclasses.replace(model, tensors=tuple(scaled))


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    split: Split

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DomainError("features must be an n x d matrix with n >= 1")
        if self.targets.shape != (self.features.shape[0],):
            raise DomainError("one target per feature row")

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, idx) -> Dataset:
        return Dataset(self.features[idx], self.targets[idx], self.split)


def _teacher_outputs(kind: ModelKind, X: np.ndarray, teacher: np.ndarray, hidden: int) -> np.ndarray:
    d = X.shape[1]
    if kind is ModelKind.MLP:
        W1 = teacher[: hidden * d].reshape(hidden, d)
        w2 = teacher[hidden * d: hidden * d + hidden]
        return np.tanh(X @ W1.T) @ w2
    return X @ teacher[:d]


def synth_dataset(kind, n: int, d: int, noise_sigma: float, seed: int, *, hidden: int = 16):
    """Member and non-member splits of ``n`` records each from one synthetic task.

    The teacher is drawn once per seed. Regression targets are teacher output
    plus Gaussian noise; classification labels are ``1[teacher + noise > 0]``.
    """
    kind = ModelKind(kind)
    if n < 1 or d < 1:
        raise DomainError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    if noise_sigma < 0:
        raise DomainError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if kind is ModelKind.MLP and hidden < 1:
        raise DomainError(f"hidden width must be >= 1, got {hidden}")
    n_teacher = hidden * d + hidden if kind is ModelKind.MLP else d
    teacher = RngStream(seed, Domain.INIT, _DATA_TEACHER).normals(n_teacher)
    if kind is ModelKind.MLP:
        teacher[: hidden * d] /= math.sqrt(d)
        teacher[hidden * d:] *= 3.0 / math.sqrt(hidden)
    else:
        teacher /= math.sqrt(d)

    splits = []
    for slot, split in enumerate((Split.MEMBER, Split.NONMEMBER)):
        X = RngStream(seed, Domain.INIT, _DATA_FEATURES, slot).normals(n * d).reshape(n, d)
        noise = noise_sigma * RngStream(seed, Domain.INIT, _DATA_NOISE, slot).normals(n)
        out = _teacher_outputs(kind, X, teacher, hidden) + noise
        y = out if kind is ModelKind.LINEAR else (out > 0).astype(np.float64)
        splits.append(Dataset(X, y, split))
    return splits[0], splits[1]


def true_weights(d: int, seed: int) -> np.ndarray:
    """Teacher weights behind a linear-regression dataset of this seed."""
    return RngStream(seed, Domain.INIT, _DATA_TEACHER).normals(d) / math.sqrt(d)


@dataclasses.dataclass(frozen=True, eq=False)
class GradientBundle:
    grads: tuple[np.ndarray, ...]
    loss: float

    def flat(self) -> np.ndarray:
        return np.concatenate(self.grads)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    # exp only ever sees non-positive arguments
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_batch(model: ToyModel, batch: Dataset) -> None:
    if len(batch) == 0:
        raise DomainError("empty batch")
    if batch.features.shape[1] != model.d:
        raise DomainError(f"model expects {model.d} features, batch has {batch.features.shape[1]}")


def per_example_losses(model: ToyModel, batch: Dataset) -> np.ndarray:
    _check_batch(model, batch)
    return _losses_and_grads(model, batch.features, batch.targets, grads=False)[0]


def per_example_grads(model: ToyModel, X: np.ndarray, y: np.ndarray):
    """(losses, gradient matrix) with one flat gradient row per example."""
    return _losses_and_grads(model, X, y, grads=True)


def _losses_and_grads(model: ToyModel, X, y, grads: bool):
    kind = model.kind
    if kind is ModelKind.MLP:
        d, h = model.d, model.hidden
        W1, b1, w2, b2 = model.tensors
        H = np.tanh(X @ W1.reshape(h, d).T + b1)
        z = H @ w2 + b2[0]
        losses = _softplus(z) - y * z
        if not grads:
            return losses, None
        dz = _sigmoid(z) - y
        dpre = dz[:, None] * w2[None, :] * (1.0 - H * H)
        G = np.concatenate([
            (dpre[:, :, None] * X[:, None, :]).reshape(len(y), h * d),
            dpre,
            dz[:, None] * H,
            dz[:, None],
        ], axis=1)
        return losses, G

    w = model.tensors[0]
    z = X @ w
    if len(model.tensors) > 1:
        z = z + model.tensors[1][0]
    if kind is ModelKind.LINEAR:
        r = z - y
        losses = 0.5 * r * r
        dz = r
    else:
        losses = _softplus(z) - y * z
        dz = _sigmoid(z) - y
    if not grads:
        return losses, None
    parts = [dz[:, None] * X]
    if len(model.tensors) > 1:
        parts.append(dz[:, None])
    return losses, np.concatenate(parts, axis=1)


def _bundle(model: ToyModel, flat_grad: np.ndarray, loss: float) -> GradientBundle:
    parts = np.split(flat_grad, np.cumsum([t.size for t in model.tensors])[:-1])
    return GradientBundle(tuple(parts), float(loss))


def loss_and_grad(model: ToyModel, batch: Dataset, per_example: bool = False):
    """Mean loss and gradient over ``batch``, or one bundle per record.

    The mean gradient is the row mean of the per-example gradient matrix,
    so both modes share one summation order.
    """
    _check_batch(model, batch)
    losses, G = per_example_grads(model, batch.features, batch.targets)
    if per_example:
        return [_bundle(model, G[i], losses[i]) for i in range(len(losses))]
    return _bundle(model, G.mean(axis=0), losses.mean())


def mean_loss(model: ToyModel, batch: Dataset) -> float:
    return float(per_example_losses(model, batch).mean())


def finite_diff_grad(model: ToyModel, batch: Dataset, h: float = 1e-5) -> GradientBundle:
    """Central differences of the mean loss, one parameter at a time."""
    if not h > 0:
        raise DomainError(f"step must be > 0, got {h}")
    theta = model.flat()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        grad[i] = (mean_loss(model.with_flat(up), batch) - mean_loss(model.with_flat(down), batch)) / (2 * h)
    return _bundle(model, grad, mean_loss(model, batch))


def eval_metrics(model: ToyModel, dataset: Dataset) -> dict[str, float]:
    """``mse`` (plain, not halved) for regression; ``nll``, ``perplexity_analog``
    and ``accuracy`` for the classifiers."""
    if len(dataset) == 0:
        raise DomainError("empty dataset")
    losses = per_example_losses(model, dataset)
    if model.kind is ModelKind.LINEAR:
        return {"mse": float(np.mean(2.0 * losses))}
    nll = float(np.mean(losses))
    correct = losses < math.log(2.0)  # logit on the label's side of zero
    return {"nll": nll, "perplexity_analog": math.exp(nll), "accuracy": float(np.mean(correct))}


# ---------------------------------------------------------------- CSV fixtures


def write_dataset_csv(path, *datasets: Dataset) -> None:
    """Rows of ``x0..x{d-1}, target, split_tag``."""
    d = datasets[0].features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(d)] + ["target", "split_tag"])
        for ds in datasets:
            for row, t in zip(ds.features, ds.targets):
                w.writerow([repr(float(v)) for v in row] + [repr(float(t)), ds.split.value])


def read_dataset_csv(path) -> dict[Split, Dataset]:
    rows: dict[Split, list] = {}
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 2
        for rec in reader:
            rows.setdefault(Split(rec[-1]), []).append([float(v) for v in rec[: d + 1]])
    out = {}
    for split, data in rows.items():
        arr = np.array(data, dtype=np.float64)
        out[split] = Dataset(arr[:, :d], arr[:, d], split)
    return out
