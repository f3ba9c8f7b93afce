"""Training loops sharing one harness: masked sign releases, clipped-noise
SGD, and plain SGD.

All three methods draw the same Poisson minibatch at every step (the
Subsample stream depends only on seed and step), start from the same
initialization, and feed their update through the same optimizer, so runs
with equal seeds differ only in how the update is formed.
"""

from __future__ import annotations

import dataclasses
import math
import time
from typing import Union

import numpy as np

from . import accountant, rng
from .errors import DomainError
from .mechanism import (
    FiringStats,
    GroupPartition,
    MechanismConfig,
    Scheme,
    UpdateLog,
    aggregate_delta,
    ferret_step,
    partition_groups,
)
from .models import Dataset, ToyModel, mean_loss, per_example_grads
from .rng import Domain, RngStream


@dataclasses.dataclass(frozen=True)
class Ferret:
    """Masked sign releases. Give either a budget ``epsilon`` (nats) or ``p``."""

    scheme: Scheme = Scheme("max")
    C: float = 1.0
    dither_sigma: float = 0.0
    epsilon: float | None = None
    p: float | None = None

    def __post_init__(self):
        if isinstance(self.scheme, str):
            object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        if (self.epsilon is None) == (self.p is None):
            raise DomainError("give exactly one of epsilon or p")


@dataclasses.dataclass(frozen=True)
class DpsgdLite:
    clip_C: float = 1.0
    noise_sigma: float = 1.0

    def __post_init__(self):
        if not self.clip_C > 0:
            raise DomainError(f"clip_C must be > 0, got {self.clip_C}")
        if not self.noise_sigma >= 0:
            raise DomainError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclasses.dataclass(frozen=True)
class NonPrivate:
    pass


Method = Union[Ferret, DpsgdLite, NonPrivate]


@dataclasses.dataclass(frozen=True)
class Sgd:
    pass


@dataclasses.dataclass(frozen=True)
class AdamLike:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


Rule = Union[Sgd, AdamLike]


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: float  # expected batch size B; the sampling rate is B / N
    lr: float
    method: Method
    optimizer: Rule = Sgd()
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise DomainError(f"steps must be >= 1, got {self.steps}")
        if not self.lr >= 0:
            raise DomainError(f"learning rate must be >= 0, got {self.lr}")
        if not self.batch_size > 0:
            raise DomainError(f"batch size must be > 0, got {self.batch_size}")

    def rate(self, n: int) -> float:
        s = self.batch_size / n
        if not 0 < s <= 1:
            raise DomainError(f"sampling rate B/N = {s} outside (0, 1]")
        return s


def steps_for_epochs(epochs: float, batch_size: float, n: int) -> int:
    return max(1, round(epochs * n / batch_size))


# ---------------------------------------------------------------- optimizer


@dataclasses.dataclass(frozen=True, eq=False)
class OptState:
    theta: np.ndarray
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


def optimizer_step(state: OptState, delta: np.ndarray, rule: Rule, lr: float) -> OptState:
    """Apply one aggregate update.

    Sgd moves by ``-lr * delta``. AdamLike runs the usual bias-corrected
    moment recursion on ``delta``; moments advance on every call, including
    all-zero (silent) ones, so they decay rather than go stale.
    """
    if isinstance(rule, Sgd):
        return OptState(state.theta - lr * delta, t=state.t + 1)
    m = np.zeros_like(state.theta) if state.m is None else state.m
    v = np.zeros_like(state.theta) if state.v is None else state.v
    t = state.t + 1
    m = rule.beta1 * m + (1.0 - rule.beta1) * delta
    v = rule.beta2 * v + (1.0 - rule.beta2) * delta * delta
    m_hat = m / (1.0 - rule.beta1**t)
    v_hat = v / (1.0 - rule.beta2**t)
    return OptState(state.theta - lr * m_hat / (np.sqrt(v_hat) + rule.eps), m, v, t)


# ---------------------------------------------------------------- run record


@dataclasses.dataclass(eq=False)
class RunRecord:
    losses: np.ndarray          # minibatch loss before each step; nan for empty batches
    fired_per_step: np.ndarray  # group releases per step, zeros for non-FERRET methods
    batch_sizes: np.ndarray
    initial_model: ToyModel
    model: ToyModel
    duration: float
    firing: FiringStats | None = None
    update_log: UpdateLog | None = None
    partition: GroupPartition | None = None
    p: float | None = None
    epsilon: float | None = None   # accountant value of the configuration, FERRET only
    s: float = 1.0

    @property
    def steps(self) -> int:
        return len(self.losses)

    @property
    def fired_total(self) -> int:
        return int(self.fired_per_step.sum())

    def realized_epsilon(self) -> float:
        """Leakage charged for the releases that actually happened."""
        return self.fired_total * accountant.LN2 * self.s


def subsample_stream(seed: int, step: int) -> RngStream:
    return RngStream(seed, Domain.SUBSAMPLE, step)


def _batch_gradient(model: ToyModel, data: Dataset, idx: np.ndarray):
    losses, G = per_example_grads(model, data.features[idx], data.targets[idx])
    return losses, G


def train(model: ToyModel, data: Dataset, cfg: TrainConfig) -> RunRecord:
    """Dispatch on ``cfg.method``."""
    if isinstance(cfg.method, Ferret):
        return train_ferret(model, data, cfg)
    if isinstance(cfg.method, DpsgdLite):
        return train_dpsgd_lite(model, data, cfg)
    return train_nonprivate(model, data, cfg)


def resolve_p(method: Ferret, G: int, T: int, s: float) -> float:
    if method.p is not None:
        p = method.p
        if not 0 <= p <= 1:
            raise DomainError(f"firing probability must lie in [0, 1], got {p}")
        return p
    return accountant.optimal_p(method.epsilon, G, T, s)


def train_ferret(model: ToyModel, data: Dataset, cfg: TrainConfig) -> RunRecord:
    if not isinstance(cfg.method, Ferret):
        raise DomainError("train_ferret needs a Ferret method")
    n = len(data)
    s = cfg.rate(n)
    partition = partition_groups(model.shapes, cfg.method.scheme)
    p = resolve_p(cfg.method, partition.G, cfg.steps, s)
    mech = MechanismConfig(p=p, C=cfg.method.C, dither_sigma=cfg.method.dither_sigma)
    index = partition.flat_indices()
    log = UpdateLog()
    counts = np.zeros(partition.G, dtype=np.int64)

    def update(t, state, idx):
        if idx.size:
            losses, G = _batch_gradient(model.with_flat(state.theta), data, idx)
            g = G.mean(axis=0)
            grads = [g[ix] for ix in index]
            loss = float(losses.mean())
        else:
            grads, loss = None, math.nan
        ups = ferret_step(grads, partition, mech, t, cfg.seed)
        log.extend(ups)
        fired = [u.group for u in ups if u.fired]
        counts[fired] += 1
        return aggregate_delta(ups, partition), loss, len(fired)

    rec = _loop(model, data, cfg, update)
    rec.firing = FiringStats(counts, cfg.steps, p)
    rec.update_log = log
    rec.partition = partition
    rec.p = p
    rec.s = s
    rec.epsilon = accountant.epsilon_total(partition.G, cfg.steps, s, p)
    return rec


def clip_rows(G: np.ndarray, clip_C: float) -> np.ndarray:
    """Scale each row to norm at most ``clip_C``; rows already inside are untouched."""
    norms = np.linalg.norm(G, axis=1)
    scale = np.ones_like(norms)
    over = norms > clip_C
    scale[over] = clip_C / norms[over]
    return G * scale[:, None]


def train_dpsgd_lite(model: ToyModel, data: Dataset, cfg: TrainConfig) -> RunRecord:
    """Clip per-example gradients, average over the drawn batch, add
    N(0, (noise_sigma * clip_C / B)^2) per coordinate with B the expected batch size.

    The noise scale is a knob, not calibrated to any (epsilon, delta) target.
    """
    method = cfg.method
    if not isinstance(method, DpsgdLite):
        raise DomainError("train_dpsgd_lite needs a DpsgdLite method")
    std = method.noise_sigma * method.clip_C / cfg.batch_size

    def update(t, state, idx):
        if not idx.size:
            return np.zeros_like(state.theta), math.nan, 0
        losses, G = _batch_gradient(model.with_flat(state.theta), data, idx)
        g = clip_rows(G, method.clip_C).mean(axis=0)
        if std > 0:
            g = g + rng.gaussian(std, g.size, RngStream(cfg.seed, Domain.NOISE, t))
        return g, float(losses.mean()), 0

    return _loop(model, data, cfg, update)


def train_nonprivate(model: ToyModel, data: Dataset, cfg: TrainConfig) -> RunRecord:
    def update(t, state, idx):
        if not idx.size:
            return np.zeros_like(state.theta), math.nan, 0
        losses, G = _batch_gradient(model.with_flat(state.theta), data, idx)
        return G.mean(axis=0), float(losses.mean()), 0

    return _loop(model, data, cfg, update)


def _loop(model: ToyModel, data: Dataset, cfg: TrainConfig, update) -> RunRecord:
    n = len(data)
    s = cfg.rate(n)
    T = cfg.steps
    losses = np.empty(T)
    fired = np.zeros(T, dtype=np.int64)
    sizes = np.zeros(T, dtype=np.int64)
    state = OptState(model.flat())
    start = time.perf_counter()
    for t in range(T):
        idx = rng.subsample_poisson(n, s, subsample_stream(cfg.seed, t))
        delta, losses[t], fired[t] = update(t, state, idx)
        sizes[t] = idx.size
        state = optimizer_step(state, delta, cfg.optimizer, cfg.lr)
    duration = time.perf_counter() - start
    return RunRecord(losses, fired, sizes, model, model.with_flat(state.theta), duration, s=s)


def final_loss(rec: RunRecord, data: Dataset) -> float:
    return mean_loss(rec.model, data)
