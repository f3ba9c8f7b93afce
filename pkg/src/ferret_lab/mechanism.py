"""Masked, group-granular sign releases.

At each step every parameter group independently fires with probability
``p``. A fired group draws a public unit direction ``u``, computes the sign
of the group gradient projected on ``u`` and releases ``sign * C * u``.
A silent group releases zero. The only data-dependent quantity in a
release is the sign bit; the mask and the direction are functions of
(seed, step, group) and can be regenerated by anyone holding the seed.

Optionally a data-independent Gaussian dither is added to the release of
every group, fired or silent, which makes Renyi-style accounting finite.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from typing import Hashable, Iterable, Sequence

import numpy as np

from . import rng
from .errors import DomainError
from .rng import Domain, RngStream

_UNIT_TOL = 1e-6


@dataclasses.dataclass(frozen=True)
class Scheme:
    """Grouping rule: ``max`` (one tensor per group), ``bucket`` (``k`` tensors
    per group) or ``two`` (exactly two groups)."""

    kind: str
    k: int | None = None

    def __post_init__(self):
        if self.kind not in ("max", "bucket", "two"):
            raise DomainError(f"unknown grouping scheme {self.kind!r}")
        if self.kind == "bucket" and (self.k is None or self.k < 1):
            raise DomainError(f"bucket size must be >= 1, got {self.k}")

    @classmethod
    def parse(cls, text: str) -> Scheme:
        """Accepts ``max``, ``two``/``2``, ``eighth`` (buckets of 8) and ``bucket:K``."""
        t = text.strip().lower()
        if t == "max":
            return cls("max")
        if t in ("two", "2"):
            return cls("two")
        if t == "eighth":
            return cls("bucket", 8)
        if t.startswith("bucket:"):
            try:
                k = int(t.split(":", 1)[1])
            except ValueError:
                raise DomainError(f"bad bucket size in {text!r}") from None
            return cls("bucket", k)
        raise DomainError(f"unknown grouping scheme {text!r}")

    def __str__(self) -> str:
        return f"bucket:{self.k}" if self.kind == "bucket" else self.kind


@dataclasses.dataclass(frozen=True)
class Span:
    tensor_id: Hashable
    offset: int
    length: int


@dataclasses.dataclass(frozen=True)
class GroupPartition:
    scheme: Scheme
    tensor_ids: tuple
    tensor_lengths: tuple[int, ...]
    groups: tuple[tuple[Span, ...], ...]

    @property
    def G(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(sum(sp.length for sp in grp) for grp in self.groups)

    @property
    def total_size(self) -> int:
        return sum(self.tensor_lengths)

    def flat_indices(self) -> list[np.ndarray]:
        """For each group, its positions in the concatenation of all tensors."""
        starts = dict(zip(self.tensor_ids, np.cumsum((0,) + self.tensor_lengths[:-1])))
        out = []
        for grp in self.groups:
            parts = [np.arange(starts[sp.tensor_id] + sp.offset,
                               starts[sp.tensor_id] + sp.offset + sp.length) for sp in grp]
            out.append(np.concatenate(parts))
        return out

    def gather(self, flat: np.ndarray) -> list[np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_size,):
            raise DomainError(f"expected a flat vector of length {self.total_size}, got {flat.shape}")
        return [flat[idx] for idx in self.flat_indices()]

    def scatter(self, group_vectors: Sequence[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.total_size)
        for idx, vec in zip(self.flat_indices(), group_vectors, strict=True):
            out[idx] = vec
        return out


def partition_groups(tensor_shapes: Sequence[tuple[Hashable, int]], scheme: Scheme | str) -> GroupPartition:
    """Split an ordered list of ``(tensor_id, length)`` into parameter groups.

    Tensor order is preserved. Uneven splits put the remainder in the earliest
    groups. The two-group scheme on a single tensor splits that tensor's
    scalars in two instead.
    """
    if isinstance(scheme, str):
        scheme = Scheme.parse(scheme)
    if len(tensor_shapes) == 0:
        raise DomainError("cannot partition an empty tensor list")
    ids = tuple(tid for tid, _ in tensor_shapes)
    lengths = tuple(int(n) for _, n in tensor_shapes)
    if any(n < 1 for n in lengths):
        raise DomainError("every tensor must hold at least one scalar")
    if len(set(ids)) != len(ids):
        raise DomainError("tensor ids must be unique")

    whole = [Span(tid, 0, n) for tid, n in zip(ids, lengths)]
    if scheme.kind == "max":
        groups = [(sp,) for sp in whole]
    elif scheme.kind == "bucket":
        groups = [tuple(whole[i:i + scheme.k]) for i in range(0, len(whole), scheme.k)]
    elif len(whole) >= 2:
        head = math.ceil(len(whole) / 2)
        groups = [tuple(whole[:head]), tuple(whole[head:])]
    else:
        n = lengths[0]
        if n < 2:
            raise DomainError("two groups need at least two scalars")
        head = math.ceil(n / 2)
        groups = [(Span(ids[0], 0, head),), (Span(ids[0], head, n - head),)]
    return GroupPartition(scheme, ids, lengths, tuple(groups))


@dataclasses.dataclass(frozen=True)
class MechanismConfig:
    p: float
    C: float = 1.0
    dither_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise DomainError(f"firing probability must lie in [0, 1], got {self.p}")
        if not self.C > 0:
            raise DomainError(f"C must be > 0, got {self.C}")
        if not self.dither_sigma >= 0:
            raise DomainError(f"dither_sigma must be >= 0, got {self.dither_sigma}")


@dataclasses.dataclass(frozen=True, eq=False)
class GroupUpdate:
    step: int
    group: int
    fired: bool
    sign: int | None
    direction: np.ndarray | None
    delta: np.ndarray


def sign_projection(g, u) -> int:
    """Sign of the projection of ``g`` on the unit vector ``u``; zero maps to +1."""
    g = np.asarray(g, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if g.shape != u.shape or g.ndim != 1:
        raise DomainError(f"gradient and direction shapes differ: {g.shape} vs {u.shape}")
    if abs(np.linalg.norm(u) - 1.0) > _UNIT_TOL:
        raise DomainError("direction must be a unit vector")
    return -1 if float(np.dot(g, u)) < 0.0 else 1


def mask_stream(seed: int, step: int, group: int) -> RngStream:
    return RngStream(seed, Domain.MASK, step, group)


def direction_stream(seed: int, step: int, group: int) -> RngStream:
    return RngStream(seed, Domain.DIRECTION, step, group)


def dither_stream(seed: int, step: int, group: int) -> RngStream:
    return RngStream(seed, Domain.DITHER, step, group)


def ferret_step(
    gradients: Sequence[np.ndarray] | None,
    partition: GroupPartition,
    cfg: MechanismConfig,
    step: int,
    seed: int,
    directions: Sequence[np.ndarray | None] | None = None,
) -> list[GroupUpdate]:
    """One step of masked sign releases, one GroupUpdate per group.

    ``gradients=None`` stands for an empty minibatch: nothing is released,
    though dither (if enabled) is still emitted on every group so the
    transcript looks the same as a silent step. ``directions`` overrides the
    seed-derived direction of individual groups and exists for tests.
    """
    sizes = partition.sizes
    if gradients is not None:
        if len(gradients) != partition.G:
            raise DomainError(f"expected {partition.G} group gradients, got {len(gradients)}")
        for gid, (grad, d) in enumerate(zip(gradients, sizes)):
            if np.shape(grad) != (d,):
                raise DomainError(f"group {gid}: gradient shape {np.shape(grad)} != ({d},)")
    fires = rng.bernoulli_grid(cfg.p, seed, Domain.MASK, step, np.arange(partition.G))
    updates = []
    for gid, d in enumerate(sizes):
        fired = bool(fires[gid]) and gradients is not None
        sign = u = None
        if fired:
            u = directions[gid] if directions is not None and directions[gid] is not None \
                else rng.sample_unit_vector(d, direction_stream(seed, step, gid))
            sign = sign_projection(gradients[gid], u)
            delta = (sign * cfg.C) * np.asarray(u, dtype=np.float64)
        else:
            delta = np.zeros(d)
        if cfg.dither_sigma > 0:
            delta = delta + rng.gaussian(cfg.dither_sigma, d, dither_stream(seed, step, gid))
        updates.append(GroupUpdate(step, gid, fired, sign, u, delta))
    return updates


def aggregate_delta(updates: Iterable[GroupUpdate], partition: GroupPartition) -> np.ndarray:
    """Sum of released deltas laid out as one flat parameter vector."""
    out = np.zeros(partition.total_size)
    index = partition.flat_indices()
    for upd in updates:
        if not 0 <= upd.group < partition.G:
            raise DomainError(f"update references unknown group {upd.group}")
        if upd.delta.shape != index[upd.group].shape:
            raise DomainError(f"group {upd.group}: delta shape {upd.delta.shape} mismatches partition")
        out[index[upd.group]] += upd.delta
    return out


def apply_updates(params: Sequence[np.ndarray], updates: Iterable[GroupUpdate], lr: float,
                  partition: GroupPartition) -> list[np.ndarray]:
    """``params - lr * sum(deltas)``, with params given as the partition's tensors in order."""
    if len(params) != len(partition.tensor_lengths):
        raise DomainError("parameter tensors do not match the partition")
    for t, n in zip(params, partition.tensor_lengths):
        if np.size(t) != n:
            raise DomainError("parameter tensor sizes do not match the partition")
    flat = np.concatenate([np.asarray(t, dtype=np.float64).ravel() for t in params])
    flat = flat - lr * aggregate_delta(updates, partition)
    return list(np.split(flat, np.cumsum(partition.tensor_lengths)[:-1]))


# ---------------------------------------------------------------- accounting helpers


def mask_bits(seed: int, T: int, G: int, p: float) -> np.ndarray:
    """(T, G) boolean array of the mask draws ``ferret_step`` uses."""
    return rng.bernoulli_grid(p, seed, Domain.MASK, np.arange(T)[:, None], np.arange(G)[None, :])


@dataclasses.dataclass(frozen=True)
class FiringStats:
    counts: np.ndarray  # K_g per group
    T: int
    p: float

    def __post_init__(self):
        if np.any(self.counts < 0) or np.any(self.counts > self.T):
            raise DomainError("firing counts must lie in [0, T]")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def firing_counts(seed: int, T: int, G: int, p: float) -> FiringStats:
    """How often each group's mask fires over ``T`` steps."""
    return FiringStats(mask_bits(seed, T, G, p).sum(axis=0), T, p)


# ---------------------------------------------------------------- transcript format


def private_payload(update: GroupUpdate) -> str:
    """Bits a fired group must transmit beyond what the seed determines.

    ``"1"`` for sign +1, ``"0"`` for sign -1, empty for a silent group.
    """
    if not update.fired:
        return ""
    return "1" if update.sign > 0 else "0"


def pack_payload(updates: Iterable[GroupUpdate]) -> tuple[bytes, int]:
    """Packs the private payload of a sequence of updates; returns (bytes, bit count)."""
    bits = "".join(private_payload(u) for u in updates)
    if not bits:
        return b"", 0
    arr = np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0")
    return np.packbits(arr).tobytes(), len(bits)


@dataclasses.dataclass
class UpdateLog:
    """Compact release transcript: one row per (step, group).

    Directions and dither are not stored; :func:`replay_deltas` regenerates
    them from the seed.
    """

    steps: list[int] = dataclasses.field(default_factory=list)
    groups: list[int] = dataclasses.field(default_factory=list)
    fired: list[int] = dataclasses.field(default_factory=list)
    signs: list[int] = dataclasses.field(default_factory=list)

    def extend(self, updates: Iterable[GroupUpdate]) -> None:
        for u in updates:
            self.steps.append(u.step)
            self.groups.append(u.group)
            self.fired.append(int(u.fired))
            self.signs.append(u.sign if u.fired else 0)

    def __len__(self) -> int:
        return len(self.steps)

    def rows(self):
        return zip(self.steps, self.groups, self.fired, self.signs)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "group", "fired", "sign"])
            w.writerows(self.rows())

    @classmethod
    def from_csv(cls, path) -> UpdateLog:
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.steps.append(int(row["step"]))
                log.groups.append(int(row["group"]))
                log.fired.append(int(row["fired"]))
                log.signs.append(int(row["sign"]))
        return log


def replay_deltas(log: UpdateLog, partition: GroupPartition, cfg: MechanismConfig, seed: int):
    """Rebuild every released delta from the transcript plus the public seed."""
    sizes = partition.sizes
    for step, gid, fired, sign in log.rows():
        d = sizes[gid]
        delta = np.zeros(d)
        if fired:
            u = rng.sample_unit_vector(d, direction_stream(seed, step, gid))
            delta = (sign * cfg.C) * u
        if cfg.dither_sigma > 0:
            delta = delta + rng.gaussian(cfg.dither_sigma, d, dither_stream(seed, step, gid))
        yield step, gid, delta
