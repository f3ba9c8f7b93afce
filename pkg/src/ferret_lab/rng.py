"""Counter-based random streams keyed by (seed, domain, step, group).

Every stochastic primitive used by the mechanism and the trainers is drawn
from a stream whose output depends only on its coordinates, never on call
order. A stream key is a 64-bit hash of the coordinates; the i-th output
word is the SplitMix64 output at state ``key + (i + 1) * GOLDEN``. Because
the whole derivation is elementwise integer arithmetic, it vectorizes over
arrays of steps and groups, which is what the bulk samplers at the bottom
of this module rely on.
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np

from .errors import DomainError

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
# distinct odd multipliers so that each coordinate enters the key differently
_COORD_MULT = (
    np.uint64(0xD1B54A32D192ED03),
    np.uint64(0xABC98388FB8FAC03),
    np.uint64(0x8CB92BA72F3D8DD7),
)
_TWO_PI = 2.0 * np.pi


class Domain(enum.IntEnum):
    """Purpose tag of a stream. Streams with different tags never share output."""

    MASK = 1
    DIRECTION = 2
    DITHER = 3
    SUBSAMPLE = 4
    INIT = 5
    NOISE = 6


def _mix(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer; uint64 array arithmetic wraps mod 2**64
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _as_u64(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype.kind == "u":
        return arr.astype(np.uint64)
    if arr.dtype.kind != "i":
        raise DomainError(f"stream coordinates must be integers, got dtype {arr.dtype}")
    if np.any(arr < 0):
        raise DomainError("step and group coordinates must be >= 0")
    return arr.astype(np.uint64)


def _seed_u64(seed: int) -> np.uint64:
    if isinstance(seed, (bool, float)) or not isinstance(seed, (int, np.integer)):
        raise DomainError(f"seed must be an integer, got {seed!r}")
    return np.uint64(int(seed) & _MASK64)


def _mix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, domain: Domain, step: int, group: int) -> int:
    """Scalar form of :func:`stream_keys` in plain integer arithmetic."""
    k = _mix_int((int(_seed_u64(seed)) + 0x9E3779B97F4A7C15) & _MASK64)
    k = _mix_int(k ^ ((int(domain) * 0xD1B54A32D192ED03) & _MASK64))
    k = _mix_int(k ^ (((step + 1) * 0xABC98388FB8FAC03) & _MASK64))
    return _mix_int(k ^ (((group + 1) * 0x8CB92BA72F3D8DD7) & _MASK64))


def stream_keys(seed: int, domain: Domain, steps, groups) -> np.ndarray:
    """Vectorized stream keys; ``steps`` and ``groups`` broadcast against each other."""
    steps = _as_u64(steps)
    groups = _as_u64(groups)
    with np.errstate(over="ignore"):
        k = _mix(np.asarray(_seed_u64(seed) + _GOLDEN, dtype=np.uint64))
        k = _mix(k ^ (np.uint64(int(domain)) * _COORD_MULT[0]))
        k = _mix(k ^ ((steps + np.uint64(1)) * _COORD_MULT[1]))
        k = _mix(k ^ ((groups + np.uint64(1)) * _COORD_MULT[2]))
    return k


def words(keys, n: int, offset: int = 0) -> np.ndarray:
    """Raw 64-bit output words ``offset .. offset+n-1`` for each key; shape ``keys.shape + (n,)``."""
    keys = np.asarray(keys, dtype=np.uint64)
    ctr = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(keys[..., None] + ctr * _GOLDEN)


def uniforms(keys, n: int, offset: int = 0) -> np.ndarray:
    """Doubles in [0, 1) with 53 random bits each."""
    w = words(keys, n, offset)
    return (w >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def normals(keys, n: int) -> np.ndarray:
    """Standard normal draws by the Box-Muller transform, ``n`` per key."""
    pairs = (n + 1) // 2
    u = uniforms(keys, 2 * pairs)
    radius = np.sqrt(-2.0 * np.log1p(-u[..., 0::2]))  # 1 - u lies in (0, 1]
    angle = _TWO_PI * u[..., 1::2]
    out = np.empty(u.shape, dtype=np.float64)
    out[..., 0::2] = radius * np.cos(angle)
    out[..., 1::2] = radius * np.sin(angle)
    return out[..., :n]


@dataclasses.dataclass(frozen=True)
class RngStream:
    """Immutable coordinates of one random stream.

    Two streams with equal coordinates yield identical output; nothing is
    consumed by drawing from a stream, so a stream value can be shared
    freely between workers.
    """

    seed: int
    domain: Domain
    step: int = 0
    group: int = 0

    def __post_init__(self):
        _seed_u64(self.seed)
        object.__setattr__(self, "domain", Domain(self.domain))
        if self.step < 0 or self.group < 0:
            raise DomainError("step and group coordinates must be >= 0")

    @property
    def key(self) -> np.uint64:
        return np.uint64(stream_key(self.seed, self.domain, self.step, self.group))

    def at(self, step: int | None = None, group: int | None = None) -> RngStream:
        return dataclasses.replace(
            self,
            step=self.step if step is None else step,
            group=self.group if group is None else group,
        )

    def uniforms(self, n: int, offset: int = 0) -> np.ndarray:
        return uniforms(self.key, n, offset)

    def normals(self, n: int) -> np.ndarray:
        return normals(self.key, n)


def sample_unit_vector(dim: int, stream: RngStream) -> np.ndarray:
    """Uniform point on the unit sphere in ``dim`` dimensions."""
    if dim < 1:
        raise DomainError(f"dim must be >= 1, got {dim}")
    return _normalize(stream.normals(dim))


def _normalize(z: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    # a Box-Muller row is exactly zero only with probability ~2**-53 per coordinate
    return z / norm


def bernoulli(p: float, stream: RngStream) -> int:
    """1 with probability ``p``. Uses the stream's first word only, so
    streams at equal coordinates are coupled across different ``p``."""
    _check_probability(p)
    return int(stream.uniforms(1)[0] < p)


def subsample_poisson(n: int, s: float, stream: RngStream) -> np.ndarray:
    """Indices of ``range(n)`` each kept independently with probability ``s``."""
    if n < 1:
        raise DomainError(f"dataset size must be >= 1, got {n}")
    if not 0.0 < s <= 1.0:
        raise DomainError(f"subsampling rate must lie in (0, 1], got {s}")
    return np.flatnonzero(stream.uniforms(n) < s)


def gaussian(sigma: float, dim: int, stream: RngStream) -> np.ndarray:
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    if dim < 0:
        raise DomainError(f"dim must be >= 0, got {dim}")
    if sigma == 0:
        return np.zeros(dim)
    return sigma * stream.normals(dim)


def _check_probability(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"probability must lie in [0, 1], got {p}")


# bulk samplers: same values as the scalar functions, many coordinates at once


def bernoulli_grid(p: float, seed: int, domain: Domain, steps, groups) -> np.ndarray:
    """Boolean array over broadcast (steps, groups); entry equals
    ``bernoulli(p, RngStream(seed, domain, step, group))``."""
    _check_probability(p)
    keys = stream_keys(seed, domain, steps, groups)
    return uniforms(keys, 1)[..., 0] < p


def unit_vectors(dim: int, seed: int, domain: Domain, steps, groups) -> np.ndarray:
    """Unit vectors for broadcast (steps, groups); shape ``broadcast + (dim,)``."""
    if dim < 1:
        raise DomainError(f"dim must be >= 1, got {dim}")
    keys = stream_keys(seed, domain, steps, groups)
    return _normalize(normals(keys, dim))
