"""Closed-form mutual-information budget arithmetic for masked sign releases.

All leakage values are in nats. A single fired sign bit leaks at most
``ln 2``; Poisson subsampling at rate ``s`` scales that by ``s``; the total
over ``G`` groups and ``T`` steps with firing probability ``p`` is

    epsilon(p) = G * T * s * p * ln 2,

which is linear in ``p``, so the largest feasible ``p`` for a target budget
is obtained by division.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

from .errors import BudgetInfeasibleError, DomainError

LN2 = math.log(2.0)
# largest x with exp(x) finite in IEEE double
_LOG_FLOAT_MAX = math.log(2.0**1023 * (2.0 - 2.0**-52))


def nats_to_bits(x: float) -> float:
    return x / LN2


def bits_to_nats(x: float) -> float:
    return x * LN2


def _check_counts(G: int, T: int) -> None:
    if G < 1:
        raise DomainError(f"number of groups must be >= 1, got {G}")
    if T < 1:
        raise DomainError(f"number of steps must be >= 1, got {T}")


def _check_rate(s: float) -> None:
    if not 0.0 < s <= 1.0:
        raise DomainError(f"subsampling rate must lie in (0, 1], got {s}")


def amplified_epsilon(epsilon_0: float, s: float) -> float:
    """Leakage of a mechanism run on a rate-``s`` Poisson subsample."""
    if epsilon_0 < 0:
        raise DomainError(f"epsilon_0 must be >= 0, got {epsilon_0}")
    _check_rate(s)
    return s * epsilon_0


def epsilon_total(G: int, T: int, s: float, p: float) -> float:
    _check_counts(G, T)
    _check_rate(s)
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"firing probability must lie in [0, 1], got {p}")
    return G * T * s * p * LN2


def epsilon_max(G: int, T: int, s: float) -> float:
    """Leakage ceiling, reached when every group fires at every step."""
    return epsilon_total(G, T, s, 1.0)


def optimal_p(epsilon: float, G: int, T: int, s: float) -> float:
    """Largest firing probability whose total leakage equals ``epsilon``.

    Raises BudgetInfeasibleError when ``epsilon >= epsilon_max(G, T, s)``;
    the budget is never silently clamped to ``p = 1``.
    """
    if not epsilon > 0:
        raise DomainError(f"epsilon must be > 0, got {epsilon}")
    ceiling = epsilon_max(G, T, s)
    if epsilon >= ceiling:
        raise BudgetInfeasibleError(epsilon, ceiling)
    return epsilon / ceiling


@dataclasses.dataclass(frozen=True)
class AccountantConfig:
    G: int
    T: int
    s: float
    epsilon_target: float

    def __post_init__(self):
        _check_counts(self.G, self.T)
        _check_rate(self.s)
        if not self.epsilon_target > 0:
            raise DomainError(f"epsilon_target must be > 0, got {self.epsilon_target}")

    @classmethod
    def from_batching(cls, G: int, T: int, batch_size: float, n: int, epsilon_target: float):
        return cls(G=G, T=T, s=batch_size / n, epsilon_target=epsilon_target)


@dataclasses.dataclass(frozen=True)
class PrivacyPlan:
    G: int
    T: int
    s: float
    epsilon_target: float
    p_star: float
    epsilon_max: float
    epsilon_achieved: float

    def as_pairs(self) -> list[tuple[str, str]]:
        return [
            ("G", str(self.G)),
            ("T", str(self.T)),
            ("s", repr(self.s)),
            ("epsilon_target_nats", repr(self.epsilon_target)),
            ("epsilon_target_bits", repr(nats_to_bits(self.epsilon_target))),
            ("p_star", repr(self.p_star)),
            ("epsilon_max_nats", repr(self.epsilon_max)),
            ("epsilon_max_bits", repr(nats_to_bits(self.epsilon_max))),
            ("epsilon_achieved_nats", repr(self.epsilon_achieved)),
        ]


def plan(cfg: AccountantConfig) -> PrivacyPlan:
    p = optimal_p(cfg.epsilon_target, cfg.G, cfg.T, cfg.s)
    return PrivacyPlan(
        G=cfg.G,
        T=cfg.T,
        s=cfg.s,
        epsilon_target=cfg.epsilon_target,
        p_star=p,
        epsilon_max=epsilon_max(cfg.G, cfg.T, cfg.s),
        epsilon_achieved=epsilon_total(cfg.G, cfg.T, cfg.s, p),
    )


@dataclasses.dataclass(frozen=True)
class DitherRdpQuery:
    """Renyi order, firing probability, release magnitude and dither std-dev."""

    alpha: float
    p: float
    C: float
    sigma_d: float

    def __post_init__(self):
        if not self.alpha > 1:
            raise DomainError(f"Renyi order must be > 1, got {self.alpha}")
        if not 0.0 <= self.p <= 1.0:
            raise DomainError(f"firing probability must lie in [0, 1], got {self.p}")
        if not self.C > 0:
            raise DomainError(f"C must be > 0, got {self.C}")
        if not self.sigma_d > 0:
            # undithered releases have disjoint support: the divergence is infinite
            raise DomainError(f"dither std-dev must be > 0, got {self.sigma_d}")


def _exponent(q: DitherRdpQuery) -> float:
    return 2.0 * q.alpha * (q.alpha - 1.0) * q.C**2 / q.sigma_d**2


def log_rdp_dither_bound(q: DitherRdpQuery) -> float:
    """Natural log of :func:`rdp_dither_bound`; finite whenever ``p > 0``.

    Returns ``-inf`` for ``p == 0``.
    """
    if q.p == 0:
        return -math.inf
    e = _exponent(q)
    log_coef = q.alpha * math.log(q.p) - math.log(q.alpha - 1.0)
    # log(exp(e) + 1) without overflow
    return log_coef + e + math.log1p(math.exp(-e))


def rdp_dither_bound(q: DitherRdpQuery) -> float:
    """Renyi divergence bound of order ``alpha`` for one dithered release:

        p**alpha / (alpha - 1) * (exp(2 alpha (alpha - 1) C**2 / sigma_d**2) + 1)

    The value is finite for every valid query, but it exceeds the double range
    once the exponent passes about 709; ``inf`` is returned in that case and
    :func:`log_rdp_dither_bound` carries the finite value.
    """
    coef = q.p**q.alpha / (q.alpha - 1.0)
    if coef == 0.0:
        return 0.0 if q.p == 0 else _from_log(q)
    e = _exponent(q)
    if e < _LOG_FLOAT_MAX:
        value = coef * (math.exp(e) + 1.0)
        if math.isfinite(value) and value > 0.0:
            return value
    return _from_log(q)


def _from_log(q: DitherRdpQuery) -> float:
    log_value = log_rdp_dither_bound(q)
    if log_value > _LOG_FLOAT_MAX:
        return math.inf
    return math.exp(log_value)


def rdp_order_sweep(p: float, C: float, sigma_d: float, orders: Sequence[float]) -> tuple[float, float]:
    """Order minimizing the dithered bound over ``orders``, and that bound.

    Orders are compared in log space so overflowing candidates still rank
    correctly; the first order wins ties.
    """
    if len(orders) == 0:
        raise DomainError("orders must be non-empty")
    queries = [DitherRdpQuery(alpha=a, p=p, C=C, sigma_d=sigma_d) for a in orders]
    best = min(queries, key=log_rdp_dither_bound)
    return best.alpha, rdp_dither_bound(best)
