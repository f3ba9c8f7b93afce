"""Exception types shared across the package."""

from __future__ import annotations


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class BudgetInfeasibleError(DomainError):
    """The requested privacy budget is at or above the configuration's ceiling."""

    def __init__(self, epsilon: float, epsilon_max: float):
        self.epsilon = epsilon
        self.epsilon_max = epsilon_max
        super().__init__(
            f"budget infeasible: epsilon={epsilon:g} nats must be below "
            f"epsilon_max={epsilon_max:.6g} nats"
        )
