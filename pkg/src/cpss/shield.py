"""Budget-projected runtime shield.

The shield keeps a running account of consumed safety cost, turns the remaining
budget into a per-step admissibility threshold, shrinks that threshold under
contextual risk, and replaces any proposed action whose predicted cost exceeds
it with the lowest-cost alternative.

Every operation is a pure function.  The array kernels at the bottom
(``budget_threshold``, ``modulation``, ``admit``) are the single implementation;
the scalar API wraps them so batched rollouts and single decisions agree bit
for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Hashable, Sequence

import numpy as np

DEFAULT_EPSILON = 0.01
DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 1.0
DEFAULT_G_MIN = 0.1
DEFAULT_SMOOTHING = 0.1


class ShieldError(ValueError):
    """Raised when a shield input violates its contract."""


@dataclass(frozen=True)
class BudgetState:
    """Safety-cost account for one episode.

    ``step_index`` may equal ``horizon`` once the final step has been booked;
    such a state can no longer produce thresholds.
    """

    budget_total: float
    consumed: float
    horizon: int
    step_index: int = 0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.budget_total >= 0:
            raise ShieldError(f"budget_total must be >= 0, got {self.budget_total}")
        if not self.consumed >= 0:
            raise ShieldError(f"consumed must be >= 0, got {self.consumed}")
        if self.horizon < 1:
            raise ShieldError(f"horizon must be positive, got {self.horizon}")
        if not 0 <= self.step_index <= self.horizon:
            raise ShieldError(f"step_index {self.step_index} outside [0, {self.horizon}]")
        if not self.epsilon > 0:
            raise ShieldError(f"epsilon must be > 0, got {self.epsilon}")

    @property
    def remaining(self) -> float:
        return self.budget_total - self.consumed

    @classmethod
    def fresh(cls, budget_total: float, horizon: int, epsilon: float = DEFAULT_EPSILON) -> "BudgetState":
        return cls(budget_total=budget_total, consumed=0.0, horizon=horizon, epsilon=epsilon)


@dataclass(frozen=True)
class ModulationParams:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    g_min: float = DEFAULT_G_MIN

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ShieldError("alpha and beta must be nonnegative")
        if not 0 < self.g_min <= 1:
            raise ShieldError(f"g_min must lie in (0, 1], got {self.g_min}")


@dataclass(frozen=True)
class ContextSignal:
    """Density observation with its exponential moving average.

    Build the first one with :meth:`initial` and advance it with :meth:`observe`;
    ``deviation`` is always ``|density - density_smoothed|``.
    """

    density: float
    density_smoothed: float
    smoothing_rate: float = DEFAULT_SMOOTHING

    def __post_init__(self):
        if self.density < 0 or self.density_smoothed < 0:
            raise ShieldError("densities must be nonnegative")
        if not 0 < self.smoothing_rate <= 1:
            raise ShieldError(f"smoothing_rate must lie in (0, 1], got {self.smoothing_rate}")

    @property
    def deviation(self) -> float:
        return abs(self.density - self.density_smoothed)

    @classmethod
    def initial(cls, density: float, smoothing_rate: float = DEFAULT_SMOOTHING) -> "ContextSignal":
        return cls(density, density, smoothing_rate)

    def observe(self, density: float) -> "ContextSignal":
        smoothed = float(smooth_density(self.density_smoothed, density, self.smoothing_rate))
        return ContextSignal(density, smoothed, self.smoothing_rate)


@dataclass(frozen=True)
class ShieldDecision:
    proposed_action: Hashable
    executed_action: Hashable
    intervened: bool
    threshold: float
    threshold_budget: float
    modulation: float
    predicted_cost_proposed: float
    predicted_cost_executed: float
    infeasible: bool


# -- array kernels -----------------------------------------------------------


def budget_threshold(remaining, horizon, step_index, epsilon):
    """Remaining budget spread over the remaining steps, clamped at zero."""
    return np.maximum(remaining, 0.0) / (horizon - step_index + epsilon)


def modulation(density, deviation, alpha, beta, g_min):
    """Contextual shrink factor in [g_min, 1]; 1 on an empty, steady road."""
    return np.maximum(g_min, 1.0 / (1.0 + alpha * density + beta * deviation))


def smooth_density(previous, density, rate):
    return (1.0 - rate) * previous + rate * density


def admit(predicted, proposed, threshold):
    """Vectorised admissibility test over a batch of decisions.

    ``predicted`` has shape (n, n_actions), ``proposed`` and ``threshold`` shape
    (n,).  Returns ``(executed, intervened, infeasible)``.  ``argmin`` picks the
    first minimum, so fallback ties resolve to the lowest action id.
    """
    predicted = np.asarray(predicted, dtype=float)
    rows = np.arange(predicted.shape[0])
    proposed = np.asarray(proposed)
    intervened = predicted[rows, proposed] > threshold
    fallback = np.argmin(predicted, axis=1)
    infeasible = intervened & (predicted[rows, fallback] > threshold)
    executed = np.where(intervened, fallback, proposed)
    return executed, intervened, infeasible


# -- scalar API ---------------------------------------------------------------


def project_threshold(budget: BudgetState) -> float:
    if budget.step_index >= budget.horizon:
        raise ShieldError("episode already finished; no threshold for step == horizon")
    return float(budget_threshold(budget.remaining, budget.horizon, budget.step_index, budget.epsilon))


def context_modulation(ctx: ContextSignal, params: ModulationParams) -> float:
    return float(modulation(ctx.density, ctx.deviation, params.alpha, params.beta, params.g_min))


def effective_threshold(budget: BudgetState, ctx: ContextSignal, params: ModulationParams) -> float:
    return project_threshold(budget) * context_modulation(ctx, params)


def select_fallback(
    action_set: Sequence[Hashable],
    cost_predictor: Callable[[Hashable], float],
    threshold: float,
) -> tuple[Hashable, bool]:
    """Lowest-cost action and whether it is admissible.

    Ties go to the smallest action id, so ``action_set`` is scanned in sorted
    order.
    """
    if not action_set:
        raise ShieldError("action_set is empty")
    best = None
    best_cost = math.inf
    for action in sorted(action_set):
        cost = cost_predictor(action)
        if cost < best_cost:
            best, best_cost = action, cost
    return best, best_cost <= threshold


def shield_step(
    budget: BudgetState,
    ctx: ContextSignal,
    params: ModulationParams,
    proposed_action: Hashable,
    cost_predictor: Callable[[Hashable], float],
    action_set: Sequence[Hashable],
) -> ShieldDecision:
    if not action_set:
        raise ShieldError("action_set is empty")
    if proposed_action not in action_set:
        raise ShieldError(f"proposed action {proposed_action!r} not in action set")
    tau_budget = project_threshold(budget)
    g = context_modulation(ctx, params)
    tau = tau_budget * g
    proposed_cost = cost_predictor(proposed_action)
    if proposed_cost < 0:
        raise ShieldError(f"negative predicted cost {proposed_cost}")
    if proposed_cost <= tau:
        return ShieldDecision(
            proposed_action, proposed_action, False, tau, tau_budget, g,
            proposed_cost, proposed_cost, False,
        )
    fallback, feasible = select_fallback(action_set, cost_predictor, tau)
    return ShieldDecision(
        proposed_action, fallback, True, tau, tau_budget, g,
        proposed_cost, cost_predictor(fallback), not feasible,
    )


def update_budget(budget: BudgetState, realized_cost: float) -> BudgetState:
    if not realized_cost >= 0:
        raise ShieldError(f"realized cost must be >= 0, got {realized_cost}")
    if budget.step_index >= budget.horizon:
        raise ShieldError(
            f"episode overrun: step {budget.step_index} already at horizon {budget.horizon}"
        )
    return replace(budget, consumed=budget.consumed + realized_cost, step_index=budget.step_index + 1)
