"""Scalar Gaussian message algebra.

Messages are carried as (mean, variance) but combined in precision form, so
variance 0 (exact prior) and variance inf (vacuous) are handled exactly.
These functions are the reference semantics for the vectorized engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

EPS_COEFF = 1e-12


class ExactConflict(ArithmeticError):
    """Two zero-variance messages disagree on the mean."""


class AllVacuous(ArithmeticError):
    """No informative message reached a variable node."""


@dataclass(frozen=True)
class GaussianMessage:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance >= 0:
            raise ValueError(f"negative or NaN variance {self.variance}")
        if math.isinf(self.variance) and self.mean != 0.0:
            raise ValueError("vacuous message must carry mean 0")

    @property
    def is_vacuous(self):
        return math.isinf(self.variance)

    @property
    def precision(self):
        return 0.0 if self.is_vacuous else (math.inf if self.variance == 0 else 1.0 / self.variance)


VACUOUS = GaussianMessage(0.0, math.inf)


@dataclass(frozen=True)
class StateTriplet:
    """A local factor message together with the current state value it refers to."""

    residual: float
    variance: float
    state_value: float

    @property
    def message(self):
        return GaussianMessage(self.residual, self.variance)


def _combine(incoming):
    exact = [m for m in incoming if m.variance == 0]
    if exact:
        mean = exact[0].mean
        if any(m.mean != mean for m in exact[1:]):
            raise ExactConflict(f"zero-variance messages disagree: {[m.mean for m in exact]}")
        return GaussianMessage(mean, 0.0)
    precision = math.fsum(1.0 / m.variance for m in incoming if not m.is_vacuous)
    if precision == 0.0:
        return VACUOUS
    info = math.fsum(m.mean / m.variance for m in incoming if not m.is_vacuous)
    variance = 1.0 / precision
    return GaussianMessage(info * variance, variance)


def variable_to_factor(incoming) -> GaussianMessage:
    """Product of the messages arriving from every other neighbouring factor."""
    return _combine(list(incoming))


def marginal(incoming) -> GaussianMessage:
    """Belief of a variable from all non-virtual incoming messages."""
    out = _combine(list(incoming))
    if out.is_vacuous:
        raise AllVacuous("every incoming message is vacuous")
    return out


def factor_to_variable(residual, variance, coeffs, target, incoming) -> GaussianMessage:
    """Message from a linearized measurement factor to ``target``.

    ``coeffs`` maps each incident variable to its Jacobian element and
    ``incoming`` maps every other incident variable to its latest message.
    Degenerate cases (tiny target coefficient, vacuous input) give VACUOUS.
    """
    c_t = coeffs[target]
    if abs(c_t) < EPS_COEFF:
        return VACUOUS
    mean_acc = [residual]
    var_acc = [variance]
    for var, c in coeffs.items():
        if var == target or c == 0.0:
            continue
        msg = incoming[var]
        if msg.is_vacuous:
            return VACUOUS
        mean_acc.append(-c * msg.mean)
        var_acc.append(c * c * msg.variance)
    return GaussianMessage(math.fsum(mean_acc) / c_t, math.fsum(var_acc) / (c_t * c_t))


@dataclass(frozen=True)
class DampingConfig:
    """Bernoulli probability ``p`` of damping a message, mixing weight ``alpha``."""

    p: float = 0.5
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"damping probability must lie in [0, 1], got {self.p}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"damping weight must lie in (0, 1], got {self.alpha}")


def apply_damping(prev: GaussianMessage, fresh: GaussianMessage, cfg: DampingConfig,
                  delta) -> GaussianMessage:
    """Randomized mean damping; ``delta`` is the Bernoulli outcome (0 or 1).

    Variances always take the fresh value. Vacuous messages on either side
    are passed through undamped.
    """
    if not delta or fresh.is_vacuous or prev.is_vacuous:
        return fresh
    mean = (1 - delta) * fresh.mean + delta * cfg.alpha * (prev.mean + fresh.mean)
    return GaussianMessage(mean, fresh.variance)
