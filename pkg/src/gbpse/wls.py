"""Centralized Gauss-Newton weighted least squares (the correctness oracle).

The slack angle is eliminated by removing its column, so the reduced normal
equations have ``n - 1`` unknowns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .measurements import CurrentSingularity, StateVector, evaluate_h, jacobian_row
from .network import NetworkCase, build_admittance

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-10


class RankDeficient(np.linalg.LinAlgError):
    """The gain matrix is singular: the measurement set does not observe the state."""


@dataclass(frozen=True)
class LinearSystemBundle:
    jacobian: np.ndarray        # k x (n-1)
    weights: np.ndarray         # diagonal of W
    residuals: np.ndarray
    columns: np.ndarray         # full-state index of each column
    n_state: int
    dropped: tuple = ()         # labels of measurements skipped at this point

    def gain(self):
        J, w = self.jacobian, self.weights
        return J.T @ (w[:, None] * J)

    def rhs(self):
        return self.jacobian.T @ (self.weights * self.residuals)

    def expand(self, reduced):
        """Scatter a reduced vector back to full length (slack entry 0)."""
        full = np.zeros(self.n_state)
        full[self.columns] = reduced
        return full


@dataclass(frozen=True)
class WlsSolution:
    state: StateVector
    iterations: int
    converged: bool
    final_max_increment: float
    increments: list = field(default_factory=list, repr=False)


def assemble(case: NetworkCase, measurements, x: StateVector, adm=None) -> LinearSystemBundle:
    if adm is None:
        adm = build_admittance(case)
    n_bus = case.n_bus
    n = 2 * n_bus
    keep = np.array([k for k in range(n) if k != case.slack_bus - 1])
    col_of = np.full(n, -1)
    col_of[keep] = np.arange(keep.size)

    rows, weights, resid, dropped = [], [], [], []
    for m in measurements:
        try:
            row = jacobian_row(m, x, adm, case)
        except CurrentSingularity as exc:
            log.warning("dropping measurement row: %s", exc)
            dropped.append(m.label)
            continue
        dense = np.zeros(keep.size)
        for var, coeff in row.items():
            c = col_of[var.index(n_bus)]
            if c >= 0:
                dense[c] = coeff
        rows.append(dense)
        weights.append(1.0 / m.variance)
        resid.append(m.value - evaluate_h(m, x, adm, case))
    J = np.array(rows).reshape(len(rows), keep.size)
    return LinearSystemBundle(J, np.array(weights), np.array(resid), keep, n, tuple(dropped))


def _factor(gain):
    try:
        chol = scipy.linalg.cholesky(gain, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient(f"gain matrix is not positive definite: {exc}") from None
    pivots = np.diag(chol) ** 2
    scale = max(float(np.max(np.abs(np.diag(gain)))), np.finfo(float).tiny)
    if pivots.min() <= PIVOT_TOL * scale:
        raise RankDeficient(f"pivot {pivots.min():.3e} below tolerance; system unobservable")
    return chol


def solve_linear_wls(bundle: LinearSystemBundle) -> np.ndarray:
    """Reduced increment solving ``J^T W J dx = J^T W r``."""
    if bundle.jacobian.shape[0] < bundle.jacobian.shape[1]:
        raise RankDeficient("fewer measurement rows than unknowns")
    gain, rhs = bundle.gain(), bundle.rhs()
    chol = _factor(gain)
    dx = scipy.linalg.cho_solve((chol, True), rhs)
    resid = np.max(np.abs(gain @ dx - rhs)) if rhs.size else 0.0
    if resid > 1e-9 * max(np.max(np.abs(rhs)), np.finfo(float).tiny):
        log.warning("normal-equation residual %.3e is large relative to the right-hand side", resid)
    return dx


def covariance(bundle: LinearSystemBundle) -> np.ndarray:
    """Error covariance ``(J^T W J)^-1`` of the reduced increment."""
    chol = _factor(bundle.gain())
    return scipy.linalg.cho_solve((chol, True), np.eye(chol.shape[0]))


def optimality_residual(bundle: LinearSystemBundle) -> float:
    """Infinity norm of ``J^T W r``, zero at a stationary point."""
    rhs = bundle.rhs()
    return float(np.max(np.abs(rhs))) if rhs.size else 0.0


def is_observable(case, measurements, x=None, adm=None) -> bool:
    x = StateVector.flat(case.n_bus) if x is None else x
    bundle = assemble(case, measurements, x, adm)
    J = bundle.jacobian
    return J.shape[0] >= J.shape[1] and np.linalg.matrix_rank(J) == J.shape[1]


def gauss_newton(case, measurements, x0=None, tol=1e-8, max_iter=20, adm=None) -> WlsSolution:
    """Iterate linear WLS solves until ``max|dx| < tol`` or ``max_iter``.

    Non-convergence is reported through ``converged=False``.
    """
    if adm is None:
        adm = build_admittance(case)
    x = StateVector.flat(case.n_bus) if x0 is None else x0
    increments = []
    max_inc = np.inf
    it = 0
    while it < max_iter:
        it += 1
        bundle = assemble(case, measurements, x, adm)
        dx = bundle.expand(solve_linear_wls(bundle))
        increments.append(dx)
        max_inc = float(np.max(np.abs(dx)))
        x_next = x.as_array() + dx
        if not np.all(np.isfinite(x_next)) or np.any(x_next[case.n_bus:] <= 0):
            log.warning("Gauss-Newton diverged at iteration %d", it)
            max_inc = np.inf
            break
        x = StateVector.from_array(x_next)
        if max_inc < tol:
            break
    return WlsSolution(x, it, bool(max_inc < tol), max_inc, increments)
