"""Distributed Gauss-Newton: outer linearization loop around Gaussian BP.

Every outer iteration linearizes the indirect measurement factors at the
current state and runs ``tau(nu) = nu**q`` synchronous BP inner iterations
over the factor graph of state increments. Local factors (slack, direct,
initialization, virtual) are singly connected, so they enter each variable
node as a fixed prior: zero-variance for slack, ``1/sigma^2`` for direct,
nothing for initialization/virtual (vacuous messages).

All message arithmetic happens on per-edge numpy arrays. Factor-to-variable
messages carry ``(mean, precision)`` with precision 0 meaning vacuous;
variable-to-factor messages carry ``(mean, variance)`` with variance ``inf``
meaning vacuous. Exclusive sums ("all other edges") are formed with prefix
and suffix scans over padded slot matrices rather than total-minus-own.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse

from .factor_graph import FactorGraph, FactorKind
from .measurements import CurrentSingularity, StateVector, evaluate_h, jacobian_row
from .messages import EPS_COEFF, DampingConfig
from .network import AdmittanceEntries, NetworkCase, build_admittance

__all__ = [
    "ConvergenceTrace", "DampingConfig", "GbpEngine", "OuterRecord", "Schedule",
    "UnobservableVariable", "outer_iteration", "run",
]

_DRAW_CHUNK = 256


class UnobservableVariable(ArithmeticError):
    def __init__(self, var, nu):
        self.var = var
        self.nu = nu
        super().__init__(f"variable {var} received only vacuous messages in outer iteration {nu}")


@dataclass(frozen=True)
class Schedule:
    q: int = 4
    nu_max: int = 20
    tol: float = 1e-8

    def __post_init__(self):
        if self.q < 1 or self.nu_max < 1:
            raise ValueError("q and nu_max must be positive")

    def tau(self, nu):
        return nu ** self.q

    def total_inner(self):
        return sum(self.tau(nu) for nu in range(1, self.nu_max + 1))


@dataclass(frozen=True)
class OuterRecord:
    """One outer iteration: ``state`` is the iterate after applying ``increment``."""

    nu: int
    tau: int
    state: StateVector
    increment: np.ndarray
    variance: np.ndarray
    rmse: float | None = None

    @property
    def max_abs_increment(self):
        return float(np.max(np.abs(self.increment)))


@dataclass(frozen=True)
class ConvergenceTrace:
    initial: StateVector
    records: tuple[OuterRecord, ...]
    converged: bool

    def __len__(self):
        return len(self.records)

    @property
    def final_state(self):
        return self.records[-1].state if self.records else self.initial

    @property
    def total_inner(self):
        return sum(r.tau for r in self.records)

    def with_rmse(self, x_hat: StateVector):
        from .harness import rmse
        recs = tuple(replace(r, rmse=rmse(x_hat, r.state)) for r in self.records)
        return replace(self, records=recs)


@dataclass
class OuterResult:
    increment: np.ndarray
    variance: np.ndarray
    state: StateVector
    fv_mean: np.ndarray = field(repr=False)
    fv_prec: np.ndarray = field(repr=False)


def _padded_slots(owner, n_owner, pad):
    """Row ``o`` lists the edge ids owned by ``o`` in edge order, padded with ``pad``."""
    counts = np.bincount(owner, minlength=n_owner)
    width = max(int(counts.max()) if counts.size else 0, 1)
    slots = np.full((n_owner, width), pad, dtype=np.intp)
    fill = np.zeros(n_owner, dtype=np.intp)
    for e, o in enumerate(owner):
        slots[o, fill[o]] = e
        fill[o] += 1
    return slots


def _exclusive(mat):
    """Per row, the sum of every other column (no subtraction involved)."""
    out = np.zeros_like(mat)
    if mat.shape[-1] > 1:
        out[..., 1:] = np.cumsum(mat[..., :-1], axis=-1)
        out[..., :-1] += np.cumsum(mat[..., :0:-1], axis=-1)[..., ::-1]
    return out


class GbpEngine:
    """Message store and update rules for one factor graph."""

    def __init__(self, graph: FactorGraph, case: NetworkCase, adm: AdmittanceEntries | None = None):
        self.graph = graph
        self.case = case
        self.adm = build_admittance(case) if adm is None else adm
        n_bus = graph.n_bus
        self.n = 2 * n_bus
        self.pinned = np.zeros(self.n, dtype=bool)
        self.direct = []       # (state index, measurement)
        self.indirect = []     # factor nodes with >= 1 edge in the BP loop
        for f in graph.factors:
            if f.kind is FactorKind.SLACK:
                self.pinned[f.incident[0].index(n_bus)] = True
            elif f.kind is FactorKind.DIRECT:
                self.direct.append((f.incident[0].index(n_bus), f.measurement))
            elif f.kind is FactorKind.INDIRECT:
                self.indirect.append(f)

        e_fac, e_var = [], []
        for k, f in enumerate(self.indirect):
            for var in f.incident:
                e_fac.append(k)
                e_var.append(var.index(n_bus))
        self.n_fac = len(self.indirect)
        self.n_edges = len(e_fac)
        self.e_fac = np.array(e_fac, dtype=np.intp)
        self.e_var = np.array(e_var, dtype=np.intp)
        # pad index points one past the last edge; padded arrays hold a neutral 0 there
        self.fslots = _padded_slots(self.e_fac, self.n_fac, self.n_edges)
        self.vslots = _padded_slots(self.e_var, self.n, self.n_edges)
        self._slot_of_edge_f = self._slot_positions(self.fslots)
        self._slot_of_edge_v = self._slot_positions(self.vslots)
        self._fpairs = self._ordered_pairs(self.fslots)
        self._vpairs = self._ordered_pairs(self.vslots)

    def _ordered_pairs(self, slots):
        """All ``(edge, other edge)`` pairs sharing a node, as two index arrays."""
        rows, cols = [], []
        for row in slots:
            ids = row[row < self.n_edges]
            for e in ids:
                for b in ids:
                    if b != e:
                        rows.append(e)
                        cols.append(b)
        return np.array(rows, dtype=np.intp), np.array(cols, dtype=np.intp)

    def _slot_positions(self, slots):
        rows, cols = np.nonzero(slots < self.n_edges)
        order = np.argsort(slots[rows, cols])
        return rows[order], cols[order]

    # -- linearization -------------------------------------------------

    def local_priors(self, x: np.ndarray):
        """Precision and precision-weighted residual of the direct factors per variable."""
        prec = np.zeros(self.n)
        info = np.zeros(self.n)
        for idx, m in self.direct:
            r = m.value - x[idx]
            prec[idx] += 1.0 / m.variance
            info[idx] += r / m.variance
        return prec, info

    def linearize(self, state: StateVector):
        """Residual, variance per indirect factor and Jacobian coefficient per edge."""
        n_bus = self.graph.n_bus
        resid = np.zeros(self.n_fac)
        var = np.zeros(self.n_fac)
        coeff = np.zeros(self.n_edges + 1)
        e = 0
        for k, f in enumerate(self.indirect):
            m = f.measurement
            resid[k] = m.value - evaluate_h(m, state, self.adm, self.case)
            var[k] = m.variance
            try:
                row = jacobian_row(m, state, self.adm, self.case)
            except CurrentSingularity:
                # all-zero coefficients make the factor send vacuous messages only
                row = {}
            for v in f.incident:
                coeff[e] = row.get(v, 0.0)
                e += 1
        assert e == self.n_edges and n_bus == self.n // 2
        return resid, var, coeff

    # -- message updates -----------------------------------------------

    def variable_to_factor(self, fv_mean, fv_prec, loc_prec, loc_info):
        """Variable node update: product of the messages from every other incident factor."""
        ne = self.n_edges
        prec_e = np.append(fv_prec, 0.0)
        info_e = np.append(fv_prec * fv_mean, 0.0)
        stacked = np.stack([prec_e[self.vslots], info_e[self.vslots]])
        excl = _exclusive(stacked)
        rows, cols = self._slot_of_edge_v
        prec = loc_prec[self.e_var] + excl[0, rows, cols]
        info = loc_info[self.e_var] + excl[1, rows, cols]
        vac = prec == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            vf_var = np.where(vac, np.inf, 1.0 / prec)
            vf_mean = np.where(vac, 0.0, info / prec)
        pin = self.pinned[self.e_var]
        vf_var[pin] = 0.0
        vf_mean[pin] = 0.0
        out_mean = np.zeros(ne + 1)
        out_var = np.zeros(ne + 1)
        out_mean[:ne] = vf_mean
        out_var[:ne] = vf_var
        return out_mean, out_var

    def factor_to_variable(self, vf_mean, vf_var, resid, fvar, coeff):
        """Linear-Gaussian factor update; vacuous where any other input is vacuous."""
        ne = self.n_edges
        live = coeff != 0.0
        vac_in = np.isinf(vf_var) & live
        with np.errstate(invalid="ignore"):
            term_var = np.where(live & ~vac_in, coeff * coeff * vf_var, 0.0)
        term_mean = np.where(live, coeff * vf_mean, 0.0)
        stacked = np.stack([term_var[self.fslots], term_mean[self.fslots],
                            vac_in[self.fslots].astype(float)])
        excl = _exclusive(stacked)
        rows, cols = self._slot_of_edge_f
        c = coeff[:ne]
        fac = self.e_fac
        vac_out = (excl[2, rows, cols] > 0) | (np.abs(c) < EPS_COEFF)
        with np.errstate(divide="ignore", invalid="ignore"):
            num_var = fvar[fac] + excl[0, rows, cols]
            mean = np.where(vac_out, 0.0, (resid[fac] - excl[1, rows, cols]) / c)
            prec = np.where(vac_out, 0.0, (c * c) / num_var)
        return mean, prec

    def mean_operators(self, fv_prec, vf_var, resid, coeff, loc_info):
        """Affine maps for the mean updates once the variances are stationary.

        With precisions fixed, the factor-to-variable means are
        ``base + K @ vf_mean`` and the variable-to-factor means are
        ``offset + M @ fv_mean``.
        """
        ne = self.n_edges
        c = coeff[:ne]
        ok_f = fv_prec > 0
        e, b = self._fpairs
        keep = ok_f[e] & (c[b] != 0.0)
        K = scipy.sparse.csr_matrix((-c[b[keep]] / c[e[keep]], (e[keep], b[keep])), shape=(ne, ne))
        with np.errstate(divide="ignore", invalid="ignore"):
            base = np.where(ok_f, resid[self.e_fac] / c, 0.0)
        var = vf_var[:ne]
        ok_v = np.isfinite(var) & (var > 0)
        e, a = self._vpairs
        keep = ok_v[e] & (fv_prec[a] > 0)
        M = scipy.sparse.csr_matrix((fv_prec[a[keep]] * var[e[keep]], (e[keep], a[keep])),
                                    shape=(ne, ne))
        offset = np.where(ok_v, loc_info[self.e_var] * np.where(ok_v, var, 0.0), 0.0)
        return K, base, M, offset

    def marginals(self, fv_mean, fv_prec, loc_prec, loc_info, nu=0):
        prec = loc_prec + np.bincount(self.e_var, weights=fv_prec, minlength=self.n)
        info = loc_info + np.bincount(self.e_var, weights=fv_prec * fv_mean, minlength=self.n)
        bad = (prec == 0.0) & ~self.pinned
        if bad.any():
            raise UnobservableVariable(self.graph.variables[int(np.argmax(bad))], nu)
        with np.errstate(divide="ignore", invalid="ignore"):
            mean = np.where(self.pinned, 0.0, info / prec)
            var = np.where(self.pinned, 0.0, 1.0 / prec)
        return mean, var

    # -- loops -----------------------------------------------------------

    def _draws(self, damping, nu, tau):
        """Yield one Bernoulli row per inner iteration, a pure function of (seed, nu, rho, edge)."""
        ss = np.random.SeedSequence([int(damping.seed), int(nu)])
        rng = np.random.Generator(np.random.Philox(ss))
        done = 0
        while done < tau:
            block = rng.random((min(_DRAW_CHUNK, tau - done), self.n_edges))
            for row in block:
                yield row < damping.p
            done += block.shape[0]

    def outer_iteration(self, state: StateVector, nu: int, schedule: Schedule,
                        damping: DampingConfig | None = None, warm=None) -> OuterResult:
        """Linearize at ``state``, run ``tau(nu)`` inner iterations, update the state.

        ``warm`` is an optional ``(fv_mean, fv_prec)`` pair from the previous
        outer iteration used to seed the first variable-to-factor messages.
        """
        x = state.as_array()
        loc_prec, loc_info = self.local_priors(x)
        resid, fvar, coeff = self.linearize(state)
        tau = schedule.tau(nu)

        if warm is None:
            fv_mean = np.zeros(self.n_edges)
            fv_prec = np.zeros(self.n_edges)
        else:
            fv_mean, fv_prec = warm
        vf_mean, vf_var = self.variable_to_factor(fv_mean, fv_prec, loc_prec, loc_info)

        damp = damping is not None and damping.p > 0.0 and self.n_edges > 0
        draws = self._draws(damping, nu, tau) if damp else None
        prev_mean = prev_prec = None
        ops = None
        for rho in range(1, tau + 1):
            if ops is None:
                old_prec, old_var = fv_prec, vf_var
                fv_mean, fv_prec = self.factor_to_variable(vf_mean, vf_var, resid, fvar, coeff)
            else:
                fv_mean = ops[1] + ops[0] @ vf_mean[:self.n_edges]
            if damp:
                delta = next(draws)
                if prev_mean is None:
                    prev_mean, prev_prec = fv_mean, fv_prec
                mix = delta & (fv_prec > 0) & (prev_prec > 0)
                fv_mean = np.where(mix, damping.alpha * (prev_mean + fv_mean), fv_mean)
                prev_mean, prev_prec = fv_mean, fv_prec
            if ops is None:
                vf_mean, vf_var = self.variable_to_factor(fv_mean, fv_prec, loc_prec, loc_info)
                # the variance recursion ignores the means: once it stops moving it never will
                if np.array_equal(fv_prec, old_prec) and np.array_equal(vf_var, old_var):
                    ops = self.mean_operators(fv_prec, vf_var, resid, coeff, loc_info)
            else:
                vf_mean = ops[3] + ops[2] @ fv_mean
        if np.any(fv_prec < 0) or np.any(vf_var < 0):
            raise ArithmeticError("negative variance in message store")

        inc, var = self.marginals(fv_mean, fv_prec, loc_prec, loc_info, nu)
        new_state = StateVector.from_array(x + inc)
        return OuterResult(inc, var, new_state, fv_mean, fv_prec)

    def run(self, x0: StateVector | None = None, schedule: Schedule = Schedule(),
            damping: DampingConfig | None = None, warm_start: bool = False) -> ConvergenceTrace:
        """Outer iterations from ``x0`` (flat start by default) until ``tol`` or ``nu_max``.

        Each outer iteration starts from the local factor messages alone; with
        ``warm_start`` the final factor messages of the previous outer iteration
        seed it instead.
        """
        state = StateVector.flat(self.graph.n_bus) if x0 is None else x0
        initial = state
        records = []
        warm = None
        converged = False
        for nu in range(1, schedule.nu_max + 1):
            res = self.outer_iteration(state, nu, schedule, damping, warm)
            state = res.state
            records.append(OuterRecord(nu, schedule.tau(nu), state, res.increment, res.variance))
            if warm_start:
                warm = (res.fv_mean, res.fv_prec)
            if records[-1].max_abs_increment < schedule.tol:
                converged = True
                break
        return ConvergenceTrace(initial, tuple(records), converged)


def outer_iteration(graph, state, nu, schedule, damping, adm, case, warm=None):
    """Functional form of :meth:`GbpEngine.outer_iteration`; returns ``(increment, new_state)``."""
    res = GbpEngine(graph, case, adm).outer_iteration(state, nu, schedule, damping, warm)
    return res.increment, res.state


def run(graph, x0, schedule, damping, adm, case, warm_start=False) -> ConvergenceTrace:
    return GbpEngine(graph, case, adm).run(x0, schedule, damping, warm_start)
