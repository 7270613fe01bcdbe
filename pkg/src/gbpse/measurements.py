"""Measurement functions h(x), their Jacobian rows, and noisy measurement generation.

Flow and current measurements are located on a directed branch ``(i, j)``
(metered at bus ``i``); injection and voltage measurements on a bus.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .network import AdmittanceEntries, NetworkCase

EPS_CURRENT = 1e-6


class MeasurementKind(str, enum.Enum):
    ACTIVE_FLOW = "active_flow"
    REACTIVE_FLOW = "reactive_flow"
    ACTIVE_INJECTION = "active_injection"
    REACTIVE_INJECTION = "reactive_injection"
    CURRENT_MAGNITUDE = "current_magnitude"
    VOLTAGE_MAGNITUDE = "voltage_magnitude"
    VOLTAGE_ANGLE = "voltage_angle"

    @property
    def on_branch(self):
        return self in _BRANCH_KINDS

    @property
    def is_direct(self):
        return self in (MeasurementKind.VOLTAGE_MAGNITUDE, MeasurementKind.VOLTAGE_ANGLE)


_BRANCH_KINDS = frozenset({
    MeasurementKind.ACTIVE_FLOW,
    MeasurementKind.REACTIVE_FLOW,
    MeasurementKind.CURRENT_MAGNITUDE,
})


class Var(NamedTuple):
    """State variable id: ``Var("theta", bus)`` or ``Var("v", bus)``."""

    kind: str
    bus: int

    def index(self, n_bus):
        """Position in the stacked ``(theta_1..theta_N, v_1..v_N)`` vector."""
        return self.bus - 1 if self.kind == "theta" else n_bus + self.bus - 1

    def __str__(self):
        return f"{self.kind}{self.bus}"


def Angle(bus):
    return Var("theta", bus)


def Magnitude(bus):
    return Var("v", bus)


class CurrentSingularity(ArithmeticError):
    """Current-magnitude Jacobian requested where the current is ~0."""


class MeasurementError(ValueError):
    pass


@dataclass(frozen=True)
class Device:
    kind: MeasurementKind
    location: int | tuple[int, int]
    sigma2: float | None = None


@dataclass(frozen=True)
class Measurement:
    kind: MeasurementKind
    location: int | tuple[int, int]
    value: float
    variance: float

    def __post_init__(self):
        if not (self.variance > 0 and math.isfinite(self.variance)):
            raise MeasurementError(f"variance must be positive and finite, got {self.variance}")

    @property
    def label(self):
        if self.kind.on_branch:
            i, j = self.location
            return f"{self.kind.value}:{i}-{j}"
        return f"{self.kind.value}:{self.location}"


@dataclass(frozen=True)
class StateVector:
    theta: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if theta.shape != v.shape or theta.ndim != 1:
            raise ValueError("theta and v must be 1-D arrays of equal length")
        if np.any(v <= 0):
            raise ValueError("voltage magnitudes must be positive")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "v", v)

    @classmethod
    def flat(cls, n_bus):
        return cls(np.zeros(n_bus), np.ones(n_bus))

    @classmethod
    def from_array(cls, x):
        x = np.asarray(x, dtype=float)
        n = x.size // 2
        return cls(x[:n].copy(), x[n:].copy())

    def as_array(self):
        return np.concatenate([self.theta, self.v])

    def __len__(self):
        return self.theta.size


def check_location(case: NetworkCase, kind: MeasurementKind, location):
    if kind.on_branch:
        try:
            i, j = location
        except (TypeError, ValueError):
            raise MeasurementError(f"{kind.value} needs a branch location (i, j)") from None
        if not case.has_branch(i, j):
            raise MeasurementError(f"{kind.value}: no branch between buses {i} and {j}")
    else:
        if isinstance(location, tuple) or not 1 <= location <= case.n_bus:
            raise MeasurementError(f"{kind.value}: invalid bus location {location!r}")


def _flow_terms(case, location, x):
    i, j = location
    g, b, gs, bs = case.branch(i, j).end_params(i)
    vi, vj = x.v[i - 1], x.v[j - 1]
    tij = x.theta[i - 1] - x.theta[j - 1]
    return i, j, g, b, gs, bs, vi, vj, math.cos(tij), math.sin(tij)


def _current_consts(g, b, gs, bs):
    a = (g + gs) ** 2 + (b + bs) ** 2
    bb = g * g + b * b
    c = g * (g + gs) + b * (b + bs)
    d = g * bs - b * gs
    return a, bb, c, d


def evaluate_h(m, x: StateVector, adm: AdmittanceEntries, case: NetworkCase) -> float:
    """Value of the measurement function for ``m`` at state ``x``."""
    kind = m.kind
    if kind is MeasurementKind.VOLTAGE_MAGNITUDE:
        return float(x.v[m.location - 1])
    if kind is MeasurementKind.VOLTAGE_ANGLE:
        return float(x.theta[m.location - 1])
    if kind.on_branch:
        i, j, g, b, gs, bs, vi, vj, cs, sn = _flow_terms(case, m.location, x)
        if kind is MeasurementKind.ACTIVE_FLOW:
            return vi * vi * (g + gs) - vi * vj * (g * cs + b * sn)
        if kind is MeasurementKind.REACTIVE_FLOW:
            return -vi * vi * (b + bs) - vi * vj * (g * sn - b * cs)
        # |(y + ys) Vi e^{j theta_ij} - y Vj|, algebraically the a, b, c, d form but
        # without its cancellation inside the square root
        return abs(complex(g + gs, b + bs) * vi * complex(cs, sn) - complex(g, b) * vj)

    i = m.location
    vi, ti = x.v[i - 1], x.theta[i - 1]
    total = 0.0
    for j in adm.neighbors[i]:
        tij = ti - x.theta[j - 1]
        G, B = adm.G[i, j], adm.B[i, j]
        if kind is MeasurementKind.ACTIVE_INJECTION:
            total += x.v[j - 1] * (G * math.cos(tij) + B * math.sin(tij))
        else:
            total += x.v[j - 1] * (G * math.sin(tij) - B * math.cos(tij))
    return float(vi * total)


def jacobian_row(m, x: StateVector, adm: AdmittanceEntries, case: NetworkCase) -> dict:
    """Partial derivatives of ``h_m`` keyed by :class:`Var`.

    Raises :class:`CurrentSingularity` for a current-magnitude measurement
    whose value is below ``EPS_CURRENT``.
    """
    kind = m.kind
    if kind is MeasurementKind.VOLTAGE_MAGNITUDE:
        return {Magnitude(m.location): 1.0}
    if kind is MeasurementKind.VOLTAGE_ANGLE:
        return {Angle(m.location): 1.0}

    if kind.on_branch:
        i, j, g, b, gs, bs, vi, vj, cs, sn = _flow_terms(case, m.location, x)
        if kind is MeasurementKind.ACTIVE_FLOW:
            dth = vi * vj * (g * sn - b * cs)
            dvi = -vj * (g * cs + b * sn) + 2.0 * vi * (g + gs)
            dvj = -vi * (g * cs + b * sn)
        elif kind is MeasurementKind.REACTIVE_FLOW:
            dth = -vi * vj * (g * cs + b * sn)
            dvi = -vj * (g * sn - b * cs) - 2.0 * vi * (b + bs)
            dvj = -vi * (g * sn - b * cs)
        else:
            current = evaluate_h(m, x, None, case)
            if abs(current) < EPS_CURRENT:
                raise CurrentSingularity(f"{m.label}: |I| = {current:.3e} below guard")
            a, bb, c, d = _current_consts(g, b, gs, bs)
            dth = vi * vj * (d * cs + c * sn) / current
            dvi = (vj * (d * sn - c * cs) + a * vi) / current
            dvj = (vi * (d * sn - c * cs) + bb * vj) / current
        return {Angle(i): dth, Angle(j): -dth, Magnitude(i): dvi, Magnitude(j): dvj}

    i = m.location
    vi, ti = x.v[i - 1], x.theta[i - 1]
    active = kind is MeasurementKind.ACTIVE_INJECTION
    d_ti = 0.0
    d_vi = 2.0 * vi * (adm.G[i, i] if active else -adm.B[i, i])
    row = {}
    for j in sorted(adm.neighbors[i] - {i}):
        tij = ti - x.theta[j - 1]
        cs, sn = math.cos(tij), math.sin(tij)
        G, B = adm.G[i, j], adm.B[i, j]
        vj = x.v[j - 1]
        if active:
            d_ti += vj * (-G * sn + B * cs)
            d_vi += vj * (G * cs + B * sn)
            row[Angle(j)] = vi * vj * (G * sn - B * cs)
            row[Magnitude(j)] = vi * (G * cs + B * sn)
        else:
            d_ti += vj * (G * cs + B * sn)
            d_vi += vj * (G * sn - B * cs)
            row[Angle(j)] = vi * vj * (-G * cs - B * sn)
            row[Magnitude(j)] = vi * (G * sn - B * cs)
    row[Angle(i)] = vi * d_ti
    row[Magnitude(i)] = d_vi
    return row


def incident_variables(kind: MeasurementKind, location, adm: AdmittanceEntries):
    """State variables that are arguments of the measurement function."""
    if kind is MeasurementKind.VOLTAGE_MAGNITUDE:
        return [Magnitude(location)]
    if kind is MeasurementKind.VOLTAGE_ANGLE:
        return [Angle(location)]
    if kind.on_branch:
        i, j = location
        return [Angle(i), Angle(j), Magnitude(i), Magnitude(j)]
    buses = [location] + sorted(adm.neighbors[location] - {location})
    return [Angle(k) for k in buses] + [Magnitude(k) for k in buses]


def generate_measurements(case, devices, sigma2, seed, adm=None, noise_scale=1.0):
    """Evaluate every device at the case's true state and add Gaussian noise.

    ``seed`` is anything :func:`numpy.random.default_rng` accepts. A device's
    own ``sigma2`` overrides the common value; ``noise_scale=0`` gives exact
    measurements that still carry the stated variance.
    """
    if not sigma2 > 0:
        raise MeasurementError(f"sigma2 must be positive, got {sigma2}")
    if adm is None:
        from .network import build_admittance
        adm = build_admittance(case)
    rng = np.random.default_rng(seed)
    x_true = case.true_state()
    variances = np.array([d.sigma2 if d.sigma2 is not None else sigma2 for d in devices],
                         dtype=float)
    noise = rng.standard_normal(len(devices)) * np.sqrt(variances) * noise_scale
    out = []
    for dev, var, e in zip(devices, variances, noise):
        check_location(case, dev.kind, dev.location)
        exact = evaluate_h(dev, x_true, adm, case)
        out.append(Measurement(dev.kind, dev.location, exact + float(e), float(var)))
    return out


def devices_from_list(doc, source="<devices>"):
    if not isinstance(doc, list):
        raise MeasurementError(f"{source}: device list must be a JSON array")
    devices = []
    for k, rec in enumerate(doc):
        where = f"{source}: [{k}]"
        try:
            kind = MeasurementKind(rec["kind"])
        except (KeyError, ValueError, TypeError):
            raise MeasurementError(f"{where}: unknown or missing kind") from None
        if kind.on_branch:
            if "from" not in rec or "to" not in rec:
                raise MeasurementError(f"{where}: {kind.value} needs 'from' and 'to'")
            loc = (int(rec["from"]), int(rec["to"]))
        else:
            if "bus" not in rec:
                raise MeasurementError(f"{where}: {kind.value} needs 'bus'")
            loc = int(rec["bus"])
        s2 = rec.get("sigma2")
        if s2 is not None and not float(s2) > 0:
            raise MeasurementError(f"{where}: sigma2 must be positive")
        devices.append(Device(kind, loc, None if s2 is None else float(s2)))
    return devices


def load_devices(path, case=None):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MeasurementError(f"{path}: malformed JSON: {exc}") from exc
    devices = devices_from_list(doc, str(path))
    if case is not None:
        for dev in devices:
            try:
                check_location(case, dev.kind, dev.location)
            except MeasurementError as exc:
                raise MeasurementError(f"{path}: {exc}") from None
    return devices


def devices_to_list(devices):
    out = []
    for d in devices:
        rec = {"kind": d.kind.value}
        if d.kind.on_branch:
            rec["from"], rec["to"] = d.location
        else:
            rec["bus"] = d.location
        if d.sigma2 is not None:
            rec["sigma2"] = d.sigma2
        out.append(rec)
    return out
