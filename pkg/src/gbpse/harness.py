"""Monte-Carlo convergence experiments and CSV output.

Every trial draws its own seeds from ``(seed, sigma2 index, trial)``, so the
results do not depend on how trials are spread over worker processes.
Floats are written in shortest round-trip form (``repr``).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .engine import ConvergenceTrace, GbpEngine, Schedule, UnobservableVariable
from .factor_graph import IsolatedVariable, build_graph
from .measurements import MeasurementError, StateVector, generate_measurements, load_devices
from .messages import DampingConfig
from .network import build_admittance, load_case
from .wls import RankDeficient, gauss_newton

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
NOISE_LEVELS = (0.01**2, 0.001**2, 0.0001**2, 0.00001**2)


class ConfigError(ValueError):
    pass


def data_path(name) -> Path:
    """Resolve ``name`` as given, falling back to the bundled fixtures."""
    p = Path(name)
    if p.exists():
        return p
    bundled = DATA_DIR / p.name
    if bundled.exists():
        return bundled
    return p


def rmse(x_hat: StateVector, x_nu: StateVector) -> float:
    """``||x_hat - x_nu||_2 / n``: the norm is divided by n, not sqrt(n)."""
    a, b = x_hat.as_array(), x_nu.as_array()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    return float(np.linalg.norm(a - b) / a.size)


def nu_for_budget(q, budget):
    """Smallest outer count whose total inner iterations ``sum nu**q`` reach ``budget``."""
    total, nu = 0, 0
    while total < budget:
        nu += 1
        total += nu ** q
    return nu


@dataclass(frozen=True)
class RunConfig:
    case: str
    devices: str
    sigma2: tuple = NOISE_LEVELS
    trials: int = 100
    q: int = 4
    nu_max: int = 7
    p: float = 0.5
    alpha: float = 0.5
    seed: int = 0
    output_dir: str = "results"
    noise_scale: float = 1.0
    tol: float = 0.0
    workers: int = 1
    q_values: tuple = (2, 3, 4, 5, 6)
    budget: int = 4676

    def __post_init__(self):
        object.__setattr__(self, "sigma2", tuple(float(s) for s in self.sigma2))
        object.__setattr__(self, "q_values", tuple(int(q) for q in self.q_values))
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.sigma2 or any(not s > 0 for s in self.sigma2):
            raise ConfigError("sigma2 values must be positive")
        if self.q < 1 or self.nu_max < 1 or any(q < 1 for q in self.q_values):
            raise ConfigError("q and nu_max must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            DampingConfig(self.p, self.alpha)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, doc, base_dir=None):
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        if base_dir is not None:
            for key in ("case", "devices", "output_dir"):
                if key in doc and not Path(doc[key]).is_absolute():
                    cand = Path(base_dir) / doc[key]
                    if key == "output_dir" or cand.exists():
                        doc[key] = str(cand)
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from None
        return cls.from_dict(doc, path.parent)

    def to_dict(self):
        d = asdict(self)
        d["sigma2"] = list(self.sigma2)
        d["q_values"] = list(self.q_values)
        return d


@dataclass(frozen=True)
class RmseRecord:
    trial: int
    sigma2: float
    nu: int
    rmse: float
    tau: int = 0


@dataclass
class TrialResult:
    sigma_index: int
    trial: int
    records: list = field(default_factory=list)
    error: str | None = None
    message: str = ""


def trial_seeds(seed, sigma_index, trial):
    """Measurement-noise seed and damping seed for one trial."""
    meas, damp = np.random.SeedSequence([int(seed), int(sigma_index), int(trial)]).generate_state(2)
    return int(meas), int(damp)


@lru_cache(maxsize=8)
def _problem(case_path, devices_path):
    case = load_case(data_path(case_path))
    adm = build_admittance(case)
    devices = load_devices(data_path(devices_path), case)
    return case, adm, tuple(devices)


def run_trial(cfg: RunConfig, sigma_index, trial, q=None, nu_max=None) -> TrialResult:
    q = cfg.q if q is None else q
    nu_max = cfg.nu_max if nu_max is None else nu_max
    case, adm, devices = _problem(cfg.case, cfg.devices)
    s2 = cfg.sigma2[sigma_index]
    meas_seed, damp_seed = trial_seeds(cfg.seed, sigma_index, trial)
    out = TrialResult(sigma_index, trial)
    try:
        ms = generate_measurements(case, devices, s2, meas_seed, adm, cfg.noise_scale)
        sol = gauss_newton(case, ms, tol=1e-12, max_iter=50, adm=adm)
        if not sol.converged:
            out.error, out.message = "NonConvergence", f"max increment {sol.final_max_increment!r}"
            return out
        engine = GbpEngine(build_graph(case, ms, adm), case, adm)
        trace = engine.run(StateVector.flat(case.n_bus), Schedule(q, nu_max, cfg.tol),
                           DampingConfig(cfg.p, cfg.alpha, damp_seed))
    except (RankDeficient, UnobservableVariable, IsolatedVariable, ArithmeticError,
            ValueError) as exc:
        out.error, out.message = type(exc).__name__, str(exc)
        return out
    trace = trace.with_rmse(sol.state)
    out.records = [RmseRecord(trial, s2, r.nu, r.rmse, r.tau) for r in trace.records]
    return out


def _run_tasks(cfg, tasks):
    """Run ``(sigma_index, trial, q, nu_max)`` tasks, returning results in task order."""
    if cfg.workers == 1 or len(tasks) == 1:
        return [run_trial(cfg, *t) for t in tasks]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(run_trial, cfg, *t) for t in tasks]
        return [f.result() for f in futures]


def fmt(x):
    return repr(float(x))


def _summary_rows(results):
    """Median and mean RMSE per (sigma2, nu) over the successful trials."""
    groups = {}
    for res in results:
        for rec in res.records:
            groups.setdefault((rec.sigma2, rec.nu, rec.tau), []).append(rec.rmse)
    rows = []
    for (s2, nu, tau), vals in sorted(groups.items(), key=lambda kv: (-kv[0][0], kv[0][1])):
        rows.append((s2, nu, tau, statistics.median(vals), statistics.fmean(vals), len(vals)))
    return rows


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_anomalies(path, results, sigma2, extra=()):
    rows = [(*extra, fmt(sigma2[r.sigma_index]), r.trial, r.error, r.message)
            for r in results if r.error]
    header = (*(("q",) if extra else ()), "sigma2", "trial", "error", "message")
    _write_csv(path, header, rows)


@dataclass
class MonteCarloResult:
    records: list
    summary: list
    anomalies: list
    output_dir: Path


def monte_carlo(cfg: RunConfig) -> MonteCarloResult:
    """Run every (sigma2, trial) pair and write ``rmse.csv``, ``summary.csv``, ``anomalies.csv``.

    ``summary.csv`` columns: sigma2, nu, tau, median_rmse, mean_rmse, n_trials,
    where rmse is ||x_wls - x_nu||_2 / n.
    """
    tasks = [(si, t, cfg.q, cfg.nu_max) for si in range(len(cfg.sigma2)) for t in range(cfg.trials)]
    results = _run_tasks(cfg, tasks)
    results.sort(key=lambda r: (r.sigma_index, r.trial))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    records = [rec for r in results for rec in r.records]
    _write_csv(out / "rmse.csv", ("sigma2", "trial", "nu", "tau", "rmse"),
               [(fmt(r.sigma2), r.trial, r.nu, r.tau, fmt(r.rmse)) for r in records])
    summary = _summary_rows(results)
    _write_csv(out / "summary.csv",
               ("sigma2", "nu", "tau", "median_rmse", "mean_rmse", "n_trials"),
               [(fmt(s2), nu, tau, fmt(med), fmt(mean), n) for s2, nu, tau, med, mean, n in summary])
    _write_anomalies(out / "anomalies.csv", results, cfg.sigma2)
    anomalies = [r for r in results if r.error]
    for r in anomalies:
        log.warning("trial %d (sigma2=%g) failed: %s: %s", r.trial, cfg.sigma2[r.sigma_index],
                    r.error, r.message)
    return MonteCarloResult(records, summary, anomalies, out)


def sweep_q(cfg: RunConfig, sigma_index=0) -> MonteCarloResult:
    """RMSE against cumulative inner iterations for each ``q`` at one noise level.

    For each q the outer count is the smallest one whose inner total reaches
    ``cfg.budget``. Writes ``sweep_q.csv`` with columns q, nu_max, nu, tau,
    inner_cumulative, median_rmse, mean_rmse, n_trials.
    """
    rows, anomalies, records = [], [], []
    per_q = []
    for q in cfg.q_values:
        nu_max = nu_for_budget(q, cfg.budget)
        tasks = [(sigma_index, t, q, nu_max) for t in range(cfg.trials)]
        results = sorted(_run_tasks(cfg, tasks), key=lambda r: r.trial)
        per_q.append((q, results))
        cumulative = 0
        for s2, nu, tau, med, mean, n in _summary_rows(results):
            cumulative += tau
            rows.append((q, nu_max, nu, tau, cumulative, med, mean, n))
        records.extend((q, rec) for r in results for rec in r.records)
        anomalies.extend((q, r) for r in results if r.error)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep_q.csv",
               ("q", "nu_max", "nu", "tau", "inner_cumulative", "median_rmse", "mean_rmse",
                "n_trials"),
               [(q, nm, nu, tau, cum, fmt(med), fmt(mean), n)
                for q, nm, nu, tau, cum, med, mean, n in rows])
    with open(out / "sweep_q_anomalies.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("q", "sigma2", "trial", "error", "message"))
        for q, r in anomalies:
            w.writerow((q, fmt(cfg.sigma2[r.sigma_index]), r.trial, r.error, r.message))
    return MonteCarloResult(records, rows, anomalies, out)


def final_medians(summary_rows):
    """Median RMSE at the last outer iteration, keyed by sigma2 (monte_carlo summary)."""
    last = {}
    for s2, nu, tau, med, mean, n in summary_rows:
        if s2 not in last or nu > last[s2][0]:
            last[s2] = (nu, med)
    return {s2: med for s2, (nu, med) in last.items()}


def trace_csv(trace: ConvergenceTrace) -> str:
    """``nu,tau,rmse,max_abs_increment`` rows for one run (rmse empty if unset)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("nu", "tau", "rmse", "max_abs_increment"))
    for r in trace.records:
        w.writerow((r.nu, r.tau, "" if r.rmse is None else fmt(r.rmse), fmt(r.max_abs_increment)))
    return buf.getvalue()


def states_csv(trace: ConvergenceTrace) -> str:
    """Wide table of the iterates: ``nu,theta_1..theta_N,v_1..v_N`` (row nu=0 is the start)."""
    n_bus = len(trace.initial)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["nu"] + [f"theta_{i}" for i in range(1, n_bus + 1)]
               + [f"v_{i}" for i in range(1, n_bus + 1)])
    w.writerow([0] + [fmt(v) for v in trace.initial.as_array()])
    for r in trace.records:
        w.writerow([r.nu] + [fmt(v) for v in r.state.as_array()])
    return buf.getvalue()


__all__ = [
    "ConfigError", "MeasurementError", "MonteCarloResult", "NOISE_LEVELS", "RmseRecord",
    "RunConfig", "data_path", "final_medians", "monte_carlo", "nu_for_budget", "rmse",
    "run_trial", "states_csv", "sweep_q", "trace_csv", "trial_seeds",
]
