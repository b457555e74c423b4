"""Fitting per-zone cost scales to target price series, and fuel-cost orders.

A target price series P_{z,t} is matched by scaling each zone's order slopes
and intercepts (c -> s_c c, b -> s_b b) and minimising the squared price
error F(s) = (1/N_T) sum_t sum_z (v_{z,t}(s) - P_{z,t})^2. The gradient
treats the marginal player and its quantity as locally constant, which makes
F piecewise smooth; the line search uses function values only, so the kinks
where the marginal player switches are tolerated.

Also maps fuel-cost parameters (base cost k, mid-quantity fraction f,
capacity growth factor n) to marginal-cost order pairs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (
    DEFAULT_SETTINGS,
    MarketInstance,
    Settings,
    instance_from_dict,
    load_instance,
)
from .swm import clear_swm

# Capacity cost-growth factors and fixed base costs by generation type. Types
# without a fixed k take it from market fuel prices.
FUEL_TYPES = {
    "gas": {"n": 0.2},
    "coal": {"n": 0.4},
    "nuclear": {"k": 13.8, "n": 0.8},
    "wind": {"k": 0.5, "n": 0.05},
    "solar": {"k": 0.5, "n": 0.05},
    "hydro_ror": {"k": 8.45, "n": 0.1},
}


@dataclass
class FuelCostSpec:
    """Fuel-driven ask model: the ask price at fraction f of capacity equals
    the base cost k, growing to (1 + n f/(1-f)) k at full capacity."""

    k: float
    n: float
    f: float = 0.5

    def __post_init__(self):
        if not 0 < self.f < 1:
            raise ValueError("f must lie strictly between 0 and 1")
        if not 0 <= self.n <= 1:
            raise ValueError("n must lie in [0, 1]")
        if self.k < 0:
            raise ValueError("k must be nonnegative")

    @classmethod
    def for_type(cls, gen_type: str, k: float = None, f: float = 0.5):
        row = FUEL_TYPES[gen_type]
        base = row.get("k", k)
        if base is None:
            raise ValueError(f"type {gen_type!r} needs a base cost k")
        return cls(k=float(base), n=row["n"], f=f)


def orders_from_fuel(spec: FuelCostSpec, Q_j: float) -> tuple:
    """Intercept and slope (b, c) of the linear marginal cost implied by spec.

    By construction the ask at quantity f*Q equals k exactly.
    """
    if Q_j <= 0:
        raise ValueError("capacity must be positive")
    b = spec.k * (1.0 - spec.n * spec.f / (1.0 - spec.f))
    c = spec.n * spec.k / ((1.0 - spec.f) * Q_j)
    return float(b), float(c)


@dataclass
class CostScales:
    """Per-zone multipliers on order slopes (s_c) and intercepts (s_b)."""

    s_c: np.ndarray
    s_b: np.ndarray

    def __post_init__(self):
        self.s_c = np.asarray(self.s_c, dtype=float)
        self.s_b = np.asarray(self.s_b, dtype=float)
        if np.any(self.s_c <= 0) or np.any(self.s_b <= 0):
            raise ValueError("scales must be positive")

    @classmethod
    def ones(cls, n_zones: int) -> "CostScales":
        return cls(np.ones(n_zones), np.ones(n_zones))


@dataclass
class CalibrationSeries:
    """Time-indexed instances with per-zone target prices (N_T x n_zones)."""

    instances: tuple
    targets: np.ndarray

    def __post_init__(self):
        self.instances = tuple(self.instances)
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if len(self.instances) != self.targets.shape[0]:
            raise ValueError("instances and targets must have equal length")
        for inst in self.instances:
            if inst.n_zones != self.targets.shape[1]:
                raise ValueError("target columns must match instance zones")

    @property
    def n_steps(self) -> int:
        return len(self.instances)


def scaled_instance(inst: MarketInstance, scales: CostScales) -> MarketInstance:
    players = tuple(
        replace(p, m=scales.s_c[p.zone] * p.m, a=scales.s_b[p.zone] * p.a)
        for p in inst.players
    )
    return replace(inst, players=players)


def _check_mechanism(mechanism: str):
    if mechanism not in ("swm", "cm"):
        raise ValueError(f"unknown mechanism {mechanism!r}")


def _clear(inst: MarketInstance, mechanism: str, settings: Settings):
    if mechanism == "swm":
        return clear_swm(inst, settings)
    if mechanism == "cm":
        from .cm import run_ibcqp

        return run_ibcqp(inst, settings=settings)
    raise ValueError(f"unknown mechanism {mechanism!r}")


def _marginal_player(inst: MarketInstance, out, zone: int, settings: Settings):
    """Index of the price-setting player: highest marginal ask among active."""
    best, arg = -np.inf, None
    for i in inst.zone_players(zone):
        if out.x[i] > settings.act_eps * inst.players[i].Q:
            lam = inst.players[i].marginal_price(out.x[i])
            if lam > best:
                best, arg = lam, i
    return arg


def objective_and_gradient(
    series: CalibrationSeries,
    scales: CostScales,
    mechanism: str = "swm",
    settings: Settings = DEFAULT_SETTINGS,
):
    """Mean squared price error and its analytic gradient.

    Returns (F, grad, skipped) with grad of shape (n_zones, 2); columns are
    the s_c and s_b partials. Steps whose clearing fails are skipped and
    counted. The marginal player's quantity is treated as constant in s, so
    dv/ds_c = c_k x_k and dv/ds_b = b_k with unscaled coefficients.
    """
    _check_mechanism(mechanism)
    nz = series.targets.shape[1]
    n_t = series.n_steps
    F = 0.0
    grad = np.zeros((nz, 2))
    skipped = []
    for t, inst in enumerate(series.instances):
        try:
            out = _clear(scaled_instance(inst, scales), mechanism, settings)
        except Exception:
            skipped.append(t)
            continue
        for z in range(nz):
            r = out.v[z] - series.targets[t, z]
            F += r * r / n_t
            k = _marginal_player(inst, out, z, settings)
            if k is None:
                continue
            p = inst.players[k]
            grad[z, 0] += 2.0 * r * p.m * out.x[k] / n_t
            grad[z, 1] += 2.0 * r * p.a / n_t
    return F, grad, skipped


def hessian_blocks(
    series: CalibrationSeries,
    scales: CostScales,
    mechanism: str = "swm",
    settings: Settings = DEFAULT_SETTINGS,
) -> np.ndarray:
    """Gauss-Newton 2x2 blocks, one per zone, scaled consistently with F.

    Each block is (2/N_T) sum_t [c_k x_k; b_k][c_k x_k; b_k]^T, so a Newton
    step with these blocks matches the gradient's normalisation.
    """
    _check_mechanism(mechanism)
    nz = series.targets.shape[1]
    n_t = series.n_steps
    H = np.zeros((nz, 2, 2))
    for inst in series.instances:
        try:
            out = _clear(scaled_instance(inst, scales), mechanism, settings)
        except Exception:
            continue
        for z in range(nz):
            k = _marginal_player(inst, out, z, settings)
            if k is None:
                continue
            p = inst.players[k]
            J = np.array([p.m * out.x[k], p.a])
            H[z] += 2.0 * np.outer(J, J) / n_t
    return H


def error_metrics(
    series: CalibrationSeries,
    scales: CostScales,
    mechanism: str = "swm",
    settings: Settings = DEFAULT_SETTINGS,
) -> np.ndarray:
    """Per-zone mean absolute price error divided by the mean target price."""
    _check_mechanism(mechanism)
    nz = series.targets.shape[1]
    abs_err = np.zeros(nz)
    used = 0
    for t, inst in enumerate(series.instances):
        try:
            out = _clear(scaled_instance(inst, scales), mechanism, settings)
        except Exception:
            continue
        abs_err += np.abs(out.v - series.targets[t])
        used += 1
    if used == 0:
        return np.full(nz, np.nan)
    mean_target = series.targets.mean(axis=0)
    denom = np.where(np.abs(mean_target) > 0, np.abs(mean_target), 1.0)
    return (abs_err / used) / denom


_SCALE_FLOOR = 1e-6


def fit_scales(
    series: CalibrationSeries,
    mechanism: str = "swm",
    method: str = "gd",
    max_iters: int = 100,
    grad_tol: float = 1e-10,
    settings: Settings = DEFAULT_SETTINGS,
):
    """Fit the per-zone scales by descent from s = 1.

    method "gd" takes steepest-descent steps, "newton" uses the per-zone
    Gauss-Newton blocks; both use Armijo backtracking (c = 1e-4, halving) on
    function values, so marginal-player switch kinks cannot increase F.
    Returns (CostScales, report) where report carries the F trace, iteration
    count, skipped steps and the per-zone error metrics at the fit.
    """
    if method not in ("gd", "newton"):
        raise ValueError(f"unknown method {method!r}")
    nz = series.targets.shape[1]
    s = CostScales.ones(nz)
    F, grad, skipped = objective_and_gradient(series, s, mechanism, settings)
    trace = [F]
    it = 0
    for it in range(1, max_iters + 1):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= grad_tol * (1.0 + abs(F)):
            break
        if method == "newton":
            H = hessian_blocks(series, s, mechanism, settings)
            d = np.zeros((nz, 2))
            for z in range(nz):
                Hz = H[z] + 1e-10 * max(1.0, np.trace(H[z])) * np.eye(2)
                d[z] = -np.linalg.solve(Hz, grad[z])
        else:
            d = -grad
        slope = float(np.sum(grad * d))
        if slope >= 0:
            d = -grad
            slope = -gnorm**2

        step = 1.0 if method == "newton" else 1.0 / max(gnorm, 1.0)
        accepted = False
        for _ in range(50):
            cand = CostScales(
                np.maximum(s.s_c + step * d[:, 0], _SCALE_FLOOR),
                np.maximum(s.s_b + step * d[:, 1], _SCALE_FLOOR),
            )
            F_new, grad_new, skipped_new = objective_and_gradient(
                series, cand, mechanism, settings
            )
            if F_new <= F + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        s, F, grad, skipped = cand, F_new, grad_new, skipped_new
        trace.append(F)
        if len(trace) > 2 and trace[-2] - trace[-1] <= 1e-14 * (1.0 + abs(F)):
            break
    report = {
        "objective": F,
        "trace": trace,
        "iterations": it,
        "method": method,
        "mechanism": mechanism,
        "skipped": skipped,
        "error_metrics": error_metrics(series, s, mechanism, settings),
    }
    return s, report


def load_targets_csv(path) -> np.ndarray:
    """Read a `t,zone,price` CSV into an (N_T x n_zones) array.

    Zones may be given by index or by name resolved against the instances.
    """
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((int(rec["t"]), rec["zone"], float(rec["price"])))
    if not rows:
        raise ValueError(f"no target rows in {path}")
    n_t = max(r[0] for r in rows) + 1
    zones = sorted({r[1] for r in rows})
    index = {z: k for k, z in enumerate(zones)}
    out = np.full((n_t, len(zones)), np.nan)
    for t, z, p in rows:
        out[t, index[z]] = p
    if np.any(np.isnan(out)):
        raise ValueError("target series has missing (t, zone) entries")
    return out


def load_series(instances_path, targets_path) -> CalibrationSeries:
    """Load instances (a directory of JSON files or one JSON array) plus the
    target CSV into a CalibrationSeries."""
    path = Path(instances_path)
    if path.is_dir():
        files = sorted(path.glob("*.json"))
        if not files:
            raise ValueError(f"no instance JSON files in {path}")
        instances = [load_instance(f) for f in files]
    else:
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, list):
            data = [data]
        instances = [instance_from_dict(d) for d in data]
    targets = load_targets_csv(targets_path)
    return CalibrationSeries(tuple(instances), targets)
