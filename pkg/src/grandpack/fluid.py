"""Deterministic fluid-scale dynamics.

The state is a nonnegative vector ``x`` over the nonzero configurations, in
canonical order.  Two modes exist: *infinite* pools, where the idle mass of
server type ``s`` available to arrivals is ``a_s * z`` (``z`` the total
customer mass), and *finite* pools, where it is ``h_s`` minus the occupied
mass and arrivals finding no available mass are blocked.

Per edge (k, i) the departure rate is ``k_i mu_i x_k`` and the arrival rate
splits the total ``lam_i`` proportionally to the mass of configurations that
can accept a type-i customer.  The entropy-like functions ``lyapunov_*``
decrease along trajectories; ``drift_xi`` is their instantaneous rate of
change, a sum of nonpositive pair terms that vanishes exactly at the
product-form equilibrium.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .csvio import write_csv
from .model import PackingModel

MODE_INFINITE = "inf"
MODE_FINITE = "fin"


class FluidError(ValueError):
    pass


class DegenerateAvailabilityError(FluidError):
    """No mass is available to some customer type in infinite mode."""


class StepSizeError(FluidError):
    """Boundary clipping exceeded tolerance within one integrator step."""


class DomainError(FluidError):
    """Input lies outside the stated domain of the functional."""


def _check_mode(mode: str) -> None:
    if mode not in (MODE_INFINITE, MODE_FINITE):
        raise FluidError(f"mode must be '{MODE_INFINITE}' or '{MODE_FINITE}', got {mode!r}")


def derived_quantities(model: PackingModel, x: np.ndarray, mode: str, a=None):
    """Per-type totals y, total z, idle mass per pool, and availability per type."""
    _check_mode(mode)
    t = model.tables
    x = np.asarray(x, dtype=float)
    y = t.counts.T @ x
    z = float(np.sum(y))
    if mode == MODE_INFINITE:
        a = model.require_a() if a is None else np.asarray(a, dtype=float)
        x_zero = a * z
    else:
        h = model.require_h()
        x_zero = h - np.array([float(np.sum(x[t.per_server[s]])) for s in range(model.num_servers)])
    avail = np.array([
        float(np.sum(np.clip(x_zero[t.zero_fits[i]], 0.0, None))) + float(np.sum(x[t.join_src[i]]))
        for i in range(model.num_types)
    ])
    return y, z, x_zero, avail


@dataclass
class FluidRates:
    """Per-edge arrival (v) and departure (w) rates, plus blocked rate per type."""

    v: np.ndarray
    w: np.ndarray
    blocked: np.ndarray


def _edge_source_values(model: PackingModel, x: np.ndarray, x_zero: np.ndarray) -> np.ndarray:
    t = model.tables
    src = np.where(t.edge_src >= 0, x[t.edge_src], np.clip(x_zero, 0.0, None)[t.edge_server])
    return src


def _rhs(model: PackingModel, x: np.ndarray, mode: str, a=None):
    t = model.tables
    x = np.asarray(x, dtype=float)
    y, z, x_zero, _ = derived_quantities(model, x, mode, a=a)
    src = _edge_source_values(model, x, x_zero)
    w = t.edge_count * model.mu[t.edge_type] * x[t.edge_cfg]
    v = np.zeros(t.num_edges)
    blocked = np.zeros(model.num_types)
    for i in range(model.num_types):
        edges = t.type_edges[i]
        # summing the same source values keeps sum(v) = lam_i to rounding
        avail_i = float(np.sum(src[edges]))
        if avail_i <= 0.0:
            if mode == MODE_INFINITE:
                raise DegenerateAvailabilityError(
                    f"no availability for customer type {i + 1} (x_(i) = {avail_i})")
            blocked[i] = model.lam[i]
            continue
        v[edges] = model.lam[i] * src[edges] / avail_i
    dx = np.zeros(t.num_configs)
    np.add.at(dx, t.edge_cfg, v - w)
    inner = t.edge_src >= 0
    np.add.at(dx, t.edge_src[inner], (w - v)[inner])
    return dx, FluidRates(v, w, blocked)


def fluid_rhs_infinite(model: PackingModel, x, a=None):
    """Time derivative of the state and the edge rates, infinite pools.

    Raises ``DegenerateAvailabilityError`` when some customer type has no
    available mass, which cannot happen on the demand polytope.
    """
    return _rhs(model, np.asarray(x, dtype=float), MODE_INFINITE, a=a)


def fluid_rhs_finite(model: PackingModel, x):
    """Time derivative and rates with finite pools; zero availability blocks."""
    return _rhs(model, np.asarray(x, dtype=float), MODE_FINITE)


def lyapunov_infinite(model: PackingModel, x, a=None) -> float:
    """sum_k x_k log[x_k c_k / (e a_s)] over nonzero configurations, 0 log 0 = 0."""
    t = model.tables
    a = model.require_a() if a is None else np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(x > 0.0, x * np.log(x * t.c_factorial / (math.e * a[t.server])), 0.0)
    return float(np.sum(terms))


def lyapunov_finite(model: PackingModel, x, x_zero=None) -> float:
    """sum over all configurations (idle ones included) of x_k log[x_k c_k / e].

    ``x_zero`` defaults to the pool remainders ``h_s - sum_{K^s} x_k``; pass
    it explicitly to treat the idle coordinates as free variables.
    """
    t = model.tables
    x = np.asarray(x, dtype=float)
    if x_zero is None:
        h = model.require_h()
        x_zero = h - np.array([float(np.sum(x[t.per_server[s]])) for s in range(model.num_servers)])
        if np.min(x_zero) < -1e-9:
            raise DomainError(f"pool occupancy exceeds h (idle mass {np.min(x_zero):.3g})")
        x_zero = np.clip(x_zero, 0.0, None)
    else:
        x_zero = np.asarray(x_zero, dtype=float)
    xbar = np.concatenate([x, x_zero])
    cbar = np.concatenate([t.c_factorial, np.ones(model.num_servers)])
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(xbar > 0.0, xbar * np.log(xbar * cbar / math.e), 0.0)
    return float(np.sum(terms))


def lyapunov(model: PackingModel, x, mode: str, a=None) -> float:
    _check_mode(mode)
    if mode == MODE_INFINITE:
        return lyapunov_infinite(model, x, a=a)
    return lyapunov_finite(model, x)


def drift_xi(model: PackingModel, x, mode: str, a=None, domain_tol: float = 1e-6) -> float:
    """Instantaneous rate of change of the mode's entropy function.

    Sum over unordered pairs of same-type edges of
    ``(mu_i / x_(i)) [log(k'_i x_{k-e_i} x_{k'}) - log(k_i x_k x_{k'-e_i})]
    [k_i x_k x_{k'-e_i} - k'_i x_{k-e_i} x_{k'}]``, each term nonpositive.
    Zero exactly at the product-form equilibrium.  Returns ``-inf`` when any
    configuration mass vanishes.  Infinite mode requires the state to lie on
    the demand polytope (idle mass is then ``a_s``); finite mode requires
    nonnegative idle pool mass.
    """
    _check_mode(mode)
    t = model.tables
    x = np.asarray(x, dtype=float)
    if float(np.min(x, initial=0.0)) < -1e-12:
        raise DomainError("negative configuration mass")
    x = np.clip(x, 0.0, None)
    y = t.counts.T @ x
    if mode == MODE_INFINITE:
        a = model.require_a() if a is None else np.asarray(a, dtype=float)
        if float(np.max(np.abs(y - model.rho))) > domain_tol:
            raise DomainError(
                f"state is off the demand polytope by {float(np.max(np.abs(y - model.rho))):.3g}")
        x_zero = a.astype(float)
    else:
        h = model.require_h()
        x_zero = h - np.array([float(np.sum(x[t.per_server[s]])) for s in range(model.num_servers)])
        if float(np.min(x_zero)) < -1e-12:
            raise DomainError("pool occupancy exceeds h")
        x_zero = np.clip(x_zero, 0.0, None)
        if float(np.min(x_zero)) == 0.0:
            return -math.inf
    if x.size and float(np.min(x)) == 0.0:
        return -math.inf

    src = _edge_source_values(model, x, x_zero)
    total = 0.0
    for i in range(model.num_types):
        edges = t.type_edges[i]
        if len(edges) == 0:
            continue
        avail_i = float(np.sum(src[edges]))
        alpha = t.edge_count[edges] * x[t.edge_cfg[edges]]  # k_i x_k per edge
        sigma = src[edges]                                  # x_{k-e_i} per edge
        M = np.outer(sigma, alpha)
        with np.errstate(divide="ignore"):
            logM = np.log(M)
        pair_terms = (logM - logM.T) * (M.T - M)
        # symmetric in the pair, so half the full double sum
        total += (model.mu[i] / avail_i) * 0.5 * float(np.sum(pair_terms))
    return total


def drift_or_nan(model: PackingModel, x, mode: str, a=None) -> float:
    """``drift_xi`` with domain errors mapped to NaN, for trajectory logging."""
    try:
        return drift_xi(model, x, mode, a=a)
    except DomainError:
        return math.nan


def detailed_balance_residual(model: PackingModel, x, mode: str, a=None) -> float:
    """Largest pair imbalance |k_i x_k x_{k'-e_i} - k'_i x_{k-e_i} x_{k'}|.

    Zero exactly when the state has the product form of its mode.
    """
    t = model.tables
    x = np.asarray(x, dtype=float)
    _, _, x_zero, _ = derived_quantities(model, x, mode, a=a)
    if mode == MODE_INFINITE:
        x_zero = (model.require_a() if a is None else np.asarray(a, dtype=float)).astype(float)
    src = _edge_source_values(model, x, x_zero)
    worst = 0.0
    for i in range(model.num_types):
        edges = t.type_edges[i]
        if len(edges) == 0:
            continue
        alpha = t.edge_count[edges] * x[t.edge_cfg[edges]]
        sigma = src[edges]
        M = np.outer(sigma, alpha)
        worst = max(worst, float(np.max(np.abs(M - M.T))))
    return worst


@dataclass
class Trajectory:
    """Sampled states of one integration run, with diagnostics per sample."""

    mode: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    lyapunov: np.ndarray
    drift: np.ndarray
    clip_total: float
    labels: list[str]

    def final_state(self) -> np.ndarray:
        return self.x[-1].copy()

    def to_csv(self, target, comments=()):
        columns = (["t"] + [f"x[{lab}]" for lab in self.labels]
                   + [f"y[{i + 1}]" for i in range(self.y.shape[1])] + ["z", "L", "Xi"])
        rows = [
            [self.t[j], *self.x[j], *self.y[j], self.z[j], self.lyapunov[j], self.drift[j]]
            for j in range(len(self.t))
        ]
        return write_csv(target, columns, rows, comments=comments)


def rk4_step(model: PackingModel, x: np.ndarray, dt: float, mode: str, a=None) -> np.ndarray:
    k1, _ = _rhs(model, x, mode, a=a)
    k2, _ = _rhs(model, x + 0.5 * dt * k1, mode, a=a)
    k3, _ = _rhs(model, x + 0.5 * dt * k2, mode, a=a)
    k4, _ = _rhs(model, x + dt * k3, mode, a=a)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(model: PackingModel, x0, mode: str, t_end: float, dt: float = 1e-3,
              a=None, clip_tol: float = 1e-6, sample_every: int = 1,
              record_drift: bool = True) -> Trajectory:
    """Classical fixed-step 4th-order integration of the fluid dynamics.

    Negative components produced by a step are clipped to zero; if the total
    clipped mass in one step exceeds ``clip_tol`` the run aborts with
    ``StepSizeError`` instead of silently drifting off the boundary.
    """
    _check_mode(mode)
    if dt <= 0 or t_end <= 0:
        raise FluidError("t_end and dt must be positive")
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (model.num_configs,):
        raise FluidError(f"x0 must have shape ({model.num_configs},)")
    if float(np.min(x, initial=0.0)) < 0.0:
        raise FluidError("x0 must be nonnegative")
    steps = max(1, int(round(t_end / dt)))

    ts, xs = [0.0], [x.copy()]
    clip_total = 0.0
    for step_idx in range(1, steps + 1):
        x_new = rk4_step(model, x, dt, mode, a=a)
        neg = x_new < 0.0
        clipped = float(-np.sum(x_new[neg])) if neg.any() else 0.0
        if clipped > clip_tol:
            raise StepSizeError(
                f"clipped {clipped:.3g} of mass at t = {step_idx * dt:.6g}; reduce dt")
        if neg.any():
            x_new[neg] = 0.0
        clip_total += clipped
        if mode == MODE_FINITE:
            h = model.require_h()
            t_ = model.tables
            for s in range(model.num_servers):
                excess = float(np.sum(x_new[t_.per_server[s]])) - h[s]
                if excess > clip_tol:
                    raise StepSizeError(
                        f"pool {s + 1} overfull by {excess:.3g} at t = {step_idx * dt:.6g}; reduce dt")
                if excess > 0.0:
                    x_new[t_.per_server[s]] *= h[s] / (h[s] + excess)
                    clip_total += excess
        x = x_new
        if step_idx % sample_every == 0 or step_idx == steps:
            ts.append(step_idx * dt)
            xs.append(x.copy())

    ts = np.array(ts)
    xs = np.array(xs)
    t = model.tables
    ys = xs @ t.counts.astype(float)
    zs = ys.sum(axis=1)
    lyap = np.array([lyapunov(model, xr, mode, a=a) for xr in xs])
    if record_drift:
        drift = np.array([drift_or_nan(model, xr, mode, a=a) for xr in xs])
    else:
        drift = np.full(len(ts), math.nan)
    return Trajectory(mode, ts, xs, ys, zs, lyap, drift, clip_total, t.labels)
