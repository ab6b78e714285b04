"""Random feasible states for perturbation and verification experiments.

Interior samples move from the mode's equilibrium along directions in the
null space of the demand constraints, backtracked to keep every coordinate
(and, with finite pools, every idle pool mass) strictly positive.  The
finite-pool stability experiments instead perturb in the full coordinate
space and retract into the pool polytope (clip at zero, rescale overfull
pools).
"""

from __future__ import annotations

import numpy as np

from .fluid import MODE_FINITE, MODE_INFINITE, _check_mode
from .model import PackingModel
from .optimize import solve_product_form_finite, solve_product_form_infinite


def equilibrium(model: PackingModel, mode: str, a=None) -> np.ndarray:
    _check_mode(mode)
    if mode == MODE_INFINITE:
        return solve_product_form_infinite(model, a=a).x
    return solve_product_form_finite(model).x


def demand_null_basis(model: PackingModel) -> np.ndarray:
    """Orthonormal basis of directions that keep every per-type total fixed."""
    C = model.tables.counts.T.astype(float)
    _, sv, Vt = np.linalg.svd(C, full_matrices=True)
    rank = int(np.sum(sv > 1e-12 * max(1.0, float(sv[0]) if len(sv) else 1.0)))
    return Vt[rank:].T


def _max_step(model: PackingModel, mode: str, x_star: np.ndarray, direction: np.ndarray,
              margin: float) -> float:
    t = model.tables
    limit = np.inf
    neg = direction < 0
    if neg.any():
        limit = min(limit, float(np.min((1.0 - margin) * x_star[neg] / -direction[neg])))
    if mode == MODE_FINITE:
        h = model.require_h()
        for s in range(model.num_servers):
            idle = h[s] - float(np.sum(x_star[t.per_server[s]]))
            drop = float(np.sum(direction[t.per_server[s]]))
            if drop > 0:
                limit = min(limit, (1.0 - margin) * idle / drop)
    return limit


def interior_samples(model: PackingModel, mode: str, count: int, seed: int,
                     a=None, margin: float = 0.02) -> np.ndarray:
    """``count`` strictly interior states meeting the demand constraints exactly."""
    x_star = equilibrium(model, mode, a=a)
    basis = demand_null_basis(model)
    rng = np.random.default_rng(seed)
    out = np.empty((count, model.num_configs))
    for j in range(count):
        direction = basis @ rng.standard_normal(basis.shape[1])
        norm = float(np.linalg.norm(direction))
        if norm < 1e-15:
            out[j] = x_star
            continue
        direction /= norm
        theta = _max_step(model, mode, x_star, direction, margin)
        out[j] = x_star + float(rng.uniform(0.05, 0.95)) * theta * direction
    return out


def perturbed_start(model: PackingModel, mode: str, eps_rel: float, seed: int, a=None) -> np.ndarray:
    """Equilibrium plus a random perturbation of relative norm ``eps_rel``.

    Infinite mode perturbs within the demand polytope (so the perturbed state
    still carries the exact offered load).  Finite mode perturbs in the full
    coordinate space and retracts into the pool polytope: negative
    coordinates are clipped and overfull pools rescaled.
    """
    _check_mode(mode)
    x_star = equilibrium(model, mode, a=a)
    rng = np.random.default_rng(seed)
    scale = eps_rel * float(np.linalg.norm(x_star))
    if mode == MODE_INFINITE:
        basis = demand_null_basis(model)
        direction = basis @ rng.standard_normal(basis.shape[1])
        direction /= float(np.linalg.norm(direction))
        theta = min(scale, 0.95 * _max_step(model, mode, x_star, direction, 0.0))
        return x_star + theta * direction
    direction = rng.standard_normal(model.num_configs)
    direction /= float(np.linalg.norm(direction))
    x = np.clip(x_star + scale * direction, 0.0, None)
    t = model.tables
    h = model.require_h()
    for s in range(model.num_servers):
        used = float(np.sum(x[t.per_server[s]]))
        if used > h[s]:
            x[t.per_server[s]] *= h[s] / used
    return x
