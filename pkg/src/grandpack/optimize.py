"""Equilibria and optimal targets.

Two kinds of optimization live here.  The entropy-like objective over the
demand polytope is minimized by a damped Newton iteration on the dual
variables; its unique minimizer has a product form, with one multiplier per
customer type (plus one per server pool in the finite-pool variant).  The
weighted-server-count linear program is solved by a dense two-phase simplex
with Bland's rule, returning a primal vertex and the dual vector read off the
final basis.  A slow projected-gradient minimizer is included as an
independent cross-check of the Newton solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelError, PackingModel

KKT_TOL = 1e-9
NEWTON_TOL = 1e-10


class NonConvergenceError(RuntimeError):
    """Newton iteration failed to reach the residual tolerance."""


class InfeasibleModelError(ModelError):
    """No packing of the offered load leaves every pool with idle servers."""


@dataclass
class ProductFormSolution:
    """Equilibrium point with its multipliers.

    ``x`` is strictly positive over nonzero configurations in canonical
    order.  In finite mode ``x_zero`` holds the idle mass per pool, ``beta``
    the pool multipliers and ``a_equiv = exp(-beta)`` the zero-server
    parameters under which the infinite-pool solver reproduces ``x``.
    """

    mode: str
    x: np.ndarray
    nu: np.ndarray
    residual: float
    iterations: int
    a: np.ndarray | None = None
    beta: np.ndarray | None = None
    x_zero: np.ndarray | None = None
    a_equiv: np.ndarray | None = None

    def weighted_cost(self, model: PackingModel) -> float:
        return float(np.dot(model.gamma[model.tables.server], self.x))


@dataclass
class LpSolution:
    x: np.ndarray
    value: float
    eta: np.ndarray
    kkt: dict
    degenerate: bool

    @property
    def kkt_residual(self) -> float:
        return self.kkt["max"]


@dataclass
class FeasibilityResult:
    ok: bool
    slack: float
    x: np.ndarray | None
    message: str

    def __bool__(self) -> bool:
        return self.ok


def _product_form_x(model: PackingModel, a: np.ndarray, nu: np.ndarray) -> np.ndarray:
    t = model.tables
    with np.errstate(over="ignore"):  # oversized line-search trials are rejected by backtracking
        return (a[t.server] / t.c_factorial) * np.exp(t.counts @ nu)


def solve_product_form_infinite(model: PackingModel, a=None, tol: float = NEWTON_TOL,
                                max_iter: int = 200) -> ProductFormSolution:
    """Equilibrium of the infinite-pool system for zero-server parameters ``a``.

    Solves for multipliers ``nu`` such that x_k = (a_s / c_k) exp(k . nu)
    meets the demand constraints sum_k k_i x_k = rho_i, by damped Newton on
    the smooth convex dual.
    """
    t = model.tables
    a = model.require_a() if a is None else np.asarray(a, dtype=float).reshape(model.num_servers)
    if (a <= 0).any():
        raise ModelError("zero-server parameters must be strictly positive")
    rho = model.rho

    def dual_value(nu):
        return float(np.sum(_product_form_x(model, a, nu)) - np.dot(rho, nu))

    nu = np.zeros(model.num_types)
    phi = dual_value(nu)
    for it in range(1, max_iter + 1):
        x = _product_form_x(model, a, nu)
        grad = t.counts.T @ x - rho
        residual = float(np.max(np.abs(grad)))
        if residual < tol:
            return ProductFormSolution("infinite", x, nu, residual, it - 1, a=a.copy())
        hess = (t.counts * x[:, None]).T @ t.counts
        step = np.linalg.solve(hess, -grad)
        size = 1.0
        while size > 1e-14:
            trial = nu + size * step
            trial_phi = dual_value(trial)
            if trial_phi <= phi + 1e-4 * size * float(grad @ step):
                nu, phi = trial, trial_phi
                break
            size *= 0.5
        else:
            raise NonConvergenceError(f"line search stalled at residual {residual:.3e}")
    raise NonConvergenceError(f"no convergence after {max_iter} iterations, residual {residual:.3e}")


def solve_product_form_finite(model: PackingModel, tol: float = NEWTON_TOL,
                              max_iter: int = 200) -> ProductFormSolution:
    """Equilibrium of the finite-pool system (demand and pool constraints).

    Joint damped Newton over (nu, beta); x_k = (exp(-beta_s) / c_k) exp(k . nu)
    over all configurations including the zero ones, with
    sum_k k_i x_k = rho_i and per-pool mass h_s.  Requires a feasible model
    (some packing leaves every pool partly idle).
    """
    feas = check_feasibility(model)
    if not feas.ok:
        raise InfeasibleModelError(feas.message)
    t = model.tables
    h = model.require_h()
    rho = model.rho
    I, S = model.num_types, model.num_servers

    # u_k = (k, onehot_s) so that x_k = exp(u_k . theta - log c_k), theta = (nu, zeta)
    onehot = np.zeros((t.num_configs, S))
    onehot[np.arange(t.num_configs), t.server] = 1.0
    U = np.hstack([t.counts.astype(float), onehot])
    U_zero = np.hstack([np.zeros((S, I)), np.eye(S)])
    U_all = np.vstack([U, U_zero])
    logc_all = np.concatenate([np.log(t.c_factorial), np.zeros(S)])
    target = np.concatenate([rho, h])

    def all_x(theta):
        with np.errstate(over="ignore"):
            return np.exp(U_all @ theta - logc_all)

    def dual_value(theta):
        return float(np.sum(all_x(theta)) - np.dot(target, theta))

    # zeta chosen so each pool constraint already holds at nu = 0
    zeta0 = np.log(h) - np.log(np.array([1.0 + np.sum(1.0 / t.c_factorial[t.per_server[s]]) for s in range(S)]))
    theta = np.concatenate([np.zeros(I), zeta0])
    phi = dual_value(theta)
    for it in range(1, max_iter + 1):
        xs = all_x(theta)
        grad = U_all.T @ xs - target
        residual = float(np.max(np.abs(grad)))
        if residual < tol:
            nu, zeta = theta[:I], theta[I:]
            x = xs[: t.num_configs]
            x_zero = xs[t.num_configs:]
            beta = -zeta
            return ProductFormSolution("finite", x, nu, residual, it - 1,
                                       beta=beta, x_zero=x_zero, a_equiv=np.exp(-beta))
        hess = (U_all * xs[:, None]).T @ U_all
        step = np.linalg.solve(hess, -grad)
        size = 1.0
        while size > 1e-14:
            trial = theta + size * step
            trial_phi = dual_value(trial)
            if trial_phi <= phi + 1e-4 * size * float(grad @ step):
                theta, phi = trial, trial_phi
                break
            size *= 0.5
        else:
            raise NonConvergenceError(f"line search stalled at residual {residual:.3e}")
    raise NonConvergenceError(f"no convergence after {max_iter} iterations, residual {residual:.3e}")


# ---------------------------------------------------------------------------
# dense two-phase simplex


class SimplexError(RuntimeError):
    pass


@dataclass
class _SimplexResult:
    status: str  # "optimal" | "infeasible"
    x: np.ndarray | None = None
    value: float = math.nan
    dual: np.ndarray | None = None
    degenerate: bool = False
    infeasible_rows: tuple[int, ...] = ()


def _simplex(c, A, b, senses, pivot_tol: float = 1e-10, max_iter: int = 20000) -> _SimplexResult:
    """min c.x  s.t.  A x (senses) b,  x >= 0, senses per row in {'=', '>=', '<='}.

    Dense tableau, two phases, Bland's rule (smallest eligible index) for
    both entering and leaving variables, which precludes cycling.  The dual
    vector is recovered from the final basis by solving B^T y = c_B.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).copy()
    c = np.asarray(c, dtype=float)
    m, n = A.shape

    senses = list(senses)
    flip = np.ones(m)
    rows = A.copy()
    for r in range(m):
        if b[r] < 0:
            rows[r] *= -1.0
            b[r] *= -1.0
            flip[r] = -1.0
            if senses[r] == ">=":
                senses[r] = "<="
            elif senses[r] == "<=":
                senses[r] = ">="

    # append surplus/slack columns, then artificials
    extra_cols = []
    slack_basis = {}  # row -> column usable as initial basis
    for r, sense in enumerate(senses):
        if sense == ">=":
            col = np.zeros(m)
            col[r] = -1.0
            extra_cols.append(col)
        elif sense == "<=":
            col = np.zeros(m)
            col[r] = 1.0
            extra_cols.append(col)
            slack_basis[r] = n + len(extra_cols) - 1
        elif sense != "=":
            raise ValueError(f"unknown sense {sense!r}")
    A_work = np.hstack([rows] + ([np.column_stack(extra_cols)] if extra_cols else []))
    n_work = A_work.shape[1]

    art_rows = [r for r in range(m) if r not in slack_basis]
    art_cols = {}
    art_blocks = []
    for r in art_rows:
        col = np.zeros(m)
        col[r] = 1.0
        art_blocks.append(col)
        art_cols[r] = n_work + len(art_blocks) - 1
    A_aug = np.hstack([A_work] + ([np.column_stack(art_blocks)] if art_blocks else []))
    n_aug = A_aug.shape[1]
    artificial = np.zeros(n_aug, dtype=bool)
    for col in art_cols.values():
        artificial[col] = True

    T = np.hstack([A_aug, b[:, None]])
    basis = [slack_basis.get(r, art_cols.get(r)) for r in range(m)]

    def iterate(obj_row, banned):
        nonlocal T
        for _ in range(max_iter):
            reduced = obj_row[:-1]
            entering = -1
            for j in range(n_aug):
                if banned[j] or j in basis:
                    continue
                if reduced[j] < -pivot_tol:
                    entering = j
                    break
            if entering < 0:
                return obj_row
            best_ratio, leave = None, -1
            for r in range(m):
                coef = T[r, entering]
                if coef > pivot_tol:
                    ratio = T[r, -1] / coef
                    if best_ratio is None or ratio < best_ratio - 1e-12 or (
                            abs(ratio - best_ratio) <= 1e-12 and basis[r] < basis[leave]):
                        best_ratio, leave = ratio, r
            if leave < 0:
                raise SimplexError("linear program is unbounded")
            pivot = T[leave, entering]
            T[leave] /= pivot
            for r in range(m):
                if r != leave and T[r, entering] != 0.0:
                    T[r] -= T[r, entering] * T[leave]
            obj_row -= obj_row[entering] * T[leave]
            basis[leave] = entering
        raise SimplexError("simplex iteration limit exceeded")

    # phase 1: minimize the sum of artificials
    if art_rows:
        obj = np.zeros(n_aug + 1)
        obj[list(art_cols.values())] = 1.0
        for r, col in art_cols.items():
            obj -= T[r]  # canonicalize: basic columns must have zero reduced cost
        obj = iterate(obj, banned=np.zeros(n_aug, dtype=bool))
        if -obj[-1] > 1e-9:
            bad = tuple(sorted(r for r, col in art_cols.items() if col in basis and T[basis.index(col), -1] > 1e-9))
            return _SimplexResult("infeasible", infeasible_rows=bad)

    # phase 2: original objective, artificials banned from entering
    c_aug = np.zeros(n_aug)
    c_aug[:n] = c
    obj = np.concatenate([c_aug, [0.0]])
    for r in range(m):
        if obj[basis[r]] != 0.0:
            obj = obj - obj[basis[r]] * T[r]
    obj = iterate(obj, banned=artificial)

    x_full = np.zeros(n_aug)
    for r in range(m):
        x_full[basis[r]] = T[r, -1]
    x = x_full[:n]
    value = float(c @ x)

    B = A_aug[:, basis]
    cB = c_aug[basis]
    try:
        y = np.linalg.solve(B.T, cB)
    except np.linalg.LinAlgError:
        y, *_ = np.linalg.lstsq(B.T, cB, rcond=None)
    dual = y * flip
    degenerate = bool(np.any(np.abs(x_full[basis]) < 1e-12))
    return _SimplexResult("optimal", x=x, value=value, dual=dual, degenerate=degenerate)


def kkt_residuals(model: PackingModel, x: np.ndarray, eta: np.ndarray) -> dict:
    """Residuals of the optimality conditions for the weighted-cost LP.

    Primal feasibility (demand equalities, nonnegativity), dual feasibility
    (eta >= 0, per-configuration cost cover), and complementary slackness
    (strict cover slack forces x_k = 0).
    """
    t = model.tables
    gamma_k = model.gamma[t.server]
    cover = t.counts @ eta
    primal = max(float(np.max(np.abs(t.counts.T @ x - model.rho))), max(0.0, float(-np.min(x, initial=0.0))))
    eta_nonneg = max(0.0, float(-np.min(eta)))
    cover_violation = max(0.0, float(np.max(cover - gamma_k)))
    comp_slack = float(np.max(x * np.clip(gamma_k - cover, 0.0, None), initial=0.0))
    out = {
        "primal": primal,
        "eta_nonneg": eta_nonneg,
        "cover": cover_violation,
        "complementary_slackness": comp_slack,
    }
    out["max"] = max(out.values())
    return out


def solve_lp(model: PackingModel, senses: str = "=") -> LpSolution:
    """Weighted-server-count LP over the demand polytope.

    min sum_s gamma_s sum_{k in K^s} x_k subject to sum_k k_i x_k = rho_i
    (or >= rho_i with ``senses=">="``), x >= 0.  Returns one optimal vertex,
    the dual vector from the final simplex basis, and a report of the
    optimality-condition residuals at tolerance 1e-9.
    """
    t = model.tables
    A = t.counts.T.astype(float)
    c = model.gamma[t.server]
    result = _simplex(c, A, model.rho, [senses] * model.num_types)
    if result.status != "optimal":
        raise SimplexError(f"demand constraints unsatisfiable (rows {result.infeasible_rows})")
    kkt = kkt_residuals(model, result.x, result.dual)
    kkt["ok"] = kkt["max"] <= KKT_TOL
    kkt["degenerate"] = result.degenerate
    return LpSolution(result.x, result.value, result.dual, kkt, result.degenerate)


def check_feasibility(model: PackingModel) -> FeasibilityResult:
    """Can the offered load be packed with every pool keeping idle servers?

    Maximizes the smallest idle-pool mass min_s x_{0^s} over packings meeting
    the demand exactly within the pools; feasible iff the optimum is strictly
    positive (tolerance 1e-9).
    """
    t = model.tables
    h = model.require_h()
    n, I, S = t.num_configs, model.num_types, model.num_servers
    # variables: x (n), t_plus, t_minus
    A = np.zeros((I + S, n + 2))
    b = np.zeros(I + S)
    senses = []
    A[:I, :n] = t.counts.T
    b[:I] = model.rho
    senses += ["="] * I
    for s in range(S):
        A[I + s, t.per_server[s]] = 1.0
        A[I + s, n] = 1.0
        A[I + s, n + 1] = -1.0
        b[I + s] = h[s]
        senses.append("<=")
    c = np.zeros(n + 2)
    c[n], c[n + 1] = -1.0, 1.0  # maximize t = t_plus - t_minus
    result = _simplex(c, A, b, senses)
    if result.status != "optimal":
        return FeasibilityResult(False, -math.inf, None,
                                 "offered load cannot be packed into the pools at all "
                                 f"(unsatisfiable demand rows {tuple(r + 1 for r in result.infeasible_rows)})")
    slack = -result.value
    x = result.x[:n]
    if slack > KKT_TOL:
        return FeasibilityResult(True, slack, x, f"feasible with idle-pool slack {slack:.6g}")
    idle = np.array([h[s] - float(np.sum(x[t.per_server[s]])) for s in range(S)])
    binding = [s + 1 for s in range(S) if idle[s] <= slack + KKT_TOL]
    if slack < -KKT_TOL:
        return FeasibilityResult(False, slack, x,
                                 f"offered load does not fit within the pools: pool(s) {binding} "
                                 f"overflow by {-slack:.6g} in the least-loaded packing")
    return FeasibilityResult(False, slack, x,
                             f"every packing of the load fills pool(s) {binding} completely "
                             f"(best idle slack {slack:.3g})")


@dataclass
class AlphaSweepRow:
    alpha: float
    a: np.ndarray
    cost: float
    gap: float
    constraint_residual: float
    kkt_residual: float
    eta_hat: np.ndarray
    solution: ProductFormSolution


def alpha_sweep(model: PackingModel, alphas, lp: LpSolution | None = None) -> list[AlphaSweepRow]:
    """Equilibria for a_s = alpha^{gamma_s} along a decreasing alpha grid.

    For each alpha the weighted cost of the equilibrium, its gap to the LP
    optimum, and the LP optimality residuals of the scaled multipliers
    eta_hat = nu / (-log alpha) are reported.  The gap and the residuals
    shrink as alpha decreases toward zero.
    """
    alphas = [float(al) for al in alphas]
    if any(not 0.0 < al < 1.0 for al in alphas):
        raise ModelError("alpha values must lie in (0, 1)")
    if any(a2 >= a1 for a1, a2 in zip(alphas, alphas[1:])):
        raise ModelError("alpha values must be sorted strictly decreasing")
    if lp is None:
        lp = solve_lp(model)
    t = model.tables
    rows = []
    for alpha in alphas:
        a = alpha ** model.gamma
        sol = solve_product_form_infinite(model, a=a)
        cost = sol.weighted_cost(model)
        eta_hat = sol.nu / (-math.log(alpha))
        res = kkt_residuals(model, sol.x, eta_hat)
        constraint = float(np.max(np.abs(t.counts.T @ sol.x - model.rho)))
        rows.append(AlphaSweepRow(alpha, a, cost, cost - lp.value, constraint, res["max"], eta_hat, sol))
    return rows


# ---------------------------------------------------------------------------
# independent reference minimizer


def interior_feasible_point(model: PackingModel, mode: str) -> np.ndarray:
    """A strictly feasible point of the demand polytope (and pools, finite mode).

    Solves the max-min-coordinate LP, so the result is bounded away from
    every boundary; it does not use the product form in any way.
    """
    t = model.tables
    n, I, S = t.num_configs, model.num_types, model.num_servers
    fin = mode == "fin"
    ncols = n + 1
    rows, rhs, senses = [], [], []
    for i in range(I):
        row = np.zeros(ncols)
        row[:n] = t.counts[:, i]
        rows.append(row)
        rhs.append(model.rho[i])
        senses.append("=")
    for k in range(n):
        row = np.zeros(ncols)
        row[k] = 1.0
        row[n] = -1.0
        rows.append(row)
        rhs.append(0.0)
        senses.append(">=")
    if fin:
        h = model.require_h()
        for s in range(S):
            row = np.zeros(ncols)
            row[t.per_server[s]] = 1.0
            row[n] = 1.0
            rows.append(row)
            rhs.append(h[s])
            senses.append("<=")
    c = np.zeros(ncols)
    c[n] = -1.0
    result = _simplex(c, np.array(rows), np.array(rhs), senses)
    if result.status != "optimal" or -result.value <= 0.0:
        raise InfeasibleModelError("no strictly interior feasible point exists")
    return result.x[:n]


def projected_gradient_reference(model: PackingModel, mode: str, a=None,
                                 tol: float = 1e-10, max_iter: int = 200_000) -> np.ndarray:
    """Slow reference minimizer of the entropy objective, for cross-checks.

    Projected gradient descent on the demand-constraint affine subspace with
    Barzilai-Borwein step sizes, positivity kept by backtracking.  The path
    is entirely independent of the Newton/product-form solvers.
    """
    t = model.tables
    n = t.num_configs
    C = t.counts.T.astype(float)
    # orthogonal projector onto the null space of the demand constraints
    _, sv, Vt = np.linalg.svd(C, full_matrices=True)
    rank = int(np.sum(sv > 1e-12 * max(1.0, sv[0])))
    N = Vt[rank:].T
    proj = N @ N.T

    fin = mode == "fin"
    if fin:
        h = model.require_h()
    else:
        a = model.require_a() if a is None else np.asarray(a, dtype=float).reshape(model.num_servers)

    def pool_idle(x):
        return np.array([h[s] - float(np.sum(x[t.per_server[s]])) for s in range(model.num_servers)])

    def objective(x):
        if fin:
            x0 = pool_idle(x)
            return float(np.sum(x * np.log(x * t.c_factorial / math.e)) + np.sum(x0 * np.log(x0 / math.e)))
        return float(np.sum(x * np.log(x * t.c_factorial / (math.e * a[t.server]))))

    def gradient(x):
        g = np.log(x * t.c_factorial)
        if fin:
            x0 = pool_idle(x)
            g -= np.log(x0)[t.server]
        else:
            g -= np.log(a)[t.server]
        return g

    x = interior_feasible_point(model, mode)
    g = proj @ gradient(x)
    step = 1e-2
    f = objective(x)
    prev_x, prev_g = None, None
    for _ in range(max_iter):
        gnorm = float(np.max(np.abs(g)))
        if gnorm < tol:
            break
        d = -g
        # keep x (and pool idle mass) strictly positive along the step
        limit = np.inf
        neg = d < 0
        if neg.any():
            limit = min(limit, float(np.min(x[neg] / -d[neg])) * 0.99)
        if fin:
            x0 = pool_idle(x)
            for s in range(model.num_servers):
                drop = float(np.sum(d[t.per_server[s]]))
                if drop > 0:
                    limit = min(limit, 0.99 * x0[s] / drop)
        size = min(step, limit)
        while size > 1e-18:
            trial = x + size * d
            ft = objective(trial)
            if ft <= f - 1e-4 * size * float(g @ g):
                break
            size *= 0.5
        else:
            break
        prev_x, prev_g = x, g
        x, f = trial, ft
        g = proj @ gradient(x)
        dx = x - prev_x
        dg = g - prev_g
        denom = float(dx @ dg)
        step = float(dx @ dx) / denom if denom > 1e-18 else 1e-2
        step = min(max(step, 1e-8), 1e3)
    return x
