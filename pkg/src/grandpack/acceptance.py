"""Acceptance suites: fixed-seed, fixed-tolerance checks of the whole stack.

Each criterion returns a ``CriterionResult``; ``run_acceptance`` executes a
named suite and reports one pass/fail line per criterion.  The same functions
back the pytest acceptance module, so the CLI and the test suite agree by
construction.  All expected values come from independent oracles: closed
forms, the Erlang recursion, finite differences, or the reference
projected-gradient minimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import fluid, sampling
from .model import ConfigurationSet, Configuration, PackingModel, generate_vector_packing
from .optimize import (alpha_sweep, projected_gradient_reference, solve_lp,
                       solve_product_form_finite, solve_product_form_infinite)
from .simulator import GRAND_AZ, GRAND_F, run_simulation
from .studies import ExperimentPlan, run_conjecture1_study, run_conjecture2_study


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} criterion {self.number:>2} ({self.name}): {self.detail}"


# -- acceptance models ------------------------------------------------------


@lru_cache(maxsize=None)
def capacity3_model() -> PackingModel:
    """Two customer types in capacity-3 servers (requirements 2 and 1)."""
    cs = generate_vector_packing([[3.0]], [[2.0], [1.0]])
    return PackingModel(cs, lam=[0.5, 0.5], mu=[1.0, 1.0], a=[0.2], h=[0.8], p=0.9)


@lru_cache(maxsize=None)
def two_server_model() -> PackingModel:
    """One customer type; cheap single-slot servers vs heavy two-slot servers."""
    cs = ConfigurationSet(1, 2, [
        Configuration(0, (1,)),
        Configuration(1, (1,)),
        Configuration(1, (2,)),
    ])
    return PackingModel(cs, lam=[1.0], mu=[1.0], gamma=[1.0, 3.0], a=[0.1, 0.001])


@lru_cache(maxsize=None)
def erlang_model() -> PackingModel:
    """Single-slot single-type loss system; with r=5 the pools hold 10 servers."""
    cs = ConfigurationSet.from_counts(1, {0: [(1,)]})
    return PackingModel(cs, lam=[1.0], mu=[1.0], h=[2.0])


def erlang_blocking(servers: int, offered_load: float) -> float:
    """Blocking probability of the classic loss system, by the stable recursion."""
    b = 1.0
    for n in range(1, servers + 1):
        b = offered_load * b / (n + offered_load * b)
    return b


@lru_cache(maxsize=None)
def _erlang_stats():
    return run_simulation(erlang_model(), GRAND_F, r=5, horizon=20_000.0, warmup=2_000.0,
                          seed=7, batches=20)


@lru_cache(maxsize=None)
def _capacity3_equilibria():
    model = capacity3_model()
    return solve_product_form_infinite(model), solve_product_form_finite(model)


# -- criteria ---------------------------------------------------------------


def criterion_poisson_marginals() -> CriterionResult:
    model = capacity3_model()
    stats = run_simulation(model, GRAND_AZ, r=50, horizon=2_000.0, warmup=400.0, seed=1)
    target = model.rho * 50
    mean_ok = np.all(np.abs(stats.y_mean - target) <= 3.0 * stats.y_stderr)
    ratios = stats.y_var / stats.y_mean
    ratio_ok = np.all((0.9 <= ratios) & (ratios <= 1.1))
    detail = (f"y_mean={np.round(stats.y_mean, 3)} target={target} "
              f"3*stderr={np.round(3 * stats.y_stderr, 3)} var/mean={np.round(ratios, 4)}")
    return CriterionResult(1, "poisson marginals", bool(mean_ok and ratio_ok), detail)


def criterion_erlang_blocking() -> CriterionResult:
    stats = _erlang_stats()
    oracle = erlang_blocking(10, 5.0)
    half_width = 1.96 * float(stats.blocking_stderr[0])
    diff = abs(float(stats.blocking[0]) - oracle)
    passed = diff <= half_width
    detail = (f"blocking={float(stats.blocking[0]):.6f} oracle={oracle:.6f} "
              f"|diff|={diff:.2e} <= 1.96*stderr={half_width:.2e}: {passed}")
    return CriterionResult(2, "loss-system blocking oracle", passed, detail)


def criterion_scaling_convergence() -> CriterionResult:
    model = capacity3_model()
    target, _ = _capacity3_equilibria()
    r_values = (50, 100, 200)
    means = []
    for r in r_values:
        dists = [run_simulation(model, GRAND_AZ, r=r, horizon=500.0, warmup=100.0,
                                seed=s, batches=10).distance_to(target.x)
                 for s in range(1, 6)]
        means.append(float(np.mean(dists)))
    decreasing = all(m2 < m1 for m1, m2 in zip(means, means[1:]))
    small = means[-1] < 0.05
    detail = f"mean distances over 5 seeds at r={r_values}: {np.round(means, 5)}"
    return CriterionResult(3, "equilibrium distance shrinks with scale", decreasing and small, detail)


def criterion_cost_gap_sweep() -> CriterionResult:
    model = two_server_model()
    rows = alpha_sweep(model, [1e-1, 1e-2, 1e-3, 1e-4])
    gaps = [row.gap for row in rows]
    kkts = [row.kkt_residual for row in rows]
    gaps_ok = all(g2 < g1 for g1, g2 in zip(gaps, gaps[1:]))
    kkt_ok = all(k2 < k1 for k1, k2 in zip(kkts, kkts[1:]))
    detail = f"gaps={np.round(gaps, 6)} kkt_residuals={np.round(kkts, 6)}"
    return CriterionResult(4, "cost gap and dual residual shrink with alpha", gaps_ok and kkt_ok, detail)


def criterion_fluid_exactness() -> CriterionResult:
    model = capacity3_model()
    inf_eq, fin_eq = _capacity3_equilibria()
    t = model.tables
    worst = 0.0
    for mode, eq in ((fluid.MODE_INFINITE, inf_eq), (fluid.MODE_FINITE, fin_eq)):
        x0 = 0.7 * eq.x
        traj = fluid.integrate(model, x0, mode, t_end=10.0, dt=1e-3, record_drift=False)
        y0 = t.counts.T @ x0
        closed = model.rho[None, :] + (y0 - model.rho)[None, :] * np.exp(-np.outer(traj.t, model.mu))
        worst = max(worst, float(np.max(np.abs(traj.y - closed))))
    passed = worst < 1e-6
    return CriterionResult(5, "per-type totals match the closed form", passed,
                           f"max |y(t) - closed form| = {worst:.2e} < 1e-6 (dt=1e-3, both modes)")


def criterion_descent_suite() -> CriterionResult:
    model = capacity3_model()
    inf_eq, fin_eq = _capacity3_equilibria()
    checks = []

    # (a) the entropy function never increases along interior trajectories
    starts = sampling.interior_samples(model, fluid.MODE_INFINITE, 10, seed=11)
    worst_rise = -math.inf
    for x0 in starts:
        traj = fluid.integrate(model, x0, fluid.MODE_INFINITE, t_end=5.0, dt=1e-3, record_drift=False)
        worst_rise = max(worst_rise, float(np.max(np.diff(traj.lyapunov))))
    checks.append(("monotone", worst_rise <= 1e-8, f"max per-step rise {worst_rise:.2e}"))

    # (b) the drift is nonpositive across random interior states
    worst_drift = -math.inf
    for x in sampling.interior_samples(model, fluid.MODE_INFINITE, 1000, seed=13):
        worst_drift = max(worst_drift, fluid.drift_xi(model, x, fluid.MODE_INFINITE))
    for x in sampling.interior_samples(model, fluid.MODE_FINITE, 1000, seed=17):
        worst_drift = max(worst_drift, fluid.drift_xi(model, x, fluid.MODE_FINITE))
    checks.append(("nonpositive", worst_drift <= 1e-12, f"max drift {worst_drift:.2e}"))

    # (c) the drift vanishes at both equilibria
    at_inf = abs(fluid.drift_xi(model, inf_eq.x, fluid.MODE_INFINITE))
    at_fin = abs(fluid.drift_xi(model, fin_eq.x, fluid.MODE_FINITE))
    checks.append(("zero at x*", at_inf < 1e-9 and at_fin < 1e-9,
                   f"|Xi(x*)|={at_inf:.1e}/{at_fin:.1e}"))

    # (d) finite differences of L along the flow reproduce the drift
    x0 = sampling.interior_samples(model, fluid.MODE_INFINITE, 1, seed=19)[0]
    delta = 1e-5
    worst_rel = 0.0
    x_t = x0
    for _ in range(3):
        x_t = fluid.integrate(model, x_t, fluid.MODE_INFINITE, t_end=0.25, dt=1e-3,
                              record_drift=False).final_state()
        l0 = fluid.lyapunov_infinite(model, x_t)
        x_next = fluid.rk4_step(model, x_t, delta, fluid.MODE_INFINITE)
        fd = (fluid.lyapunov_infinite(model, x_next) - l0) / delta
        xi = fluid.drift_xi(model, x_t, fluid.MODE_INFINITE)
        worst_rel = max(worst_rel, abs(fd - xi) / abs(xi))
    checks.append(("chain rule", worst_rel < 1e-3, f"max rel err {worst_rel:.2e}"))

    passed = all(ok for _, ok, _ in checks)
    detail = "; ".join(f"{name}: {'ok' if ok else 'FAIL'} ({info})" for name, ok, info in checks)
    return CriterionResult(6, "entropy descent suite", passed, detail)


def criterion_solver_agreement() -> CriterionResult:
    checks = []
    for model in (capacity3_model(), two_server_model()):
        inf_sol = solve_product_form_infinite(model)
        oracle = projected_gradient_reference(model, fluid.MODE_INFINITE)
        gap = float(np.max(np.abs(inf_sol.x - oracle)))
        checks.append(("inf residual", inf_sol.residual < 1e-10, f"{inf_sol.residual:.1e}"))
        checks.append(("inf oracle", gap < 1e-6, f"{gap:.1e}"))
    model = capacity3_model()
    fin_sol = solve_product_form_finite(model)
    oracle_fin = projected_gradient_reference(model, fluid.MODE_FINITE)
    gap_fin = float(np.max(np.abs(fin_sol.x - oracle_fin)))
    checks.append(("fin residual", fin_sol.residual < 1e-10, f"{fin_sol.residual:.1e}"))
    checks.append(("fin oracle", gap_fin < 1e-6, f"{gap_fin:.1e}"))
    back = solve_product_form_infinite(model, a=fin_sol.a_equiv)
    consistency = float(np.max(np.abs(back.x - fin_sol.x)))
    checks.append(("a = exp(-beta) consistency", consistency < 1e-8, f"{consistency:.1e}"))
    passed = all(ok for _, ok, _ in checks)
    detail = "; ".join(f"{name}: {'ok' if ok else 'FAIL'} ({info})" for name, ok, info in checks)
    return CriterionResult(7, "product-form solvers vs oracles", passed, detail)


def criterion_local_stability() -> CriterionResult:
    model = capacity3_model()
    _, fin_eq = _capacity3_equilibria()
    worst = 0.0
    for j in range(20):
        x0 = sampling.perturbed_start(model, fluid.MODE_FINITE, 0.05, seed=100 + j)
        traj = fluid.integrate(model, x0, fluid.MODE_FINITE, t_end=50.0, dt=1e-2,
                               record_drift=False, sample_every=100)
        worst = max(worst, float(np.linalg.norm(traj.final_state() - fin_eq.x)))
    passed = worst < 1e-4
    return CriterionResult(8, "local stability of the no-blocking equilibrium", passed,
                           f"max ||x(50) - x*|| over 20 perturbations = {worst:.2e} < 1e-4")


def criterion_pull_rate() -> CriterionResult:
    stats = _erlang_stats()
    rate = stats.pull_per_accept
    passed = 1.99 <= rate <= 2.01
    return CriterionResult(9, "two pull messages per accepted customer", passed,
                           f"messages per accepted customer = {rate:.5f}")


def criterion_trend_studies() -> CriterionResult:
    model = capacity3_model()
    plan = ExperimentPlan(model, r_values=(50, 100, 200), seeds=(1, 2, 3),
                          horizon=500.0, warmup=100.0, batches=10)
    c1 = run_conjecture1_study(plan)
    c2 = run_conjecture2_study(plan)
    csv1 = c1.to_csv()
    csv2 = c2.to_csv()
    completed = bool(csv1.strip()) and bool(csv2.strip()) and len(c1.rows) == 3 and len(c2.rows) == 3
    notes = []
    blocking_means = [float(np.mean([row[1], row[3]])) for row in c2.rows]
    notes.append(f"blocking means by r: {np.round(blocking_means, 6)}")
    for warn in c1.warnings + c2.warnings:
        notes.append(f"warning: {warn}")
    return CriterionResult(10, "conjecture trend studies complete", completed, "; ".join(notes))


CRITERIA = (
    criterion_poisson_marginals,
    criterion_erlang_blocking,
    criterion_scaling_convergence,
    criterion_cost_gap_sweep,
    criterion_fluid_exactness,
    criterion_descent_suite,
    criterion_solver_agreement,
    criterion_local_stability,
    criterion_pull_rate,
    criterion_trend_studies,
)

SUITES = {
    "poisson": (1,),
    "erlang": (2,),
    "t1": (3,),
    "t2": (4,),
    "fluid": (5,),
    "lyapunov": (6,),
    "solvers": (7,),
    "stability": (8,),
    "pull": (9,),
    "conjectures": (10,),
    "all": tuple(range(1, 11)),
}


def run_acceptance(suite: str, printer=print) -> list[CriterionResult]:
    """Run one named suite; prints one line per criterion and returns results."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose one of {sorted(SUITES)}")
    results = []
    for number in SUITES[suite]:
        result = CRITERIA[number - 1]()
        results.append(result)
        if printer is not None:
            printer(result.line())
    return results
