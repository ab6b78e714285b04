"""Seeded multi-run convergence studies.

Each study runs the simulator across a grid of scale parameters and seeds,
compares time-averaged states against the relevant solver target, and emits
one CSV with the targets embedded in its comment header so results are
auditable.  Runs are dispatched to a process pool when ``threads > 1`` and
merged in deterministic key order either way.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .csvio import fmt, write_csv
from .model import ModelError, PackingModel
from .optimize import (LpSolution, check_feasibility, solve_lp,
                       solve_product_form_finite, solve_product_form_infinite)
from .simulator import GRAND_AZ, GRAND_F, GRAND_ZP, RunStatistics, run_simulation


@dataclass
class ExperimentPlan:
    """Grid of simulation runs: scales, seeds, horizon and output location."""

    model: PackingModel
    r_values: tuple[int, ...]
    seeds: tuple[int, ...]
    horizon: float
    warmup: float | None = None
    batches: int = 20
    alphas: tuple[float, ...] = ()
    threads: int = 1
    out: str | None = None

    def __post_init__(self) -> None:
        self.r_values = tuple(int(r) for r in self.r_values)
        self.seeds = tuple(int(s) for s in self.seeds)
        if any(r2 <= r1 for r1, r2 in zip(self.r_values, self.r_values[1:])):
            raise ModelError("r values must be strictly increasing")
        if not self.r_values:
            raise ModelError("need at least one r value")
        if not self.seeds:
            raise ModelError("need at least one seed")


@dataclass
class StudyResult:
    columns: list[str]
    rows: list[list]
    comments: list[str]
    warnings: list[str] = field(default_factory=list)

    def to_csv(self, target=None) -> str:
        return write_csv(target, self.columns, self.rows,
                         comments=self.comments + [f"warning: {w}" for w in self.warnings])


def _run_one(args) -> tuple[tuple[int, int], RunStatistics]:
    model, policy, r, seed, horizon, warmup, batches = args
    return (r, seed), run_simulation(model, policy, r, horizon, warmup=warmup, seed=seed, batches=batches)


def _run_grid(plan: ExperimentPlan, policy: str) -> dict[tuple[int, int], RunStatistics]:
    jobs = [(plan.model, policy, r, seed, plan.horizon, plan.warmup, plan.batches)
            for r in plan.r_values for seed in plan.seeds]
    if plan.threads > 1:
        with ProcessPoolExecutor(max_workers=plan.threads) as pool:
            results = dict(pool.map(_run_one, jobs))
    else:
        results = dict(map(_run_one, jobs))
    return {key: results[key] for key in sorted(results)}


def _mean_stderr(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    stderr = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else math.nan
    return mean, stderr


def run_theorem1_study(plan: ExperimentPlan) -> StudyResult:
    """Distance of the time-averaged state to the infinite-pool equilibrium, per r."""
    target = solve_product_form_infinite(plan.model)
    results = _run_grid(plan, GRAND_AZ)
    columns = ["r", "mean_distance", "stderr"] + [f"distance_seed{s}" for s in plan.seeds]
    rows = []
    for r in plan.r_values:
        dists = [results[(r, s)].distance_to(target.x) for s in plan.seeds]
        mean, stderr = _mean_stderr(dists)
        rows.append([r, mean, stderr, *dists])
    comments = [
        "equilibrium-convergence study (grand-az)",
        f"model: {plan.model.describe()}",
        f"x_star: {' '.join(fmt(v) for v in target.x)}",
        f"horizon={plan.horizon} warmup={plan.warmup} batches={plan.batches} seeds={list(plan.seeds)}",
    ]
    return StudyResult(columns, rows, comments)


def run_conjecture1_study(plan: ExperimentPlan) -> StudyResult:
    """Distance of the time-averaged state to the LP-optimal face under grand-zp.

    Measured as (weighted cost minus the LP value) plus the absolute demand
    residual.  The trend is reported; non-monotonicity produces a warning,
    never a failure.
    """
    plan.model.require_p()
    lp = solve_lp(plan.model)
    t = plan.model.tables
    gamma_k = plan.model.gamma[t.server]
    results = _run_grid(plan, GRAND_ZP)
    columns = ["r", "mean_face_distance", "stderr", "mean_cost", "mean_demand_residual"]
    rows = []
    means = []
    for r in plan.r_values:
        dists, costs, resids = [], [], []
        for s in plan.seeds:
            stats = results[(r, s)]
            cost = float(np.dot(gamma_k, stats.xbar))
            resid = float(np.sum(np.abs(t.counts.T @ stats.xbar - plan.model.rho)))
            costs.append(cost)
            resids.append(resid)
            dists.append(max(cost - lp.value, 0.0) + resid)
        mean, stderr = _mean_stderr(dists)
        means.append(mean)
        rows.append([r, mean, stderr, float(np.mean(costs)), float(np.mean(resids))])
    warns = []
    if any(m2 >= m1 for m1, m2 in zip(means, means[1:])):
        warns.append("face distance is not monotone decreasing in r (conjecture-level claim)")
        warnings.warn(warns[-1], stacklevel=2)
    comments = [
        "optimal-face convergence study (grand-zp)",
        f"model: {plan.model.describe()}",
        f"lp_value: {fmt(lp.value)}",
        f"horizon={plan.horizon} warmup={plan.warmup} batches={plan.batches} seeds={list(plan.seeds)}",
    ]
    return StudyResult(columns, rows, comments, warns)


def run_conjecture2_study(plan: ExperimentPlan) -> StudyResult:
    """Blocking fractions, pull rate and equilibrium distance under grand-f.

    Refuses to run on a model whose load cannot be packed with idle pool
    slack, since blocking then cannot vanish.  Non-monotone blocking in r is
    a warning, not a failure.
    """
    feas = check_feasibility(plan.model)
    if not feas.ok:
        raise ModelError(f"blocking study refused: {feas.message}")
    target = solve_product_form_finite(plan.model)
    results = _run_grid(plan, GRAND_F)
    I = plan.model.num_types
    columns = ["r"]
    for i in range(I):
        columns += [f"blocking[{i + 1}]", f"blocking_stderr[{i + 1}]"]
    columns += ["pull_per_accept", "mean_distance", "distance_stderr"]
    rows = []
    mean_blockings = []
    for r in plan.r_values:
        stats_list = [results[(r, s)] for s in plan.seeds]
        row = [r]
        per_type = []
        for i in range(I):
            mean, stderr = _mean_stderr([st.blocking[i] for st in stats_list])
            per_type.append(mean)
            row += [mean, stderr]
        pull = float(np.mean([st.pull_per_accept for st in stats_list]))
        dist_mean, dist_stderr = _mean_stderr([st.distance_to(target.x) for st in stats_list])
        row += [pull, dist_mean, dist_stderr]
        rows.append(row)
        mean_blockings.append(float(np.mean(per_type)))
    warns = []
    if any(b2 > b1 + 1e-12 for b1, b2 in zip(mean_blockings, mean_blockings[1:])):
        warns.append("blocking is not monotone decreasing in r (conjecture-level claim)")
        warnings.warn(warns[-1], stacklevel=2)
    comments = [
        "blocking study (grand-f)",
        f"model: {plan.model.describe()}",
        f"x_star_finite: {' '.join(fmt(v) for v in target.x)}",
        f"a_equiv: {' '.join(fmt(v) for v in target.a_equiv)}",
        f"horizon={plan.horizon} warmup={plan.warmup} batches={plan.batches} seeds={list(plan.seeds)}",
    ]
    return StudyResult(columns, rows, comments, warns)
