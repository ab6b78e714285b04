"""Command-line interface.

Subcommands: validate, simulate, fluid, solve, study-t1, study-c1, study-c2,
accept.  Every command reads a model definition file (see the README for the
grammar) and emits CSV; outputs are bit-reproducible from the inputs and the
seeds.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import fluid as fluid_mod
from . import sampling
from .acceptance import SUITES, run_acceptance
from .csvio import fmt, write_csv
from .model import ModelError, load_model, validate_monotone
from .optimize import alpha_sweep, check_feasibility, solve_lp, solve_product_form_finite, solve_product_form_infinite
from .simulator import POLICIES, run_simulation
from .studies import ExperimentPlan, run_conjecture1_study, run_conjecture2_study, run_theorem1_study


def _common_flags(sub: argparse.ArgumentParser, model: bool = True) -> None:
    if model:
        sub.add_argument("--model", required=True, help="model definition file")
    sub.add_argument("--out", default=None, help="output CSV path (default: stdout)")
    sub.add_argument("--seed", type=int, default=0, help="base random seed")
    sub.add_argument("--threads", type=int, default=1, help="worker processes for study runs")


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        from pathlib import Path

        Path(out).write_text(text, encoding="utf-8")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.replace(",", " ").split())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grandpack",
                                     description="heterogeneous packing-system toolkit")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("validate", help="check a model file and print a summary")
    _common_flags(p)

    p = subs.add_parser("simulate", help="one simulation run, CSV of time-averaged state")
    _common_flags(p)
    p.add_argument("--policy", required=True, choices=POLICIES)
    p.add_argument("--r", type=int, required=True, help="scale parameter")
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--warmup", type=float, default=None, help="default: 20%% of horizon")
    p.add_argument("--batches", type=int, default=20)

    p = subs.add_parser("fluid", help="integrate the fluid dynamics, CSV trajectory")
    _common_flags(p)
    p.add_argument("--mode", required=True, choices=(fluid_mod.MODE_INFINITE, fluid_mod.MODE_FINITE))
    p.add_argument("--x0", default="equilibrium",
                   help="'equilibrium', 'perturbed:<eps>:<seed>', or a CSV file from a previous run")
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--dt", type=float, default=1e-3)

    p = subs.add_parser("solve", help="equilibria, LP targets, feasibility, alpha sweep")
    _common_flags(p)
    p.add_argument("--what", required=True,
                   choices=("product-inf", "product-fin", "lp", "feasibility", "alpha-sweep"))
    p.add_argument("--alphas", default="1e-1 1e-2 1e-3 1e-4",
                   help="decreasing alpha grid for the sweep")

    for name, help_text in (
        ("study-t1", "equilibrium-convergence study across scales (grand-az)"),
        ("study-c1", "LP-face convergence study (grand-zp)"),
        ("study-c2", "blocking study (grand-f)"),
    ):
        p = subs.add_parser(name, help=help_text)
        _common_flags(p)
        p.add_argument("--r", default="50 100 200", help="strictly increasing scale list")
        p.add_argument("--seeds", default="1 2 3 4 5", help="seed list")
        p.add_argument("--horizon", type=float, default=500.0)
        p.add_argument("--warmup", type=float, default=None)
        p.add_argument("--batches", type=int, default=20)

    p = subs.add_parser("accept", help="run an acceptance suite")
    p.add_argument("suite", help=f"one of {sorted(SUITES)}")
    p.add_argument("--out", default=None, help="also write a CSV report")
    return parser


def _cmd_validate(args) -> int:
    model = load_model(args.model)
    report = validate_monotone(model.config_set)
    print(f"ok: {model.describe()}")
    print(f"monotone: {report.describe()}")
    print(f"configurations: {', '.join(model.config_set.labels())}")
    return 0


def _cmd_simulate(args) -> int:
    model = load_model(args.model)
    stats = run_simulation(model, args.policy, args.r, args.horizon,
                           warmup=args.warmup, seed=args.seed, batches=args.batches)
    text = stats.to_csv(comments=[f"model: {model.describe()}"])
    _emit(text, args.out)
    return 0


def _parse_x0(model, mode: str, spec: str) -> np.ndarray:
    if spec == "equilibrium":
        return sampling.equilibrium(model, mode)
    if spec.startswith("perturbed:"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ModelError("expected perturbed:<eps>:<seed>")
        return sampling.perturbed_start(model, mode, float(parts[1]), int(parts[2]))
    import csv as _csv
    from pathlib import Path

    labels = model.config_set.labels()
    with Path(spec).open(encoding="utf-8") as fh:
        rows = [row for row in _csv.reader(line for line in fh if not line.startswith("#")) if row]
    header, first = rows[0], rows[1]
    wanted = [f"x[{lab}]" for lab in labels]
    try:
        return np.array([float(first[header.index(name)]) for name in wanted])
    except ValueError:
        raise ModelError(f"CSV {spec} does not carry columns {wanted}") from None


def _cmd_fluid(args) -> int:
    model = load_model(args.model)
    x0 = _parse_x0(model, args.mode, args.x0)
    steps = max(1, int(round(args.t_end / args.dt)))
    stride = max(1, steps // 10_000)
    traj = fluid_mod.integrate(model, x0, args.mode, args.t_end, dt=args.dt, sample_every=stride)
    text = traj.to_csv(None, comments=[f"model: {model.describe()}",
                                       f"mode={args.mode} t_end={args.t_end} dt={args.dt} x0={args.x0}"])
    _emit(text, args.out)
    return 0


def _cmd_solve(args) -> int:
    model = load_model(args.model)
    labels = model.config_set.labels()
    if args.what == "product-inf":
        sol = solve_product_form_infinite(model)
        rows = [[f"x[{lab}]", sol.x[k]] for k, lab in enumerate(labels)]
        rows += [[f"nu[{i + 1}]", sol.nu[i]] for i in range(model.num_types)]
        rows += [["residual", sol.residual], ["weighted_cost", sol.weighted_cost(model)]]
        text = write_csv(None, ["name", "value"], rows, comments=[f"model: {model.describe()}"])
    elif args.what == "product-fin":
        sol = solve_product_form_finite(model)
        rows = [[f"x[{lab}]", sol.x[k]] for k, lab in enumerate(labels)]
        rows += [[f"x_zero[{s + 1}]", sol.x_zero[s]] for s in range(model.num_servers)]
        rows += [[f"nu[{i + 1}]", sol.nu[i]] for i in range(model.num_types)]
        rows += [[f"beta[{s + 1}]", sol.beta[s]] for s in range(model.num_servers)]
        rows += [[f"a_equiv[{s + 1}]", sol.a_equiv[s]] for s in range(model.num_servers)]
        rows += [["residual", sol.residual]]
        text = write_csv(None, ["name", "value"], rows, comments=[f"model: {model.describe()}"])
    elif args.what == "lp":
        lp = solve_lp(model)
        rows = [[f"x[{lab}]", lp.x[k]] for k, lab in enumerate(labels)]
        rows += [[f"eta[{i + 1}]", lp.eta[i]] for i in range(model.num_types)]
        rows += [["value", lp.value], ["kkt_residual", lp.kkt_residual]]
        text = write_csv(None, ["name", "value"], rows, comments=[f"model: {model.describe()}"])
    elif args.what == "feasibility":
        feas = check_feasibility(model)
        rows = [["ok", int(feas.ok)], ["slack", feas.slack], ["message", feas.message]]
        text = write_csv(None, ["name", "value"], rows, comments=[f"model: {model.describe()}"])
        if not feas.ok:
            _emit(text, args.out)
            return 1
    else:
        lp = solve_lp(model)
        rows_out = []
        for row in alpha_sweep(model, _float_list(args.alphas), lp=lp):
            rows_out.append([row.alpha, row.cost, row.gap, row.constraint_residual, row.kkt_residual,
                             *row.eta_hat, *row.solution.x])
        columns = (["alpha", "weighted_cost", "gap_to_lp", "constraint_residual", "kkt_residual"]
                   + [f"eta_hat[{i + 1}]" for i in range(model.num_types)]
                   + [f"x[{lab}]" for lab in labels])
        text = write_csv(None, columns, rows_out,
                         comments=[f"model: {model.describe()}", f"lp_value: {fmt(lp.value)}"])
    _emit(text, args.out)
    return 0


def _cmd_study(args, runner) -> int:
    model = load_model(args.model)
    plan = ExperimentPlan(model, r_values=_int_list(args.r), seeds=_int_list(args.seeds),
                          horizon=args.horizon, warmup=args.warmup, batches=args.batches,
                          threads=args.threads)
    result = runner(plan)
    _emit(result.to_csv(), args.out)
    return 0


def _cmd_accept(args) -> int:
    try:
        results = run_acceptance(args.suite)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        write_csv(args.out, ["criterion", "name", "status", "detail"],
                  [[r.number, r.name, "PASS" if r.passed else "FAIL", r.detail] for r in results])
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "validate": _cmd_validate,
        "simulate": _cmd_simulate,
        "fluid": _cmd_fluid,
        "solve": _cmd_solve,
        "study-t1": lambda a: _cmd_study(a, run_theorem1_study),
        "study-c1": lambda a: _cmd_study(a, run_conjecture1_study),
        "study-c2": lambda a: _cmd_study(a, run_conjecture2_study),
        "accept": _cmd_accept,
    }
    try:
        return handlers[args.command](args)
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
