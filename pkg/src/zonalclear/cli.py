"""Command-line interface: generate, clear, benchmark, sweep, stacks, calibrate.

Exit codes: 0 success, 2 solver failure, 3 infeasible input.
"""

from __future__ import annotations

import csv
import functools
import json
import sys

import click
import numpy as np

from .core import (
    InfeasibleError,
    SolverError,
    load_fixture,
    load_instance,
    save_instance,
    validate_instance,
)
from .calibration import fit_scales, load_series
from .cm.ibcqp import build_stack_curve
from .harness import (
    ALGORITHMS,
    emit_report,
    fixture_sweep_spec,
    generate_instance,
    profit_sweep,
    run_algorithm,
    run_benchmark,
)


def _load(path):
    if path == "fixture":
        return load_fixture()
    return load_instance(path)


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapped(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InfeasibleError as exc:
            click.echo(f"infeasible: {exc}", err=True)
            sys.exit(3)
        except (SolverError, ValueError) as exc:
            click.echo(f"solver failure: {exc}", err=True)
            sys.exit(2)

    return wrapped


@click.group()
def main():
    """Zonal day-ahead auction clearing under flow-based network constraints."""


@main.command()
@click.option("--zones", default=3, show_default=True)
@click.option("--players", default=3, show_default=True, help="players per zone")
@click.option("--seed", default=0, show_default=True)
@click.option("--fixture", default=None, help='bundled instance name or "paper"')
@click.option("--out", type=click.Path(), required=True)
@_exit_codes
def gen(zones, players, seed, fixture, out):
    """Generate a random feasible instance (or dump a bundled one) to JSON."""
    inst = generate_instance(n_zones=zones, players_per_zone=players, seed=seed,
                             fixture=fixture)
    save_instance(inst, out)
    click.echo(f"wrote {out}")


@main.command()
@click.argument("instance")
@click.option("--mechanism", type=click.Choice(["swm", "cm"]), default="swm",
              show_default=True)
@click.option("--algo", type=click.Choice(["ieqlp", "ieqp", "bbtree", "ibcqp"]),
              default="bbtree", show_default=True, help="CM algorithm")
@click.option("--gap", default=1e-5, show_default=True, help="branch-and-bound gap")
@click.option("--seed", default=42, show_default=True)
@click.option("--max-nodes", default=10000, show_default=True)
@click.option("--cqp-tol", default=1e-4, show_default=True)
@click.option("--alpha-y", default=None, type=float,
              help="quasi-LP guess damping (ieqlp)")
@click.option("--max-iters", default=None, type=int,
              help="iteration budget (ieqlp/ieqp)")
@click.option("--tol", default=None, type=float,
              help="convergence indicator tolerance (ieqlp)")
@click.option("--delta", default=None, type=float,
              help="convergence indicator tolerance (ieqp)")
@click.option("--delta-b", default=None, type=float,
              help="active-row retirement tolerance (ieqp)")
@click.option("--node-trace", type=click.Path(), default=None,
              help="branch-and-bound node log CSV")
@_exit_codes
def clear(instance, mechanism, algo, gap, seed, max_nodes, cqp_tol, alpha_y,
          max_iters, tol, delta, delta_b, node_trace):
    """Clear one instance (path or "fixture") and print the outcome as JSON."""
    inst = _load(instance)
    issues = validate_instance(inst)
    if issues:
        raise InfeasibleError("; ".join(issues))
    if mechanism == "swm":
        out = run_algorithm(inst, "swm")
    else:
        kwargs = {}
        if algo == "bbtree":
            kwargs = {"delta_o": gap, "max_nodes": max_nodes,
                      "keep_trace": node_trace is not None}
        elif algo == "ibcqp":
            kwargs = {"cqp_tol": cqp_tol}
        elif algo == "ieqlp":
            opts = {"alpha_y": alpha_y, "max_iters": max_iters, "tol": tol}
            kwargs = {k: v for k, v in opts.items() if v is not None}
        elif algo == "ieqp":
            opts = {"delta": delta, "delta_b": delta_b, "max_iters": max_iters}
            kwargs = {k: v for k, v in opts.items() if v is not None}
        out = run_algorithm(inst, algo, seed=seed, **kwargs)
    if node_trace and "node_log" in out.diagnostics:
        with open(node_trace, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["id", "parent", "f_ub", "f_lb", "status"])
            w.writeheader()
            w.writerows(out.diagnostics["node_log"])
    click.echo(json.dumps(
        {
            "objective": out.objective,
            "total_cost": out.total_cost,
            "x": out.x.tolist(),
            "y": out.y.tolist(),
            "v": out.v.tolist(),
            "status": out.diagnostics.get("status", ""),
            "gap": out.diagnostics.get("gap"),
        },
        indent=2,
    ))


@main.command()
@click.argument("instance")
@click.option("--algos", default=",".join(ALGORITHMS), show_default=True)
@click.option("--seed", default=42, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="report CSV path")
@_exit_codes
def bench(instance, algos, seed, out):
    """Run several algorithms on one instance and tabulate the results."""
    inst = _load(instance)
    report = run_benchmark(inst, tuple(algos.split(",")), seed=seed)
    for r in report.rows:
        click.echo(
            f"{r['algo']:>8}  obj={r['objective']:<12.6g} time_ms={r['time_ms']:<10.3f}"
            f" indicator={r['indicator']:<10.3g} status={r['status']}{r['error']}"
        )
    if report.cost_dominance is not None:
        click.echo(f"cm/swm cost ratio: {report.cm_vs_swm_ratio:.6f}")
    if out:
        emit_report(report, out)
        click.echo(f"wrote {out}")


@main.command()
@click.option("--player", default=0, show_default=True)
@click.option("--profile", type=click.Choice(["I", "II"]), default="I",
              show_default=True, help="opponent ask profile")
@click.option("--n-pts", default=20, show_default=True)
@click.option("--algo", type=click.Choice(["ieqlp", "ieqp", "bbtree", "ibcqp"]),
              default="ibcqp", show_default=True)
@click.option("--seed", default=42, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@_exit_codes
def sweep(player, profile, n_pts, algo, seed, out):
    """Profit curve for one bundled-benchmark player over its ask-slope grid."""
    inst = load_fixture()
    spec = fixture_sweep_spec(player, profile, n_pts)
    rows = profit_sweep(inst, spec, algo=algo, seed=seed)
    emit_report(rows, out)
    click.echo(f"wrote {out} ({len(rows)} points)")


@main.command()
@click.argument("instance")
@click.option("--out", type=click.Path(), required=True, help="curve CSV path")
@_exit_codes
def stacks(instance, out):
    """Emit every zone's stack curve as (zone, v, y) breakpoint rows."""
    inst = _load(instance)
    rows = []
    for z in range(inst.n_zones):
        curve = build_stack_curve(inst, z)
        for s in curve.segments:
            rows.append({"zone": inst.zones[z], "v": s.v_lo, "y": s.y_lo})
            if np.isfinite(s.v_hi):
                rows.append({"zone": inst.zones[z], "v": s.v_hi, "y": s.y_hi})
    emit_report(rows, out)
    click.echo(f"wrote {out}")


@main.command()
@click.option("--series", type=click.Path(exists=True), required=True,
              help="instance directory or JSON array")
@click.option("--targets", type=click.Path(exists=True), required=True,
              help="t,zone,price CSV")
@click.option("--mechanism", type=click.Choice(["swm", "cm"]), default="swm",
              show_default=True)
@click.option("--method", type=click.Choice(["gd", "newton"]), default="gd",
              show_default=True)
@click.option("--max-iters", default=500, show_default=True)
@click.option("--out", type=click.Path(), default="scales.json", show_default=True)
@click.option("--trace-out", type=click.Path(), default=None)
@_exit_codes
def calibrate(series, targets, mechanism, method, max_iters, out, trace_out):
    """Fit per-zone cost scales to a target price series."""
    cal = load_series(series, targets)
    scales, report = fit_scales(cal, mechanism=mechanism, method=method,
                                max_iters=max_iters)
    payload = {
        "s_c": scales.s_c.tolist(),
        "s_b": scales.s_b.tolist(),
        "objective": report["objective"],
        "iterations": report["iterations"],
        "error_metrics": np.asarray(report["error_metrics"]).tolist(),
        "skipped": report["skipped"],
    }
    with open(out, "w") as fh:
        json.dump(payload, fh, indent=2)
    if trace_out:
        emit_report([{"iter": k, "F": f} for k, f in enumerate(report["trace"])],
                    trace_out)
    click.echo(json.dumps(payload, indent=2))


if __name__ == "__main__":
    main()
