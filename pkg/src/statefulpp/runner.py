"""Scenario execution: epsilon sweeps, output files and the theory report."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from fractions import Fraction
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import SCHEMA_VERSION, ScenarioConfig
from .distribution import Population, ScalarPointMass, StatePoint, product_dist, to_fraction
from .engine import (
    CONVERGED,
    EngineConfig,
    EngineError,
    Trajectory,
    check_stable_point,
    contraction_coefficient,
    find_performative_optimum_grid,
    fixed_classifier_run,
    optimality_gap_bound,
    rrm_map_step,
    rrm_run,
    stated_coefficient,
)
from .losses import (
    Classifier,
    LossModel,
    MinimizerConfig,
    estimate_constants,
    minimize,
    regularized_logistic,
    scalar_squared,
)
from .transitions import (
    GeometricDecay,
    KGroups,
    ScalarLinear,
    StrategicResponse,
    estimate_joint_sensitivity,
    generate_probes,
)

log = logging.getLogger(__name__)

W1_NOTE = "w1_delta is the identity-coupled transport cost, an upper bound on W1"


@dataclass
class Scenario:
    d0: object
    transition: object
    loss: LossModel
    engine: EngineConfig
    columns: list | None = None
    dataset_info: dict | None = None


def engine_config(cfg: ScenarioConfig) -> EngineConfig:
    m = cfg.minimizer
    e = cfg.engine
    return EngineConfig(
        max_iters=e.max_iters,
        conv_tol=e.conv_tol,
        divergence_ceiling=e.divergence_ceiling,
        oscillation_window=e.oscillation_window,
        oscillation_rel_tol=e.oscillation_rel_tol,
        minimizer=MinimizerConfig(m.tolerance, m.max_steps, m.step_rule),
    )


def load_baseline(cfg: ScenarioConfig) -> tuple[Population, list, dict]:
    """Baseline population, its column names and dataset metadata."""
    ds = cfg.dataset
    if ds.csv is not None:
        c = ds.csv
        spec = data_mod.DatasetSpec(
            path=c.path,
            label_column=c.label_column,
            feature_columns=tuple(c.feature_columns),
            strategic_columns=tuple(ds.strategic_columns or ()),
            normalize=ds.normalize,
            subsample=tuple(c.subsample) if c.subsample else None,
            negative_subsample=tuple(c.negative_subsample) if c.negative_subsample else None,
        )
        pop, info = data_mod.load_dataset(spec)
        return pop, info.columns, info.to_dict()
    s = ds.synthetic
    pop = data_mod.generate_synthetic(s.n, s.p, cfg.seeds.synthetic, s.class_balance, s.separation)
    columns = data_mod.synthetic_columns(s.p)
    info = {"source": "synthetic", "n": pop.n, "columns": columns}
    if ds.normalize:
        X, norm = data_mod.zscore(pop.features, columns)
        pop = pop.with_features(X)
        info["normalization"] = {"columns": norm.columns, "mean": norm.mean.tolist(), "std": norm.std.tolist()}
    return pop, columns, info


def build_scenario(cfg: ScenarioConfig, epsilon: float, baseline=None) -> Scenario:
    eng = engine_config(cfg)
    if cfg.scenario == "scalar":
        return Scenario(ScalarPointMass(cfg.d0), ScalarLinear(epsilon), scalar_squared(), eng)

    if baseline is None:
        baseline = load_baseline(cfg)
    pop, columns, info = baseline
    missing = [c for c in cfg.dataset.strategic_columns if c not in columns]
    if missing:
        raise data_mod.DataError(f"strategic columns not in dataset: {missing}")
    S = [columns.index(c) for c in cfg.dataset.strategic_columns]
    response = StrategicResponse(pop, S, epsilon)
    if cfg.scenario == "credit_kgroups":
        tr = KGroups(response, cfg.k, seed=cfg.seeds.partition)
    else:
        tr = GeometricDecay(response, cfg.delta)
    loss = regularized_logistic(cfg.lam, unpenalized_intercept=not cfg.penalize_intercept)
    return Scenario(pop, tr, loss, eng, columns, info)


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def trajectory_rows(traj: Trajectory) -> list[dict]:
    rows = []
    for r in traj.iterations:
        row = {
            "t": r.t,
            "theta": [float(v) for v in r.theta],
            "theta_delta": _num(r.theta_delta),
            "w1_delta": _num(r.w1_delta),
            "product_delta": _num(r.product_delta),
            "loss": _num(r.loss),
        }
        if isinstance(r.dist, ScalarPointMass):
            row["dist"] = float(r.dist.value)
        rows.append(row)
    return rows


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def _eps_tag(eps: float) -> str:
    return repr(float(eps))


def summarize(eps: float, traj: Trajectory | None, error: str | None = None) -> dict:
    if traj is None or not traj.iterations:
        return {"epsilon": eps, "status": "error", "iterations": 0, "final_theta_delta": None,
                "period": None, "error": error}
    return {
        "epsilon": eps,
        "status": "error" if error else traj.terminal_status,
        "iterations": len(traj),
        "final_theta_delta": _num(traj.final.theta_delta),
        "final_loss": _num(traj.final.loss),
        "period": traj.period,
        "error": error,
    }


def run_one(cfg: ScenarioConfig, eps: float, baseline=None) -> tuple[dict, Trajectory | None]:
    sc = build_scenario(cfg, eps, baseline)
    try:
        traj = rrm_run(sc.d0, sc.transition, sc.loss, sc.engine)
    except EngineError as exc:
        log.error("epsilon=%s: %s", eps, exc)
        return summarize(eps, exc.trajectory, str(exc)), exc.trajectory
    return summarize(eps, traj), traj


def _run_one_job(args):
    cfg, eps, baseline = args
    return run_one(cfg, eps, baseline)


def write_trajectory(out: Path, cfg: ScenarioConfig, eps: float, summary: dict, traj: Trajectory | None,
                     columns=None) -> list[Path]:
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": "trajectory",
        "epsilon": eps,
        "summary": summary,
        "config": cfg.to_dict(),
        "note": W1_NOTE,
    }
    if columns:
        header["theta_columns"] = list(columns)
    rows = trajectory_rows(traj) if traj is not None else []
    written = []
    stem = f"trajectory_eps={_eps_tag(eps)}"
    if "jsonl" in cfg.output.formats:
        path = out / f"{stem}.jsonl"
        with open(path, "w") as fh:
            fh.write(_dumps(header) + "\n")
            for row in rows:
                fh.write(_dumps(row) + "\n")
        written.append(path)
    if "csv" in cfg.output.formats:
        path = out / f"{stem}.csv"
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema_version: {SCHEMA_VERSION}\n")
            fh.write(f"# config: {_dumps(cfg.to_dict())}\n")
            fh.write(f"# note: {W1_NOTE}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "theta_delta", "w1_delta", "product_delta", "loss"])
            for row in rows:
                w.writerow([row["t"]] + [repr(row[k]) if row[k] is not None else "inf"
                                         for k in ("theta_delta", "w1_delta", "product_delta", "loss")])
        written.append(path)
    return written


def run_scenario(cfg: ScenarioConfig, out_dir=None, jobs: int = 1) -> tuple[int, list[dict]]:
    """Run the epsilon sweep and write per-epsilon trajectories plus a sweep summary.

    Returns ``(exit_code, summaries)``; the exit code is 3 if any run hit an
    engine error, else 0.  Dataset problems raise :class:`statefulpp.data.DataError`.
    """
    out = Path(out_dir or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    baseline = None if cfg.scenario == "scalar" else load_baseline(cfg)
    jobs_args = [(cfg, eps, baseline) for eps in cfg.epsilon]
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one_job, jobs_args))
    else:
        results = [_run_one_job(a) for a in jobs_args]

    summaries = []
    columns = baseline[1] if baseline else None
    for eps, (summary, traj) in zip(cfg.epsilon, results):
        write_trajectory(out, cfg, eps, summary, traj, columns)
        summaries.append(summary)

    header = {"schema_version": SCHEMA_VERSION, "kind": "sweep_summary", "config": cfg.to_dict(),
              "note": W1_NOTE}
    if baseline:
        header["dataset"] = baseline[2]
    with open(out / "summary.jsonl", "w") as fh:
        fh.write(_dumps(header) + "\n")
        for s in summaries:
            fh.write(_dumps(s) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        fh.write(f"# schema_version: {SCHEMA_VERSION}\n")
        fh.write(f"# config: {_dumps(cfg.to_dict())}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "status", "iterations", "final_theta_delta"])
        for s in summaries:
            w.writerow([repr(s["epsilon"]), s["status"], s["iterations"],
                        repr(s["final_theta_delta"]) if s["final_theta_delta"] is not None else ""])
    code = 3 if any(s["status"] == "error" for s in summaries) else 0
    return code, summaries


# --- theory report -----------------------------------------------------------


def _check(name, eps, measured, bound, passed, **extra):
    row = {"property": name, "epsilon": eps, "measured": _num(measured), "bound": _num(bound),
           "pass": bool(passed)}
    row.update(extra)
    return row


def scalar_contraction_probes(eps: float, n: int, seed: int, low: float = 1.0, high: float = 10.0,
                              exact: bool = False):
    """Random state pairs for the scalar RRM map, half of them sign-aligned.

    With ``exact`` the point masses hold rationals, so maps and distances
    evaluated on them carry no rounding error.
    """
    point = (lambda v: ScalarPointMass(to_fraction(v))) if exact else ScalarPointMass
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        d, th = rng.uniform(low, high, 2)
        if i % 2:
            step = rng.uniform(0.01, 2.0)
            d2, th2 = d + step * rng.uniform(0.2, 1.0), th + step
        else:
            d2, th2 = rng.uniform(low, high, 2)
        pairs.append((StatePoint(point(d), [th]), StatePoint(point(d2), [th2])))
    return pairs


def scalar_contraction_check(eps: float, n: int = 1000, seed: int = 0) -> dict:
    """Largest ratio ``dist(f(s), f(s')) / dist(s, s')`` against ``eps (1 + beta/gamma)``."""
    loss = scalar_squared()
    tr = ScalarLinear(eps)
    coef = contraction_coefficient(eps, loss.beta, loss.gamma)
    worst_slack, best_ratio = -math.inf, 0.0
    for s, s2 in scalar_contraction_probes(eps, n, seed):
        before = product_dist(s, s2)
        f1 = StatePoint(*rrm_map_step(s.dist, s.theta, tr, loss))
        f2 = StatePoint(*rrm_map_step(s2.dist, s2.theta, tr, loss))
        after = product_dist(f1, f2)
        worst_slack = max(worst_slack, float(after - coef * before))
        if before > 0:
            best_ratio = max(best_ratio, float(after / before))
    return {"coefficient": coef, "stated_coefficient": stated_coefficient(eps, loss.beta, loss.gamma),
            "max_ratio": best_ratio, "max_excess": worst_slack, "n": n}


def scalar_rate_check(eps: float, theta: float = 2.0, d0: float = 5.0, steps: int = 30) -> float:
    """Worst relative deviation of ``|d_t - d_theta|`` from ``eps^t |d_0 - d_theta|``.

    Runs in exact rational arithmetic: for small ``eps`` the deviation drops
    below the resolution of any float format long before ``t = 30``.
    """
    tr = ScalarLinear(eps)
    e = to_fraction(tr.epsilon)
    d_theta = (1 + e * to_fraction(theta)) / (1 - e)
    path = fixed_classifier_run([theta], ScalarPointMass(to_fraction(d0)), tr, tol=0, max_iters=steps,
                                keep_path=True, raise_on_max=False).path
    e0 = abs(path[0].value - d_theta)
    worst = Fraction(0)
    for t, d in enumerate(path[1:], start=1):
        expected = e ** t * e0
        got = abs(d.value - d_theta)
        worst = max(worst, abs(got - expected) / expected if expected else got)
    return float(worst)


def verify_scalar(cfg: ScenarioConfig, eps: float) -> list[dict]:
    rows = []
    loss = scalar_squared()
    probe_seed = cfg.seeds.probes
    c = scalar_contraction_check(eps, cfg.verify.n_probes, probe_seed)
    rows.append(_check("contraction", eps, c["max_ratio"], c["coefficient"],
                       c["max_excess"] <= 1e-9 and (eps == 0 or c["max_ratio"] >= 0.999 * c["coefficient"]),
                       stated_coefficient=_num(c["stated_coefficient"]), max_excess=c["max_excess"]))

    contracting = c["coefficient"] < 1
    threshold = eps / (1 - eps) < loss.gamma / loss.beta if eps < 1 else False
    traj = rrm_run(ScalarPointMass(cfg.d0), ScalarLinear(eps), loss, engine_config(cfg))
    converged = traj.terminal_status == CONVERGED
    rows.append(_check("threshold", eps, None, None, contracting == threshold and converged == contracting,
                       contraction_claimed=contracting, status=traj.terminal_status,
                       iterations=len(traj)))

    if eps < 1:
        worst = scalar_rate_check(eps, steps=cfg.verify.rate_steps)
        rows.append(_check("fixed_point_rate", eps, worst, 1e-9, worst <= 1e-9))
    else:
        rows.append(_check("fixed_point_rate", eps, None, None, True, skipped="sensitivity >= 1"))

    if contracting and eps > 0:
        # the run above stops once steps fall below conv_tol, which can leave it
        # c / (1 - c) * conv_tol away from the fixed point; tighten for this check
        tight = dataclasses.replace(engine_config(cfg), conv_tol=min(cfg.engine.conv_tol, 1e-10),
                                    max_iters=max(cfg.engine.max_iters, 100_000))
        traj = rrm_run(ScalarPointMass(cfg.d0), ScalarLinear(eps), loss, tight)
        theta_ps = float(traj.final.theta[0])
        closed = 1.0 / (1.0 - 2.0 * eps)
        rows.append(_check("stable_point", eps, abs(theta_ps - closed), 1e-6, abs(theta_ps - closed) <= 1e-6,
                           theta_ps=theta_ps, closed_form=closed))
        step = cfg.verify.grid_step
        top = max(4.0, 2.0 * closed)
        grid = np.round(np.arange(1.0, top + step / 2, step), 10)
        tr = ScalarLinear(eps)
        theta_po, _ = find_performative_optimum_grid(tr, loss, grid, ScalarPointMass(cfg.d0))
        theta_po = float(theta_po.params[0])
        lo = 1.0
        hi = max(top, max(float(r.dist.value) for r in traj.iterations), cfg.d0)
        const = estimate_constants(loss, ScalarPointMass(cfg.d0), n_probes=cfg.verify.n_probes,
                                   seed=probe_seed, z_box=(np.array([lo]), np.array([hi])))
        bound = optimality_gap_bound(const.l_z_bound, eps, loss.gamma)
        gap = abs(theta_po - theta_ps)
        rows.append(_check("optimality_gap", eps, gap, bound, gap <= bound + step,
                           theta_po=theta_po, l_z=const.l_z_bound, region=[lo, hi],
                           grid_error=abs(theta_po - closed)))
    else:
        rows.append(_check("optimality_gap", eps, None, None, True,
                           skipped="no stable point inside the domain" if eps > 0 else "trivial map"))

    probes = scalar_contraction_probes(eps, cfg.verify.n_probes, probe_seed + 1, exact=True)
    est = estimate_joint_sensitivity(ScalarLinear(eps), probes) if eps > 0 else None
    if est is not None:
        rows.append(_check("joint_sensitivity", eps, est.epsilon_hat, eps,
                           eps - 1e-12 <= est.epsilon_hat <= eps))
    return rows


def verify_population(cfg: ScenarioConfig, eps: float, baseline) -> list[dict]:
    rows = []
    sc = build_scenario(cfg, eps, baseline)
    traj = rrm_run(sc.d0, sc.transition, sc.loss, sc.engine)
    rows.append(_check("rrm_status", eps, _num(traj.final.theta_delta), sc.engine.conv_tol,
                       traj.terminal_status == CONVERGED, status=traj.terminal_status, iterations=len(traj)))
    if not getattr(sc.transition, "stateful", False):
        states = [StatePoint(r.dist, r.theta) for r in traj.iterations[-3:]]
        probes = generate_probes(states, min(cfg.verify.n_probes, 50), scale=0.1, seed=cfg.seeds.probes)
        est = estimate_joint_sensitivity(sc.transition, probes)
        declared = sc.transition.declared_sensitivity
        rows.append(_check("joint_sensitivity", eps, est.epsilon_hat, declared,
                           declared is None or est.epsilon_hat <= declared + 1e-9))
    if traj.terminal_status == CONVERGED:
        tol = 10 * sc.engine.conv_tol
        rep = check_stable_point(traj.final.dist, traj.final.theta, sc.transition, sc.loss,
                                 sc.engine.minimizer, tol, tol)
        rows.append(_check("stable_point", eps, max(rep.fixed_point_residual, rep.optimality_residual), tol,
                           rep.is_stable, fixed_point_residual=rep.fixed_point_residual,
                           optimality_residual=rep.optimality_residual))
    return rows


def verify_theory(cfg: ScenarioConfig, out_dir=None) -> tuple[int, dict]:
    """Check the convergence theory numerically for every epsilon; write ``verify_report.json``."""
    out = Path(out_dir or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if cfg.scenario == "scalar":
        for eps in cfg.epsilon:
            rows.extend(verify_scalar(cfg, eps))
    else:
        baseline = load_baseline(cfg)
        for eps in cfg.epsilon:
            rows.extend(verify_population(cfg, eps, baseline))
    report = {"schema_version": SCHEMA_VERSION, "kind": "verify_report", "config": cfg.to_dict(),
              "note": W1_NOTE, "checks": rows, "all_pass": all(r["pass"] for r in rows)}
    (out / "verify_report.json").write_text(json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n")
    return 0, report


def minimize_baseline(cfg: ScenarioConfig):
    """Risk minimizer on the unperturbed baseline (used by ``inspect``)."""
    pop, columns, _ = load_baseline(cfg)
    loss = regularized_logistic(cfg.lam, unpenalized_intercept=not cfg.penalize_intercept)
    return Classifier(minimize(loss, pop, engine_config(cfg).minimizer).params), columns
