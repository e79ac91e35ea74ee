import json
import math
from functools import lru_cache, wraps

import click
import numpy as np
from loguru import logger

from src.bvp import asymptotic_T, solve_fixed_energy, solve_fixed_time
from src.config_loader import ConfigLoader, ExperimentConfig
from src.errors import ConeViolation, ConfigError, ShilnikovError, SpecError
from src.hamiltonian import (ThreeBodyParams, build_threebody, loop_spec_from_config, pullback_residual,
                             system_from_config, threebody_lambda)
from src.ladder import linear_fit, loglog_fit, run_ladder
from src.manifold import eigenvalue_lambda, fit_local_graphs
from src.report_generator import ReportGenerator
from src.scattering import (HeteroclinicChain, ScatteringBranch, chain_positive, find_heteroclinic, load_chain,
                            planted_chain, save_chain)
from src.shadow import (DiscreteOrbitProblem, ShadowProblem, continue_shadow, multiplier_spectrum, shadowing_distance,
                        solve_discrete_action, spectral_distance)

EXIT_CONFIG = 2
EXIT_SOLVER = 3


@lru_cache(maxsize=4)
def _model_context(key: str):
    """System and chart for a serialized (system, chart, z0) block; cached per worker process."""
    block = json.loads(key)
    sys = system_from_config(block["system"])
    chart = fit_local_graphs(sys, block["z0"], radius=block["chart"]["radius"], order=block["chart"]["order"],
                             half_width=block["chart"]["half_width"])
    return sys, chart


def _energy_point(task: dict) -> dict:
    sys, chart = _model_context(task["context"])
    z0, q_plus, p_minus = (np.asarray(task[key], dtype=float) for key in ("z0", "q_plus", "p_minus"))
    mu = task["mu"]
    solution = solve_fixed_energy(sys, chart, z0, q_plus, p_minus, mu, tol=task["tol"],
                                  nu=task["nu"], kappa=task["kappa"], dense=False)
    lam = chart.lam(z0)
    return {
        "mu": mu, "T": solution.T,
        "T_formula": asymptotic_T(chart, z0, q_plus, p_minus, mu, task["nu"], task["kappa"]),
        "log_scale": abs(math.log(mu)) / (2 * lam), "energy": solution.mu,
        "residual_norm": solution.residual_norm, "newton_iterations": solution.iterations,
        "outer_iterations": solution.outer_iterations,
    }


def run_model_bvp(config: ExperimentConfig) -> dict:
    actions = []
    block = config.command("model_bvp")
    tol = float(config.tolerances["bvp"])
    context = json.dumps({"system": block["system"], "chart": config.chart, "z0": block["z0"]}, sort_keys=True)
    sys, chart = _model_context(context)
    z0 = np.asarray(block["z0"], dtype=float)
    q_plus, p_minus = np.asarray(block["q_plus"], dtype=float), np.asarray(block["p_minus"], dtype=float)
    lam = chart.lam(z0)
    actions.append(f"Fitted order-{chart.order} graphs at z0={z0.tolist()} (lambda={lam:.10g})")

    tasks = [{"context": context, "z0": block["z0"], "q_plus": block["q_plus"], "p_minus": block["p_minus"],
              "mu": mu, "tol": tol, "nu": config.cone["nu"], "kappa": config.cone["kappa"]}
             for mu in config.mu_ladder]
    energy_rows = run_ladder(_energy_point, tasks, config.workers)
    actions.append(f"Solved {len(energy_rows)} fixed-energy passages on {max(config.workers, 1)} worker(s)")

    time_rows = []
    for T in block["T_values"]:
        solution = solve_fixed_time(sys, chart, z0, q_plus, p_minus, float(T), tol=tol, dense=False)
        d = sys.dims
        time_rows.append({
            "T": float(T), "lambda_T": lam * float(T), "energy": solution.mu,
            "q0_norm": float(np.linalg.norm(solution.chart_midpoint[d.q])),
            "p0_norm": float(np.linalg.norm(solution.chart_midpoint[d.p])),
            "residual_norm": solution.residual_norm, "newton_iterations": solution.iterations,
        })
    actions.append(f"Solved {len(time_rows)} fixed-time passages")

    fit = linear_fit([row["log_scale"] for row in energy_rows], [row["T"] for row in energy_rows])
    deviations = [abs(row["T"] - row["T_formula"]) for row in energy_rows]
    results = {"lambda": lam, "T_vs_log_scale": fit.to_dict(), "max_T_deviation": max(deviations)}
    if len(energy_rows) > 1 and min(deviations) > 0:
        results["deviation_loglog"] = loglog_fit([row["mu"] for row in energy_rows], deviations).to_dict()
    actions.append(f"Slope of T against |ln mu|/(2 lambda): {fit.slope:.6f}")

    reports = ReportGenerator(config.output_dir)
    reports.save_table(energy_rows, "energy_sweep.csv")
    reports.save_table(time_rows, "time_sweep.csv")
    smallest = solve_fixed_energy(sys, chart, z0, q_plus, p_minus, config.mu_ladder[-1], tol=tol,
                                  nu=config.cone["nu"], kappa=config.cone["kappa"], dense=True)
    reports.save_trajectory(smallest.trajectory, sys, "trajectory_smallest_mu.csv", count=801)
    reports.save_json({"energy_sweep": energy_rows, "time_sweep": time_rows, "fits": results}, "model_bvp.json")
    reports.save_report(reports.generate_run_summary("Model BVP", actions, {"slope": fit.slope}))
    reports.write_manifest(config.raw, "model-bvp", {"seed": config.seed})
    return results


def _random_collision_points(rng: np.random.Generator, count: int, params: ThreeBodyParams) -> list[dict]:
    points = []
    while len(points) < count:
        radius = rng.uniform(0.3, 2.0)
        angle = rng.uniform(0, 2 * np.pi)
        speed_limit = math.sqrt(max(2 * (params.energy + 1 / radius) / (1 + params.mu_mass), 0.0))
        speed = rng.uniform(0, 0.9 * speed_limit)
        heading = rng.uniform(0, 2 * np.pi)
        points.append({"x": [radius * math.cos(angle), radius * math.sin(angle)],
                       "y": [speed * math.cos(heading), speed * math.sin(heading)]})
    return points


def run_threebody(config: ExperimentConfig) -> dict:
    actions = []
    block = config.command("threebody")
    params = ThreeBodyParams(**block["system"].get("params", {}))
    sys = build_threebody(params)
    rng = np.random.default_rng(config.seed)
    points = list(block["points"]) + _random_collision_points(rng, int(block["random_points"]), params)
    rows = []
    for point in points:
        x, y = np.asarray(point["x"], dtype=float), np.asarray(point["y"], dtype=float)
        closed = threebody_lambda(x, y, params)
        numeric = eigenvalue_lambda(sys, np.concatenate([x, y]))
        rows.append({"x1": x[0], "x2": x[1], "y1": y[0], "y2": y[1], "lambda_numeric": numeric,
                     "lambda_closed_form": closed, "relative_error": abs(numeric - closed) / closed})
    actions.append(f"Compared transverse eigenvalues at {len(rows)} collision points")

    residuals = []
    for _ in range(int(block["pullback_samples"])):
        state = rng.normal(size=8)
        residuals.append(pullback_residual(state, params))
    actions.append(f"Checked the regularization identity at {len(residuals)} states")

    results = {"max_eigenvalue_error": max(row["relative_error"] for row in rows),
               "max_pullback_residual": max(residuals, default=0.0)}
    reports = ReportGenerator(config.output_dir)
    passage = block.get("passage")
    if passage:
        z0 = np.asarray(passage["z0"], dtype=float)
        chart = fit_local_graphs(sys, z0, radius=config.chart["radius"], order=config.chart["order"],
                                 half_width=config.chart["half_width"])
        solution = solve_fixed_energy(sys, chart, z0, passage["q_plus"], passage["p_minus"], float(passage["mu"]),
                                      tol=float(config.tolerances["bvp"]), nu=config.cone["nu"],
                                      kappa=config.cone["kappa"], dense=True)
        results["passage"] = solution.summary(sys.dims)
        reports.save_trajectory(solution.trajectory, sys, "passage_trajectory.csv", count=801)
        actions.append(f"Solved a passage at mu={passage['mu']} with T={solution.T:.10g}")

    reports.save_table(rows, "eigenvalues.csv")
    reports.save_json(results, "threebody.json")
    reports.save_report(reports.generate_run_summary("Three-Body", actions, {
        "max_eigenvalue_error": results["max_eigenvalue_error"],
        "max_pullback_residual": results["max_pullback_residual"]}))
    reports.write_manifest(config.raw, "threebody", {"seed": config.seed})
    return results


def _shadow_chain(sys, spec, chart, block: dict) -> HeteroclinicChain:
    if not block.get("chain_file"):
        return planted_chain(sys, spec, chart)
    stored = load_chain(block["chain_file"])
    d = sys.dims
    orbits = []
    for orbit in stored.orbits:
        direction = orbit.exit_state[d.p] / np.linalg.norm(orbit.exit_state[d.p])
        orbits.append(find_heteroclinic(sys, chart, chart, {"z_minus": orbit.c_minus, "direction": direction,
                                                            "flight_time": orbit.flight_time}))
    return HeteroclinicChain(orbits, stored.periodic, stored.label)


def run_shadow(config: ExperimentConfig) -> dict:
    actions = []
    block = config.command("shadow")
    if block["system"].get("kind") != "loop":
        raise SpecError(f"Shadowing studies run on the loop system, got {block['system'].get('kind')!r}")
    spec = loop_spec_from_config(block["system"])
    sys = system_from_config(block["system"])
    radius = float(config.chart["radius"])
    chart = fit_local_graphs(sys, spec.critical_corner(), radius=radius, order=config.chart["order"],
                             half_width=config.chart["half_width"])
    chain = _shadow_chain(sys, spec, chart, block)
    positive, margin = chain_positive(chain)
    actions.append(f"Chain of {len(chain)} orbit(s) with symplectic angles {np.round(chain.angles, 10).tolist()}")
    if not positive:
        raise ConeViolation(f"Chain is not positive (smallest angle {margin:.4g})")

    problem = ShadowProblem(sys, chart, chain, config.mu_ladder[0], nu=config.cone["nu"], kappa=config.cone["kappa"],
                            tol=float(config.tolerances["bvp"]))
    orbits = continue_shadow(problem, config.mu_ladder, tol=float(config.tolerances["newton"]))
    actions.append(f"Continued the shadowing orbit over {len(orbits)} energies")

    reference = None
    if block.get("discrete"):
        discrete = solve_discrete_action(DiscreteOrbitProblem([ScatteringBranch(sys, chart, orbit)
                                                               for orbit in chain.orbits],
                                                              [orbit.c_minus for orbit in chain.orbits]))
        reference = discrete.return_spectrum()
        actions.append(f"Discrete orbit |det(DF - I)|={discrete.determinant:.4g}")

    rows, spectra = [], []
    for orbit in orbits:
        d_global, d_outside = shadowing_distance(orbit, chain, tube_radius=0.5 * radius)
        report = multiplier_spectrum(orbit, sys)
        spectra.append(report.to_dict())
        scale = orbit.mu * abs(math.log(orbit.mu))
        row = {"mu": orbit.mu, "period": orbit.period, "period_excess": orbit.period_excess,
               "closure": orbit.closure, "energy_error": orbit.energy_error, "d_global": d_global,
               "d_outside": d_outside, "d_outside_scaled": d_outside / scale,
               "newton_iterations": orbit.iterations, "pairing_error": report.pairing_error,
               "large_times_mu": float(np.max(np.abs(report.large))) * orbit.mu if len(report.large) else None}
        if reference is not None:
            row["small_to_return_spectrum"] = spectral_distance(report.small, reference)
        rows.append(row)

    mus = [row["mu"] for row in rows]
    verdict = {"positive_margin": margin, "max_closure": max(row["closure"] for row in rows),
               "max_pairing_error": max(row["pairing_error"] for row in rows),
               "period_excess": [row["period_excess"] for row in rows]}
    if len(rows) > 1:
        scaled = [row["d_outside_scaled"] for row in rows]
        verdict["d_global_slope"] = loglog_fit(mus, [row["d_global"] for row in rows]).slope
        verdict["d_outside_ratio"] = max(scaled) / min(scaled) if min(scaled) > 0 else None

    reports = ReportGenerator(config.output_dir)
    save_chain(chain, config.output_dir / "chain.json")
    reports.save_table(rows, "shadow_ladder.csv")
    reports.save_trajectory(orbits[-1].trajectory, sys, "shadow_orbit.csv", count=2001)
    reports.save_json({"orbits": [orbit.to_dict() for orbit in orbits], "multipliers": spectra,
                       "verdict": verdict}, "shadow.json")
    reports.save_report(reports.generate_run_summary("Shadowing", actions, verdict))
    reports.write_manifest(config.raw, "shadow", {"seed": config.seed,
                                                  "shears": [None if s is None else s.to_dict()
                                                             for s in problem.shears]})
    return verdict


def _common_options(command):
    @click.option("--config", "config_path", type=click.Path(), default="config/settings.yaml",
                  show_default=True, help="YAML experiment configuration.")
    @click.option("--out", "output_dir", type=click.Path(), default=None, help="Output directory.")
    @click.option("--workers", type=int, default=None, help="Worker processes for ladder sweeps.")
    @click.option("--seed", type=int, default=None, help="Seed for random sampling and shear retries.")
    @click.option("--tol", type=float, default=None, help="Boundary value solver tolerance.")
    @wraps(command)
    def wrapper(config_path, output_dir, workers, seed, tol):
        overrides = {"output_dir": output_dir, "workers": workers, "seed": seed}
        if tol is not None:
            overrides["tolerances"] = {"bvp": tol}
        return command(config_path, overrides)

    return wrapper


def _execute(name: str, runner, config_path: str, overrides: dict) -> None:
    ctx = click.get_current_context()
    try:
        config = ConfigLoader().load(config_path, overrides)
        runner(config)
        logger.info(f"{name} completed")
    except (ConfigError, SpecError, FileNotFoundError) as e:
        logger.error(f"{name} configuration error: {e}")
        click.echo(f"Error: {e}", err=True)
        ctx.exit(EXIT_CONFIG)
    except ShilnikovError as e:
        logger.error(f"{name} solver error: {type(e).__name__}: {e}")
        click.echo(f"Error: {type(e).__name__}: {e}", err=True)
        ctx.exit(EXIT_SOLVER)


@click.group()
def main():
    """Shilnikov passage, scattering and shadowing studies."""


@main.command("model-bvp")
@_common_options
def model_bvp(config_path, overrides):
    """Fixed-energy and fixed-time passages on a model system."""
    _execute("model-bvp", run_model_bvp, config_path, overrides)


@main.command("threebody")
@_common_options
def threebody(config_path, overrides):
    """Regularized three-body checks: eigenvalues, regularization identity, optional passage."""
    _execute("threebody", run_threebody, config_path, overrides)


@main.command("shadow")
@_common_options
def shadow(config_path, overrides):
    """Shadowing orbits of a positive chain down the energy ladder."""
    _execute("shadow", run_shadow, config_path, overrides)
