import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

import attnflow
from attnflow.config import (
    ExperimentConfig, Experiment, VALUE_MODES, fixed_params, regime_params, assemble_params
)
from attnflow.dynamics import integrate_moments, integrate_particles
from attnflow.errors import ConfigError
from attnflow.linalg import rank_eps, sym_eig
from attnflow.measures import AttentionParams, EmpiricalMeasure, GaussianMeasure, Status, Trajectory, Variant
from attnflow.rng import make_rng, random_matrix, random_spd
from attnflow.transport import wasserstein_discrete, MAX_ASSIGNMENT_SIZE


logger = logging.getLogger(__name__)

RANK_HIST_CONVERGENCE_TOL = 1e-8
TWO_LINES_MIN_ANGLE = 10.0


# Output

def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return "" if value is None else value


def write_csv(path: Path, rows: Sequence[dict], fieldnames: Optional[List[str]] = None) -> Path:
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            fieldnames.extend(k for k in row if k not in fieldnames)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in fieldnames})
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def git_hash(repo_root: Path = Path(__file__).resolve().parents[1]) -> str:
    head = repo_root / ".git" / "HEAD"
    if not head.exists():
        return "0" * 40
    try:
        text = head.read_text(encoding="utf-8").strip()
        if text.startswith("ref:"):
            ref_path = repo_root / ".git" / text.split(":", 1)[1].strip()
            text = ref_path.read_text(encoding="utf-8").strip() if ref_path.exists() else ""
        return text[:40].ljust(40, "0")
    except OSError:
        return "0" * 40


def write_manifest(out_dir: Path, config: ExperimentConfig, files: Iterable[Path], summary: Optional[dict] = None) -> Path:
    manifest = {
        "experiment": config.experiment.value,
        "seed": config.seed,
        "version": attnflow.__version__,
        "git_hash": git_hash(),
        "config": config.to_dict(),
        "files": sorted(str(Path(f).relative_to(out_dir)) for f in files),
    }
    if summary is not None:
        manifest["summary"] = summary
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def parallel_map(fn: Callable, tasks: Sequence, threads: int = 1) -> list:
    """
    Maps fn over tasks, in worker processes when threads > 1. Results come back in task order.
    """
    if threads <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    try:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    except (OSError, BrokenProcessPool) as e:
        logger.warning(f"Process pool unavailable ({e}), running sequentially")
        return [fn(task) for task in tasks]


# Parameters

def build_params(config: ExperimentConfig, rng: Optional[np.random.Generator] = None) -> AttentionParams:
    if config.params is not None:
        return fixed_params(config)
    if config.regime == "two_lines":
        params = search_two_lines(config)
    else:
        rng = rng if rng is not None else make_rng(config.seed, "params")
        params = regime_params(
            config.regime, config.variant, config.d, rng, config.regime_scale, config.eps, config.n_heads,
            config.value_mode
        )
    if config.masked:
        params = replace(params, variant=Variant.MASKED, inner=params.variant)
    return params


# Cone

def cone_coordinates(sigma: np.ndarray) -> np.ndarray:
    """
    (x, y, z) = (a - b, 2c, a + b) for sigma = [[a, c], [c, b]]; PSD matrices fill the cone z >= |(x, y)|.
    """
    return np.array([sigma[0, 0] - sigma[1, 1], 2 * sigma[0, 1], sigma[0, 0] + sigma[1, 1]])


def grid_covariances(config: ExperimentConfig) -> List[np.ndarray]:
    """
    Initial covariances on a square grid of the horizontal slice z = grid_trace of the cone, restricted to the disk
    of radius grid_extent * grid_trace.
    """
    z = config.grid_trace
    r = config.grid_extent * z
    coords = np.linspace(-r, r, config.grid_size) if config.grid_size > 1 else np.zeros(1)
    return [
        np.array([[(z + x) / 2, y / 2], [y / 2, (z - x) / 2]])
        for x in coords for y in coords if x * x + y * y <= r * r * (1 + 1e-12)
    ]


def _limit_angle(sigma: np.ndarray) -> float:
    _, eigvecs = sym_eig(sigma)
    u = eigvecs[:, 0]
    return float(np.degrees(np.arctan2(u[1], u[0])) % 180.0)


def _angle_gap(a: float, b: float) -> float:
    gap = abs(a - b) % 180.0
    return min(gap, 180.0 - gap)


@dataclass
class ConeResult:
    index: int
    trajectory: Trajectory
    summary: dict


def _cone_trajectory(task) -> ConeResult:
    index, params, sigma0, solver, rank_tol = task
    trajectory = integrate_moments(params, GaussianMeasure(np.zeros(2), sigma0), solver)
    final = trajectory.final_state().sigma
    summary = {
        "index": index,
        "x0": cone_coordinates(sigma0)[0],
        "y0": cone_coordinates(sigma0)[1],
        "z0": cone_coordinates(sigma0)[2],
        "status": trajectory.status.value,
        "t_star": trajectory.t_star,
        "t_final": trajectory.t_final,
        "final_fro": float(np.linalg.norm(final)),
        "final_rank": None,
        "limit_angle": None,
    }
    if trajectory.status == Status.COMPLETED:
        summary["final_rank"] = rank_eps(final, rank_tol)
        if summary["final_rank"] == 1:
            summary["limit_angle"] = _limit_angle(final)
    return ConeResult(index, trajectory, summary)


def _cone_rows(result: ConeResult) -> List[dict]:
    blown_up = result.trajectory.status == Status.BLOW_UP
    rows = []
    for t, state in zip(result.trajectory.times, result.trajectory.states):
        x, y, z = cone_coordinates(state.sigma)
        row = {"t": t, "x": x, "y": y, "z": z, "status": result.trajectory.status.value}
        if blown_up and np.isfinite(z) and z > 0:
            row["proj_x"], row["proj_y"] = x / z, y / z
        rows.append(row)
    return rows


def cone_sweep(config: ExperimentConfig, params: AttentionParams, covariances: List[np.ndarray]) -> List[ConeResult]:
    tasks = [(i, params, sigma0, config.solver, config.rank_tol) for i, sigma0 in enumerate(covariances)]
    return parallel_map(_cone_trajectory, tasks, config.threads)


def search_two_lines(config: ExperimentConfig) -> AttentionParams:
    """
    Searches random (A, V) pairs, with A + A^T indefinite, for one where every start of a coarse grid converges to a
    rank-one limit and the limits span at least two distinct lines.
    """
    starts = grid_covariances(replace(config, grid_size=3))
    search_config = replace(config, threads=1)
    for candidate in range(config.search_candidates):
        rng = make_rng(config.seed, "two_lines", candidate)
        A = config.regime_scale * random_matrix(rng, 2, 2)
        V = random_matrix(rng, 2, 2)
        sym_eigvals = np.linalg.eigvalsh(A + A.T)
        if not sym_eigvals[0] < 0 < sym_eigvals[-1]:
            continue
        params = assemble_params(config.variant, A, np.eye(2), V, config.eps, config.n_heads)
        results = cone_sweep(search_config, params, starts)
        angles = [r.summary["limit_angle"] for r in results]
        if any(a is None for a in angles):
            continue
        spread = max(_angle_gap(a, b) for a in angles for b in angles)
        if spread >= TWO_LINES_MIN_ANGLE:
            logger.info(f"Found a two-lines example at candidate {candidate} (limit lines {spread:.1f} degrees apart)")
            return params
    raise ConfigError(f"regime: no two-lines example found among {config.search_candidates} candidates")


def run_cone2d(config: ExperimentConfig) -> List[dict]:
    """
    Integrates the covariance dynamics from every grid initialization and writes one trajectory CSV per
    initialization (cone coordinates, plus the trace-normalized projection for blow-ups) and a summary CSV.
    """
    out_dir = Path(config.out)
    params = build_params(config)
    covariances = grid_covariances(config)
    logger.info(f"Running {len(covariances)} cone trajectories ({config.variant.value}, regime {config.regime})")

    results = cone_sweep(config, params, covariances)
    files = []
    fieldnames = ["t", "x", "y", "z", "status", "proj_x", "proj_y"]
    for result in results:
        files.append(write_csv(out_dir / f"cone2d_{result.index:03d}.csv", _cone_rows(result), fieldnames))
    summaries = [result.summary for result in results]
    files.append(write_csv(out_dir / "cone2d_summary.csv", summaries, list(summaries[0])))

    counts = {status.value: sum(s["status"] == status.value for s in summaries) for status in Status}
    write_manifest(out_dir, config, files, {"statuses": counts, "searched_parameters": config.regime == "two_lines"})
    return summaries


# Rank histograms

def _rank_hist_run(task) -> dict:
    seed, variant, d, value_mode, run, solver, rank_tol = task
    rng = make_rng(seed, "rank_hist", d, VALUE_MODES.index(value_mode), run)
    params = regime_params("rank_hist", variant, d, rng, value_mode=value_mode)
    sigma0 = random_spd(rng, d)
    trajectory = integrate_moments(params, GaussianMeasure(np.zeros(d), sigma0), solver)

    row = {"d": d, "value_mode": value_mode, "run": run, "rank": None, "t_final": trajectory.t_final}
    if trajectory.status == Status.BLOW_UP:
        row["outcome"] = "blow_up"
    elif trajectory.status == Status.NUMERICAL_FAILURE:
        row["outcome"] = "numerical_failure"
    elif trajectory.converged_at is None:
        row["outcome"] = "not_converged"
    else:
        row["outcome"] = "converged"
        row["rank"] = rank_eps(trajectory.final_state().sigma, rank_tol)
    return row


@dataclass
class RankHistogram:
    runs: List[dict]
    rows: List[dict]

    def fraction_within_bound(self, d: int, value_mode: Optional[str] = None) -> float:
        """
        Fraction of the converged runs in dimension d whose limiting rank is at most ceil(d / 2); NaN without any
        converged run.
        """
        ranks = [
            r["rank"] for r in self.runs
            if r["d"] == d and r["outcome"] == "converged" and value_mode in (None, r["value_mode"])
        ]
        if not ranks:
            return float("nan")
        return sum(rank <= math.ceil(d / 2) for rank in ranks) / len(ranks)


def rank_histogram(config: ExperimentConfig, value_modes: Optional[Sequence[str]] = None) -> RankHistogram:
    solver = config.solver
    if solver.convergence_tol is None:
        solver = replace(solver, convergence_tol=RANK_HIST_CONVERGENCE_TOL)
    # Only the limit matters
    solver = replace(solver, record_every=10 ** 9)
    value_modes = value_modes or [config.value_mode]

    tasks = [
        (config.seed, config.variant, d, mode, run, solver, config.rank_tol)
        for d in config.dims for mode in value_modes for run in range(config.n_runs)
    ]
    runs = parallel_map(_rank_hist_run, tasks, config.threads)

    rows = []
    outcomes = ("blow_up", "not_converged", "numerical_failure")
    for d in config.dims:
        for mode in value_modes:
            subset = [r for r in runs if r["d"] == d and r["value_mode"] == mode]
            base = {"d": d, "variant": config.variant.value, "value_mode": mode, "bound": math.ceil(d / 2)}
            for rank in range(d + 1):
                count = sum(r["outcome"] == "converged" and r["rank"] == rank for r in subset)
                rows.append({**base, "outcome": "converged", "rank": rank, "count": count})
            for outcome in outcomes:
                rows.append({**base, "outcome": outcome, "rank": None, "count": sum(r["outcome"] == outcome for r in subset)})
    return RankHistogram(runs, rows)


def run_rank_histogram(config: ExperimentConfig) -> RankHistogram:
    out_dir = Path(config.out)
    logger.info(f"Running {config.n_runs} rank-histogram runs per dimension in {config.dims} ({config.variant.value})")
    histogram = rank_histogram(config)
    files = [
        write_csv(out_dir / "rank_hist.csv", histogram.rows, ["d", "variant", "value_mode", "outcome", "rank", "count", "bound"]),
        write_csv(out_dir / "rank_hist_runs.csv", histogram.runs, ["d", "value_mode", "run", "outcome", "rank", "t_final"]),
    ]
    summary = {str(d): histogram.fraction_within_bound(d) for d in config.dims}
    write_manifest(out_dir, config, files, {"fraction_within_bound": summary})
    return histogram


# Mean field

def _subsample(tokens: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    if len(tokens) <= m:
        return tokens
    return tokens[np.sort(rng.choice(len(tokens), size=m, replace=False))]


def meanfield_errors(config: ExperimentConfig, params: AttentionParams) -> List[dict]:
    g0 = config.initial_gaussian()
    solver = replace(config.solver, record_every=10 ** 9, convergence_tol=None)
    moments = integrate_moments(params, g0, solver)
    if moments.status != Status.COMPLETED:
        logger.warning(f"The moment reference ended with status {moments.status.value}")
    reference = moments.final_state()

    def particle_run(n: int) -> Trajectory:
        tokens = g0.sample(make_rng(config.seed, "meanfield", n), n)
        return integrate_particles(params, EmpiricalMeasure(tokens), solver)

    reference_run = particle_run(config.reference_n)
    rows = []
    for n in config.ns:
        run = reference_run if n == config.reference_n else particle_run(n)
        row = {"n": n, "status": run.status.value, "cov_error": None, "mean_error": None, "w2_error": None}
        if run.status == Status.COMPLETED and reference_run.status == Status.COMPLETED:
            final = run.final_state()
            row["cov_error"] = float(np.linalg.norm(final.covariance() - reference.sigma))
            row["mean_error"] = float(np.linalg.norm(final.mean() - reference.alpha))
            m = min(n, config.reference_n, MAX_ASSIGNMENT_SIZE)
            X = _subsample(final.tokens, m, make_rng(config.seed, "subsample", n))
            Y = _subsample(reference_run.final_state().tokens, m, make_rng(config.seed, "subsample_reference", n))
            row["w2_error"] = wasserstein_discrete(2, X, Y)
        rows.append(row)
        logger.info(f"n={n}: covariance error {row['cov_error']}, W2 error {row['w2_error']}")
    return rows


def run_meanfield(config: ExperimentConfig) -> List[dict]:
    """
    Compares particle runs of increasing size against the moment-ODE solution of the same Gaussian initialization.
    """
    out_dir = Path(config.out)
    rows = meanfield_errors(config, build_params(config))
    files = [write_csv(out_dir / "meanfield.csv", rows, ["n", "status", "cov_error", "mean_error", "w2_error"])]
    write_manifest(out_dir, config, files)
    return rows


# Single trajectory

def run_single(config: ExperimentConfig) -> Trajectory:
    out_dir = Path(config.out)
    params = build_params(config)
    g0 = config.initial_gaussian()
    if config.mode == "gaussian":
        if config.masked:
            raise ConfigError("masked: masked attention has no Gaussian closed form")
        trajectory = integrate_moments(params, g0, config.solver)
    else:
        tokens = g0.sample(make_rng(config.seed, "tokens"), config.n_tokens)
        x0 = EmpiricalMeasure.with_sequence_positions(tokens) if config.masked else EmpiricalMeasure(tokens)
        trajectory = integrate_particles(params, x0, config.solver)

    files = [write_csv(out_dir / "trajectory.csv", trajectory.to_rows())]
    summary = {"status": trajectory.status.value, "t_star": trajectory.t_star, "converged_at": trajectory.converged_at}
    write_manifest(out_dir, config, files, summary)
    return trajectory


RUNNERS: Dict[Experiment, Callable] = {
    Experiment.CONE2D: run_cone2d,
    Experiment.RANK_HIST: run_rank_histogram,
    Experiment.MEANFIELD: run_meanfield,
    Experiment.RUN: run_single,
}
