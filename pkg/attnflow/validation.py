import json
import logging
import math
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from colorama import Fore as colors

from attnflow.attention import velocity_discrete, velocity_gaussian, velocity_masked
from attnflow.closed_forms import BlowUp, closed_form_commuting, closed_form_dim1
from attnflow.config import Experiment, ExperimentConfig, fixed_params
from attnflow.dynamics import SolverConfig, integrate_moments, integrate_particles
from attnflow.energetics import Energy, energy_monotonicity_report, softmax_energy_gaussian
from attnflow.errors import AttnFlowError
from attnflow.experiments import RANK_HIST_CONVERGENCE_TOL, meanfield_errors, rank_histogram, run_rank_histogram
from attnflow.measures import AttentionParams, EmpiricalMeasure, GaussianMeasure, Status, Variant
from attnflow.rng import make_rng, random_matrix, random_orthogonal, random_spd
from attnflow.sinkhorn import sinkhorn_kernel_discrete, sinkhorn_plan
from attnflow.transport import gaussian_cross_covariance


logger = logging.getLogger(__name__)

Z_LIMIT = 3.0
Z_HARD_LIMIT = 5.0


@dataclass
class CheckResult:
    """
    Outcome of one validation check.

    :param residual: the measured quantity compared against threshold (a relative error, a count, a z-score...)
    :param hard: soft checks are reported but do not decide the suite's verdict
    """
    name: str
    residual: float
    threshold: float
    passed: bool
    hard: bool = True
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(value):
            if isinstance(value, dict):
                return {str(k): clean(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [clean(v) for v in value]
            if isinstance(value, (bool, np.bool_)):
                return bool(value)
            if isinstance(value, (int, np.integer)):
                return int(value)
            if isinstance(value, (float, np.floating)):
                return float(value) if math.isfinite(value) else str(float(value))
            return value

        return clean({
            "name": self.name,
            "residual": self.residual,
            "threshold": self.threshold,
            "passed": self.passed,
            "hard": self.hard,
            "details": self.details,
        })


@dataclass
class ValidationReport:
    checks: List[CheckResult]
    seed: int
    full: bool

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks if check.hard)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "full": self.full,
            "passed": self.passed,
            "checks": [check.to_dict() for check in self.checks],
        }

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        logger.info(f"Wrote the validation report to {path}")
        return path


def z_verdict(z_scores: np.ndarray) -> Tuple[bool, dict]:
    """
    Verdict on a batch of Monte-Carlo z-scores: at most max(1, 1%) of them may exceed 3 in absolute value, and none
    may exceed 5.
    """
    z = np.abs(np.ravel(z_scores))
    allowed = max(1, int(0.01 * len(z)))
    n_outside = int(np.sum(z > Z_LIMIT))
    passed = n_outside <= allowed and float(np.max(z)) <= Z_HARD_LIMIT
    return passed, {"n_scores": len(z), "n_above_3": n_outside, "allowed_above_3": allowed}


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@dataclass(frozen=True)
class SuiteSize:
    softmax_grid: int
    commuting_configs: int
    rank_dims: Tuple[int, ...]
    rank_runs: int
    rank_variants: Tuple[Variant, ...]
    rank_t_end: float
    l2_configs: int
    eot_configs: int
    eot_samples: int
    oracle_tol: float
    bistochastic_measures: int
    meanfield_ns: Tuple[int, ...]
    meanfield_reference: int
    masked_configs: int
    velocity_configs: int
    velocity_samples: int
    oracle_samples: int
    sinkhorn_energy_configs: int
    softmax_energy_configs: int
    softmax_energy_samples: int
    determinism_runs: int


QUICK = SuiteSize(
    softmax_grid=3,
    commuting_configs=10,
    rank_dims=(3,),
    rank_runs=4,
    rank_variants=(Variant.SOFTMAX,),
    rank_t_end=20000.0,
    l2_configs=20,
    eot_configs=3,
    eot_samples=1000,
    oracle_tol=0.1,
    bistochastic_measures=20,
    meanfield_ns=(64, 256, 1024),
    meanfield_reference=512,
    masked_configs=10,
    velocity_configs=5,
    velocity_samples=20000,
    oracle_samples=800,
    sinkhorn_energy_configs=4,
    softmax_energy_configs=10,
    softmax_energy_samples=100000,
    determinism_runs=3,
)

FULL = SuiteSize(
    softmax_grid=5,
    commuting_configs=50,
    rank_dims=(3, 4, 5),
    rank_runs=200,
    rank_variants=(Variant.SOFTMAX, Variant.L2),
    rank_t_end=50000.0,
    l2_configs=200,
    eot_configs=10,
    eot_samples=2000,
    oracle_tol=0.05,
    bistochastic_measures=100,
    meanfield_ns=(256, 1024, 4096),
    meanfield_reference=2048,
    masked_configs=50,
    velocity_configs=20,
    velocity_samples=200000,
    oracle_samples=2000,
    sinkhorn_energy_configs=10,
    softmax_energy_configs=50,
    softmax_energy_samples=1000000,
    determinism_runs=10,
)


# Closed forms in dimension one

def check_softmax_dim1(grid_size: int = 5, dt: float = 1e-3, times: Sequence[float] = (0.5, 1.0, 2.0)) -> CheckResult:
    """
    Integrated one-dimensional Softmax variances against s(t) = (1/s0 - 2vat)^-1 over a grid of contracting (a, v).
    """
    cfg = SolverConfig(dt=dt, t_end=max(times))
    worst = 0.0
    for a in np.linspace(0.5, 2.0, grid_size):
        for v in -np.linspace(0.5, 2.0, grid_size):
            params = AttentionParams(Variant.SOFTMAX, [[a]], [[1.0]], [[v]])
            trajectory = integrate_moments(params, GaussianMeasure([0.0], [[1.0]]), cfg)
            recorded = np.array(trajectory.times)
            for t in times:
                i = int(np.argmin(np.abs(recorded - t)))
                expected = closed_form_dim1(Variant.SOFTMAX, a, v, 1.0, recorded[i])
                worst = max(worst, abs(trajectory.states[i].sigma[0, 0] - expected) / expected)
    return CheckResult("softmax_dim1", worst, 1e-6, worst < 1e-6, details={"grid_size": grid_size, "dt": dt})


BLOWUP_CASES = ((1.0, 1.0, 1.0), (2.0, 0.5, 1.0), (1.0, 1.0, 0.5))


def check_blowup_time(dt: float = 1e-3) -> CheckResult:
    cfg = SolverConfig(dt=dt, t_end=2.0, record_every=10 ** 9)
    worst, cases = 0.0, []
    for a, v, s0 in BLOWUP_CASES:
        t_max = closed_form_dim1(Variant.SOFTMAX, a, v, s0, np.inf).t_max
        params = AttentionParams(Variant.SOFTMAX, [[a]], [[1.0]], [[v]])
        trajectory = integrate_moments(params, GaussianMeasure([0.0], [[s0]]), cfg)
        if trajectory.status == Status.BLOW_UP:
            gap = abs(trajectory.t_star - t_max) / t_max
        else:
            gap = np.inf
        cases.append({"a": a, "v": v, "s0": s0, "t_max": t_max, "t_star": trajectory.t_star})
        worst = max(worst, gap)
    return CheckResult("blowup_time", worst, 1e-2, worst <= 1e-2, details={"cases": cases})


def check_commuting(n_configs: int = 50, seed: int = 0, dt: float = 1e-3, t: float = 5.0) -> CheckResult:
    """
    Softmax covariance dynamics with V = I and A symmetric negative definite against (Sigma_0^-1 - 2tA)^-1.
    """
    cfg = SolverConfig(dt=dt, t_end=t, record_every=10 ** 9)
    worst = 0.0
    for i in range(n_configs):
        rng = make_rng(seed, "commuting", i)
        d = int(rng.integers(1, 6))
        A = -random_spd(rng, d)
        sigma0 = random_spd(rng, d)
        identity = np.eye(d)
        trajectory = integrate_moments(
            AttentionParams(Variant.SOFTMAX, A, identity, identity), GaussianMeasure(np.zeros(d), sigma0), cfg
        )
        expected = closed_form_commuting(sigma0, A, identity, t)
        if trajectory.status != Status.COMPLETED or isinstance(expected, BlowUp):
            worst = np.inf
            continue
        worst = max(worst, _relative(trajectory.final_state().sigma, expected))
    return CheckResult("commuting_closed_form", worst, 1e-5, worst < 1e-5, details={"n_configs": n_configs})


# Long-time behavior

def check_rank_histograms(
    size: SuiteSize = QUICK, seed: int = 0, threads: int = 1, dt: float = 0.05, rank_tol: float = 1e-6
) -> CheckResult:
    """
    At least 95% of the converged rank-histogram runs must end with a covariance of rank at most ceil(d / 2), for
    every dimension, variant and value mode that has converged runs. Convergence is declared at relative rate
    RANK_HIST_CONVERGENCE_TOL and ranks are counted with the relative eigenvalue threshold rank_tol.
    """
    solver = SolverConfig(dt=dt, t_end=size.rank_t_end, convergence_tol=RANK_HIST_CONVERGENCE_TOL)
    groups, worst = [], 1.0
    for variant in size.rank_variants:
        config = ExperimentConfig(
            experiment=Experiment.RANK_HIST, variant=variant, dims=list(size.rank_dims), n_runs=size.rank_runs,
            rank_tol=rank_tol, solver=solver, seed=seed, threads=threads,
        )
        histogram = rank_histogram(config, value_modes=["identity", "random"])
        for d in size.rank_dims:
            for mode in ("identity", "random"):
                fraction = histogram.fraction_within_bound(d, mode)
                n_converged = sum(
                    r["d"] == d and r["value_mode"] == mode and r["outcome"] == "converged" for r in histogram.runs
                )
                groups.append({
                    "variant": variant.value, "d": d, "value_mode": mode,
                    "n_converged": n_converged, "fraction_within_bound": fraction,
                })
                if n_converged:
                    worst = min(worst, fraction)
    passed = any(g["n_converged"] for g in groups) and worst >= 0.95
    details = {
        "rank_tol": rank_tol, "convergence_tol": RANK_HIST_CONVERGENCE_TOL, "t_end": size.rank_t_end, "groups": groups,
    }
    return CheckResult("rank_histograms", worst, 0.95, passed, details=details)


def check_l2_global_existence(n_configs: int = 200, seed: int = 0, t_end: float = 50.0, dt: float = 0.05) -> CheckResult:
    """
    L2 covariance dynamics with an orthogonal key matrix never blow up and stay below the growth envelope
    |Sigma(t)|_F <= |Sigma_0|_F exp(2 |V|_2 |A|_2 t), which follows from |Sigma (I + 2 Sigma)^-1|_2 <= 1/2.
    """
    cfg = SolverConfig(dt=dt, t_end=t_end, blowup_threshold=1e300, record_every=10)
    blow_ups, envelope_violations, failures = 0, 0, 0
    for i in range(n_configs):
        rng = make_rng(seed, "l2_existence", i)
        d = int(rng.integers(1, 5))
        scale = 1 / (2 * np.sqrt(d))
        Q = scale * random_matrix(rng, d, d)
        V = scale * random_matrix(rng, d, d)
        K = random_orthogonal(rng, d)
        sigma0 = random_spd(rng, d)
        params = AttentionParams(Variant.L2, Q, K, V)
        trajectory = integrate_moments(params, GaussianMeasure(np.zeros(d), sigma0), cfg)

        if trajectory.status == Status.BLOW_UP:
            blow_ups += 1
        elif trajectory.status == Status.NUMERICAL_FAILURE:
            failures += 1
        rate = 2 * np.linalg.norm(V, 2) * np.linalg.norm(params.A, 2)
        norm0 = np.linalg.norm(sigma0)
        for t, state in zip(trajectory.times, trajectory.states):
            if np.linalg.norm(state.sigma) > (1 + 1e-6) * norm0 * np.exp(rate * t):
                envelope_violations += 1
                break

    details = {"blow_ups": blow_ups, "envelope_violations": envelope_violations, "numerical_failures": failures}
    residual = blow_ups + envelope_violations
    return CheckResult("l2_global_existence", residual, 0, residual == 0, details=details)


# Entropic transport

def _random_eot_problem(rng: np.random.Generator, d: int):
    Q = np.eye(d) + 0.3 * random_matrix(rng, d, d)
    K = np.eye(d) + 0.3 * random_matrix(rng, d, d)
    eps = float(rng.uniform(0.5, 1.0))
    g1 = GaussianMeasure(0.5 * rng.standard_normal(d), 0.5 * random_spd(rng, d, floor=0.5))
    g2 = GaussianMeasure(0.5 * rng.standard_normal(d), 0.5 * random_spd(rng, d, floor=0.5))
    return Q, K, eps, g1, g2


def check_eot_gaussian(n_configs: int = 10, n_samples: int = 2000, seed: int = 0, tol: float = 0.05) -> CheckResult:
    """
    The closed-form Gaussian entropic coupling: an exact one-dimensional value, then the cross-covariance of the
    discrete Sinkhorn plan between samples against the closed form at the samples' moments.
    """
    one = GaussianMeasure([0.0], [[1.0]])
    exact = gaussian_cross_covariance(one, one, [[1.0]], [[1.0]], 1.0)[0, 0]
    exact_gap = abs(exact - (np.sqrt(1.25) - 0.5))

    worst = 0.0
    for i in range(n_configs):
        rng = make_rng(seed, "eot", i)
        d = int(rng.integers(1, 4))
        Q, K, eps, g1, g2 = _random_eot_problem(rng, d)
        X, Y = g1.sample(rng, n_samples), g2.sample(rng, n_samples)
        plan = sinkhorn_plan(X, Y, Q, K, eps, tol=1e-9)
        Xc, Yc = X - X.mean(axis=0), Y - Y.mean(axis=0)
        empirical = Xc.T @ plan @ Yc

        moments = [GaussianMeasure(Z.mean(axis=0), np.atleast_2d(np.cov(Z.T, bias=True))) for Z in (X, Y)]
        reference = gaussian_cross_covariance(moments[0], moments[1], Q, K, eps)
        worst = max(worst, _relative(empirical, reference))

    passed = exact_gap <= 1e-12 and worst <= tol
    details = {"exact_gap": exact_gap, "n_configs": n_configs, "n_samples": n_samples}
    return CheckResult("eot_gaussian", worst, tol, passed, details=details)


def check_bistochastic(n_measures: int = 100, seed: int = 0) -> CheckResult:
    worst, failures = 0.0, 0
    for i in range(n_measures):
        rng = make_rng(seed, "bistochastic", i)
        d = int(rng.integers(1, 4))
        n = int(rng.integers(2, 65))
        params = AttentionParams(
            Variant.SINKHORN, random_matrix(rng, d, d), random_matrix(rng, d, d), np.eye(d),
            eps=float(rng.uniform(0.5, 2.0)),
        )
        mu = EmpiricalMeasure(rng.standard_normal((n, d)))
        try:
            kernel = sinkhorn_kernel_discrete(mu, params, tol=1e-10)
        except AttnFlowError as e:
            logger.warning(f"Bistochasticity measure {i}: {e}")
            failures += 1
            continue
        worst = max(worst, kernel.marginal_residual())
    residual = np.inf if failures else worst
    return CheckResult("sinkhorn_bistochastic", residual, 1e-8, residual < 1e-8, details={"not_converged": failures})


# Particles against Gaussians

MEANFIELD_PARAMS = {"Q": [[-0.5, 0.2], [-0.2, -0.5]], "K": [[1.0, 0.0], [0.0, 1.0]], "V": [[1.0, 0.0], [0.0, 1.0]]}


def check_meanfield(
    ns: Sequence[int] = (256, 1024, 4096), reference_n: int = 2048, seed: int = 0, dt: float = 0.01
) -> CheckResult:
    """
    Empirical covariances of particle runs at time 1 against the moment ODE. The error must shrink from the
    smallest to the largest n, with at most one increase between consecutive sizes, and end below 10% of |Sigma(1)|_F.
    """
    config = ExperimentConfig(
        experiment=Experiment.MEANFIELD, variant=Variant.SOFTMAX, d=2, params=MEANFIELD_PARAMS, ns=list(ns),
        reference_n=reference_n, solver=SolverConfig(dt=dt, t_end=1.0), seed=seed,
    )
    params = fixed_params(config)
    rows = meanfield_errors(config, params)
    moments = integrate_moments(params, config.initial_gaussian(), replace(config.solver, record_every=10 ** 9))
    scale = float(np.linalg.norm(moments.final_state().sigma))

    errors = [row["cov_error"] for row in rows]
    details = {"ns": list(ns), "cov_errors": errors, "sigma_norm": scale}
    if any(e is None for e in errors):
        return CheckResult("meanfield", np.inf, 0.1, False, details=details)
    decreases = sum(e2 < e1 for e1, e2 in zip(errors, errors[1:]))
    relative = errors[-1] / scale
    passed = errors[-1] < errors[0] and decreases >= len(errors) - 2 and relative < 0.1
    details["decreases"] = decreases
    return CheckResult("meanfield", relative, 0.1, passed, details=details)


def check_masked(n_configs: int = 50, seed: int = 0) -> CheckResult:
    """
    Positions never move along masked particle runs, and a query at position 1 sees the unmasked velocity.
    """
    cfg = SolverConfig(dt=0.05, t_end=0.5)
    worst_gap, moved = 0.0, 0
    for i in range(n_configs):
        rng = make_rng(seed, "masked", i)
        d, n = int(rng.integers(1, 4)), int(rng.integers(4, 13))
        inner = (Variant.SOFTMAX, Variant.L2)[i % 2]
        Q, K, V = (0.5 * random_matrix(rng, d, d) for _ in range(3))
        params = AttentionParams(Variant.MASKED, Q, K, V, inner=inner)
        mu_bar = EmpiricalMeasure.with_sequence_positions(rng.standard_normal((n, d)))

        trajectory = integrate_particles(params, mu_bar, cfg)
        if not all(np.array_equal(state.positions, mu_bar.positions) for state in trajectory.states):
            moved += 1

        x = rng.standard_normal(d)
        lifted = velocity_masked(params, mu_bar, 1.0, x)
        unmasked = velocity_discrete(params.unmasked(), mu_bar.space_marginal(), x)
        worst_gap = max(worst_gap, abs(lifted[0]), float(np.max(np.abs(lifted[1:] - unmasked))))

    passed = moved == 0 and worst_gap <= 1e-12
    return CheckResult("masked_invariants", worst_gap, 1e-12, passed, details={"moved_positions": moved})


# Monte-Carlo parity of the Gaussian closed forms

def _random_velocity_problem(rng: np.random.Generator, variant: Variant, d: int) -> Tuple[AttentionParams, GaussianMeasure]:
    if variant == Variant.SINKHORN:
        Q = np.eye(d) + 0.3 * random_matrix(rng, d, d)
        K = np.eye(d) + 0.3 * random_matrix(rng, d, d)
        params = AttentionParams(variant, Q, K, 0.5 * random_matrix(rng, d, d), eps=float(rng.uniform(0.5, 1.0)))
        return params, GaussianMeasure(rng.standard_normal(d), 0.5 * random_spd(rng, d, floor=0.5))
    scale = 0.3 if variant == Variant.SOFTMAX else 0.5
    Q = scale * random_matrix(rng, d, d) / np.sqrt(d)
    K = random_matrix(rng, d, d) / np.sqrt(d)
    params = AttentionParams(variant, Q, K, random_matrix(rng, d, d), eps=float(rng.uniform(0.5, 2.0)))
    return params, GaussianMeasure(0.3 * rng.standard_normal(d), 0.5 * random_spd(rng, d, floor=0.2))


def _sampled_velocity(params: AttentionParams, x: np.ndarray, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Monte-Carlo estimate of the defining integral of the velocity at x over the samples Y, with its standard error.
    Softmax and L2 use the self-normalized estimator and its delta-method error.
    """
    VY = Y @ params.V.T
    if params.variant == Variant.LINEAR_EPS:
        centered = Y - Y.mean(axis=0)
        terms = VY / params.eps + (centered @ params.V.T) * (centered @ (params.A @ x))[:, None]
        return terms.mean(axis=0), terms.std(axis=0) / np.sqrt(len(Y))

    if params.variant == Variant.SOFTMAX:
        log_w = Y @ (params.A @ x)
    else:
        log_w = -np.sum((x @ params.Q.T - Y @ params.K.T) ** 2, axis=1)
    w = np.exp(log_w - np.max(log_w))
    estimate = w @ VY / np.sum(w)
    std_error = np.sqrt(w ** 2 @ (VY - estimate) ** 2) / np.sum(w)
    return estimate, std_error


def check_gaussian_velocity(
    n_configs: int = 20,
    n_samples: int = 200000,
    oracle_samples: int = 2000,
    seed: int = 0,
    oracle_tol: float = 0.05,
    n_points: int = 5,
    closed_form: Callable[[AttentionParams, GaussianMeasure], object] = velocity_gaussian,
) -> CheckResult:
    """
    Closed-form Gaussian velocity fields against the defining integrals. Softmax, L2 and linear-eps are sampled and
    judged on z-scores; Sinkhorn is compared to the discrete Sinkhorn velocity of a large sample, within oracle_tol.

    :param closed_form: the Gaussian velocity implementation under test
    """
    z_scores, sinkhorn_worst = [], 0.0
    for variant in (Variant.SOFTMAX, Variant.L2, Variant.LINEAR_EPS, Variant.SINKHORN):
        for i in range(n_configs):
            rng = make_rng(seed, "velocity", variant.value, i)
            d = int(rng.integers(1, 4))
            params, g = _random_velocity_problem(rng, variant, d)
            points = g.sample(rng, n_points)
            closed = closed_form(params, g)(points)

            if variant == Variant.SINKHORN:
                mu = EmpiricalMeasure(g.sample(rng, oracle_samples))
                kernel = sinkhorn_kernel_discrete(mu, params, tol=1e-9)
                sinkhorn_worst = max(sinkhorn_worst, _relative(closed, velocity_discrete(params, mu, points, kernel)))
                continue
            Y = g.sample(rng, n_samples)
            for x, expected in zip(points, closed):
                estimate, std_error = _sampled_velocity(params, x, Y)
                z_scores.append((expected - estimate) / np.maximum(std_error, 1e-300))

    z_passed, details = z_verdict(np.concatenate(z_scores))
    z_max = float(np.max(np.abs(np.concatenate(z_scores))))
    details.update({"max_abs_z": z_max, "sinkhorn_relative_error": sinkhorn_worst, "oracle_tol": oracle_tol})
    passed = z_passed and sinkhorn_worst <= oracle_tol
    return CheckResult("gaussian_velocity_parity", z_max, Z_LIMIT, passed, details=details)


def check_sinkhorn_adjudication(n_configs: int = 5, oracle_samples: int = 2000, seed: int = 0) -> CheckResult:
    """
    Compares the two candidate C matrices of the Sinkhorn Gaussian field against the discrete Sinkhorn velocity, on
    non-normal A where they differ. Soft: reported, not part of the verdict.
    """
    residuals = {"lemma": 0.0, "transposed": 0.0}
    for i in range(n_configs):
        rng = make_rng(seed, "adjudication", i)
        shear = np.array([[1.0, 1.5], [0.0, 1.0]])
        params = AttentionParams(
            Variant.SINKHORN, shear + 0.1 * random_matrix(rng, 2, 2), np.eye(2), 0.5 * random_matrix(rng, 2, 2),
            eps=float(rng.uniform(0.5, 1.0)),
        )
        g = GaussianMeasure(rng.standard_normal(2), 0.5 * random_spd(rng, 2, floor=0.5))
        points = g.sample(rng, 5)
        mu = EmpiricalMeasure(g.sample(rng, oracle_samples))
        oracle = velocity_discrete(params, mu, points, sinkhorn_kernel_discrete(mu, params, tol=1e-9))
        for inner in residuals:
            closed = velocity_gaussian(params, g, sinkhorn_inner=inner)(points)
            residuals[inner] = max(residuals[inner], _relative(closed, oracle))

    passed = residuals["lemma"] <= residuals["transposed"]
    return CheckResult(
        "sinkhorn_c_adjudication", residuals["lemma"], residuals["transposed"], passed, hard=False,
        details={f"{inner}_relative_error": value for inner, value in residuals.items()},
    )


# Energies

def check_sinkhorn_energy(n_configs: int = 10, seed: int = 0, t_end: float = 5.0, dt: float = 0.01) -> CheckResult:
    """
    The Sinkhorn Gaussian energy is non-increasing along one-dimensional flows with A = A^T = -V.
    """
    cfg = SolverConfig(dt=dt, t_end=t_end, record_every=10)
    worst, failed = 0.0, []
    for i in range(n_configs):
        rng = make_rng(seed, "sinkhorn_energy", i)
        q, k = rng.uniform(0.5, 1.5, size=2) * rng.choice([-1.0, 1.0], size=2)
        params = AttentionParams(Variant.SINKHORN, [[q]], [[k]], [[-k * q]], eps=float(rng.uniform(0.5, 2.0)))
        g0 = GaussianMeasure([float(rng.standard_normal())], [[float(rng.uniform(0.5, 2.0))]])
        trajectory = integrate_moments(params, g0, cfg)
        report = energy_monotonicity_report(trajectory, Energy.SINK_GAUSSIAN, params)
        scale = 1 + max(abs(v) for v in report.values if np.isfinite(v))
        worst = max(worst, report.max_increment / scale)
        if not (report.passed and report.condition_met and trajectory.status == Status.COMPLETED):
            failed.append(i)
    return CheckResult("sinkhorn_energy_monotone", worst, 1e-6, not failed, details={"failed_configs": failed})


def check_softmax_energy(n_configs: int = 50, n_samples: int = 1000000, seed: int = 0) -> CheckResult:
    """
    Closed-form Softmax Gaussian energy against a Monte-Carlo estimate of (1/2) E exp(A x . y). Configurations are
    redrawn until the energy of 2A is finite too, so that the estimator has a finite variance.
    """
    z_scores, redraws = [], 0
    for i in range(n_configs):
        rng = make_rng(seed, "softmax_energy", i)
        while True:
            d = int(rng.integers(1, 4))
            A = 0.3 * random_matrix(rng, d, d) / np.sqrt(d)
            g = GaussianMeasure(0.3 * rng.standard_normal(d), 0.5 * random_spd(rng, d, floor=0.2))
            try:
                softmax_energy_gaussian(g, 2 * A)
                expected = softmax_energy_gaussian(g, A)
                break
            except AttnFlowError:
                redraws += 1
        X, Y = g.sample(rng, n_samples), g.sample(rng, n_samples)
        w = 0.5 * np.exp(np.sum((X @ A.T) * Y, axis=1))
        z_scores.append((expected - w.mean()) / (w.std() / np.sqrt(n_samples)))

    z_passed, details = z_verdict(np.array(z_scores))
    z_max = float(np.max(np.abs(z_scores)))
    details.update({"max_abs_z": z_max, "redraws": redraws})
    return CheckResult("softmax_energy_mc", z_max, Z_LIMIT, z_passed, details=details)


# Reproducibility

def check_determinism(n_runs: int = 3, seed: int = 0, threads: int = 1) -> CheckResult:
    """
    Two rank-histogram runs with the same configuration and seed write identical CSV files.
    """
    solver = SolverConfig(dt=0.05, t_end=50.0, convergence_tol=1e-4)
    outputs = []
    with tempfile.TemporaryDirectory() as tmp:
        for attempt in ("first", "second"):
            out = Path(tmp) / attempt
            config = ExperimentConfig(
                experiment=Experiment.RANK_HIST, dims=[3], n_runs=n_runs, solver=solver, seed=seed, threads=threads,
                out=str(out),
            )
            run_rank_histogram(config)
            outputs.append({name: (out / name).read_bytes() for name in ("rank_hist.csv", "rank_hist_runs.csv")})
    differing = sorted(name for name in outputs[0] if outputs[0][name] != outputs[1][name])
    return CheckResult("determinism", len(differing), 0, not differing, details={"differing_files": differing})


# Suite

CheckFn = Callable[[SuiteSize, int, int], CheckResult]

CHECKS: Dict[str, Tuple[CheckFn, bool]] = {
    "softmax_dim1": (lambda s, seed, threads: check_softmax_dim1(s.softmax_grid), True),
    "blowup_time": (lambda s, seed, threads: check_blowup_time(), True),
    "commuting_closed_form": (lambda s, seed, threads: check_commuting(s.commuting_configs, seed), True),
    "rank_histograms": (lambda s, seed, threads: check_rank_histograms(s, seed, threads), True),
    "l2_global_existence": (lambda s, seed, threads: check_l2_global_existence(s.l2_configs, seed), True),
    "eot_gaussian": (
        lambda s, seed, threads: check_eot_gaussian(s.eot_configs, s.eot_samples, seed, s.oracle_tol), True
    ),
    "sinkhorn_bistochastic": (lambda s, seed, threads: check_bistochastic(s.bistochastic_measures, seed), True),
    "meanfield": (lambda s, seed, threads: check_meanfield(s.meanfield_ns, s.meanfield_reference, seed), True),
    "masked_invariants": (lambda s, seed, threads: check_masked(s.masked_configs, seed), True),
    "gaussian_velocity_parity": (
        lambda s, seed, threads: check_gaussian_velocity(
            s.velocity_configs, s.velocity_samples, s.oracle_samples, seed, s.oracle_tol
        ),
        True,
    ),
    "sinkhorn_c_adjudication": (
        lambda s, seed, threads: check_sinkhorn_adjudication(oracle_samples=s.oracle_samples, seed=seed), False
    ),
    "sinkhorn_energy_monotone": (lambda s, seed, threads: check_sinkhorn_energy(s.sinkhorn_energy_configs, seed), True),
    "softmax_energy_mc": (
        lambda s, seed, threads: check_softmax_energy(s.softmax_energy_configs, s.softmax_energy_samples, seed), True
    ),
    "determinism": (lambda s, seed, threads: check_determinism(s.determinism_runs, seed, threads), True),
}


def _run_check(name: str, fn: CheckFn, hard: bool, size: SuiteSize, seed: int, threads: int) -> CheckResult:
    logger.info(f"Running check {name}")
    try:
        result = fn(size, seed, threads)
    except Exception as e:
        logger.error(f"Check {name} crashed: {e!r}")
        return CheckResult(name, float("nan"), float("nan"), False, hard, details={"error": repr(e)})
    result.hard = hard
    level = logging.INFO if result.passed else logging.WARNING
    logger.log(level, f"Check {name}: {'passed' if result.passed else 'FAILED'} (residual {result.residual:.3e})")
    return result


def run_validation_suite(
    full: bool = False,
    seed: int = 0,
    threads: int = 1,
    out_dir: Optional[Path] = None,
    only: Optional[Sequence[str]] = None,
) -> ValidationReport:
    """
    Runs every validation check and collects their results. A check that crashes is reported as failed and the
    others still run.

    :param full: run the checks at their acceptance sizes instead of the quick ones
    :param out_dir: when given, the report is also written there as validation.json
    :param only: restricts the suite to these check names
    """
    size = FULL if full else QUICK
    names = list(CHECKS) if only is None else list(only)
    unknown = sorted(set(names) - set(CHECKS))
    assert not unknown, f"Unknown checks: {unknown}"

    checks = [_run_check(name, *CHECKS[name], size, seed, threads) for name in names]
    report = ValidationReport(checks, seed, full)
    if out_dir is not None:
        report.write(Path(out_dir) / "validation.json")
    return report


def render_report(report: ValidationReport, with_colors: bool = True) -> str:
    lines = []
    for check in report.checks:
        if check.passed:
            color, label = colors.GREEN, "PASS"
        elif check.hard:
            color, label = colors.RED, "FAIL"
        else:
            color, label = colors.YELLOW, "SOFT"
        tag = f"{color}{label}{colors.RESET}" if with_colors else label
        lines.append(f"{tag} {check.name:<28} residual={check.residual:.3e} threshold={check.threshold:.3e}")
    verdict = "all hard checks passed" if report.passed else "some hard checks failed"
    lines.append(f"{len(report.checks)} checks, {verdict}")
    return "\n".join(lines)
