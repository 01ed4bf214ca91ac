import json
import logging
from dataclasses import dataclass, field, fields, asdict
from enum import Enum
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from attnflow.attention import GAUSSIAN_VARIANTS
from attnflow.dynamics import SolverConfig
from attnflow.errors import ConfigError, AttnFlowError
from attnflow.measures import AttentionParams, GaussianMeasure, Head, Variant
from attnflow.rng import random_matrix, random_orthogonal, random_spd, random_skew


logger = logging.getLogger(__name__)


class Experiment(str, Enum):
    CONE2D = "cone2d"
    RANK_HIST = "rank_hist"
    MEANFIELD = "meanfield"
    VALIDATE = "validate"
    RUN = "run"


REGIMES = ("to_zero", "line", "plane", "blowup", "mixed", "two_lines", "rank_hist")
VALUE_MODES = ("identity", "random")
RUN_MODES = ("gaussian", "particles")


@dataclass
class ExperimentConfig:
    """
    Everything an experiment run depends on. The seed determines all randomness.

    Parameters are either given inline (params: Q, K, V and optionally eps, heads, inner) or generated by a named
    regime. Fields irrelevant to the chosen experiment are ignored.
    """
    experiment: Experiment
    variant: Variant = Variant.SOFTMAX
    d: int = 2
    regime: Optional[str] = None
    params: Optional[dict] = None
    regime_scale: float = 1.0
    eps: float = 1.0
    n_heads: int = 2
    value_mode: str = "identity"
    # cone2d
    grid_size: int = 5
    grid_extent: float = 0.8
    grid_trace: float = 1.0
    search_candidates: int = 32
    # rank_hist
    dims: List[int] = field(default_factory=lambda: [3])
    n_runs: int = 200
    rank_tol: float = 1e-6
    # meanfield and run
    ns: List[int] = field(default_factory=lambda: [256, 1024, 4096])
    reference_n: int = 2048
    alpha0: Optional[List[float]] = None
    sigma0: Optional[List[List[float]]] = None
    mode: str = "gaussian"
    n_tokens: int = 64
    masked: bool = False
    # validate
    full: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    out: str = "attnflow_out"
    threads: int = 1

    def __post_init__(self):
        try:
            self.experiment = Experiment(self.experiment)
            self.variant = Variant(self.variant)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if isinstance(self.solver, dict):
            try:
                self.solver = SolverConfig(**self.solver)
            except TypeError as e:
                raise ConfigError(f"solver: {e}") from e
            except ValueError as e:
                raise ConfigError(f"solver: {e}") from e
        self._validate()

    def _validate(self):
        def require(cond: bool, field_name: str, message: str):
            if not cond:
                raise ConfigError(f"{field_name}: {message}")

        require(isinstance(self.d, int) and self.d >= 1, "d", f"must be a positive integer, got {self.d}")
        require(0 <= self.seed < 2 ** 64, "seed", "must be a 64-bit unsigned integer")
        require(self.threads >= 1, "threads", "must be at least 1")
        require(self.value_mode in VALUE_MODES, "value_mode", f"must be one of {VALUE_MODES}")
        require(self.mode in RUN_MODES, "mode", f"must be one of {RUN_MODES}")
        require(self.regime is None or self.regime in REGIMES, "regime", f"must be one of {REGIMES}")
        require(self.eps > 0 and self.regime_scale > 0, "eps", "eps and regime_scale must be positive")
        require(0 < self.rank_tol < 1, "rank_tol", "must lie in (0, 1)")
        require(self.grid_size >= 1 and 0 < self.grid_extent < 1, "grid_size", "needs grid_size >= 1, 0 < grid_extent < 1")
        require(self.grid_trace > 0, "grid_trace", "must be positive")

        if self.experiment in (Experiment.CONE2D, Experiment.MEANFIELD, Experiment.RUN):
            require(
                (self.regime is None) != (self.params is None), "params",
                "exactly one of params (fixed matrices) and regime (random generation) must be given"
            )
        if self.experiment == Experiment.CONE2D:
            require(self.d == 2, "d", "cone2d runs in dimension 2")
            require(
                self.variant in (Variant.SOFTMAX, Variant.L2, Variant.MULTI_HEAD, Variant.SINKHORN), "variant",
                "cone2d supports softmax, l2, multi_head and sinkhorn"
            )
            require(self.regime != "rank_hist", "regime", "the rank_hist construction is reserved to rank_hist")
        if self.experiment == Experiment.RANK_HIST:
            require(self.variant in (Variant.SOFTMAX, Variant.L2), "variant", "rank_hist supports softmax and l2")
            require(self.dims and all(d >= 2 for d in self.dims), "dims", "needs dimensions of at least 2")
            require(self.n_runs >= 1, "n_runs", "must be positive")
        if self.experiment == Experiment.MEANFIELD:
            require(self.variant in GAUSSIAN_VARIANTS, "variant", "meanfield needs a variant with a Gaussian closed form")
            require(
                self.ns and all(n >= 1 for n in self.ns) and self.ns == sorted(self.ns), "ns",
                "must be increasing positive sample sizes"
            )
            require(1 <= self.reference_n <= 2048, "reference_n", "must lie in [1, 2048]")
        if self.experiment == Experiment.RUN and self.mode == "gaussian":
            require(self.variant in GAUSSIAN_VARIANTS, "variant", "Gaussian runs need a variant with a closed form")
        if self.variant == Variant.MULTI_HEAD:
            require(self.n_heads >= 1 and self.d % self.n_heads == 0, "n_heads", "must divide d")
        if self.regime == "two_lines":
            require(self.variant in (Variant.SOFTMAX, Variant.L2), "regime", "two_lines is searched for softmax and l2")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")
        if "experiment" not in data:
            raise ConfigError("experiment: missing")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=str))

    def initial_gaussian(self) -> GaussianMeasure:
        alpha = np.zeros(self.d) if self.alpha0 is None else np.asarray(self.alpha0, dtype=float)
        sigma = np.eye(self.d) if self.sigma0 is None else np.asarray(self.sigma0, dtype=float)
        try:
            return GaussianMeasure(alpha, sigma)
        except (AttnFlowError, AssertionError) as e:
            raise ConfigError(f"alpha0/sigma0: {e}") from e


def load_config(path: Union[str, Path], **overrides) -> ExperimentConfig:
    """
    Reads a JSON experiment configuration. Overrides whose value is None are ignored, the others replace the file's
    values (this is how CLI flags take precedence).
    """
    try:
        data = json.loads(Path(path).read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read configuration {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Configuration {path} must hold a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


def assemble_params(variant: Variant, Q: np.ndarray, K: np.ndarray, V: np.ndarray, eps: float, n_heads: int) -> AttentionParams:
    if variant == Variant.MULTI_HEAD:
        return AttentionParams.from_stacked(Q, K, [V] * n_heads, eps=eps)
    return AttentionParams(variant, Q, K, V, eps)


def fixed_params(config: ExperimentConfig) -> AttentionParams:
    spec = dict(config.params)
    try:
        eps = float(spec.pop("eps", config.eps))
        inner = spec.pop("inner", None)
        heads = spec.pop("heads", None)
        variant = Variant.MASKED if config.masked else config.variant
        if heads is not None:
            heads = tuple(Head(h["Q"], h["K"], h["V"]) for h in heads)
            if variant == Variant.MASKED:
                inner = Variant.MULTI_HEAD
            params = AttentionParams(variant, heads=heads, eps=eps, inner=inner)
        else:
            if config.masked:
                inner = inner or config.variant
            params = AttentionParams(variant, spec.pop("Q"), spec.pop("K"), spec.pop("V"), eps, inner=inner)
    except (KeyError, TypeError, AssertionError, ValueError) as e:
        raise ConfigError(f"params: {e!r}") from e
    if spec:
        raise ConfigError(f"params: unknown keys {sorted(spec)}")
    if params.d != config.d:
        raise ConfigError(f"params: matrices are in dimension {params.d}, config says d={config.d}")
    return params


def regime_params(
    regime: str,
    variant: Variant,
    d: int,
    rng: np.random.Generator,
    scale: float = 1.0,
    eps: float = 1.0,
    n_heads: int = 2,
    value_mode: str = "identity",
) -> AttentionParams:
    """
    Draws random parameters with the structure a regime prescribes. Except for rank_hist, A is drawn directly and
    factored as Q = A, K = I.

    - to_zero: A + A^T negative definite, V symmetric positive definite
    - line, plane: A = -c u u^T of rank 1, V = I
    - blowup: A + A^T positive definite, V = I
    - mixed: A + A^T indefinite, V random
    - rank_hist: Q random of shape (d // 2, d), K = -Q, V per value_mode
    """
    identity = np.eye(d)
    V_random = random_matrix(rng, d, d) if value_mode == "random" else identity
    if regime == "rank_hist":
        Q = random_matrix(rng, d // 2, d)
        return assemble_params(variant, Q, -Q, V_random, eps, n_heads)

    if regime == "to_zero":
        U = random_orthogonal(rng, d)
        V = (U * rng.uniform(0.5, 1.5, size=d)) @ U.T
        V = (V + V.T) / 2
        A = -scale * (random_spd(rng, d, floor=0.5) + random_skew(rng, d, 0.5))
    elif regime in ("line", "plane"):
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        V, A = identity, -scale * np.outer(u, u)
    elif regime == "blowup":
        V, A = identity, scale * (random_spd(rng, d, floor=0.5) + random_skew(rng, d, 0.5))
    elif regime == "mixed":
        R = random_orthogonal(rng, d)
        signs = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
        V, A = random_matrix(rng, d, d), scale * (R * (signs * rng.uniform(0.5, 1.5, size=d))) @ R.T
    else:
        raise ConfigError(f"regime: {regime} has no direct generator")

    params = assemble_params(variant, A, identity, V, eps, n_heads)
    check_regime(regime, params)
    return params


def check_regime(regime: str, params: AttentionParams):
    sym_eigvals = np.linalg.eigvalsh(params.A + params.A.T)
    tol = 1e-10 * max(np.max(np.abs(sym_eigvals)), 1e-300)
    ok = {
        "to_zero": sym_eigvals[-1] < -tol,
        "line": sym_eigvals[-1] <= tol and np.sum(np.abs(sym_eigvals) > tol) == 1,
        "plane": sym_eigvals[-1] <= tol and np.sum(np.abs(sym_eigvals) > tol) == 1,
        "blowup": sym_eigvals[0] > tol,
        "mixed": sym_eigvals[0] < -tol < tol < sym_eigvals[-1],
    }.get(regime, True)
    if not ok:
        raise ConfigError(f"regime: generated A + A^T with eigenvalues {sym_eigvals} violates the {regime} constraint")
