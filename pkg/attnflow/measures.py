import bisect
import logging
from dataclasses import dataclass, field, replace, InitVar
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from attnflow.errors import DimensionMismatch, EmptyMask, NotPSD, StepFailure, AttnFlowError, ConfigError
from attnflow.linalg import check_symmetric, PSD_TOL


logger = logging.getLogger(__name__)


def _frozen_array(x, ndim: int, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float)
    assert arr.ndim == ndim, f"{name} must have {ndim} dimensions, got shape {arr.shape}"
    arr.setflags(write=False)
    return arr


class Variant(str, Enum):
    SOFTMAX = "softmax"
    LINEAR = "linear"
    LINEAR_EPS = "linear_eps"
    L2 = "l2"
    SINKHORN = "sinkhorn"
    SIGMOID = "sigmoid"
    RELU = "relu"
    EXP = "exp"
    MULTI_HEAD = "multi_head"
    MASKED = "masked"


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """
    Uniform empirical measure over n tokens in R^d. Masked dynamics attach a position in [0, 1] to every
    token; the positions never move.
    """
    tokens: np.ndarray
    positions: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", _frozen_array(self.tokens, 2, "tokens"))
        assert len(self.tokens) >= 1, "An empirical measure needs at least one token"
        if self.positions is not None:
            positions = self.positions
            if not (isinstance(positions, np.ndarray) and not positions.flags.writeable):
                positions = _frozen_array(positions, 1, "positions")
            if len(positions) != len(self.tokens):
                raise DimensionMismatch(f"Got {len(positions)} positions for {len(self.tokens)} tokens")
            if np.any(positions < 0) or np.any(positions > 1):
                raise ValueError("Token positions must lie in [0, 1]")
            object.__setattr__(self, "positions", positions)

    @classmethod
    def with_sequence_positions(cls, tokens: np.ndarray) -> "EmpiricalMeasure":
        """
        Lifts a token sequence to the masked setting, placing token i (1-based) at position i / n.
        """
        n = len(tokens)
        return cls(tokens, np.arange(1, n + 1) / n)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    @property
    def is_masked(self) -> bool:
        return self.positions is not None

    def mean(self) -> np.ndarray:
        return self.tokens.mean(axis=0)

    def covariance(self) -> np.ndarray:
        centered = self.tokens - self.mean()
        return centered.T @ centered / self.n

    def radius(self) -> float:
        return float(np.max(np.linalg.norm(self.tokens, axis=1)))

    def space_marginal(self) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.tokens)

    def moved(self, tokens: np.ndarray) -> "EmpiricalMeasure":
        # Positions are shared, not copied, so they stay bit-identical along a trajectory
        return EmpiricalMeasure(tokens, self.positions)

    def sub_measure(self, sigma: float) -> "EmpiricalMeasure":
        assert self.is_masked, "Only masked measures can be restricted by position"
        visible = self.positions <= sigma
        if not np.any(visible):
            raise EmptyMask(f"No token has a position <= {sigma}")
        return EmpiricalMeasure(self.tokens[visible])


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    alpha: np.ndarray
    sigma: np.ndarray
    check: InitVar[bool] = True

    def __post_init__(self, check: bool):
        object.__setattr__(self, "alpha", _frozen_array(self.alpha, 1, "alpha"))
        object.__setattr__(self, "sigma", _frozen_array(self.sigma, 2, "sigma"))
        if self.sigma.shape != (len(self.alpha), len(self.alpha)):
            raise DimensionMismatch(f"Mean of size {len(self.alpha)} with covariance of shape {self.sigma.shape}")
        if check:
            check_symmetric(self.sigma)
            eigvals = np.linalg.eigvalsh(self.sigma)
            if eigvals[0] < -PSD_TOL * max(eigvals[-1], 0.0):
                raise NotPSD(f"Covariance has eigenvalue {eigvals[0]:.3e}")

    @property
    def d(self) -> int:
        return len(self.alpha)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.multivariate_normal(self.alpha, self.sigma, size=n, method="eigh")


@dataclass(frozen=True, eq=False)
class Head:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for name in ("Q", "K", "V"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), 2, name))

    @property
    def A(self) -> np.ndarray:
        return self.K.T @ self.Q


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """
    Parameters of one self-attention layer.

    :param variant: which velocity field the layer induces
    :param Q: query matrix of shape (k, d), k <= d. Unused for multi-head layers, whose parameters live in
    heads.
    :param K: key matrix of shape (k, d)
    :param V: value matrix of shape (d, d)
    :param eps: the temperature of the Sinkhorn and linearized variants
    :param heads: for multi-head layers, one (Q, K, V) triple per head with Q and K of shape (d / H, d)
    :param inner: for masked layers, the variant evaluated on the visible tokens
    """
    variant: Variant
    Q: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    eps: float = 1.0
    heads: Optional[Tuple[Head, ...]] = None
    inner: Optional[Variant] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

        if self.variant == Variant.MASKED:
            inner = Variant(self.inner) if self.inner is not None else Variant.SOFTMAX
            if inner == Variant.MASKED:
                raise ConfigError("A masked layer cannot wrap another masked layer")
            object.__setattr__(self, "inner", inner)

        if self.uses_heads:
            if not self.heads:
                raise ConfigError("Multi-head attention requires a non-empty list of heads")
            heads = tuple(h if isinstance(h, Head) else Head(*h) for h in self.heads)
            d = heads[0].V.shape[0]
            n_heads = len(heads)
            if d % n_heads:
                raise DimensionMismatch(f"The number of heads ({n_heads}) must divide the dimension ({d})")
            for head in heads:
                if head.Q.shape != (d // n_heads, d) or head.K.shape != (d // n_heads, d) or head.V.shape != (d, d):
                    raise DimensionMismatch(
                        f"Head shapes Q{head.Q.shape} K{head.K.shape} V{head.V.shape} do not match d={d}, H={n_heads}"
                    )
            object.__setattr__(self, "heads", heads)
        else:
            if self.Q is None or self.K is None or self.V is None:
                raise ConfigError(f"Variant {self.variant.value} requires Q, K and V")
            for name in ("Q", "K", "V"):
                object.__setattr__(self, name, _frozen_array(getattr(self, name), 2, name))
            k, d = self.Q.shape
            if self.K.shape != (k, d) or self.V.shape != (d, d) or k > d:
                raise DimensionMismatch(f"Inconsistent shapes Q{self.Q.shape} K{self.K.shape} V{self.V.shape}")

    @classmethod
    def from_stacked(cls, Q: np.ndarray, K: np.ndarray, Vs: Sequence[np.ndarray], **kwargs) -> "AttentionParams":
        """
        Builds a multi-head layer from square stacked Q and K: head h gets rows [h * d / H, (h + 1) * d / H).
        """
        Q, K = np.asarray(Q, dtype=float), np.asarray(K, dtype=float)
        n_heads = len(Vs)
        d = Q.shape[1]
        assert Q.shape == K.shape == (d, d), "Stacked Q and K must be square"
        if d % n_heads:
            raise DimensionMismatch(f"The number of heads ({n_heads}) must divide the dimension ({d})")
        rows = d // n_heads
        heads = tuple(
            Head(Q[h * rows:(h + 1) * rows], K[h * rows:(h + 1) * rows], V) for h, V in enumerate(Vs)
        )
        return cls(kwargs.pop("variant", Variant.MULTI_HEAD), heads=heads, **kwargs)

    @property
    def uses_heads(self) -> bool:
        return self.variant == Variant.MULTI_HEAD or (
            self.variant == Variant.MASKED and self.inner == Variant.MULTI_HEAD
        )

    @property
    def d(self) -> int:
        return self.heads[0].V.shape[0] if self.uses_heads else self.V.shape[0]

    @property
    def A(self) -> np.ndarray:
        if self.uses_heads:
            return sum(head.A for head in self.heads)
        return self.K.T @ self.Q

    def unmasked(self) -> "AttentionParams":
        """
        The parameters of the variant a masked layer evaluates on its visible tokens.
        """
        if self.variant != Variant.MASKED:
            return self
        return replace(self, variant=self.inner, inner=None)

    def growth_rate(self) -> float:
        """
        Upper bound on ||Gamma(x)|| / R for measures supported in the ball of radius R: the spectral norm of V,
        summed over heads, and divided by eps for Sinkhorn.
        """
        if self.uses_heads:
            return float(sum(np.linalg.norm(head.V, 2) for head in self.heads))
        rate = float(np.linalg.norm(self.V, 2))
        variant = self.inner if self.variant == Variant.MASKED else self.variant
        return rate / self.eps if variant == Variant.SINKHORN else rate


class ParameterSchedule:
    """
    Piecewise-constant parameters over time. Segment i applies on [breaks[i], breaks[i + 1]), the last one
    until infinity.
    """
    def __init__(self, segments: Sequence[Tuple[float, AttentionParams]]):
        assert segments, "A schedule needs at least one segment"
        breaks = [float(t) for t, _ in segments]
        if breaks[0] != 0.0:
            raise ConfigError(f"The first breakpoint must be 0, got {breaks[0]}")
        if any(b1 >= b2 for b1, b2 in zip(breaks, breaks[1:])):
            raise ConfigError(f"Breakpoints must be strictly increasing, got {breaks}")
        dims = {params.d for _, params in segments}
        if len(dims) != 1:
            raise DimensionMismatch(f"All segments must share the same dimension, got {sorted(dims)}")
        self.breaks = breaks
        self.params = [params for _, params in segments]

    @classmethod
    def constant(cls, params: AttentionParams) -> "ParameterSchedule":
        return cls([(0.0, params)])

    @property
    def is_constant(self) -> bool:
        return len(self.params) == 1

    @property
    def d(self) -> int:
        return self.params[0].d

    def at(self, t: float) -> AttentionParams:
        return self.params[bisect.bisect_right(self.breaks, t) - 1]

    def next_break(self, t: float) -> float:
        idx = bisect.bisect_right(self.breaks, t)
        return self.breaks[idx] if idx < len(self.breaks) else np.inf

    def segments_until(self, t_end: float) -> List[Tuple[float, float, AttentionParams]]:
        bounds = self.breaks + [np.inf]
        return [
            (start, min(stop, t_end), params)
            for start, stop, params in zip(bounds, bounds[1:], self.params)
            if start < t_end
        ]


@dataclass(frozen=True, eq=False)
class AffineField:
    M: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "M", _frozen_array(self.M, 2, "M"))
        object.__setattr__(self, "b", _frozen_array(self.b, 1, "b"))
        if self.M.shape != (len(self.b), len(self.b)):
            raise DimensionMismatch(f"Affine field with M{self.M.shape} and b{self.b.shape}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.M.T + self.b

    def __add__(self, other: "AffineField") -> "AffineField":
        return AffineField(self.M + other.M, self.b + other.b)


class Status(str, Enum):
    COMPLETED = "completed"
    BLOW_UP = "blow_up"
    NUMERICAL_FAILURE = "numerical_failure"


State = Union[EmpiricalMeasure, GaussianMeasure, np.ndarray]


@dataclass
class Trajectory:
    times: List[float]
    states: List[State]
    status: Status = Status.COMPLETED
    t_star: Optional[float] = None
    converged_at: Optional[float] = None
    error: Optional[AttnFlowError] = field(default=None, repr=False)

    def __post_init__(self):
        assert self.times and self.times[0] == 0.0, "Trajectories start at t=0"
        assert len(self.times) == len(self.states), "Every recorded time needs a state"

    def final_state(self) -> State:
        return self.states[-1]

    @property
    def t_final(self) -> float:
        return self.times[-1]

    def raise_for_status(self):
        """
        Raises the error that ended the trajectory, if it ended on a numerical failure. Blow-ups are an outcome of
        the dynamics and are not raised.
        """
        if self.status == Status.NUMERICAL_FAILURE:
            raise self.error or StepFailure(f"Numerical failure at t={self.t_star}")

    def to_rows(self) -> List[dict]:
        """
        Flattens the trajectory to one dict per recorded state (per token for particle trajectories), each row
        carrying the trajectory status.
        """
        status = self.status.value
        rows = []
        for t, state in zip(self.times, self.states):
            if isinstance(state, GaussianMeasure):
                row = {"t": t, "status": status}
                row.update({f"alpha_{i}": v for i, v in enumerate(state.alpha)})
                d = state.d
                row.update({f"sigma_{i}_{j}": state.sigma[i, j] for i in range(d) for j in range(i, d)})
                rows.append(row)
            elif isinstance(state, EmpiricalMeasure):
                for i, token in enumerate(state.tokens):
                    row = {"t": t, "status": status, "token": i}
                    if state.is_masked:
                        row["position"] = state.positions[i]
                    row.update({f"x_{k}": v for k, v in enumerate(token)})
                    rows.append(row)
            else:
                row = {"t": t, "status": status}
                row.update({f"u_{k}": v for k, v in enumerate(np.ravel(state))})
                rows.append(row)
        return rows
