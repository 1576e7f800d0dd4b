# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Mean-field game problem definitions and the per-time-bucket statistics of the
empirical measure that their coefficients consume.

All coefficient callbacks are vectorized over a batch of state samples and follow
the dtype of the state tensor, so the same problem serves float32 training and
float64 gradient checks.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Tuple

import numpy as np
import torch

from .exceptions import ConfigError, MeasureError

if TYPE_CHECKING:
    from .measure import StateSample

logger = logging.getLogger(__name__)

VARIANTS = ("lq1", "lq2", "lq3", "systemic_risk", "target_tracking", "barrier")
REFERENCE_VARIANTS = ("lq1", "lq2", "lq3", "systemic_risk")


@dataclass
class TargetTrajectory:
    """Deterministic target z*(t).

    kinds: zero, circle (unit-normalized), helix (radius 2t), orbit (raw sine
    components, used by the target-tracking and barrier problems).
    """
    kind: str
    d: int

    def __post_init__(self):
        if self.kind not in ("zero", "circle", "helix", "orbit"):
            raise ConfigError(f"unknown target trajectory '{self.kind}'", field="target")

    def _raw(self, t: torch.Tensor) -> torch.Tensor:
        i = torch.arange(1, self.d + 1, dtype=t.dtype, device=t.device)
        return torch.sin(2.0 * math.pi * t.unsqueeze(-1) + i * (math.pi / 2.0))

    def __call__(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t)
        if not torch.is_floating_point(t):
            t = t.to(torch.float64)
        if self.kind == "zero":
            return torch.zeros(*t.shape, self.d, dtype=t.dtype, device=t.device)
        y = self._raw(t)
        if self.kind == "orbit":
            return y
        unit = y / y.norm(dim=-1, keepdim=True).clamp_min(torch.finfo(t.dtype).tiny)
        if self.kind == "circle":
            return unit
        return 2.0 * t.unsqueeze(-1) * unit

    def numpy(self, t: float) -> np.ndarray:
        return self(torch.tensor([float(t)], dtype=torch.float64))[0].numpy()


@dataclass
class BucketStats:
    """Per-time-index statistics of the empirical measure.

    counts[n] is the number of particles with time index n; means[n] is their
    z-mean, or the mean of the nearest nonempty bucket when counts[n] == 0.
    kernel_points[n] is a subsample of at most kernel_cap particle positions used
    by the interaction kernel (None when the problem has no interaction term).
    """
    counts: np.ndarray
    means: torch.Tensor
    source: np.ndarray
    kernel_points: Optional[List[torch.Tensor]] = None

    @property
    def N(self) -> int:
        return len(self.counts) - 1

    def mean_at(self, time_index: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        return self.means.to(dtype)[time_index]

    def mean_trajectory(self) -> np.ndarray:
        return self.means.detach().cpu().numpy()

    @classmethod
    def from_means(cls, means: torch.Tensor) -> "BucketStats":
        """Statistics carrying a prescribed mean trajectory (no particles, no kernel)."""
        means = torch.as_tensor(means, dtype=torch.float64)
        n_buckets = means.shape[0]
        return cls(counts=np.zeros(n_buckets, dtype=np.int64), means=means,
                   source=np.arange(n_buckets))


def nearest_nonempty(counts: np.ndarray) -> np.ndarray:
    """Map each bucket to itself if nonempty, else to the nearest nonempty bucket (ties: earlier)."""
    nonempty = np.flatnonzero(counts > 0)
    if nonempty.size == 0:
        raise MeasureError("every time bucket is empty")
    n = np.arange(len(counts))
    pos = np.searchsorted(nonempty, n)
    left = nonempty[np.clip(pos - 1, 0, nonempty.size - 1)]
    right = nonempty[np.clip(pos, 0, nonempty.size - 1)]
    dist_left = np.where(left <= n, n - left, np.iinfo(np.int64).max)
    dist_right = np.where(right >= n, right - n, np.iinfo(np.int64).max)
    return np.where(dist_left <= dist_right, left, right)


def build_bucket_stats(particles: "StateSample", N: int, kernel_cap: Optional[int] = None,
                       rng: Optional[np.random.Generator] = None) -> BucketStats:
    """Recompute bucket statistics from scratch for the current ensemble.

    Args:
        particles: All particles of the ensemble
        N: Number of time steps (buckets are 0..N)
        kernel_cap: Subsample size per bucket for the interaction kernel; None skips it
        rng: Generator used for the subsample
    """
    time_index = particles.time_index.detach().cpu()
    z = particles.z.detach().cpu().to(torch.float64)
    counts_t = torch.bincount(time_index, minlength=N + 1)
    if counts_t.numel() > N + 1:
        raise MeasureError(f"time index above N={N} in ensemble")
    sums = torch.zeros(N + 1, z.shape[1], dtype=torch.float64).index_add_(0, time_index, z)
    counts = counts_t.numpy().astype(np.int64)
    source = nearest_nonempty(counts)
    own_means = sums / counts_t.clamp_min(1).to(torch.float64).unsqueeze(-1)
    means = own_means[torch.from_numpy(source)]

    kernel_points = None
    if kernel_cap is not None:
        if rng is None:
            raise MeasureError("kernel subsampling needs a random generator")
        t_np = time_index.numpy()
        order = np.argsort(t_np, kind="stable")
        bounds = np.searchsorted(t_np[order], np.arange(N + 2))
        own_points = []
        for n in range(N + 1):
            idx = order[bounds[n]:bounds[n + 1]]
            if idx.size > kernel_cap:
                idx = np.sort(rng.choice(idx, size=kernel_cap, replace=False))
            own_points.append(z[torch.from_numpy(idx)])
        kernel_points = [own_points[s] for s in source]
    return BucketStats(counts=counts, means=means, source=source, kernel_points=kernel_points)


def bucket_mean(stats: BucketStats, n: int) -> torch.Tensor:
    if not 0 <= n <= stats.N:
        raise IndexError(f"time index {n} outside 0..{stats.N}")
    return stats.means[n]


def kernel_interaction(x: "StateSample", stats: BucketStats, c_F: float) -> torch.Tensor:
    """Bucket-normalized Gaussian interaction F(x, mu), one value per sample."""
    if stats.kernel_points is None:
        raise MeasureError("bucket statistics were built without a kernel subsample")
    z = x.z
    out = torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
    for n in torch.unique(x.time_index).tolist():
        points = stats.kernel_points[n].to(z.dtype)
        if points.shape[0] == 0:
            raise MeasureError(f"empty kernel subsample for time index {n}")
        mask = x.time_index == n
        sq = (z[mask].unsqueeze(1) - points.unsqueeze(0)).pow(2).sum(-1)
        out[mask] = torch.exp(-c_F * sq).mean(-1)
    return out


# (x, stats, u) -> tensor
Coefficient = Callable[["StateSample", BucketStats, torch.Tensor], torch.Tensor]


@dataclass
class MfgProblem:
    """A finite-horizon MFG with time-augmented state x = (t, z).

    The full drift is (1, drift_z) and the full diffusion is (0, diff_z): time
    advances at unit rate and carries no noise.
    """
    variant: str
    d: int
    q: int
    m: int
    T: float
    N: int
    drift_z: Coefficient
    diff_z: Coefficient
    run_cost: Coefficient
    term_cost: Callable[["StateSample", BucketStats], torch.Tensor]
    init_sampler: Callable[[np.random.Generator, int], np.ndarray]
    initial_guess: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    target: TargetTrajectory
    constants: Dict[str, float]
    control_box: Tuple[Optional[np.ndarray], Optional[np.ndarray]] = (None, None)
    diff_apply: Optional[Callable[["StateSample", BucketStats, torch.Tensor, torch.Tensor], torch.Tensor]] = None
    uses_interaction: bool = False
    initial_half_width: Optional[float] = None
    initial_mean: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.initial_mean is None:
            self.initial_mean = np.zeros(self.d)

    @property
    def h(self) -> float:
        return self.T / self.N

    def noise_term(self, x: "StateSample", stats: BucketStats, u: torch.Tensor,
                   zeta: torch.Tensor) -> torch.Tensor:
        """sigma_z(x, mu, u) @ zeta for a batch."""
        if self.diff_apply is not None:
            return self.diff_apply(x, stats, u, zeta)
        return torch.einsum("bij,bj->bi", self.diff_z(x, stats, u), zeta)

    def has_reference(self) -> bool:
        return self.variant in REFERENCE_VARIANTS


def initial_state_sampler(variant: str, d: int, rng: np.random.Generator,
                          size: Optional[int] = None) -> np.ndarray:
    """Draw initial states Z_0 for a variant (one vector, or `size` rows)."""
    n = 1 if size is None else size
    if variant in ("lq1", "lq2", "lq3"):
        out = rng.uniform(-1.0, 1.0, size=(n, 1)) * np.ones((1, d))
    elif variant == "systemic_risk":
        out = rng.uniform(-3.0, 3.0, size=(n, 1)) * np.ones((1, d))
    elif variant == "target_tracking":
        out = np.zeros((n, d))
        out[:, 0] = rng.uniform(-1.0, 1.0, size=n)
    elif variant == "barrier":
        out = rng.standard_normal(size=(n, d))
    else:
        raise ConfigError(f"unknown variant '{variant}'", field="variant")
    return out[0] if size is None else out


def _sq(v: torch.Tensor) -> torch.Tensor:
    return v.pow(2).sum(-1)


def _scaled_identity(scale: Callable[["StateSample"], torch.Tensor], d: int):
    def diff_z(x, stats, u):
        s = scale(x)
        eye = torch.eye(d, dtype=x.z.dtype, device=x.z.device)
        return s.reshape(-1, 1, 1) * eye

    def diff_apply(x, stats, u, zeta):
        return scale(x).reshape(-1, 1) * zeta

    return diff_z, diff_apply


def _lq_problem(variant: str, d: int, N: int, c: Dict[str, float]) -> MfgProblem:
    target = TargetTrajectory({"lq1": "zero", "lq2": "circle", "lq3": "helix"}[variant], d)
    T = 1.0

    def drift_z(x, stats, u):
        m_bar = stats.mean_at(x.time_index, x.z.dtype)
        z_star = target(x.time_index.to(x.z.dtype) * (T / N))
        return u + c["c0"] * (m_bar - x.z) + c["c1"] * (z_star - m_bar)

    def run_cost(x, stats, u):
        m_bar = stats.mean_at(x.time_index, x.z.dtype)
        z_star = target(x.time_index.to(x.z.dtype) * (T / N))
        return 0.5 * (c["c2"] * _sq(u) + c["c3"] * _sq(x.z - m_bar) + c["c4"] * _sq(x.z - z_star))

    def term_cost(x, stats):
        z_star = target(torch.full((x.z.shape[0],), T, dtype=x.z.dtype))
        return 0.5 * c["c5"] * _sq(x.z - z_star) + 0.5

    def initial_guess(time_index, rng):
        t = time_index * (T / N)
        z0 = initial_state_sampler(variant, d, rng, size=len(time_index))
        xi = rng.standard_normal(size=(len(time_index), d))
        return z0 + 5.0 * t[:, None] + c["c_sigma"] * np.sqrt(t)[:, None] * xi

    diff_z, diff_apply = _scaled_identity(lambda x: torch.full((x.z.shape[0],), c["c_sigma"], dtype=x.z.dtype), d)
    return MfgProblem(
        variant=variant, d=d, q=d, m=d, T=T, N=N,
        drift_z=drift_z, diff_z=diff_z, diff_apply=diff_apply, run_cost=run_cost, term_cost=term_cost,
        init_sampler=lambda rng, n: initial_state_sampler(variant, d, rng, size=n),
        initial_guess=initial_guess, target=target, constants=c, initial_half_width=1.0,
    )


def _systemic_risk_problem(d: int, N: int, c: Dict[str, float]) -> MfgProblem:
    T = 1.0

    def drift_z(x, stats, u):
        return c["c1"] * (stats.mean_at(x.time_index, x.z.dtype) - x.z) + u

    def run_cost(x, stats, u):
        gap = (stats.mean_at(x.time_index, x.z.dtype) - x.z).sum(-1)
        u = u.sum(-1)
        return 0.5 * u.pow(2) - c["c3"] * u * gap + 0.5 * c["c4"] * gap.pow(2)

    def term_cost(x, stats):
        gap = (stats.mean_at(torch.full_like(x.time_index, stats.N), x.z.dtype) - x.z).sum(-1)
        return 0.5 * c["c5"] * gap.pow(2)

    def initial_guess(time_index, rng):
        return initial_state_sampler("systemic_risk", d, rng, size=len(time_index))

    diff_z, diff_apply = _scaled_identity(lambda x: torch.full((x.z.shape[0],), c["c2"], dtype=x.z.dtype), d)
    return MfgProblem(
        variant="systemic_risk", d=d, q=d, m=d, T=T, N=N,
        drift_z=drift_z, diff_z=diff_z, diff_apply=diff_apply, run_cost=run_cost, term_cost=term_cost,
        init_sampler=lambda rng, n: initial_state_sampler("systemic_risk", d, rng, size=n),
        initial_guess=initial_guess, target=TargetTrajectory("zero", d), constants=c, initial_half_width=3.0,
    )


def _interaction_problem(variant: str, d: int, N: int, c: Dict[str, float]) -> MfgProblem:
    T = 1.0
    target = TargetTrajectory("orbit", d)
    barrier_point = 0.5

    def drift_z(x, stats, u):
        return u

    def run_cost(x, stats, u):
        interaction = kernel_interaction(x, stats, c["c_F"])
        if variant == "target_tracking":
            z_star = target(x.time_index.to(x.z.dtype) * (T / N))
            return c["c1"] * _sq(x.z - z_star) + c["c2"] * _sq(u) + interaction
        repulsion = c["c0"] / (1.0 + c["c2"] * _sq(x.z - barrier_point))
        return repulsion + c["c3"] * _sq(u) + interaction

    def term_cost(x, stats):
        z_star = target(torch.full((x.z.shape[0],), T, dtype=x.z.dtype))
        return 0.5 * c["c4"] * _sq(x.z - z_star)

    if variant == "target_tracking":
        scale = lambda x: torch.full((x.z.shape[0],), c["c_sigma"], dtype=x.z.dtype)
    else:
        phase = lambda x: torch.arange(1, d + 1, dtype=x.z.dtype, device=x.z.device)
        scale = lambda x: c["c1"] / math.sqrt(d) * torch.sin(phase(x) + x.z).sum(-1)
    diff_z, diff_apply = _scaled_identity(scale, d)

    def initial_guess(time_index, rng):
        return initial_state_sampler(variant, d, rng, size=len(time_index))

    return MfgProblem(
        variant=variant, d=d, q=d, m=d, T=T, N=N,
        drift_z=drift_z, diff_z=diff_z, diff_apply=diff_apply, run_cost=run_cost, term_cost=term_cost,
        init_sampler=lambda rng, n: initial_state_sampler(variant, d, rng, size=n),
        initial_guess=initial_guess, target=target, constants=c, uses_interaction=True,
    )


def default_constants(variant: str, d: int) -> Dict[str, float]:
    if variant == "lq1":
        return {"c0": 0.0, "c1": 0.0, "c2": 1.0, "c3": 1.0 / d, "c4": 0.0, "c5": 1.0 / d,
                "c_sigma": 0.5 / math.sqrt(d)}
    if variant in ("lq2", "lq3"):
        return {"c0": 1.0, "c1": 0.0 if variant == "lq2" else -0.5, "c2": 1.0 / d, "c3": 1.0 / d,
                "c4": 1.0 / d, "c5": 1.0 / d, "c_sigma": 0.5 / math.sqrt(d)}
    if variant == "systemic_risk":
        return {"c1": 1.0, "c2": 0.5, "c3": 1.0, "c4": 2.0, "c5": 1.0}
    if variant == "target_tracking":
        return {"c1": 1.0, "c2": 0.1, "c4": 10.0, "c_F": 1.0, "c_sigma": 0.5}
    if variant == "barrier":
        return {"c0": 5.0, "c1": 0.1, "c2": 1.0, "c3": 0.1, "c4": 1.0, "c_F": 1.0}
    raise ConfigError(f"unknown variant '{variant}'", field="variant")


def make_problem(variant: str, d: int, N: int = 100,
                 overrides: Optional[Dict[str, float]] = None) -> MfgProblem:
    """Build a fully wired problem with the published constants (T = 1).

    Args:
        variant: One of lq1, lq2, lq3, systemic_risk, target_tracking, barrier
        d: State dimension (systemic_risk requires d = 1)
        N: Number of time steps, h = T / N
        overrides: Optional constant overrides by name
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{variant}', expected one of {', '.join(VARIANTS)}", field="variant")
    if d < 1:
        raise ConfigError(f"state dimension must be >= 1, got {d}", field="d")
    if variant == "systemic_risk" and d != 1:
        raise ConfigError("systemic_risk is defined for d = 1 only", field="d")
    if N < 1:
        raise ConfigError(f"number of time steps must be >= 1, got {N}", field="N")
    constants = default_constants(variant, d)
    for name, value in (overrides or {}).items():
        if name not in constants:
            raise ConfigError(f"variant '{variant}' has no constant '{name}'", field=f"constants.{name}")
        constants[name] = float(value)

    if variant in ("lq1", "lq2", "lq3"):
        problem = _lq_problem(variant, d, N, constants)
    elif variant == "systemic_risk":
        problem = _systemic_risk_problem(d, N, constants)
    else:
        problem = _interaction_problem(variant, d, N, constants)
    logger.debug(f"[problem] {variant} d={d} N={N} constants={constants}")
    return problem
