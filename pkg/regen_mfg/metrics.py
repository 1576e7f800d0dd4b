# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Evaluation metrics: the simulated cost J_hat, the relative cost gap RC and the
relative value errors RE1 / REinf on frozen test point sets.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from .exceptions import DivergenceError, MetricError
from .measure import Purpose, StateSample, stream
from .problem import BucketStats, MfgProblem
from .reference import ReferenceEvaluator

logger = logging.getLogger(__name__)


@dataclass
class TestPointSet:
    """Frozen evaluation points on the diagonal {s 1_d : |s| <= c}."""
    __test__ = False

    rc: np.ndarray
    re: np.ndarray


@dataclass
class CostEstimate:
    j_hat: float
    path_sd: float
    paths: int
    h: float

    @property
    def standard_error(self) -> float:
        return self.path_sd / math.sqrt(self.paths)


def sample_test_points(d: int, half_width: float, seed: int, rc_points: int = 256,
                       re_points: int = 1000) -> TestPointSet:
    rng = stream(seed, Purpose.TEST_POINTS)
    s_rc = rng.uniform(-half_width, half_width, size=rc_points)
    s_re = rng.uniform(-half_width, half_width, size=re_points)
    ones = np.ones((1, d))
    return TestPointSet(rc=s_rc[:, None] * ones, re=s_re[:, None] * ones)


def simulate_cost(problem: MfgProblem, control: Callable[[StateSample], torch.Tensor], stats: BucketStats,
                  paths: int = 256, seed: int = 0, initial_states: Optional[np.ndarray] = None,
                  dtype: torch.dtype = torch.float64) -> CostEstimate:
    """Left-rectangle estimate of J along Euler-Maruyama paths.

    Args:
        problem: Problem whose dynamics and costs are simulated
        control: Feedback control evaluated on StateSample batches
        stats: Bucket statistics supplying the measure (empirical or reference)
        paths: Number of paths; ignored when initial_states is given
        seed: Seed of the dedicated path stream
        initial_states: Optional starting points, one path each
        dtype: Simulation dtype
    """
    rng = stream(seed, Purpose.PATHS)
    if initial_states is None:
        if paths < 1:
            raise MetricError(f"need at least one path, got {paths}")
        z0 = problem.init_sampler(rng, paths)
    else:
        z0 = np.asarray(initial_states, dtype=np.float64)
    z = torch.as_tensor(z0, dtype=dtype)
    control_dtype = _dtype_of(control, dtype)
    n_paths = z.shape[0]
    h = problem.h
    cost = torch.zeros(n_paths, dtype=dtype)
    with torch.no_grad():
        for n in range(problem.N):
            x = StateSample.at(n, z)
            u = control(x.to(control_dtype)).to(dtype)
            cost = cost + h * problem.run_cost(x, stats, u)
            zeta = torch.as_tensor(rng.standard_normal(size=(n_paths, problem.q)), dtype=dtype)
            z = z + problem.drift_z(x, stats, u) * h + problem.noise_term(x, stats, u, zeta) * math.sqrt(h)
        cost = cost + problem.term_cost(StateSample.at(problem.N, z), stats)
    if not bool(torch.isfinite(cost).all()):
        raise DivergenceError("non-finite cost along simulated paths")
    costs = cost.numpy()
    sd = float(costs.std(ddof=1)) if n_paths > 1 else 0.0
    return CostEstimate(j_hat=float(costs.mean()), path_sd=sd, paths=n_paths, h=h)


def _dtype_of(module, default: torch.dtype) -> torch.dtype:
    parameters = getattr(module, "parameters", None)
    if parameters is None:
        return default
    return next(parameters()).dtype


def optimal_cost(reference: ReferenceEvaluator, points: np.ndarray) -> float:
    """J* as the average of v(0, z) over the given points."""
    return float(np.mean(reference.value(np.zeros(len(points)), points)))


def relative_cost(j_hat: float, j_star: float) -> float:
    if j_star == 0:
        raise MetricError("relative cost undefined for J* = 0")
    return (j_hat - j_star) / j_star


def value_at_zero(value, points: np.ndarray) -> np.ndarray:
    dtype = next(value.parameters()).dtype
    x = StateSample.at(0, torch.as_tensor(points, dtype=dtype))
    with torch.no_grad():
        return value(x).double().numpy()


def relative_errors(value, reference: ReferenceEvaluator, points: np.ndarray) -> Tuple[float, float]:
    """(RE1, REinf) of v_theta(0, .) against the exact value on the points."""
    exact = reference.value(np.zeros(len(points)), points)
    err = np.abs(value_at_zero(value, points) - exact)
    l1, linf = np.abs(exact).sum(), np.abs(exact).max()
    if l1 == 0 or linf == 0:
        raise MetricError("relative errors undefined for an identically zero reference value")
    return float(err.sum() / l1), float(err.max() / linf)


def evaluate(problem: MfgProblem, control, value, stats: BucketStats, points: Optional[TestPointSet],
             reference: Optional[ReferenceEvaluator], paths: int, seed: int,
             reference_mean: bool = False) -> Dict[str, float]:
    """Metrics of the current networks: J_hat always, RE1/REinf/RC when a reference exists."""
    initial = points.rc if (points is not None and problem.initial_half_width is not None) else None
    sim_stats = reference.bucket_stats() if (reference_mean and reference is not None) else stats
    estimate = simulate_cost(problem, control, sim_stats, paths=paths, seed=seed, initial_states=initial)
    out = {"J_hat": estimate.j_hat, "RE1": math.nan, "REinf": math.nan, "RC": math.nan}
    if reference is not None and points is not None:
        out["RE1"], out["REinf"] = relative_errors(value, reference, points.re)
        out["RC"] = relative_cost(estimate.j_hat, optimal_cost(reference, points.rc))
    return out


def control_profile(control, reference: ReferenceEvaluator, times: Sequence[float] = (0.0, 0.5, 0.99),
                    grid: Optional[np.ndarray] = None) -> np.ndarray:
    """Rows (t, z, learned u, exact u) along the diagonal, first control component."""
    problem = reference.problem
    half = problem.initial_half_width or 1.0
    grid = np.linspace(-half, half, 61) if grid is None else np.asarray(grid, dtype=np.float64)
    dtype = next(control.parameters()).dtype
    rows = []
    for t in times:
        n = int(round(t / problem.h))
        z = grid[:, None] * np.ones((1, problem.d))
        with torch.no_grad():
            learned = control(StateSample.at(n, torch.as_tensor(z, dtype=dtype))).double().numpy()[:, 0]
        exact = reference.optimal_control(np.full(len(grid), n * problem.h), z)[:, 0]
        rows.append(np.column_stack([np.full(len(grid), n * problem.h), grid, learned, exact]))
    return np.vstack(rows)


def value_landscape(value, reference: ReferenceEvaluator, stats: BucketStats,
                    time_indices: Optional[Sequence[int]] = None,
                    grid: Optional[np.ndarray] = None) -> np.ndarray:
    """Rows (t, z, predicted v, |error|) on a (t, z) grid along the diagonal."""
    problem = reference.problem
    half = problem.initial_half_width or 1.0
    grid = np.linspace(-half, half, 41) if grid is None else np.asarray(grid, dtype=np.float64)
    time_indices = range(0, problem.N + 1, max(1, problem.N // 10)) if time_indices is None else time_indices
    dtype = next(value.parameters()).dtype
    rows = []
    for n in time_indices:
        z = grid[:, None] * np.ones((1, problem.d))
        with torch.no_grad():
            predicted = value(StateSample.at(n, torch.as_tensor(z, dtype=dtype)), stats).double().numpy()
        t = np.full(len(grid), n * problem.h)
        rows.append(np.column_stack([t, grid, predicted, np.abs(predicted - reference.value(t, z))]))
    return np.vstack(rows)


def mean_comparison(stats: BucketStats, reference: ReferenceEvaluator) -> np.ndarray:
    """Rows (t, empirical mean..., reference mean...) on the time grid."""
    problem = reference.problem
    t = np.arange(problem.N + 1) * problem.h
    return np.column_stack([t, stats.mean_trajectory(), reference.mean(t)])
