# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Reference solutions for the linear-quadratic and systemic-risk games.

Both games admit a quadratic value ansatz whose coefficients solve a small ODE
system. The systems are integrated in float64 with an adaptive Dormand-Prince
5(4) scheme and interpolated with cubic Hermite polynomials on accepted steps.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
import torch
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

from .exceptions import IntegrationError, ReferenceSolveError, UsageError
from .models import ReferenceSettings
from .problem import BucketStats, MfgProblem

logger = logging.getLogger(__name__)

LQ_VARIANTS = ("lq1", "lq2", "lq3")


@dataclass
class OdeSolution:
    """Accepted steps of one integration, ordered by increasing t."""
    t: np.ndarray
    y: np.ndarray
    dydt: np.ndarray

    @cached_property
    def spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.t, self.y, self.dydt, axis=0, extrapolate=False)

    @cached_property
    def slope(self):
        return self.spline.derivative()

    def __call__(self, t) -> np.ndarray:
        return self._clip_eval(self.spline, t)

    def derivative(self, t) -> np.ndarray:
        return self._clip_eval(self.slope, t)

    def _clip_eval(self, f, t) -> np.ndarray:
        t = np.clip(np.asarray(t, dtype=np.float64), self.t[0], self.t[-1])
        return f(t)


def rk_integrate(rhs: Callable[[float, np.ndarray], np.ndarray], y0, span: Tuple[float, float],
                 rel_tol: float = 1e-8, abs_tol: float = 1e-10, max_step: float = np.inf) -> OdeSolution:
    """Integrate y' = rhs(t, y) from span[0] to span[1] (either direction)."""
    y0 = np.atleast_1d(np.asarray(y0, dtype=np.float64))
    if not np.all(np.isfinite(y0)):
        raise IntegrationError("initial value is not finite")
    if span[0] == span[1]:
        raise IntegrationError("integration span is empty")
    sol = solve_ivp(rhs, span, y0, method="RK45", rtol=rel_tol, atol=abs_tol, max_step=max_step)
    if sol.status != 0 or not np.all(np.isfinite(sol.y)):
        raise IntegrationError(f"integration over {span} failed: {sol.message}")
    t = sol.t
    y = sol.y.T
    dydt = np.array([rhs(ti, yi) for ti, yi in zip(t, y)], dtype=np.float64).reshape(y.shape)
    if t[0] > t[-1]:
        t, y, dydt = t[::-1].copy(), y[::-1].copy(), dydt[::-1].copy()
    return OdeSolution(t=t, y=y, dydt=dydt)


class ReferenceEvaluator:
    """Exact value function and optimal control from a solved coefficient system."""

    def __init__(self, problem: MfgProblem, solution: OdeSolution, terminal: np.ndarray):
        self.problem = problem
        self.solution = solution
        self.terminal = terminal
        self.T = problem.T
        self.d = problem.d
        self.c = dict(problem.constants)

    def _state(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        y = np.array(self.solution(t), dtype=np.float64)
        y[t >= self.T] = self.terminal
        return y

    def coefficients(self, t) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def coefficient_derivatives(self, t) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def mean(self, t) -> np.ndarray:
        return self.coefficients(t)["mbar"]

    def value(self, t, z) -> np.ndarray:
        raise NotImplementedError

    def optimal_control(self, t, z) -> np.ndarray:
        raise NotImplementedError

    def hjb_residual(self, t, z) -> np.ndarray:
        raise NotImplementedError

    def bucket_stats(self) -> BucketStats:
        """Bucket statistics carrying the reference mean on the time grid."""
        grid = np.arange(self.problem.N + 1) * self.problem.h
        return BucketStats.from_means(torch.from_numpy(self.mean(grid)))

    def columns(self) -> Tuple[str, ...]:
        raise NotImplementedError

    def table(self) -> np.ndarray:
        raise NotImplementedError


class LqReference(ReferenceEvaluator):
    """v = a/2 |z - m|^2 + b.(z - m) + gamma + 1/2 with u* = -(a (z - m) + b) / c2."""

    def _split(self, y: np.ndarray) -> Dict[str, np.ndarray]:
        d = self.d
        return {"a": y[:, 0], "mbar": y[:, 1:1 + d], "b": y[:, 1 + d:1 + 2 * d], "gamma": y[:, 1 + 2 * d]}

    def coefficients(self, t) -> Dict[str, np.ndarray]:
        return self._split(self._state(t))

    def coefficient_derivatives(self, t) -> Dict[str, np.ndarray]:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return self._split(np.array(self.solution.derivative(t)))

    def _target(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return self.problem.target(torch.from_numpy(t)).numpy()

    def value(self, t, z) -> np.ndarray:
        k = self.coefficients(t)
        w = np.atleast_2d(z) - k["mbar"]
        return 0.5 * k["a"] * (w ** 2).sum(-1) + (k["b"] * w).sum(-1) + k["gamma"] + 0.5

    def optimal_control(self, t, z) -> np.ndarray:
        k = self.coefficients(t)
        w = np.atleast_2d(z) - k["mbar"]
        return -(k["a"][:, None] * w + k["b"]) / self.c["c2"]

    def hjb_residual(self, t, z) -> np.ndarray:
        c = self.c
        k = self.coefficients(t)
        dk = self.coefficient_derivatives(t)
        z = np.atleast_2d(z)
        w = z - k["mbar"]
        z_star = self._target(t)
        dv_dt = (0.5 * dk["a"] * (w ** 2).sum(-1) - k["a"] * (w * dk["mbar"]).sum(-1)
                 + (dk["b"] * w).sum(-1) - (k["b"] * dk["mbar"]).sum(-1) + dk["gamma"])
        grad = k["a"][:, None] * w + k["b"]
        drift = c["c0"] * (k["mbar"] - z) + c["c1"] * (z_star - k["mbar"])
        return (dv_dt + (drift * grad).sum(-1) - (grad ** 2).sum(-1) / (2.0 * c["c2"])
                + 0.5 * c["c_sigma"] ** 2 * self.d * k["a"]
                + 0.5 * c["c3"] * (w ** 2).sum(-1) + 0.5 * c["c4"] * ((z - z_star) ** 2).sum(-1))

    def coefficient_residuals(self, t) -> Dict[str, float]:
        c = self.c
        k = self.coefficients(t)
        dk = self.coefficient_derivatives(t)
        z_star = self._target(t)
        gap = k["mbar"] - z_star
        quadratic = dk["a"] - (k["a"] ** 2 / c["c2"] + 2.0 * c["c0"] * k["a"] - c["c3"] - c["c4"])
        linear = dk["b"] - (c["c0"] * k["b"] - c["c4"] * gap)
        mean = dk["mbar"] - (-k["b"] / c["c2"] + c["c1"] * (z_star - k["mbar"]))
        constant = dk["gamma"] + 0.5 * ((k["b"] ** 2).sum(-1) / c["c2"]
                                        + c["c_sigma"] ** 2 * self.d * k["a"] + c["c4"] * (gap ** 2).sum(-1))
        return {
            "quadratic": float(np.abs(quadratic).max()),
            "linear": float(max(np.abs(linear).max(), np.abs(mean).max())),
            "constant": float(np.abs(constant).max()),
        }

    def columns(self) -> Tuple[str, ...]:
        d = self.d
        return ("t", "a", *[f"b{k + 1}" for k in range(d)], *[f"mbar{k + 1}" for k in range(d)], "gamma")

    def table(self) -> np.ndarray:
        t = self.solution.t
        k = self.coefficients(t)
        return np.column_stack([t, k["a"], k["b"], k["mbar"], k["gamma"]])


class SrReference(ReferenceEvaluator):
    """v = eta/2 (z - m)^2 + gamma with u* = (c3 + eta)(m - z) and a constant mean m."""

    def __init__(self, problem: MfgProblem, solution: OdeSolution, terminal: np.ndarray, mean0: np.ndarray):
        super(SrReference, self).__init__(problem, solution, terminal)
        self.mean0 = np.asarray(mean0, dtype=np.float64).reshape(self.d)

    def coefficients(self, t) -> Dict[str, np.ndarray]:
        y = self._state(t)
        return {"eta": y[:, 0], "gamma": y[:, 1], "mbar": np.tile(self.mean0, (y.shape[0], 1))}

    def coefficient_derivatives(self, t) -> Dict[str, np.ndarray]:
        dy = np.array(self.solution.derivative(np.atleast_1d(np.asarray(t, dtype=np.float64))))
        return {"eta": dy[:, 0], "gamma": dy[:, 1], "mbar": np.zeros((dy.shape[0], self.d))}

    def value(self, t, z) -> np.ndarray:
        k = self.coefficients(t)
        w = (np.atleast_2d(z) - k["mbar"]).sum(-1)
        return 0.5 * k["eta"] * w ** 2 + k["gamma"]

    def optimal_control(self, t, z) -> np.ndarray:
        k = self.coefficients(t)
        return (self.c["c3"] + k["eta"])[:, None] * (k["mbar"] - np.atleast_2d(z))

    def hjb_residual(self, t, z) -> np.ndarray:
        c = self.c
        k = self.coefficients(t)
        dk = self.coefficient_derivatives(t)
        w = (np.atleast_2d(z) - k["mbar"]).sum(-1)
        grad = k["eta"] * w
        return (0.5 * dk["eta"] * w ** 2 + dk["gamma"] - c["c1"] * w * grad
                - 0.5 * (k["eta"] + c["c3"]) ** 2 * w ** 2 + 0.5 * c["c4"] * w ** 2
                + 0.5 * c["c2"] ** 2 * k["eta"])

    def coefficient_residuals(self, t) -> Dict[str, float]:
        c = self.c
        k = self.coefficients(t)
        dk = self.coefficient_derivatives(t)
        riccati = dk["eta"] - (2.0 * (c["c1"] + c["c3"]) * k["eta"] + k["eta"] ** 2 - (c["c4"] - c["c3"] ** 2))
        constant = dk["gamma"] + 0.5 * c["c2"] ** 2 * k["eta"]
        return {"quadratic": float(np.abs(riccati).max()), "linear": 0.0,
                "constant": float(np.abs(constant).max())}

    def columns(self) -> Tuple[str, ...]:
        return ("t", "eta", "mbar", "gamma")

    def table(self) -> np.ndarray:
        t = self.solution.t
        k = self.coefficients(t)
        return np.column_stack([t, k["eta"], k["mbar"][:, 0], k["gamma"]])


def solve_lq_reference(problem: MfgProblem, mean0: Optional[np.ndarray] = None,
                       settings: Optional[ReferenceSettings] = None) -> LqReference:
    """Solve the coupled (a, m, b, gamma) system by damped shooting on m(T)."""
    if problem.variant not in LQ_VARIANTS:
        raise UsageError(f"no linear-quadratic reference for variant '{problem.variant}'")
    settings = settings or ReferenceSettings()
    c = problem.constants
    d, T = problem.d, problem.T
    mean0 = problem.initial_mean if mean0 is None else np.asarray(mean0, dtype=np.float64).reshape(d)
    target = problem.target.numpy
    z_T = target(T)

    def rhs(t, y):
        a, m, b = y[0], y[1:1 + d], y[1 + d:1 + 2 * d]
        z_star = target(t)
        return np.concatenate([
            [a * a / c["c2"] + 2.0 * c["c0"] * a - c["c3"] - c["c4"]],
            -b / c["c2"] + c["c1"] * (z_star - m),
            c["c0"] * b - c["c4"] * (m - z_star),
            [-0.5 * (b @ b / c["c2"] + c["c_sigma"] ** 2 * d * a + c["c4"] * (m - z_star) @ (m - z_star))],
        ])

    def terminal(m_T):
        return np.concatenate([[c["c5"]], m_T, c["c5"] * (m_T - z_T), [0.5 * c["c5"] * (z_T - m_T) @ (z_T - m_T)]])

    def backward(m_T):
        return rk_integrate(rhs, terminal(m_T), (T, 0.0), settings.rel_tol, settings.abs_tol, settings.max_step)

    # m(0) is affine in m(T) with the same slope in every component
    def homogeneous(t, y):
        return np.array([-y[1] / c["c2"] - c["c1"] * y[0], c["c0"] * y[1] - c["c4"] * y[0]])

    slope = rk_integrate(homogeneous, [1.0, c["c5"]], (T, 0.0), settings.rel_tol, settings.abs_tol,
                         settings.max_step).y[0, 0]
    if abs(slope) < 1e-12:
        raise ReferenceSolveError("terminal mean does not influence the initial mean")

    tolerance = max(settings.shooting_tol, 10.0 * settings.rel_tol * max(1.0, float(np.abs(mean0).max())))
    m_T = mean0.copy()
    for sweep in range(1, settings.max_sweeps + 1):
        solution = backward(m_T)
        residual = solution.y[0, 1:1 + d] - mean0
        if np.abs(residual).max() <= tolerance:
            logger.info(f"[reference] {problem.variant} d={d} shooting converged after {sweep} sweeps")
            return LqReference(problem, solution, terminal(m_T))
        m_T = m_T - settings.shooting_damping * residual / slope
    raise ReferenceSolveError(
        f"shooting on the terminal mean did not converge in {settings.max_sweeps} sweeps "
        f"(residual {np.abs(residual).max():.3e})"
    )


def solve_sr_reference(problem: MfgProblem, settings: Optional[ReferenceSettings] = None) -> SrReference:
    """Backward Riccati solve for the systemic-risk game."""
    if problem.variant != "systemic_risk":
        raise UsageError(f"no systemic-risk reference for variant '{problem.variant}'")
    settings = settings or ReferenceSettings()
    c = problem.constants

    def rhs(t, y):
        eta = y[0]
        return np.array([2.0 * (c["c1"] + c["c3"]) * eta + eta * eta - (c["c4"] - c["c3"] ** 2),
                         -0.5 * c["c2"] ** 2 * eta])

    terminal = np.array([c["c5"], 0.0])
    solution = rk_integrate(rhs, terminal, (problem.T, 0.0), settings.rel_tol, settings.abs_tol, settings.max_step)
    logger.info(f"[reference] systemic_risk eta(0)={solution.y[0, 0]:.8f} gamma(0)={solution.y[0, 1]:.8f}")
    return SrReference(problem, solution, terminal, problem.initial_mean)


def solve_reference(problem: MfgProblem, settings: Optional[ReferenceSettings] = None) -> ReferenceEvaluator:
    if problem.variant in LQ_VARIANTS:
        return solve_lq_reference(problem, settings=settings)
    if problem.variant == "systemic_risk":
        return solve_sr_reference(problem, settings)
    raise UsageError(f"variant '{problem.variant}' has no reference solution")


def hjb_residual_check(evaluator: ReferenceEvaluator, samples) -> float:
    """Largest absolute HJB residual of the ansatz over (t, z) samples."""
    t = np.array([s[0] for s in samples], dtype=np.float64)
    z = np.array([np.atleast_1d(s[1]) for s in samples], dtype=np.float64)
    return float(np.abs(evaluator.hjb_residual(t, z)).max())


def coefficient_residuals(evaluator: ReferenceEvaluator, ts) -> Dict[str, float]:
    return evaluator.coefficient_residuals(np.asarray(ts, dtype=np.float64))


def export_table(evaluator: ReferenceEvaluator, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, evaluator.table(), delimiter=",", header=",".join(evaluator.columns()),
               comments="", fmt="%.12e")
    return path


class ReferenceControl:
    """Exact feedback control u*(t, z) with the StateSample interface of ControlNet."""

    def __init__(self, evaluator: ReferenceEvaluator):
        self.evaluator = evaluator
        self.h = evaluator.problem.h

    def __call__(self, x) -> torch.Tensor:
        t = x.time_index.numpy() * self.h
        u = self.evaluator.optimal_control(t, x.z.detach().double().numpy())
        return torch.as_tensor(u, dtype=x.z.dtype)
