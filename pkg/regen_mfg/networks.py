# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Network wrappers used by the solver: box-clamped control, value network with a
terminal branch, and the multiscale sine test network.

All three take a batch of StateSample and build the (t, z) features themselves.
"""

import math
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from .exceptions import ConfigError, MeasureError, ShapeError
from .measure import StateSample
from .models import NetworkSettings
from .nn_core import Mlp
from .problem import BucketStats, MfgProblem


class ControlNet(nn.Module):
    """u(x) = min(max(lower, psi(x)), upper), componentwise."""

    def __init__(self, inner: Mlp, h: float, lower: Optional[torch.Tensor] = None,
                 upper: Optional[torch.Tensor] = None):
        super(ControlNet, self).__init__()
        m = inner.output_dim
        lower = torch.full((m,), -math.inf) if lower is None else torch.as_tensor(lower, dtype=torch.float32)
        upper = torch.full((m,), math.inf) if upper is None else torch.as_tensor(upper, dtype=torch.float32)
        lower, upper = lower.expand(m).clone(), upper.expand(m).clone()
        if torch.any(lower > upper):
            raise ConfigError("control box lower bound exceeds upper bound", field="control_lower")
        self.inner = inner
        self.h = h
        self.register_buffer("lower", lower)
        self.register_buffer("upper", upper)

    @property
    def layer_sizes(self) -> List[int]:
        return self.inner.layer_sizes

    @property
    def activation_name(self) -> str:
        return self.inner.activation_name

    def forward(self, x: StateSample) -> torch.Tensor:
        raw = self.inner(x.features(self.h))
        return torch.clamp(raw, min=self.lower.to(raw.dtype), max=self.upper.to(raw.dtype))


class ValueNet(nn.Module):
    """v(x) = phi(x) before T and exactly g(x, mu) at T."""

    def __init__(self, inner: Mlp, problem: MfgProblem):
        super(ValueNet, self).__init__()
        if inner.output_dim != 1:
            raise ShapeError(f"value network must have scalar output, got {inner.output_dim}")
        self.inner = inner
        self.problem = problem

    @property
    def layer_sizes(self) -> List[int]:
        return self.inner.layer_sizes

    @property
    def activation_name(self) -> str:
        return self.inner.activation_name

    def forward(self, x: StateSample, stats: Optional[BucketStats] = None) -> torch.Tensor:
        out = self.inner(x.features(self.problem.h)).squeeze(-1)
        terminal = x.time_index == self.problem.N
        if bool(terminal.any()):
            if stats is None:
                raise MeasureError("terminal value requested without bucket statistics")
            g = self.problem.term_cost(x, stats).detach().to(out.dtype)
            out = torch.where(terminal, g, out)
        return out


class TestNet(nn.Module):
    """rho(x) = sin(Lambda(W x + b)), Lambda = diag(1, 1 + c, 1 + 2c, ...)."""

    __test__ = False

    def __init__(self, input_dim: int, r: int, scale_c: float, h: float,
                 generator: Optional[torch.Generator] = None):
        super(TestNet, self).__init__()
        if r <= 0 or input_dim <= 0:
            raise ShapeError(f"test network needs positive sizes, got r={r}, input_dim={input_dim}")
        if scale_c <= 0:
            raise ConfigError(f"scale_c must be positive, got {scale_c}", field="scale_c")
        self.h = h
        self.scale_c = scale_c
        self.W = nn.Parameter(torch.empty(r, input_dim))
        self.b = nn.Parameter(torch.empty(r))
        self.register_buffer("scales", 1.0 + torch.arange(r, dtype=torch.float32) * scale_c)
        with torch.no_grad():
            self.W.normal_(0.0, 1.0 / math.sqrt(input_dim), generator=generator)
            self.b.uniform_(0.0, 2.0 * math.pi, generator=generator)

    @property
    def layer_sizes(self) -> List[int]:
        return [self.W.shape[1], self.W.shape[0]]

    @property
    def activation_name(self) -> str:
        return "sine"

    def forward(self, x: StateSample) -> torch.Tensor:
        pre = x.features(self.h) @ self.W.T + self.b
        return torch.sin(self.scales.to(pre.dtype) * pre)


def control_eval(net: ControlNet, x: StateSample) -> torch.Tensor:
    return net(x)


def value_eval(net: ValueNet, x: StateSample, bucket_stats: Optional[BucketStats]) -> torch.Tensor:
    return net(x, bucket_stats)


def test_eval(net: TestNet, x: StateSample) -> torch.Tensor:
    return net(x)


test_eval.__test__ = False


def build_networks(problem: MfgProblem, settings: NetworkSettings,
                   generator: Optional[torch.Generator] = None) -> Tuple[ControlNet, ValueNet, TestNet]:
    """Control, value and test networks wired to the problem."""
    input_dim = 1 + problem.d
    hidden = list(settings.hidden_sizes())
    lower = None if settings.control_lower is None else torch.full((problem.m,), settings.control_lower)
    upper = None if settings.control_upper is None else torch.full((problem.m,), settings.control_upper)
    control = ControlNet(Mlp([input_dim, *hidden, problem.m], settings.control_activation, generator),
                         problem.h, lower, upper)
    value = ValueNet(Mlp([input_dim, *hidden, 1], settings.value_activation, generator), problem)
    test = TestNet(input_dim, settings.test_width, settings.scale_c, problem.h, generator)
    return control, value, test
