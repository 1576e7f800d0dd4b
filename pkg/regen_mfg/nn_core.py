# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Dense network core shared by the control, value and test networks.

Evaluation and reverse-mode gradients go through torch; the parameter update is
torch's RMSProp recurrence, driven one explicit step at a time so that ascent and
descent share the same state layout.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from .exceptions import CompatibilityError, ConfigError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "regen-mfg-checkpoint/1"

ACTIVATIONS = ("relu", "sine")


class Sine(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sin(x)


class Mlp(nn.Module):
    """Fixed-topology fully connected network (the inner psi/phi networks).

    Hidden layers use the configured activation; the output layer is affine.
    """

    def __init__(self, layer_sizes: Sequence[int], activation: str = "relu",
                 generator: Optional[torch.Generator] = None):
        """Initialize the network.

        Args:
            layer_sizes: Widths from input (1+d) to output (m or 1)
            activation: 'relu' or 'sine', applied on hidden layers only
            generator: Optional torch generator for reproducible initialization
        """
        super(Mlp, self).__init__()
        if len(layer_sizes) < 2 or any(int(n) <= 0 for n in layer_sizes):
            raise ShapeError(f"layer sizes must be >= 2 positive integers, got {list(layer_sizes)}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{activation}'", field="activation")
        self.layer_sizes: List[int] = [int(n) for n in layer_sizes]
        self.activation_name: str = activation
        self.layers: nn.ModuleList = nn.ModuleList(
            [nn.Linear(n_in, n_out) for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]
        )
        self.activation: nn.Module = nn.ReLU() if activation == "relu" else Sine()
        self.reset_parameters(generator)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        # Glorot-uniform weights, zero biases
        with torch.no_grad():
            for layer in self.layers:
                fan_out, fan_in = layer.weight.shape
                bound = (6.0 / (fan_in + fan_out)) ** 0.5
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.zero_()

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Forward pass.

        Args:
            x: Tensor of shape (..., 1+d)

        Returns:
            Tensor of shape (..., output_dim)
        """
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"expected input dimension {self.input_dim}, got {x.shape[-1]}")
        for layer in self.layers[:-1]:
            x = self.activation(layer(x))
        return self.layers[-1](x)


@dataclass
class GradientBuffer:
    """Accumulated partial derivatives keyed by parameter name."""
    values: Dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, module: nn.Module) -> "GradientBuffer":
        return cls({name: torch.zeros_like(p) for name, p in module.named_parameters()})

    @classmethod
    def from_grads(cls, module: nn.Module, grads: Sequence[Optional[torch.Tensor]]) -> "GradientBuffer":
        named = list(module.named_parameters())
        if len(named) != len(grads):
            raise ShapeError(f"expected {len(named)} gradients, got {len(grads)}")
        return cls({
            name: (torch.zeros_like(p) if g is None else g.detach())
            for (name, p), g in zip(named, grads)
        })

    def zero_(self) -> "GradientBuffer":
        for g in self.values.values():
            g.zero_()
        return self

    def check_congruent(self, module: nn.Module) -> None:
        named = dict(module.named_parameters())
        if named.keys() != self.values.keys():
            raise ShapeError("gradient buffer keys do not match the parameters")
        for name, p in named.items():
            if self.values[name].shape != p.shape:
                raise ShapeError(f"gradient for '{name}' has shape {tuple(self.values[name].shape)}, "
                                 f"parameter has {tuple(p.shape)}")

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.values[name]


class RmsPropState:
    """Running mean-square state for one network, backed by torch.optim.RMSprop."""

    def __init__(self, module: nn.Module, smoothing: float = 0.99, epsilon: float = 1e-8):
        if not 0.0 < smoothing < 1.0:
            raise ConfigError(f"RMSProp smoothing must lie in (0, 1), got {smoothing}", field="smoothing")
        if epsilon <= 0.0:
            raise ConfigError(f"RMSProp epsilon must be positive, got {epsilon}", field="epsilon")
        self.module = module
        self.smoothing = smoothing
        self.epsilon = epsilon
        self.optimizer = torch.optim.RMSprop(
            module.parameters(), lr=1.0, alpha=smoothing, eps=epsilon, foreach=False
        )

    def mean_square(self) -> Dict[str, torch.Tensor]:
        """Current mean-square estimate per parameter (zeros before the first step)."""
        out = {}
        for name, p in self.module.named_parameters():
            state = self.optimizer.state.get(p, {})
            out[name] = state["square_avg"].detach().clone() if "square_avg" in state else torch.zeros_like(p)
        return out

    def state_dict(self) -> Dict:
        return self.optimizer.state_dict()

    def load_state_dict(self, state: Mapping) -> None:
        self.optimizer.load_state_dict(state)


def mlp_forward(params: nn.Module, x: torch.Tensor) -> torch.Tensor:
    return params(x)


def mlp_backward(params: nn.Module, x: torch.Tensor,
                 upstream: torch.Tensor) -> Tuple[GradientBuffer, torch.Tensor]:
    """Reverse-mode gradient of upstream . output with respect to parameters and input.

    Args:
        params: Network whose parameters are differentiated
        x: Input tensor (single sample or batch)
        upstream: Cotangent with the output's shape

    Returns:
        (GradientBuffer, input gradient with x's shape)
    """
    x = x.detach().requires_grad_(True)
    out = params(x)
    if upstream.shape != out.shape:
        raise ShapeError(f"upstream shape {tuple(upstream.shape)} does not match output {tuple(out.shape)}")
    names_params = list(params.parameters())
    grads = torch.autograd.grad(out, [x, *names_params], grad_outputs=upstream.to(out.dtype),
                                allow_unused=True)
    return GradientBuffer.from_grads(params, grads[1:]), grads[0]


def rmsprop_step(params: nn.Module, grads: GradientBuffer, state: RmsPropState,
                 lr: float, ascend: bool = False) -> nn.Module:
    """One RMSProp update.

    mean_square <- s * mean_square + (1 - s) * g^2
    params <- params -/+ lr * g / (sqrt(mean_square) + eps)   (+ when ascending)
    """
    if not lr > 0.0:
        raise ConfigError(f"learning rate must be positive, got {lr}", field="lr")
    if state.module is not params:
        raise ShapeError("optimizer state belongs to a different network")
    grads.check_congruent(params)
    for name, p in params.named_parameters():
        p.grad = grads[name].to(p.dtype).clone()
    for group in state.optimizer.param_groups:
        group["lr"] = lr
        group["maximize"] = ascend
    state.optimizer.step()
    for p in params.parameters():
        p.grad = None
    return params


def parameter_hash(module: nn.Module) -> str:
    """SHA256 over the raw parameter bytes, in state_dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def describe(module: nn.Module) -> Dict[str, Union[List[int], str]]:
    return {
        "layer_sizes": list(getattr(module, "layer_sizes")),
        "activation": getattr(module, "activation_name", "relu"),
    }


def save_checkpoint(path: Union[str, Path], nets: Mapping[str, nn.Module], iteration: int,
                    extra: Optional[Dict] = None) -> Path:
    """Write a checkpoint; see docs/CHECKPOINT_FORMAT.md for the layout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "iteration": int(iteration),
        "nets": {
            name: {**describe(net), "state": {k: v.detach().cpu().clone() for k, v in net.state_dict().items()}}
            for name, net in nets.items()
        },
        "extra": extra or {},
    }
    torch.save(payload, path)
    logger.info(f"[checkpoint] iteration {iteration} -> {path}")
    return path


def load_checkpoint(path: Union[str, Path], nets: Mapping[str, nn.Module]) -> Dict:
    """Restore nets in place from a checkpoint and return the raw payload."""
    path = Path(path)
    if not path.exists():
        raise CompatibilityError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CompatibilityError(f"unsupported checkpoint format: {payload.get('format')!r}")
    for name, net in nets.items():
        if name not in payload["nets"]:
            raise CompatibilityError(f"checkpoint has no network '{name}'")
        saved = payload["nets"][name]
        expected = describe(net)
        if saved["layer_sizes"] != expected["layer_sizes"] or saved["activation"] != expected["activation"]:
            raise CompatibilityError(
                f"network '{name}': checkpoint layers {saved['layer_sizes']} ({saved['activation']}) "
                f"vs configured {expected['layer_sizes']} ({expected['activation']})"
            )
        net.load_state_dict(saved["state"])
    return payload
