# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Run configuration models.

Configuration files are INI-style sections of `key = value` lines; parsed values
are validated by the pydantic models below. Defaults mirror the desk profile.
"""

import configparser
import logging
import math
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigError
from .problem import VARIANTS

logger = logging.getLogger(__name__)

SECTIONS = ("run", "problem", "trainer", "network", "optimizer", "metrics", "reference")


class NetworkSettings(BaseModel):
    width: int = Field(104, gt=0, description="Hidden width W of the control and value networks")
    depth: int = Field(6, ge=2, description="Number of affine layers H (depth-1 hidden layers)")
    control_activation: Literal["relu", "sine"] = Field("relu", description="Hidden activation of psi")
    value_activation: Literal["relu", "sine"] = Field("relu", description="Hidden activation of phi")
    test_width: int = Field(1200, gt=0, description="Test network output dimension r")
    scale_c: float = Field(10.0, gt=0, description="Scale layer step: c_j = 1 + (j-1) * scale_c")
    control_lower: Optional[float] = Field(None, description="Lower bound of the control box (all components)")
    control_upper: Optional[float] = Field(None, description="Upper bound of the control box (all components)")

    @model_validator(mode="after")
    def check_box(self):
        if self.control_lower is not None and self.control_upper is not None \
                and self.control_lower > self.control_upper:
            raise ValueError("control_lower must not exceed control_upper")
        return self

    def hidden_sizes(self) -> Tuple[int, ...]:
        return (self.width,) * (self.depth - 1)


class OptimizerSettings(BaseModel):
    smoothing: float = Field(0.99, gt=0, lt=1, description="RMSProp mean-square smoothing")
    epsilon: float = Field(1e-8, gt=0, description="RMSProp denominator floor")


class TrainerConfig(BaseModel):
    iterations: int = Field(3000, ge=0, description="Outer iterations I")
    inner_steps: int = Field(2, ge=1, description="PE/PI steps J per outer iteration")
    adversarial_steps: int = Field(1, ge=0, description="Test network ascent steps K per outer iteration")
    ensemble_size: int = Field(50_000, gt=0, description="Particle count M")
    batch_size: int = Field(2_500, gt=0, description="|A_1| = |A_2|")
    lr_base: Optional[float] = Field(None, gt=0, description="delta_0; defaults to 3 / sqrt(d)")
    lr_decay: float = Field(0.01, gt=0, le=1, description="Learning-rate factor reached at i = I")
    value_lr_factor: float = Field(1e-3, gt=0)
    control_lr_factor: float = Field(1e-3, gt=0)
    test_lr_factor: float = Field(1e-2, gt=0)
    fresh_noise: bool = Field(False, description="Redraw transition noise for every inner step")
    initial_guess: Literal["default", "initial_law"] = Field("default")
    kernel_cap: int = Field(1024, gt=0, description="Kernel subsample size per time bucket")
    metrics_every: int = Field(100, gt=0)
    checkpoint_every: int = Field(1000, ge=0, description="0 disables periodic checkpoints")
    snapshot_every: int = Field(0, ge=0, description="0 disables particle snapshots")

    @model_validator(mode="after")
    def check_batches(self):
        if 2 * self.batch_size > self.ensemble_size:
            raise ValueError(f"two batches of {self.batch_size} exceed ensemble size {self.ensemble_size}")
        return self

    def learning_rates(self, i: int, d: int) -> Tuple[float, float, float]:
        """(value, control, test) learning rates at outer iteration i."""
        base = self.lr_base if self.lr_base is not None else 3.0 / math.sqrt(d)
        decay = self.lr_decay ** (i / self.iterations) if self.iterations > 0 else 1.0
        return (base * self.value_lr_factor * decay,
                base * self.control_lr_factor * decay,
                base * self.test_lr_factor * decay)


class MetricsSettings(BaseModel):
    rc_points: int = Field(256, gt=0, description="|D_rc|")
    re_points: int = Field(1000, gt=0, description="|D_re|")
    paths: int = Field(256, gt=0, description="Euler-Maruyama paths for J_hat")
    metric_seed: Optional[int] = Field(None, description="Seed of the test point sets; defaults to the run seed")
    reference_mean: bool = Field(False, description="Use the reference mean instead of the ensemble in J_hat")


class ReferenceSettings(BaseModel):
    rel_tol: float = Field(1e-8, gt=0)
    abs_tol: float = Field(1e-10, gt=0)
    max_step: float = Field(1e-3, gt=0, description="Largest accepted step of the reference integrator")
    shooting_damping: float = Field(0.5, gt=0, le=1)
    shooting_tol: float = Field(1e-10, gt=0)
    max_sweeps: int = Field(100, gt=0)


class RunConfig(BaseModel):
    variant: str = Field(..., description="Problem variant")
    d: int = Field(1, ge=1, description="State dimension")
    N: int = Field(100, ge=1, description="Time steps on [0, T]")
    seed: int = Field(0, ge=0)
    output_dir: str = Field("runs/default")
    constants: Dict[str, float] = Field(default_factory=dict, description="Problem constant overrides")
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    network: NetworkSettings = Field(default_factory=NetworkSettings)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    metrics: MetricsSettings = Field(default_factory=MetricsSettings)
    reference: ReferenceSettings = Field(default_factory=ReferenceSettings)

    @field_validator("variant")
    @classmethod
    def check_variant(cls, value: str) -> str:
        if value not in VARIANTS:
            raise ValueError(f"unknown variant '{value}', expected one of {', '.join(VARIANTS)}")
        return value

    @property
    def metric_seed(self) -> int:
        return self.metrics.metric_seed if self.metrics.metric_seed is not None else self.seed

    @classmethod
    def full_scale(cls, variant: str, d: int, **overrides) -> "RunConfig":
        """Full-scale profile: M = 1,024,000, I = 9,000, batches of M / 20."""
        trainer = TrainerConfig(iterations=9000, ensemble_size=1_024_000, batch_size=1_024_000 // 20)
        return cls(variant=variant, d=d, trainer=trainer, **overrides)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser["run"] = {"seed": str(self.seed), "output_dir": self.output_dir}
        problem = {"variant": self.variant, "d": str(self.d), "N": str(self.N)}
        problem.update({f"constants.{k}": repr(v) for k, v in sorted(self.constants.items())})
        parser["problem"] = problem
        for section in ("trainer", "network", "optimizer", "metrics", "reference"):
            values = getattr(self, section).model_dump()
            parser[section] = {k: _format_value(v) for k, v in values.items() if v is not None}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser[section].items())
            lines.append("")
        return "\n".join(lines)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _line_of(text: str, section: str, key: Optional[str] = None) -> Optional[int]:
    current = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return number
            continue
        if current == section and key is not None and line.split("=", 1)[0].strip() == key:
            return number
    return None


_FIELD_SECTIONS = {"variant": "problem", "d": "problem", "N": "problem", "seed": "run", "output_dir": "run"}


def parse_config(text: str, seed: Optional[int] = None) -> RunConfig:
    """Parse and validate configuration text."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed configuration: {e}", line=getattr(e, "lineno", None))

    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section [{unknown[0]}]", field=unknown[0], line=_line_of(text, unknown[0]))

    data: Dict = {}
    for key, value in (parser["run"].items() if parser.has_section("run") else []):
        data[key] = value
    constants = {}
    for key, value in (parser["problem"].items() if parser.has_section("problem") else []):
        if key.startswith("constants."):
            constants[key[len("constants."):]] = value
        else:
            data[key] = value
    data["constants"] = constants
    for section in ("trainer", "network", "optimizer", "metrics", "reference"):
        if parser.has_section(section):
            data[section] = dict(parser[section].items())
    if seed is not None:
        data["seed"] = seed

    if "variant" not in data:
        raise ConfigError("missing required field 'variant' in [problem]", field="variant",
                          line=_line_of(text, "problem"))
    try:
        return RunConfig(**data)
    except ValidationError as e:
        error = e.errors()[0]
        loc = [str(p) for p in error["loc"]]
        field_name = ".".join(loc)
        if len(loc) >= 2 and loc[0] in SECTIONS:
            line = _line_of(text, loc[0], loc[1])
        elif loc and loc[0] == "constants" and len(loc) > 1:
            line = _line_of(text, "problem", f"constants.{loc[1]}")
        elif loc:
            line = _line_of(text, _FIELD_SECTIONS.get(loc[0], "run"), loc[0])
        else:
            line = None
        raise ConfigError(f"invalid value for '{field_name}': {error['msg']}", field=field_name, line=line)


def load_config(path: Union[str, Path], seed: Optional[int] = None) -> RunConfig:
    """Load a run configuration file; `seed` overrides the file's seed."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file not found: {path}")
    config = parse_config(path.read_text(), seed=seed)
    logger.info(f"Loaded configuration {path} (variant={config.variant}, d={config.d}, seed={config.seed})")
    return config
