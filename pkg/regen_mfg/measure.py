# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Particle representation of the occupation measure and its evolution.

Every random draw comes from a counter-based Philox stream addressed by
(seed, purpose, iteration, substep). Noise and reset draws are further keyed
by the particle index, so a particle reads its own stream and results do not
depend on batch composition, ensemble size or execution order.
"""

import logging
from dataclasses import dataclass, replace
from enum import IntEnum
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .exceptions import ConfigError, ConsistencyError, ShapeError
from .problem import BucketStats, MfgProblem

if TYPE_CHECKING:
    from .networks import ControlNet

logger = logging.getLogger(__name__)


class Purpose(IntEnum):
    INIT = 0
    BATCH = 1
    NOISE = 2
    RESET = 3
    KERNEL = 4
    PATHS = 5
    TEST_POINTS = 6


@lru_cache(maxsize=64)
def _philox_key(seed: int) -> np.ndarray:
    key = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    key.setflags(write=False)
    return key


def _address(seed: int, purpose: Purpose, lane: int, iteration: int, substep: int) -> np.random.Generator:
    # word 0 is the running block counter; lane 0 is the shared stream, lane m + 1 is particle m
    key = _philox_key(seed)
    counter = np.array([0, lane, iteration, (int(purpose) << 32) | substep], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def stream(seed: int, purpose: Purpose, iteration: int = 0, substep: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, purpose, iteration, substep) address."""
    return _address(seed, purpose, 0, iteration, substep)


def particle_stream(seed: int, purpose: Purpose, particle: int, iteration: int = 0,
                    substep: int = 0) -> np.random.Generator:
    """Generator owned by one particle at one (purpose, iteration, substep) address."""
    if particle < 0:
        raise ConsistencyError(f"particle index {particle} is negative")
    return _address(seed, purpose, int(particle) + 1, iteration, substep)


@dataclass
class StateSample:
    """A batch of grid states x = (n h, z); time is stored as the integer index n."""
    time_index: torch.Tensor
    z: torch.Tensor

    def __post_init__(self):
        if self.z.dim() != 2 or self.time_index.shape != self.z.shape[:1]:
            raise ShapeError(f"time_index {tuple(self.time_index.shape)} and z {tuple(self.z.shape)} "
                             f"do not describe one batch")

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def d(self) -> int:
        return self.z.shape[1]

    def features(self, h: float) -> torch.Tensor:
        t = self.time_index.to(self.z.dtype) * h
        return torch.cat([t.unsqueeze(-1), self.z], dim=-1)

    def select(self, index: Union[np.ndarray, torch.Tensor]) -> "StateSample":
        index = torch.as_tensor(index, dtype=torch.long)
        return StateSample(self.time_index[index], self.z[index])

    def to(self, dtype: torch.dtype) -> "StateSample":
        return StateSample(self.time_index, self.z.to(dtype))

    @classmethod
    def at(cls, n: int, z: torch.Tensor) -> "StateSample":
        z = torch.as_tensor(z)
        if z.dim() == 1:
            z = z.unsqueeze(0)
        return cls(torch.full((z.shape[0],), int(n), dtype=torch.long), z)


@dataclass
class ParticleEnsemble:
    particles: StateSample
    seed: int
    iteration: int = 0

    @property
    def M(self) -> int:
        return len(self.particles)


@dataclass
class Transition:
    """Transitions of one outer iteration for the particles in `index` (row-aligned)."""
    index: np.ndarray
    source: StateSample
    noise: torch.Tensor
    reset: torch.Tensor
    destination: Optional[StateSample] = None

    def rows(self, particles: Union[np.ndarray, Sequence[int]]) -> np.ndarray:
        """Row positions of the given particle indices."""
        particles = np.asarray(particles, dtype=np.int64)
        if particles.size == 0:
            return np.zeros(0, dtype=np.int64)
        if self.index.size == 0:
            raise ConsistencyError("no transitions were drawn")
        order = np.argsort(self.index, kind="stable")
        pos = np.clip(np.searchsorted(self.index, particles, sorter=order), 0, self.index.size - 1)
        rows = order[pos]
        if np.any(self.index[rows] != particles):
            raise ConsistencyError("no transition drawn for some requested particles")
        return rows

    def subset(self, particles: Union[np.ndarray, Sequence[int]]) -> "Transition":
        rows = self.rows(particles)
        return Transition(
            index=self.index[rows], source=self.source.select(rows), noise=self.noise[rows],
            reset=self.reset[rows],
            destination=None if self.destination is None else self.destination.select(rows),
        )


def init_ensemble(problem: MfgProblem, M: int, initial_guess: str = "default", seed: int = 0,
                  time_index: Optional[int] = None, dtype: torch.dtype = torch.float32) -> ParticleEnsemble:
    """Draw the initial ensemble from the initial-guess law.

    Args:
        problem: Problem providing the initial law and its guess
        M: Particle count
        initial_guess: 'default' (variant guess) or 'initial_law' (Z_0 at every t)
        seed: Run seed
        time_index: Force every particle to this time index instead of uniform {0..N-1}
        dtype: Floating dtype of the spatial component
    """
    if M <= 0:
        raise ConfigError(f"ensemble size must be positive, got {M}", field="ensemble_size")
    if initial_guess not in ("default", "initial_law"):
        raise ConfigError(f"unknown initial guess '{initial_guess}'", field="initial_guess")
    rng = stream(seed, Purpose.INIT)
    if time_index is None:
        n = rng.integers(0, problem.N, size=M)
    else:
        n = np.full(M, int(time_index))
    if initial_guess == "default":
        z = problem.initial_guess(n, rng)
    else:
        z = problem.init_sampler(rng, M)
    particles = StateSample(torch.from_numpy(n.astype(np.int64)), torch.as_tensor(z, dtype=dtype))
    logger.info(f"[measure] initialized {M} particles ({problem.variant}, guess={initial_guess})")
    return ParticleEnsemble(particles=particles, seed=seed, iteration=0)


def select_minibatches(M: int, batch_size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    if batch_size < 0 or 2 * batch_size > M:
        raise ConfigError(f"two batches of {batch_size} do not fit into {M} particles", field="batch_size")
    chosen = rng.permutation(M)[:2 * batch_size]
    return chosen[:batch_size], chosen[batch_size:]


def draw_transitions(ensemble: ParticleEnsemble, index: np.ndarray, problem: MfgProblem,
                     iteration: int, substep: int = 0) -> Transition:
    """Gaussian increments and reset draws for the selected particles."""
    index = np.asarray(index, dtype=np.int64)
    dtype = ensemble.particles.z.dtype
    if index.size == 0:
        return Transition(index=index, source=ensemble.particles.select(index),
                          noise=torch.zeros(0, problem.q, dtype=dtype), reset=torch.zeros(0, problem.d, dtype=dtype))
    source = ensemble.particles.select(index)
    at_horizon = (source.time_index == problem.N).numpy()
    noise = np.empty((index.size, problem.q))
    reset = np.zeros((index.size, problem.d))
    for row, m in enumerate(index):
        noise[row] = particle_stream(ensemble.seed, Purpose.NOISE, m, iteration, substep).standard_normal(problem.q)
        # reset draws are only consumed at n = N
        if at_horizon[row]:
            rng = particle_stream(ensemble.seed, Purpose.RESET, m, iteration, substep)
            reset[row] = np.asarray(problem.init_sampler(rng, 1)).reshape(problem.d)
    return Transition(
        index=index,
        source=source,
        noise=torch.as_tensor(noise, dtype=dtype),
        reset=torch.as_tensor(reset, dtype=dtype),
    )


def random_step(x: StateSample, stats: BucketStats, control: "ControlNet", problem: MfgProblem,
                noise: torch.Tensor, reset: torch.Tensor) -> Tuple[StateSample, torch.Tensor]:
    """Euler-Maruyama step (or reset at n = N), also returning the control used."""
    u = control(x)
    active = x.time_index < problem.N
    h = problem.h
    moved = (x.z + problem.drift_z(x, stats, u) * h
             + problem.noise_term(x, stats, u, noise.to(x.z.dtype)) * h ** 0.5)
    z = torch.where(active.unsqueeze(-1), moved, reset.to(x.z.dtype))
    time_index = torch.where(active, x.time_index + 1, torch.zeros_like(x.time_index))
    return StateSample(time_index, z), u


def random_map(x: StateSample, stats: BucketStats, control: "ControlNet", problem: MfgProblem,
               noise: torch.Tensor, reset: torch.Tensor) -> StateSample:
    return random_step(x, stats, control, problem, noise, reset)[0]


def apply_transitions(ensemble: ParticleEnsemble, transitions: Transition) -> ParticleEnsemble:
    """Commit destinations of the transitioned particles and advance the iteration counter."""
    index = np.asarray(transitions.index, dtype=np.int64)
    if index.size == 0:
        return replace(ensemble, iteration=ensemble.iteration + 1)
    if transitions.destination is None:
        raise ConsistencyError("transitions have no destinations")
    if np.unique(index).size != index.size:
        raise ConsistencyError("duplicate particle index in transitions")
    if index.min() < 0 or index.max() >= ensemble.M:
        raise ConsistencyError(f"particle index outside 0..{ensemble.M - 1}")
    idx = torch.from_numpy(index)
    dest = transitions.destination
    time_index = ensemble.particles.time_index.clone()
    z = ensemble.particles.z.clone()
    time_index[idx] = dest.time_index
    z[idx] = dest.z.detach().to(z.dtype)
    return ParticleEnsemble(particles=StateSample(time_index, z), seed=ensemble.seed,
                            iteration=ensemble.iteration + 1)


def write_snapshot(ensemble: ParticleEnsemble, path: Union[str, Path]) -> Path:
    """Write one row per particle: iteration, time_index, z components."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p = ensemble.particles
    d = p.d
    rows = np.column_stack([
        np.full(ensemble.M, ensemble.iteration), p.time_index.numpy(), p.z.detach().double().numpy(),
    ])
    header = ",".join(["iteration", "time_index"] + [f"z{k + 1}" for k in range(d)])
    np.savetxt(path, rows, delimiter=",", header=header, comments="",
               fmt=["%d", "%d"] + ["%.10g"] * d)
    return path


def snapshot_times(ensemble: ParticleEnsemble, N: int, slices: int = 5) -> dict:
    """Particle positions at time indices round(k N / slices), k = 0..slices."""
    p = ensemble.particles
    out = {}
    for k in range(slices + 1):
        n = int(round(k * N / slices))
        out[n] = p.z[p.time_index == n].detach().double().numpy()
    return out


def write_slices(ensemble: ParticleEnsemble, N: int, path: Union[str, Path], slices: int = 5) -> Path:
    """Write the particles sitting on the evenly spaced time slices: time_index, z components."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = ensemble.particles.d
    tables = snapshot_times(ensemble, N, slices)
    rows = np.concatenate([np.column_stack([np.full(len(z), n), z]) for n, z in tables.items()])
    header = ",".join(["time_index"] + [f"z{k + 1}" for k in range(d)])
    np.savetxt(path, rows.reshape(-1, d + 1), delimiter=",", header=header, comments="",
               fmt=["%d"] + ["%.10g"] * d)
    return path
