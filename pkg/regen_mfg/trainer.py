# Copyright 2025 Raza Ahmad. Licensed under Apache 2.0.

"""
Policy iteration on the regenerative particle system.

Each outer iteration rebuilds the bucket statistics, draws two disjoint
mini-batches with their transition noise, alternates J policy-evaluation /
policy-improvement steps with K adversarial test-network steps, and finally
moves the selected particles one step along the random map.
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .exceptions import ConfigError, DivergenceError
from .measure import (ParticleEnsemble, Purpose, StateSample, Transition, apply_transitions,
                      draw_transitions, init_ensemble, random_step, select_minibatches, stream,
                      write_slices, write_snapshot)
from .metrics import TestPointSet, evaluate, sample_test_points
from .models import RunConfig
from .networks import ControlNet, TestNet, ValueNet, build_networks
from .nn_core import GradientBuffer, RmsPropState, load_checkpoint, parameter_hash, rmsprop_step, save_checkpoint
from .problem import BucketStats, MfgProblem, build_bucket_stats
from .reference import ReferenceEvaluator

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "pe_loss", "pi_objective", "RE1", "REinf", "RC", "J_hat", "wall_s")


@dataclass
class MartingaleTerm:
    """hf + v(destination) - v(source), gated by the source lying before T."""
    index: np.ndarray
    hf: torch.Tensor
    v_next: torch.Tensor
    v_here: torch.Tensor
    active: torch.Tensor

    @property
    def value(self) -> torch.Tensor:
        return self.active.to(self.hf.dtype) * (self.hf + self.v_next - self.v_here)


@dataclass
class MetricsRecord:
    iteration: int
    pe_loss: float
    pi_objective: float
    RE1: float
    REinf: float
    RC: float
    J_hat: float
    wall_s: float

    def to_row(self) -> List[str]:
        return [str(self.iteration)] + [repr(float(getattr(self, c))) for c in HISTORY_COLUMNS[1:]]


@dataclass
class TrainingNets:
    control: ControlNet
    value: ValueNet
    test: TestNet
    control_state: RmsPropState
    value_state: RmsPropState
    test_state: RmsPropState

    @classmethod
    def create(cls, control: ControlNet, value: ValueNet, test: TestNet,
               smoothing: float = 0.99, epsilon: float = 1e-8) -> "TrainingNets":
        return cls(control, value, test,
                   RmsPropState(control.inner, smoothing, epsilon),
                   RmsPropState(value.inner, smoothing, epsilon),
                   RmsPropState(test, smoothing, epsilon))

    def modules(self) -> Dict[str, nn.Module]:
        return {"control": self.control, "value": self.value, "test": self.test}

    def optimizer_states(self) -> Dict[str, Dict]:
        return {"control": self.control_state.state_dict(), "value": self.value_state.state_dict(),
                "test": self.test_state.state_dict()}


@dataclass
class PolicyIterationResult:
    control: ControlNet
    value: ValueNet
    test: TestNet
    ensemble: ParticleEnsemble
    history: List[MetricsRecord] = field(default_factory=list)
    final_checkpoint: Optional[Path] = None
    stopped_early: bool = False


def martingale_increment(x: StateSample, destination: StateSample, problem: MfgProblem, stats: BucketStats,
                         control: ControlNet, value: ValueNet, u: Optional[torch.Tensor] = None) -> MartingaleTerm:
    if u is None:
        u = control(x)
    return MartingaleTerm(
        index=np.arange(len(x)),
        hf=problem.h * problem.run_cost(x, stats, u),
        v_next=value(destination, stats),
        v_here=value(x, stats),
        active=x.time_index < problem.N,
    )


def weighted_loss(batch: Sequence[int], test: Optional[TestNet], ensemble: ParticleEnsemble,
                  transitions: Transition, problem: MfgProblem, stats: BucketStats,
                  control: ControlNet, value: ValueNet) -> torch.Tensor:
    """Mini-batch average of test(x) * M(x); a None test is the constant one."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ConfigError("loss requested on an empty batch", field="batch_size")
    drawn = transitions.subset(batch)
    x = ensemble.particles.select(batch)
    destination, u = random_step(x, stats, control, problem, drawn.noise, drawn.reset)
    term = martingale_increment(x, destination, problem, stats, control, value, u=u)
    weights = x.z.new_ones(len(x), 1) if test is None else test(x)
    return (weights * term.value.unsqueeze(-1)).mean(dim=0)


def pe_objective(batches: Tuple[np.ndarray, np.ndarray], nets: TrainingNets, ensemble: ParticleEnsemble,
                 transitions: Transition, problem: MfgProblem, stats: BucketStats) -> torch.Tensor:
    """Inner product of the test-weighted estimators on the two disjoint batches."""
    first = weighted_loss(batches[0], nets.test, ensemble, transitions, problem, stats, nets.control, nets.value)
    second = weighted_loss(batches[1], nets.test, ensemble, transitions, problem, stats, nets.control, nets.value)
    return (first * second).sum()


def pi_objective(batches: Tuple[np.ndarray, np.ndarray], nets: TrainingNets, ensemble: ParticleEnsemble,
                 transitions: Transition, problem: MfgProblem, stats: BucketStats) -> torch.Tensor:
    union = np.concatenate(batches)
    return weighted_loss(union, None, ensemble, transitions, problem, stats, nets.control, nets.value)[0]


def _gradients(objective: torch.Tensor, module: nn.Module) -> GradientBuffer:
    params = list(module.parameters())
    if not objective.requires_grad:
        return GradientBuffer.zeros_like(module)
    grads = torch.autograd.grad(objective, params, allow_unused=True)
    return GradientBuffer.from_grads(module, grads)


def _check_finite(value: torch.Tensor, what: str, iteration: Optional[int], checkpoint: Optional[Path]):
    if not bool(torch.isfinite(value).all()):
        raise DivergenceError(
            f"non-finite {what} objective at iteration {iteration}"
            + (f"; last checkpoint {checkpoint}" if checkpoint else ""),
            iteration=iteration, checkpoint=str(checkpoint) if checkpoint else None,
        )


def pe_pi_inner_step(ensemble: ParticleEnsemble, transitions: Transition, nets: TrainingNets,
                     batches: Tuple[np.ndarray, np.ndarray], problem: MfgProblem, stats: BucketStats,
                     lrs: Tuple[float, float], iteration: Optional[int] = None,
                     checkpoint: Optional[Path] = None) -> Tuple[float, float]:
    """One descent step on theta (two-batch product) then one on alpha (union average).

    Returns:
        (PE objective, PI objective) evaluated before the respective updates
    """
    objective = pe_objective(batches, nets, ensemble, transitions, problem, stats)
    _check_finite(objective, "policy evaluation", iteration, checkpoint)
    rmsprop_step(nets.value.inner, _gradients(objective, nets.value.inner), nets.value_state, lrs[0])

    improvement = pi_objective(batches, nets, ensemble, transitions, problem, stats)
    _check_finite(improvement, "policy improvement", iteration, checkpoint)
    rmsprop_step(nets.control.inner, _gradients(improvement, nets.control.inner), nets.control_state, lrs[1])
    return float(objective.detach()), float(improvement.detach())


def adversarial_step(ensemble: ParticleEnsemble, transitions: Transition, nets: TrainingNets,
                     batches: Tuple[np.ndarray, np.ndarray], problem: MfgProblem, stats: BucketStats,
                     lr: float, iteration: Optional[int] = None, checkpoint: Optional[Path] = None) -> float:
    """One ascent step on the test network's (W, b)."""
    objective = pe_objective(batches, nets, ensemble, transitions, problem, stats)
    _check_finite(objective, "adversarial", iteration, checkpoint)
    rmsprop_step(nets.test, _gradients(objective, nets.test), nets.test_state, lr, ascend=True)
    return float(objective.detach())


def ensemble_stats(problem: MfgProblem, ensemble: ParticleEnsemble, kernel_cap: int) -> BucketStats:
    """Bucket statistics of the ensemble, with the kernel subsample keyed by its iteration."""
    if not problem.uses_interaction:
        return build_bucket_stats(ensemble.particles, problem.N)
    rng = stream(ensemble.seed, Purpose.KERNEL, ensemble.iteration)
    return build_bucket_stats(ensemble.particles, problem.N, kernel_cap, rng)


def evaluation_points(problem: MfgProblem, config: RunConfig) -> Optional[TestPointSet]:
    if problem.initial_half_width is None:
        return None
    return sample_test_points(problem.d, problem.initial_half_width, config.metric_seed,
                              config.metrics.rc_points, config.metrics.re_points)


class PolicyIterationTrainer:
    def __init__(self, problem: MfgProblem, config: RunConfig, reference: Optional[ReferenceEvaluator] = None,
                 output_dir: Optional[Union[str, Path]] = None, dtype: torch.dtype = torch.float32):
        self.problem = problem
        self.config = config
        self.reference = reference
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.dtype = dtype
        generator = torch.Generator().manual_seed(config.seed)
        control, value, test = build_networks(problem, config.network, generator)
        control, value, test = control.to(dtype), value.to(dtype), test.to(dtype)
        self.nets = TrainingNets.create(control, value, test, config.optimizer.smoothing, config.optimizer.epsilon)
        self.ensemble = init_ensemble(problem, config.trainer.ensemble_size, config.trainer.initial_guess,
                                      config.seed, dtype=dtype)
        self.points = evaluation_points(problem, config)
        self.history: List[MetricsRecord] = []
        self.last_checkpoint: Optional[Path] = None
        self._stop_requested = False
        self._started = time.perf_counter()
        self._last = (math.nan, math.nan)

    def request_stop(self) -> None:
        """Finish the current outer iteration, then stop."""
        self._stop_requested = True

    @property
    def history_path(self) -> Optional[Path]:
        return None if self.output_dir is None else self.output_dir / "metrics.csv"

    def run(self) -> PolicyIterationResult:
        tc = self.config.trainer
        logger.info(f"[PI] {self.problem.variant} d={self.problem.d} M={tc.ensemble_size} "
                    f"batch={tc.batch_size} I={tc.iterations} J={tc.inner_steps} K={tc.adversarial_steps}")
        if self.history_path is not None:
            self.history_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.history_path, "w", newline="") as f:
                csv.writer(f).writerow(HISTORY_COLUMNS)

        completed = 0
        if tc.iterations > 0:
            self.record(0, ensemble_stats(self.problem, self.ensemble, tc.kernel_cap))
        for i in range(tc.iterations):
            self.run_iteration(i)
            completed = i + 1
            if completed % tc.metrics_every == 0 and completed < tc.iterations:
                self.record(completed, ensemble_stats(self.problem, self.ensemble, tc.kernel_cap))
            if tc.checkpoint_every and completed % tc.checkpoint_every == 0 and completed < tc.iterations:
                self.save(f"iter_{completed:06d}.pt", completed)
            if tc.snapshot_every and completed % tc.snapshot_every == 0 and self.output_dir is not None:
                snapshots = self.output_dir / "snapshots"
                write_snapshot(self.ensemble, snapshots / f"iter_{completed:06d}.csv")
                write_slices(self.ensemble, self.problem.N, snapshots / f"iter_{completed:06d}_slices.csv")
            if self._stop_requested:
                logger.warning(f"[PI] stop requested, finishing after iteration {completed}")
                break

        final_stats = ensemble_stats(self.problem, self.ensemble, tc.kernel_cap)
        self.record(completed, final_stats)
        final = self.save("final.pt", completed)
        return PolicyIterationResult(
            control=self.nets.control, value=self.nets.value, test=self.nets.test, ensemble=self.ensemble,
            history=self.history, final_checkpoint=final, stopped_early=completed < tc.iterations,
        )

    def run_iteration(self, i: int) -> BucketStats:
        """One outer iteration; returns the bucket statistics it trained against."""
        tc = self.config.trainer
        problem, ensemble = self.problem, self.ensemble
        stats = ensemble_stats(problem, ensemble, tc.kernel_cap)
        batches = select_minibatches(ensemble.M, tc.batch_size, stream(ensemble.seed, Purpose.BATCH, i))
        index = np.concatenate(batches)
        transitions = draw_transitions(ensemble, index, problem, i)
        lr_value, lr_control, lr_test = tc.learning_rates(i, problem.d)

        for j in range(tc.inner_steps):
            drawn = draw_transitions(ensemble, index, problem, i, substep=1 + j) if tc.fresh_noise else transitions
            self._last = pe_pi_inner_step(ensemble, drawn, self.nets, batches, problem, stats,
                                          (lr_value, lr_control), i, self.last_checkpoint)
        for k in range(tc.adversarial_steps):
            drawn = (draw_transitions(ensemble, index, problem, i, substep=1 + tc.inner_steps + k)
                     if tc.fresh_noise else transitions)
            adversarial_step(ensemble, drawn, self.nets, batches, problem, stats, lr_test, i, self.last_checkpoint)

        with torch.no_grad():
            transitions.destination, _ = random_step(transitions.source, stats, self.nets.control, problem,
                                                     transitions.noise, transitions.reset)
        self.ensemble = apply_transitions(ensemble, transitions)
        return stats

    def record(self, iteration: int, stats: BucketStats) -> MetricsRecord:
        mc = self.config.metrics
        values = evaluate(self.problem, self.nets.control, self.nets.value, stats, self.points, self.reference,
                          mc.paths, self.config.seed, mc.reference_mean)
        record = MetricsRecord(iteration=iteration, pe_loss=abs(self._last[0]), pi_objective=self._last[1],
                               wall_s=time.perf_counter() - self._started, **values)
        self.history.append(record)
        if self.history_path is not None:
            with open(self.history_path, "a", newline="") as f:
                csv.writer(f).writerow(record.to_row())
        logger.info(f"[PI] iter={iteration} pe_loss={record.pe_loss:.3e} pi_obj={record.pi_objective:.4e} "
                    f"J_hat={record.J_hat:.5f} RC={record.RC:.3e} RE1={record.RE1:.3e}")
        return record

    def save(self, name: str, iteration: int) -> Optional[Path]:
        if self.output_dir is None:
            return None
        extra = {
            "seed": self.ensemble.seed,
            "ensemble_iteration": self.ensemble.iteration,
            "time_index": self.ensemble.particles.time_index.clone(),
            "z": self.ensemble.particles.z.detach().clone(),
            "optimizers": self.nets.optimizer_states(),
            "pe_pi": list(self._last),
        }
        self.last_checkpoint = save_checkpoint(self.output_dir / "checkpoints" / name, self.nets.modules(),
                                               iteration, extra)
        return self.last_checkpoint

    def parameter_hashes(self) -> Dict[str, str]:
        return {name: parameter_hash(net) for name, net in self.nets.modules().items()}


def run_policy_iteration(problem: MfgProblem, config: RunConfig, reference: Optional[ReferenceEvaluator] = None,
                         output_dir: Optional[Union[str, Path]] = None,
                         dtype: torch.dtype = torch.float32) -> PolicyIterationResult:
    """Train control and value networks with the regenerative policy iteration."""
    return PolicyIterationTrainer(problem, config, reference, output_dir, dtype).run()


def restore(problem: MfgProblem, config: RunConfig, checkpoint: Union[str, Path],
            dtype: torch.dtype = torch.float32) -> Tuple[TrainingNets, ParticleEnsemble, Dict]:
    """Rebuild networks and the ensemble saved in a checkpoint."""
    control, value, test = build_networks(problem, config.network)
    control, value, test = control.to(dtype), value.to(dtype), test.to(dtype)
    nets = TrainingNets.create(control, value, test, config.optimizer.smoothing, config.optimizer.epsilon)
    payload = load_checkpoint(checkpoint, nets.modules())
    extra = payload.get("extra", {})
    if "z" not in extra:
        ensemble = init_ensemble(problem, config.trainer.ensemble_size, config.trainer.initial_guess,
                                 config.seed, dtype=dtype)
    else:
        ensemble = ParticleEnsemble(StateSample(extra["time_index"], extra["z"].to(dtype)),
                                    seed=int(extra["seed"]), iteration=int(extra["ensemble_iteration"]))
    if "optimizers" in extra:
        nets.control_state.load_state_dict(extra["optimizers"]["control"])
        nets.value_state.load_state_dict(extra["optimizers"]["value"])
        nets.test_state.load_state_dict(extra["optimizers"]["test"])
    return nets, ensemble, payload
