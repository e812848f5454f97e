"""SGD training with forgetting-mitigation strategies.

Every trainer takes the anchor model ``theta_o`` (the end state of the
previous task), trains on one task with plain minibatch SGD, and differs only
in what it does to the parameters after each gradient step:

* sequential: nothing
* SFA: every ``floor(p*T)`` steps, and once more at the end if needed, pull
  the parameters back to ``beta*theta_o + (1-beta)*theta``
* L2 / EWC: add a (Fisher-weighted) quadratic penalty gradient each step
* rehearsal: train on the task mixed with buffered past examples
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Union

import numpy as np

from .data import Dataset, RehearsalBuffer, TaskStream, buffer_update, mix_with_buffer
from .errors import DomainError
from .merge import task_arithmetic, task_vector, ties_merge, DEFAULT_TIES_DENSITY
from .metrics import EvalRecord, RunHistory
from .nnet import MlpSpec, ModelParams, accuracy, fisher_diagonal, init_params, loss_and_grad
from .params import as_vector, check_finite, weighted_average

StepHook = Callable[[int, np.ndarray], None]


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    batch_size: int = 64
    steps_per_task: int = 2000
    shuffle_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.steps_per_task < 1:
            raise DomainError("batch_size and steps_per_task must be at least 1")


@dataclass(frozen=True)
class SfaConfig:
    p: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise DomainError(f"p must lie in (0, 1], got {self.p}")
        if not 0.0 <= self.beta <= 1.0:
            raise DomainError(f"beta must lie in [0, 1], got {self.beta}")

    def cadence(self, steps: int) -> int:
        """Steps between merges, ``floor(p*T)``."""
        # tolerate p*T landing just under an integer, e.g. 0.29 * 100
        k = math.floor(self.p * steps + 1e-9)
        if k < 1:
            raise DomainError(f"floor(p*T) = floor({self.p}*{steps}) is 0; raise p or T")
        return k


# -- strategies ------------------------------------------------------------------

@dataclass(frozen=True)
class Sequential:
    tag = "sequential"


@dataclass(frozen=True)
class Sfa:
    p: float = 0.5
    beta: float = 0.5
    tag = "sfa"

    def __post_init__(self):
        self.config     # validates p and beta

    @property
    def config(self) -> SfaConfig:
        return SfaConfig(self.p, self.beta)


@dataclass(frozen=True)
class Penalty:
    kind: str = "l2"
    lam: float = 0.1
    fisher_samples: int | None = None
    tag = "penalty"

    def __post_init__(self):
        if self.kind not in ("l2", "ewc"):
            raise DomainError(f"penalty kind must be l2 or ewc, got {self.kind!r}")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise DomainError(f"penalty strength must be finite and >= 0, got {self.lam}")
        if self.fisher_samples is not None and self.fisher_samples < 1:
            raise DomainError("fisher_samples must be at least 1")


@dataclass(frozen=True)
class Rehearsal:
    past_fraction: float = 0.1
    per_task_cap: int = 500
    tag = "rehearsal"

    def __post_init__(self):
        if not 0.0 <= self.past_fraction < 1.0:
            raise DomainError(f"past_fraction must lie in [0, 1), got {self.past_fraction}")
        if self.per_task_cap < 0:
            raise DomainError("per_task_cap must be non-negative")


@dataclass(frozen=True)
class Multitask:
    tag = "multitask"


@dataclass(frozen=True)
class MergeBaseline:
    """Fine-tune each task independently from the initial model, then merge.

    ``mode`` is ``task_arithmetic`` or ``ties``; every task vector gets ``weight``.
    """
    mode: str = "task_arithmetic"
    weight: float = 0.5
    density: float = DEFAULT_TIES_DENSITY
    tag = "merge"

    def __post_init__(self):
        if self.mode not in ("task_arithmetic", "ties"):
            raise DomainError(f"merge baseline mode must be task_arithmetic or ties, got {self.mode!r}")
        if not 0.0 < self.density <= 1.0:
            raise DomainError(f"density must lie in (0, 1], got {self.density}")


StrategyConfig = Union[Sequential, Sfa, Penalty, Rehearsal, Multitask, MergeBaseline]


def strategy_name(s: StrategyConfig) -> str:
    if isinstance(s, Penalty):
        return s.kind
    if isinstance(s, MergeBaseline):
        return s.mode
    return s.tag


# -- core loop -------------------------------------------------------------------

def batch_schedule(n: int, sgd: SgdConfig) -> Iterator[np.ndarray]:
    """Row indices for ``steps_per_task`` minibatches, reshuffling every epoch."""
    rng = np.random.default_rng(sgd.shuffle_seed)
    steps = 0
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, sgd.batch_size):
            yield perm[start:start + sgd.batch_size]
            steps += 1
            if steps == sgd.steps_per_task:
                return


def sgd_step(params: ModelParams, batch, alpha) -> ModelParams:
    """One plain gradient step. ``alpha`` may be a scalar or a per-coordinate array."""
    _, g = loss_and_grad(params, batch)
    return params.with_flat(gradient_step(params.flat, g, alpha))


def gradient_step(theta, grad, alpha):
    return check_finite(theta - alpha * grad)


def l2_update(theta, grad, anchor, eta: float, lam: float):
    """``theta - eta*(grad + lam*(theta - anchor))``."""
    return check_finite(theta - eta * (grad + lam * (theta - anchor)))


def _run(theta_o: ModelParams, task: Dataset, sgd: SgdConfig,
         after_step: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
         on_step: StepHook | None = None) -> np.ndarray:
    """Drive ``steps_per_task`` SGD steps; ``after_step(t, theta, grad)`` returns the next theta."""
    spec = theta_o.spec
    theta = theta_o.flat
    for t, idx in enumerate(batch_schedule(len(task), sgd), start=1):
        _, g = loss_and_grad(ModelParams(spec, theta), task.take(idx))
        theta = after_step(t, theta, g)
        if on_step is not None:
            on_step(t, theta)
    return theta


def plain_train(theta_o: ModelParams, task: Dataset, sgd: SgdConfig,
                on_step: StepHook | None = None) -> ModelParams:
    alpha = sgd.learning_rate
    return theta_o.with_flat(_run(theta_o, task, sgd, lambda t, th, g: gradient_step(th, g, alpha), on_step))


def sfa_train(theta_o: ModelParams, task: Dataset, sgd: SgdConfig, sfa: SfaConfig,
              on_step: StepHook | None = None) -> ModelParams:
    """Fine-tune on ``task`` while periodically averaging back toward ``theta_o``."""
    T = sgd.steps_per_task
    every = sfa.cadence(T)
    alpha, beta = sgd.learning_rate, sfa.beta
    anchor = theta_o.flat

    def after_step(t, theta, g):
        theta = gradient_step(theta, g, alpha)
        if t % every == 0:
            theta = weighted_average(anchor, theta, beta)
        return theta

    theta = _run(theta_o, task, sgd, after_step, on_step)
    if T % every != 0:
        theta = weighted_average(anchor, theta, beta)
    return theta_o.with_flat(theta)


def l2_train(theta_o: ModelParams, task: Dataset, sgd: SgdConfig, lam: float,
             on_step: StepHook | None = None) -> ModelParams:
    """SGD on task loss plus ``lam/2 * ||theta - theta_o||^2``."""
    if lam < 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    eta = sgd.learning_rate
    anchor = theta_o.flat

    def after_step(t, theta, g):
        return l2_update(theta, g, anchor, eta, lam)

    return theta_o.with_flat(_run(theta_o, task, sgd, after_step, on_step))


def ewc_train(theta_o: ModelParams, fisher_o, task: Dataset, sgd: SgdConfig, lam: float,
              on_step: StepHook | None = None) -> ModelParams:
    """SGD on task loss plus ``lam/2 * sum_j F_j (theta_j - theta_o_j)^2``."""
    if lam < 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    eta = sgd.learning_rate
    anchor = theta_o.flat
    stiffness = lam * as_vector(fisher_o)

    def after_step(t, theta, g):
        return ewc_fused_update(theta, g, anchor, stiffness, eta)

    return theta_o.with_flat(_run(theta_o, task, sgd, after_step, on_step))


def ewc_fused_update(theta, grad, anchor, stiffness, eta):
    """``theta - eta*(grad + stiffness*(theta - anchor))`` with ``stiffness = lam*F``."""
    return check_finite(theta - eta * (grad + stiffness * (theta - anchor)))


def ewc_split_rate(fisher_o, eta: float, lam: float) -> np.ndarray:
    """Per-coordinate task-step rate that makes the two-step EWC update exact.

    Taking a task step with rate ``eta / (1 - eta*lam*F)`` followed by
    ``ewc_merge_step(., theta_o, F, eta*lam)`` reproduces the fused penalty
    update, just as ``alpha = eta / (1 - eta*lam)`` does for the L2 penalty.
    """
    k = eta * lam * as_vector(fisher_o)
    if np.any(k >= 1.0):
        raise DomainError("eta*lam*F must stay below 1 for the split update")
    return eta / (1.0 - k)


def sfa_equivalent_of_l2(eta: float, lam: float, steps: int) -> tuple[SgdConfig, SfaConfig]:
    """SFA settings that reproduce L2 training step for step.

    Merging after every step with ``beta = eta*lam`` and task rate
    ``alpha = eta / (1 - eta*lam)`` gives the same update as the penalty.
    """
    beta = eta * lam
    if not 0.0 <= beta < 1.0:
        raise DomainError(f"eta*lam must lie in [0, 1), got {beta}")
    return SgdConfig(learning_rate=eta / (1.0 - beta), steps_per_task=steps), SfaConfig(1.0 / steps, beta)


def rehearsal_train(theta_o: ModelParams, task: Dataset, buffer: RehearsalBuffer, past_fraction: float,
                    sgd: SgdConfig, mix_seed: int = 0, on_step: StepHook | None = None) -> ModelParams:
    mixed = mix_with_buffer(task, buffer, past_fraction, seed=mix_seed)
    return plain_train(theta_o, mixed, sgd, on_step)


# -- multi-task driver -----------------------------------------------------------------

def _task_seed(seed: int, sgd: SgdConfig, k: int) -> int:
    return int(np.random.SeedSequence([seed, sgd.shuffle_seed, k]).generate_state(1)[0])


def default_spec(stream: TaskStream, hidden=(100,), activation: str = "relu") -> MlpSpec:
    return MlpSpec((stream.dim, *hidden, stream.class_count), activation)


@dataclass
class _Recorder:
    stream: TaskStream
    spec: MlpSpec
    every: int
    records: list = field(default_factory=list)

    def evaluate(self, global_step: int, train_task: int, theta: np.ndarray) -> list[float]:
        params = ModelParams(self.spec, theta)
        out = []
        for j, task in enumerate(self.stream):
            masked = accuracy(params, task.eval, task.label_group)
            self.records.append(EvalRecord(global_step, train_task, j, masked,
                                           accuracy(params, task.eval)))
            out.append(masked)
        return out

    def hook(self, offset: int, train_task: int, last_step: int) -> StepHook:
        def on_step(t, theta):
            # the boundary itself is recorded after any terminal merge
            if t % self.every == 0 and t < last_step:
                self.evaluate(offset + t, train_task, theta)
        return on_step


def sequential_run(stream: TaskStream, strategy: StrategyConfig, sgd: SgdConfig, seed: int,
                   spec: MlpSpec | None = None, init: ModelParams | None = None) -> RunHistory:
    """Train on every task of ``stream`` in order under ``strategy``.

    The first task is always trained plainly; later tasks use the strategy
    with the previous task's end state as anchor. Every task's eval split is
    scored every ``floor(T/20)`` steps and at each task boundary.
    """
    if len(stream) == 0:
        raise DomainError("empty task stream")
    spec = spec or default_spec(stream)
    params = init if init is not None else init_params(spec, seed)
    T = sgd.steps_per_task
    rec = _Recorder(stream, spec, max(1, T // 20))
    initial = params.flat
    checkpoints: list[np.ndarray] = []
    boundary_acc: list[float] = []
    boundary_steps: list[int] = []

    if isinstance(strategy, Multitask):
        total = len(stream) * T
        cfg = replace(sgd, steps_per_task=total, shuffle_seed=_task_seed(seed, sgd, 0))
        rec.every = max(1, total // 20)
        union = Dataset.concat([t.train for t in stream])
        params = plain_train(params, union, cfg, rec.hook(0, 0, total))
        accs = rec.evaluate(total, len(stream) - 1, params.flat)
        checkpoints.append(params.flat)
        boundary_acc, boundary_steps = accs, [total] * len(stream)
        return RunHistory(rec.records, checkpoints, boundary_steps, boundary_acc, initial, params.flat,
                          {"strategy": strategy_name(strategy)})

    if isinstance(strategy, MergeBaseline):
        vectors = []
        for k, task in enumerate(stream):
            cfg = replace(sgd, shuffle_seed=_task_seed(seed, sgd, k))
            tuned = plain_train(params, task.train, cfg, rec.hook(k * T, k, T))
            accs = rec.evaluate((k + 1) * T, k, tuned.flat)
            checkpoints.append(tuned.flat)
            boundary_acc.append(accs[k])
            boundary_steps.append((k + 1) * T)
            vectors.append(task_vector(params.flat, tuned.flat))
        w = [strategy.weight] * len(vectors)
        if strategy.mode == "ties":
            merged = ties_merge(params.flat, vectors, strategy.density, w)
        else:
            merged = task_arithmetic(params.flat, vectors, w)
        rec.evaluate(len(stream) * T, len(stream) - 1, merged)
        return RunHistory(rec.records, checkpoints, boundary_steps, boundary_acc, initial, merged,
                          {"strategy": strategy_name(strategy)})

    buffer = RehearsalBuffer(retention_seed=seed)
    anchor = params
    fisher = None
    for k, task in enumerate(stream):
        cfg = replace(sgd, shuffle_seed=_task_seed(seed, sgd, k))
        hook = rec.hook(k * T, k, T)
        if k == 0 or isinstance(strategy, Sequential):
            params = plain_train(params, task.train, cfg, hook)
        elif isinstance(strategy, Sfa):
            params = sfa_train(params, task.train, cfg, strategy.config, hook)
        elif isinstance(strategy, Penalty) and strategy.kind == "l2":
            params = l2_train(params, task.train, cfg, strategy.lam, hook)
        elif isinstance(strategy, Penalty):
            params = ewc_train(params, fisher, task.train, cfg, strategy.lam, hook)
        elif isinstance(strategy, Rehearsal):
            params = rehearsal_train(params, task.train, buffer, strategy.past_fraction, cfg,
                                     mix_seed=_task_seed(seed, sgd, 1000 + k), on_step=hook)
        else:
            raise DomainError(f"unknown strategy {strategy!r}")

        accs = rec.evaluate((k + 1) * T, k, params.flat)
        checkpoints.append(params.flat)
        boundary_acc.append(accs[k])
        boundary_steps.append((k + 1) * T)
        if k < len(stream) - 1:
            anchor = params
            if isinstance(strategy, Penalty) and strategy.kind == "ewc":
                fisher = fisher_diagonal(params, task.train, strategy.fisher_samples, seed=seed)
            if isinstance(strategy, Rehearsal):
                buffer = buffer_update(buffer, task.train, strategy.per_task_cap)

    return RunHistory(rec.records, checkpoints, boundary_steps, boundary_acc, anchor.flat, params.flat,
                      {"strategy": strategy_name(strategy)})
