"""Continual-learning scorekeeping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DomainError
from .params import l2_distance


class EvalRecord(NamedTuple):
    global_step: int
    train_task: int
    eval_task: int
    accuracy: float            # masked to the eval task's label group
    global_accuracy: float = float("nan")   # argmax over every class


@dataclass
class RunHistory:
    records: list[EvalRecord]
    checkpoints: list[np.ndarray]      # parameters at each task boundary
    boundary_steps: list[int]          # global step at which task k finished training
    boundary_accuracy: list[float]     # task k's own accuracy at that boundary
    anchor: np.ndarray                 # theta_o in force during the last task
    final: np.ndarray
    config_echo: dict = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.boundary_steps)

    def final_accuracies(self) -> list[float]:
        """Last recorded accuracy for each eval task."""
        last: dict[int, float] = {}
        for r in self.records:
            last[r.eval_task] = r.accuracy
        missing = [k for k in range(self.num_tasks) if k not in last]
        if missing:
            raise DomainError(f"history has no records for eval tasks {missing}")
        return [last[k] for k in range(self.num_tasks)]

    def l2_to_anchor(self) -> float:
        return l2_distance(self.final, self.anchor)


def final_average_accuracy(history: RunHistory) -> float:
    accs = history.final_accuracies()
    if not accs:
        raise DomainError("history is empty")
    return float(np.mean(accs))


def forgetting(history: RunHistory, eval_task: int) -> float:
    """Accuracy on ``eval_task`` when it finished training minus its final accuracy."""
    if not 0 <= eval_task < len(history.boundary_accuracy):
        raise DomainError(f"task {eval_task} was never trained in this run")
    return history.boundary_accuracy[eval_task] - history.final_accuracies()[eval_task]
