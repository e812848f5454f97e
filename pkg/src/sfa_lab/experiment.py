"""Running experiments and sweeps, exporting CSVs and checkpoints, merging checkpoints."""
from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, Provenance, append_fisher, load_checkpoint, load_fisher, save_checkpoint
from .config import SWEEP_AXES, ExperimentConfig
from .errors import ConfigError, DomainError
from .merge import fisher_merge, task_arithmetic, task_vector, ties_merge, DEFAULT_TIES_DENSITY
from .metrics import RunHistory, final_average_accuracy, forgetting
from .nnet import accuracy, fisher_diagonal
from .params import linear_combine
from .trainers import sequential_run, strategy_name

log = logging.getLogger(__name__)

OUT_ENV = "SFA_LAB_OUT"
HISTORY_HEADER = ["run_id", "strategy", "seed", "global_step", "train_task", "eval_task", "accuracy"]


def fmt(x: float) -> str:
    """Six significant digits, locale independent."""
    return format(float(x), ".6g")


def resolve_out(config: ExperimentConfig, out=None) -> Path:
    return Path(out or os.environ.get(OUT_ENV) or config["run.out"])


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def summary_header(task_names: Sequence[str]) -> list[str]:
    return (["run_id", "strategy", "seed", "final_avg_accuracy"]
            + [f"final_{n}" for n in task_names]
            + [f"forgetting_{n}" for n in task_names]
            + ["l2_to_anchor"])


def summary_row(run_id: str, strategy: str, seed: int, history: RunHistory) -> list[str]:
    finals = history.final_accuracies()
    return ([run_id, strategy, str(seed), fmt(final_average_accuracy(history))]
            + [fmt(a) for a in finals]
            + [fmt(forgetting(history, k)) for k in range(history.num_tasks)]
            + [fmt(history.l2_to_anchor())])


def run_one(config: ExperimentConfig, seed: int, out_dir: Path, run_id: str) -> list[str]:
    """Train one seed, write its history and boundary checkpoints, return its summary row."""
    stream = config.stream()
    strategy = config.strategy()
    spec = config.spec(stream)
    name = strategy_name(strategy)
    history = sequential_run(stream, strategy, config.sgd(), seed, spec)
    history.config_echo.update(config.echo())

    run_dir = out_dir / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = [[run_id, name, str(seed), str(r.global_step), str(r.train_task), str(r.eval_task), fmt(r.accuracy)]
            for r in history.records]
    _write_csv(run_dir / "history.csv", HISTORY_HEADER, rows)

    parent = ""
    for k, flat in enumerate(history.checkpoints):
        trained = [t.name for t in stream.tasks[:k + 1]]
        ckpt = Checkpoint(spec, flat, Provenance(name, tuple(trained), seed, (parent,) if parent else ()))
        save_checkpoint(ckpt, run_dir / f"task{k}.sfac")
        parent = ckpt.digest
    (run_dir / "config.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in history.config_echo.items() if k != "strategy"), encoding="utf-8")
    log.info("finished %s", run_id)
    return summary_row(run_id, name, seed, history)


def _run_id(config: ExperimentConfig, seed: int) -> str:
    return f"{config['name']}-{strategy_name(config.strategy())}-s{seed}"


def _execute(jobs: list[tuple], n_workers: int) -> list[list[str]]:
    if n_workers <= 1 or len(jobs) <= 1:
        return [run_one(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(run_one, *zip(*jobs)))


def _task_names(config: ExperimentConfig) -> list[str]:
    return [t.name for t in config.stream().tasks]


def run_experiment(config: ExperimentConfig, out=None, seeds: Sequence[int] | None = None,
                   jobs: int = 1) -> Path:
    """One run per seed; writes ``<out>/<run_id>/history.csv`` and ``<out>/summary.csv``."""
    out_dir = resolve_out(config, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds if seeds is not None else config["run.seeds"])
    work = [(config, s, out_dir, _run_id(config, s)) for s in seeds]
    rows = _execute(work, jobs)
    path = out_dir / "summary.csv"
    _write_csv(path, summary_header(_task_names(config)), rows)
    return path


def run_sweep(config: ExperimentConfig, axis: str, values: Sequence[str], out=None,
              seeds: Sequence[int] | None = None, jobs: int = 1) -> Path:
    """Vary one strategy hyperparameter; writes ``<out>/sweep.csv`` keyed by axis value."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}", axis)
    out_dir = resolve_out(config, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds if seeds is not None else config["run.seeds"])
    work, keys = [], []
    for v in values:
        cfg = config.override(SWEEP_AXES[axis], str(v))
        for s in seeds:
            work.append((cfg, s, out_dir, f"{_run_id(cfg, s)}-{axis}{v}"))
            keys.append(fmt(float(v)))
    rows = _execute(work, jobs)
    path = out_dir / "sweep.csv"
    _write_csv(path, ["axis", "value"] + summary_header(_task_names(config)),
               [[axis, k] + r for k, r in zip(keys, rows)])
    return path


# -- merging checkpoints ---------------------------------------------------------------

MERGE_MODES = ("average", "task_arithmetic", "ties", "fisher")


def merge_command(inputs: Sequence, mode: str, out, weights: Sequence[float] | None = None,
                  density: float = DEFAULT_TIES_DENSITY) -> Path:
    """Merge checkpoint files and write the result.

    ``average``: weighted mean of all inputs (uniform by default).
    ``task_arithmetic`` / ``ties``: the first input is the base, the rest are fine-tuned
    models; weights default to 1 per task vector.
    ``fisher``: every input must carry a Fisher block; weights are the per-model lambdas.
    """
    if mode not in MERGE_MODES:
        raise DomainError(f"merge mode must be one of {', '.join(MERGE_MODES)}, got {mode!r}")
    ckpts = [load_checkpoint(p) for p in inputs]
    if not ckpts:
        raise DomainError("merge needs at least one input checkpoint")
    spec = ckpts[0].spec
    for p, c in zip(inputs, ckpts):
        if c.spec != spec:
            raise DomainError(f"{p}: architecture {c.spec} differs from {spec}")
    flats = [c.flat for c in ckpts]

    if mode == "average":
        w = list(weights) if weights else [1.0 / len(flats)] * len(flats)
        if len(w) != len(flats):
            raise DomainError(f"{len(flats)} inputs but {len(w)} weights")
        merged = w[0] * flats[0]
        for wi, f in zip(w[1:], flats[1:]):
            merged = linear_combine(1.0, merged, wi, f)
    elif mode in ("task_arithmetic", "ties"):
        if len(flats) < 2:
            raise DomainError(f"{mode} needs a base checkpoint and at least one fine-tuned checkpoint")
        base, tuned = flats[0], flats[1:]
        vectors = [task_vector(base, f) for f in tuned]
        w = list(weights) if weights else [1.0] * len(vectors)
        if mode == "ties":
            merged = ties_merge(base, vectors, density, w)
        else:
            merged = task_arithmetic(base, vectors, w)
    else:
        fishers = [load_fisher(p) for p in inputs]
        missing = [str(p) for p, f in zip(inputs, fishers) if f is None]
        if missing:
            raise DomainError(f"no Fisher block in {', '.join(missing)}; run the fisher command first")
        merged = fisher_merge(flats, fishers, weights)

    tasks = []
    for c in ckpts:
        tasks.extend(t for t in c.provenance.tasks if t not in tasks)
    prov = Provenance(f"merge:{mode}", tuple(tasks), ckpts[0].provenance.seed,
                      tuple(c.digest for c in ckpts))
    return save_checkpoint(Checkpoint(spec, merged, prov), out)


def evaluate_checkpoint(path, config: ExperimentConfig) -> list[tuple[str, float, float]]:
    """(task name, masked accuracy, global accuracy) for every task of the config's stream."""
    params = load_checkpoint(path).params
    stream = config.stream()
    return [(t.name, accuracy(params, t.eval, t.label_group), accuracy(params, t.eval)) for t in stream]


def fisher_command(path, config: ExperimentConfig, task: int = -1, n_samples: int | None = None,
                   seed: int = 0) -> np.ndarray:
    """Compute the Fisher diagonal of a checkpoint on one task's training data and append it."""
    ckpt = load_checkpoint(path)
    stream = config.stream()
    fisher = fisher_diagonal(ckpt.params, stream[task].train, n_samples, seed=seed)
    append_fisher(path, fisher)
    return fisher
