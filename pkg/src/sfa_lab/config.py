"""Experiment configuration files.

Flat ``key = value`` lines with dotted section prefixes; ``#`` starts a
comment. Unknown keys are rejected. Example::

    name = fig7
    stream.source = mnist5k
    stream.groups = 0,2,4,6,8 | 1,3,5,7,9
    strategy.kind = sfa
    strategy.p = 0.05
    sgd.learning_rate = 0.05
    run.seeds = 0,1,2
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .data import (EVEN_ODD, TaskStream, load_bundled_mnist, load_idx, split_by_labels,
                   synthetic_gaussian_tasks)
from .errors import ConfigError, SfaLabError
from .nnet import MlpSpec
from .trainers import (MergeBaseline, Multitask, Penalty, Rehearsal, Sequential, Sfa, SgdConfig,
                       StrategyConfig)

STRATEGY_KINDS = ("sequential", "sfa", "l2", "ewc", "rehearsal", "multitask", "task_arithmetic", "ties")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _groups(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_int_list(g) for g in text.split("|") if g.strip())


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none", "all") else int(text)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "name": (str, "run"),
    "stream.source": (_choice("mnist5k", "idx", "synthetic"), "mnist5k"),
    "stream.images": (str, ""),
    "stream.labels": (str, ""),
    "stream.groups": (_groups, EVEN_ODD),
    "stream.seed": (int, 0),
    "stream.num_tasks": (int, 2),
    "stream.classes_per_task": (int, 5),
    "stream.dim": (int, 10),
    "stream.n_per_class": (int, 100),
    "stream.separation": (float, 50.0),
    "model.hidden": (_int_list, (100,)),
    "model.activation": (_choice("relu", "tanh"), "relu"),
    "strategy.kind": (_choice(*STRATEGY_KINDS), "sequential"),
    "strategy.p": (float, 0.5),
    "strategy.beta": (float, 0.5),
    "strategy.lambda": (float, 0.1),
    "strategy.fisher_samples": (_optional_int, None),
    "strategy.past_fraction": (float, 0.1),
    "strategy.per_task_cap": (int, 500),
    "strategy.ta_weight": (float, 0.5),
    "strategy.density": (float, 0.2),
    "sgd.learning_rate": (float, 0.05),
    "sgd.batch_size": (int, 64),
    "sgd.steps_per_task": (int, 2000),
    "sgd.shuffle_seed": (int, 0),
    "run.seeds": (_int_list, (0,)),
    "run.out": (str, "results"),
}

SWEEP_AXES = {
    "p": "strategy.p",
    "beta": "strategy.beta",
    "lambda": "strategy.lambda",
    "past_fraction": "strategy.past_fraction",
    "ta_weight": "strategy.ta_weight",
    "density": "strategy.density",
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)     # key -> text as written, for echoing

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_mapping(cls, entries: dict[str, str]) -> "ExperimentConfig":
        values = {k: default for k, (_, default) in SCHEMA.items()}
        raw = {}
        for key, text in entries.items():
            if key not in SCHEMA:
                raise ConfigError("unknown configuration key", key)
            parser = SCHEMA[key][0]
            try:
                values[key] = parser(text)
            except ValueError as e:
                raise ConfigError(f"cannot parse {text!r}: {e}", key) from None
            raw[key] = text
        cfg = cls(values, raw)
        cfg.validate()
        return cfg

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        entries = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in entries:
                raise ConfigError(f"line {lineno}: duplicate key", key)
            entries[key] = value
        return cls.from_mapping(entries)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def override(self, key: str, value) -> "ExperimentConfig":
        """Copy with ``key`` replaced; ``value`` may be text or an already parsed value."""
        if key not in SCHEMA:
            raise ConfigError("unknown configuration key", key)
        entries = dict(self.raw)
        entries[key] = value if isinstance(value, str) else _to_text(value)
        return ExperimentConfig.from_mapping(entries)

    def validate(self) -> None:
        for key, build in (("strategy.kind", self.strategy), ("sgd.learning_rate", self.sgd)):
            try:
                build()
            except SfaLabError as e:
                raise ConfigError(str(e), key) from None
        if self["stream.source"] == "idx" and not (self["stream.images"] and self["stream.labels"]):
            raise ConfigError("idx source needs stream.images and stream.labels", "stream.source")

    def strategy(self) -> StrategyConfig:
        kind = self["strategy.kind"]
        if kind == "sequential":
            return Sequential()
        if kind == "sfa":
            return Sfa(self["strategy.p"], self["strategy.beta"])
        if kind in ("l2", "ewc"):
            return Penalty(kind, self["strategy.lambda"], self["strategy.fisher_samples"])
        if kind == "rehearsal":
            return Rehearsal(self["strategy.past_fraction"], self["strategy.per_task_cap"])
        if kind == "multitask":
            return Multitask()
        return MergeBaseline(kind, self["strategy.ta_weight"], self["strategy.density"])

    def sgd(self) -> SgdConfig:
        return SgdConfig(self["sgd.learning_rate"], self["sgd.batch_size"], self["sgd.steps_per_task"],
                         self["sgd.shuffle_seed"])

    def stream(self) -> TaskStream:
        source = self["stream.source"]
        if source == "synthetic":
            return synthetic_gaussian_tasks(self["stream.seed"], self["stream.num_tasks"],
                                            self["stream.classes_per_task"], self["stream.dim"],
                                            self["stream.n_per_class"], self["stream.separation"])
        if source == "idx":
            data = load_idx(self["stream.images"], self["stream.labels"])
        else:
            data = load_bundled_mnist()
        names = ("A_even", "B_odd") if self["stream.groups"] == EVEN_ODD else None
        return split_by_labels(data, self["stream.groups"], seed=self["stream.seed"], names=names)

    def spec(self, stream: TaskStream) -> MlpSpec:
        return MlpSpec((stream.dim, *self["model.hidden"], stream.class_count), self["model.activation"])

    def echo(self) -> dict[str, str]:
        """Every key with its resolved value as text."""
        return {k: _to_text(self.values[k]) for k in sorted(SCHEMA)}


def _to_text(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return " | ".join(",".join(map(str, g)) for g in value)
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    if value is None:
        return "all"
    if isinstance(value, float):
        return repr(value)
    return str(value)
