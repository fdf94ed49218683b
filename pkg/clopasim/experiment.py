"""Experiment configuration file.

Keys (YAML mapping)::

    task_spec: configs/tasks/branching_tree.yaml   # required
    algorithms:                                   # required, unique names
      - {name: nnInteractive, mode: frozen}
      - {name: CLoPA-I.N, mode: clopa-in}
    model: {num_stages: 3, base_channels: 8}
    trainer: {epochs: 10, updates_per_epoch: 50, ...}
    scheduler: {k_d: 0.25, k_m: 0.2}
    training_runs: 3
    inference_runs: 3
    eval_steps: 100
    master_seed: 0
    compute_budget: 20000                       # optional cap on gradient updates per `run`
    output_dir: out
    threads: 1
    debug: false
    dump_traces: false
    plot_size: 640x400
    base:
      checkpoint: path/to/base.clpa     # or
      pretrain_task: configs/tasks/blob.yaml
      pretrain_epochs: 10
      pretrain_updates: 50

Relative paths resolve against the config file's directory.  ``--out``
and ``CLOPA_OUT_DIR`` take precedence over ``output_dir``; ``--threads``
and ``CLOPA_THREADS`` over ``threads``.
"""

from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from clopasim.config import ConfigError, settings
from clopasim.model import ModelConfig, ModelConfigError, ParamGroupMode
from clopasim.stream import SchedulerConfig
from clopasim.svg import DEFAULT_PLOT_SIZE, parse_svg_dimensions
from clopasim.trainer import TrainConfig

_KEYS = frozenset({
    "task_spec", "algorithms", "model", "trainer", "scheduler", "training_runs", "inference_runs",
    "eval_steps", "master_seed", "compute_budget", "output_dir", "threads", "debug", "dump_traces", "plot_size",
    "base",
})
_BASE_KEYS = frozenset({"checkpoint", "pretrain_task", "pretrain_epochs", "pretrain_updates", "seed"})


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    mode: ParamGroupMode


@dataclass(frozen=True)
class BaseSpec:
    checkpoint: Path | None = None
    pretrain_task: Path | None = None
    pretrain_epochs: int = 10
    pretrain_updates: int = 50
    seed: int = 0


@dataclass
class ExperimentConfig:
    task_spec: Path
    algorithms: list[AlgorithmSpec]
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    scheduler: dict[str, float] = field(default_factory=dict)
    training_runs: int = 3
    inference_runs: int = 3
    eval_steps: int = 100
    master_seed: int = 0
    compute_budget: int | None = None
    output_dir: Path = Path("out")
    threads: int = 1
    debug: bool = False
    dump_traces: bool = False
    plot_size: str = DEFAULT_PLOT_SIZE
    base: BaseSpec = field(default_factory=BaseSpec)

    def scheduler_config(self, dataset_size: int) -> SchedulerConfig:
        return SchedulerConfig.from_mapping(self.scheduler, dataset_size)

    def algorithm(self, name: str) -> AlgorithmSpec:
        for spec in self.algorithms:
            if spec.name == name:
                return spec
        raise KeyError(name)

    @property
    def data_dir(self) -> Path:
        return self.output_dir / "data"

    @property
    def runs_dir(self) -> Path:
        return self.output_dir / "runs"

    @property
    def report_dir(self) -> Path:
        return self.output_dir / "report"

    # --- loading ---

    @classmethod
    def load(cls, path: Path, seed: int | None = None) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError("config", f"no such file: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
        cfg = cls.from_mapping(data, path.parent)
        if seed is not None:
            cfg.master_seed = seed
        return cfg

    @classmethod
    def from_mapping(cls, data: Any, root: Path = Path(".")) -> "ExperimentConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("config", "experiment config must be a mapping")
        unknown = sorted(set(data) - _KEYS)
        if unknown:
            raise ConfigError(unknown[0], "unknown experiment key")
        if "task_spec" not in data:
            raise ConfigError("task_spec", "missing required key")

        def _path(key: str, value: Any) -> Path:
            if not isinstance(value, str):
                raise ConfigError(key, f"expected a path, got {value!r}")
            p = Path(value)
            return p if p.is_absolute() else root / p

        def _int(key: str, value: Any, minimum: int) -> int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(key, f"expected an integer, got {value!r}")
            if value < minimum:
                raise ConfigError(key, f"must be at least {minimum}, got {value}")
            return value

        def _bool(key: str, value: Any) -> bool:
            if not isinstance(value, bool):
                raise ConfigError(key, f"expected true or false, got {value!r}")
            return value

        kwargs: dict[str, Any] = {
            "task_spec": _path("task_spec", data["task_spec"]),
            "algorithms": _algorithms(data.get("algorithms")),
        }
        model = data.get("model") or {}
        if not isinstance(model, Mapping):
            raise ConfigError("model", "expected a mapping")
        try:
            kwargs["model"] = ModelConfig(**model)
            kwargs["model"].validate()
        except TypeError as exc:
            raise ConfigError("model", str(exc)) from exc
        except ModelConfigError as exc:
            raise ConfigError("model", str(exc)) from exc
        trainer = TrainConfig.from_mapping(data.get("trainer"))
        trainer.validate(kwargs["model"].divisor)
        kwargs["trainer"] = trainer
        scheduler = data.get("scheduler") or {}
        if not isinstance(scheduler, Mapping):
            raise ConfigError("scheduler", "expected a mapping")
        # dataset size is only known once the task is loaded
        SchedulerConfig.from_mapping(scheduler, 1)
        kwargs["scheduler"] = dict(scheduler)

        for key, minimum in (("training_runs", 1), ("inference_runs", 1), ("eval_steps", 0), ("master_seed", 0)):
            if key in data:
                kwargs[key] = _int(key, data[key], minimum)
        if data.get("compute_budget") is not None:
            kwargs["compute_budget"] = _int("compute_budget", data["compute_budget"], 1)
        for key in ("debug", "dump_traces"):
            if key in data:
                kwargs[key] = _bool(key, data[key])
        if "plot_size" in data:
            parse_svg_dimensions(str(data["plot_size"]))
            kwargs["plot_size"] = str(data["plot_size"])

        out = settings.get("OUT_DIR")
        if out is not None:
            kwargs["output_dir"] = Path(out)
        elif "output_dir" in data:
            kwargs["output_dir"] = _path("output_dir", data["output_dir"])

        if settings.get("THREADS") is not None:
            kwargs["threads"] = settings.thread_count()
        elif "threads" in data:
            kwargs["threads"] = _int("threads", data["threads"], 1)

        base = data.get("base") or {}
        if not isinstance(base, Mapping):
            raise ConfigError("base", "expected a mapping")
        unknown = sorted(set(base) - _BASE_KEYS)
        if unknown:
            raise ConfigError(f"base.{unknown[0]}", "unknown base option")
        if "checkpoint" in base and "pretrain_task" in base:
            raise ConfigError("base", "give either checkpoint or pretrain_task, not both")
        base_kwargs: dict[str, Any] = {}
        for key in ("checkpoint", "pretrain_task"):
            if key in base:
                base_kwargs[key] = _path(f"base.{key}", base[key])
        for key, minimum in (("pretrain_epochs", 1), ("pretrain_updates", 1), ("seed", 0)):
            if key in base:
                base_kwargs[key] = _int(f"base.{key}", base[key], minimum)
        kwargs["base"] = BaseSpec(**base_kwargs)
        return cls(**kwargs)


def _algorithms(raw: Any) -> list[AlgorithmSpec]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("algorithms", "expected a nonempty list of {name, mode}")
    specs = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, Mapping) or "name" not in entry or "mode" not in entry:
            raise ConfigError(f"algorithms[{i}]", "expected a mapping with name and mode")
        try:
            mode = ParamGroupMode.parse(str(entry["mode"]))
        except ValueError as exc:
            raise ConfigError(f"algorithms[{i}].mode", str(exc)) from exc
        specs.append(AlgorithmSpec(str(entry["name"]), mode))
    names = [s.name for s in specs]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ConfigError("algorithms", f"duplicate algorithm name {duplicates[0]!r}")
    return specs
