"""
Experiment configuration: one JSON file per experiment, loaded into frozen dataclasses.

Omitted keys take the defaults below. Unknown keys are rejected.
A few defaults come from the environment instead of the file:

    HITOK_OUTPUT_DIR  where commands write their outputs when the file names no directory
    HITOK_THREADS     worker threads, 1 unless set
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
import types
import typing
from typing import Any, TypeVar

from environs import Env

from hitok import codebook as cb_module
from hitok import grid, msrq, toycodec


env = Env()

DEFAULT_OUTPUT_DIR = "hitok-output"


class ConfigError(Exception):
    """
    Raised when a configuration file cannot be read or does not describe a valid experiment.
    """


@dataclasses.dataclass(frozen=True)
class ScheduleConfig:
    resolutions: tuple[int, ...] = msrq.DEFAULT_RESOLUTIONS
    target_scales: tuple[float, ...] = msrq.DEFAULT_SCALES

    def build(self) -> msrq.ScaleSchedule:
        return msrq.ScaleSchedule(self.resolutions, self.target_scales)


@dataclasses.dataclass(frozen=True)
class CodebookConfig:
    size: int = 512
    metric: str = "l2"
    seed: int = 0
    epochs: int = 5
    decay: float = 0.99
    # "identity" or "averaging"; per_level_phi gives every level its own copy.
    phi: str = "identity"
    per_level_phi: bool = False
    path: str = "codebook.bin"


@dataclasses.dataclass(frozen=True)
class CodecConfig:
    n_z: int = 32
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class DegradationConfig:
    blur_sigma: float = 1.0
    factor: int = 4
    noise_sigma: float = 0.01
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    heads: int = 4
    width: int = 64
    mlp_ratio: int = 4
    max_grid: int = 32
    # Side of the conditioning grid; the native latent side when omitted.
    cond_side: int | None = None
    zero_head: bool = False


@dataclasses.dataclass(frozen=True)
class TrainingConfig:
    steps: int = 500
    lr: float = 1e-3
    beta: float = 0.2
    use_dpo: bool = True
    batch_size: int = 16
    seed: int = 0
    checkpoint: str = "model.ckpt"


@dataclasses.dataclass(frozen=True)
class CorpusConfig:
    count: int = 16
    size: int = 512
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class OutputConfig:
    directory: str | None = None


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    schedule: ScheduleConfig = ScheduleConfig()
    codebook: CodebookConfig = CodebookConfig()
    codec: CodecConfig = CodecConfig()
    degradation: DegradationConfig = DegradationConfig()
    model: ModelConfig = ModelConfig()
    training: TrainingConfig = TrainingConfig()
    corpus: CorpusConfig = CorpusConfig()
    output: OutputConfig = OutputConfig()
    threads: int | None = None

    def __post_init__(self) -> None:
        sched = self.build_schedule()
        native_pixels = sched.native * toycodec.PATCH
        if self.corpus.size != native_pixels:
            raise ConfigError(
                f"corpus.size must be {native_pixels} pixels for ρ_L={sched.native}, got {self.corpus.size}."
            )
        if self.corpus.count < 1:
            raise ConfigError("corpus.count must be at least 1.")
        if self.degradation.factor < 1 or self.corpus.size % self.degradation.factor:
            raise ConfigError(
                f"degradation.factor {self.degradation.factor} does not divide {self.corpus.size}."
            )
        if self.codebook.size < 1:
            raise ConfigError("codebook.size must be at least 1.")
        if self.codebook.phi not in ("identity", "averaging"):
            raise ConfigError(f"Unknown phi {self.codebook.phi!r}.")
        try:
            cb_module.Metric(self.codebook.metric)
        except ValueError as e:
            raise ConfigError(f"Unknown metric {self.codebook.metric!r}.") from e
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be at least 1.")

    def build_schedule(self) -> msrq.ScaleSchedule:
        try:
            return self.schedule.build()
        except msrq.InvalidSchedule as e:
            raise ConfigError(str(e)) from e

    def build_codec(self) -> toycodec.PatchCodec:
        return toycodec.PatchCodec(n_z=self.codec.n_z, seed=self.codec.seed)

    def build_phi(self) -> grid.PhiBank:
        make = {"identity": grid.PhiParams.identity, "averaging": grid.PhiParams.averaging}
        single = make[self.codebook.phi](self.codec.n_z)
        if self.codebook.per_level_phi:
            return tuple(single for _ in self.schedule.resolutions)
        return single

    @property
    def cond_side(self) -> int:
        return self.model.cond_side or self.build_schedule().native

    @property
    def output_dir(self) -> pathlib.Path:
        if self.output.directory is not None:
            return pathlib.Path(self.output.directory)
        return env.path("HITOK_OUTPUT_DIR", default=pathlib.Path(DEFAULT_OUTPUT_DIR))

    @property
    def worker_threads(self) -> int:
        if self.threads is not None:
            return self.threads
        return env.int("HITOK_THREADS", default=1)

    def with_overrides(self, *, seed: int | None = None, threads: int | None = None) -> ExperimentConfig:
        """
        Replace every seed (codebook, corpus, degradation, training) and the thread count.
        """
        config = self
        if seed is not None:
            config = dataclasses.replace(
                config,
                codebook=dataclasses.replace(config.codebook, seed=seed),
                corpus=dataclasses.replace(config.corpus, seed=seed),
                degradation=dataclasses.replace(config.degradation, seed=seed),
                training=dataclasses.replace(config.training, seed=seed),
            )
        if threads is not None:
            config = dataclasses.replace(config, threads=threads)
        return config


_T = TypeVar("_T")


def _coerce(hint: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        (hint,) = options
        origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint) and isinstance(hint, type):
        return _build(hint, value, where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list.")
        (item, _) = typing.get_args(hint)
        return tuple(_coerce(item, v, f"{where}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, hint)
    if not ok:
        raise ConfigError(f"{where} must be of type {hint.__name__}, got {value!r}.")
    return value


def _build(cls: type[_T], data: Any, where: str) -> _T:
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'The configuration'} must be an object.")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"Unknown keys in {where or 'the configuration'}: {', '.join(unknown)}.")
    kwargs = {
        key: _coerce(hints[key], value, f"{where}.{key}" if where else key)
        for key, value in data.items()
    }
    return cls(**kwargs)


def from_mapping(data: Any) -> ExperimentConfig:
    """
    Raises:
        ConfigError: If the data has unknown keys, values of the wrong type,
            or describes an invalid experiment.
    """
    return _build(ExperimentConfig, data, "")


def load_config(path: pathlib.Path | None) -> ExperimentConfig:
    """
    Load a configuration file; None gives the defaults.

    Raises:
        ConfigError: If the file cannot be read or parsed, or is not a valid experiment.
    """
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read {path}: {e}") from e
    return from_mapping(data)


def to_json(config: ExperimentConfig) -> dict[str, Any]:
    return dataclasses.asdict(config)
