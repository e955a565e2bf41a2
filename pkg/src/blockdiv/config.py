"""Run configuration: one JSON document with five key groups.

``{"model": ..., "diversity": ..., "train": ..., "sample": ..., "data": ...}``.
Unknown keys anywhere are rejected. Model fields that follow from the
data (input width, token count, class count) are derived, not set.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def _from_dict(cls, raw: dict[str, Any] | None, group: str):
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError(f"'{group}' must be an object")
    names = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{group}': {', '.join(unknown)}")
    kwargs = dict(raw)
    for key, value in kwargs.items():
        if isinstance(value, list):
            kwargs[key] = tuple(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"'{group}': {exc}") from exc


@dataclass(frozen=True)
class DatasetSpec:
    mode: str = "points"
    kind: str = "gaussian8"
    mode_std: float = 0.15
    image_size: int = 8
    channels: int = 1
    num_classes: int = 9
    blob_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("points", "grid"):
            raise ConfigError(f"data.mode must be 'points' or 'grid', got {self.mode!r}")
        if self.mode == "points" and self.kind not in ("gaussian8", "checkerboard"):
            raise ConfigError(f"unknown points kind {self.kind!r}")
        if self.num_classes < 1:
            raise ConfigError("data.num_classes must be >= 1")
        if self.mode_std < 0 or self.blob_std <= 0:
            raise ConfigError("data std values must be non-negative")

    @property
    def classes(self) -> int:
        if self.mode == "grid":
            return self.num_classes
        return 8 if self.kind == "gaussian8" else 1


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 6
    hidden_dim: int = 64
    num_heads: int = 4
    mlp_ratio: float = 4.0
    use_long_residual: bool = True
    patch_size: int = 2
    time_freq_dim: int = 64
    # derived from the dataset
    data_mode: str = "points"
    input_dim: int = 2
    image_size: int = 8
    in_channels: int = 1
    num_classes: int = 8

    def __post_init__(self):
        if self.num_blocks < 1 or self.hidden_dim < 1 or self.num_heads < 1:
            raise ConfigError("model sizes must be positive")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if self.use_long_residual and self.num_blocks % 2:
            raise ConfigError("num_blocks must be even when use_long_residual is on")
        if self.time_freq_dim < 2 or self.time_freq_dim % 2:
            raise ConfigError("time_freq_dim must be an even number >= 2")
        if self.data_mode == "grid" and self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")

    @property
    def token_count(self) -> int:
        if self.data_mode == "points":
            return 1
        return (self.image_size // self.patch_size) ** 2

    @property
    def token_dim(self) -> int:
        if self.data_mode == "points":
            return self.input_dim
        return self.in_channels * self.patch_size ** 2

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def skip_pairs(self) -> dict[int, int]:
        """Target block -> skip-source block for the long residual junctions."""
        if not self.use_long_residual:
            return {}
        L = self.num_blocks
        return {L - 1 - i: i for i in range(L // 2)}


ARCH_KEYS = ("num_blocks", "hidden_dim", "num_heads", "mlp_ratio", "use_long_residual",
             "patch_size", "time_freq_dim")


def derive_model_config(arch: dict[str, Any], data: DatasetSpec) -> ModelConfig:
    unknown = sorted(set(arch) - set(ARCH_KEYS))
    if unknown:
        raise ConfigError(f"unknown key(s) in 'model': {', '.join(unknown)}")
    derived: dict[str, Any] = {"data_mode": data.mode, "num_classes": data.classes}
    if data.mode == "points":
        derived["input_dim"] = 2
    else:
        derived["image_size"] = data.image_size
        derived["in_channels"] = data.channels
    try:
        return ModelConfig(**arch, **derived)
    except TypeError as exc:
        raise ConfigError(f"'model': {exc}") from exc


@dataclass(frozen=True)
class DiversityConfig:
    enabled: bool = True
    lambda_orth: float = 0.33
    lambda_mi: float = 0.33
    lambda_disp: float = 0.33
    adaptive_lo: float = 0.1
    adaptive_hi: float = 0.5
    layer_subset_size: int | None = None
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_orth, self.lambda_mi, self.lambda_disp) < 0:
            raise ConfigError("diversity weights must be non-negative")
        if not 0 <= self.adaptive_lo < self.adaptive_hi:
            raise ConfigError("need 0 <= adaptive_lo < adaptive_hi")
        if self.eps <= 0:
            raise ConfigError("diversity.eps must be positive")

    def subset_size(self, num_blocks: int) -> int:
        if self.layer_subset_size is None:
            return min(10, num_blocks)
        return self.layer_subset_size


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 128
    total_steps: int = 5000
    label_dropout_prob: float = 0.1
    alignment: bool = False
    align_depth: int = 2
    align_coef: float = 0.5
    align_dim: int = 32
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.label_dropout_prob < 1:
            raise ConfigError("label_dropout_prob must lie in [0, 1)")
        if len(self.betas) != 2:
            raise ConfigError("betas must have two entries")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ConfigError("batch_size must be >= 1 and total_steps >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass(frozen=True)
class SampleConfig:
    num_steps: int = 250
    mode: str = "sde"
    cfg_scale: float = 1.0
    class_id: int | None = None
    num_samples: int = 16
    seed: int = 0
    t_min: float = 1e-3

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if self.mode not in ("sde", "ode"):
            raise ConfigError("sample.mode must be 'sde' or 'ode'")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be >= 0")
        if self.num_samples < 0:
            raise ConfigError("num_samples must be >= 0")
        if not 0 < self.t_min < 1:
            raise ConfigError("t_min must lie in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)

    def __post_init__(self):
        if self.train.alignment and not 0 <= self.train.align_depth < self.model.num_blocks:
            raise ConfigError("align_depth must be < num_blocks")
        s = self.diversity.subset_size(self.model.num_blocks)
        if not 2 <= s <= self.model.num_blocks:
            raise ConfigError("layer_subset_size must lie in [2, num_blocks]")

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> RunConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - {"model", "diversity", "train", "sample", "data"})
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        data = _from_dict(DatasetSpec, raw.get("data"), "data")
        model_raw = raw.get("model") or {}
        if not isinstance(model_raw, dict):
            raise ConfigError("'model' must be an object")
        return cls(
            model=derive_model_config(model_raw, data),
            diversity=_from_dict(DiversityConfig, raw.get("diversity"), "diversity"),
            train=_from_dict(TrainConfig, raw.get("train"), "train"),
            sample=_from_dict(SampleConfig, raw.get("sample"), "sample"),
            data=data,
        )

    def to_dict(self) -> dict[str, Any]:
        model = asdict(self.model)
        out = {
            "model": {k: model[k] for k in ARCH_KEYS},
            "diversity": asdict(self.diversity),
            "train": asdict(self.train),
            "sample": asdict(self.sample),
            "data": asdict(self.data),
        }
        out["train"]["betas"] = list(out["train"]["betas"])
        return out

    def with_overrides(self, **groups: dict[str, Any]) -> RunConfig:
        raw = self.to_dict()
        for group, values in groups.items():
            raw[group] = {**raw[group], **values}
        return RunConfig.from_dict(raw)


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: "
                          f"{exc.msg}") from exc
    return RunConfig.from_dict(raw)


__all__ = ["ConfigError", "DatasetSpec", "ModelConfig", "DiversityConfig", "TrainConfig",
           "SampleConfig", "RunConfig", "derive_model_config", "load_config"]
