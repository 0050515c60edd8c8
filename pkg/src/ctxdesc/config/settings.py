"""Validated configuration models and the line-oriented ``key=value`` format."""
import logging
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ctxdesc.errors import SpecError

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    """Optimizer schedule, batch composition and model shape for training."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    base_lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    lr_decay_factor: float = Field(0.1, gt=0)
    lr_decay_every: int = Field(2000, gt=0)
    batch_pairs: int = Field(2, ge=1)
    keypoints_per_pair: int = Field(128, ge=4)
    lambda_quad: float = Field(1.0, ge=0)
    seed: int = 0
    max_steps: int = Field(500, ge=0)
    grad_clip_norm: float = Field(10.0, ge=0)
    train_temperature: bool = True
    encoder_width: int = Field(128, ge=1)
    unit_style: Literal["preact", "original"] = "preact"
    use_matchability: bool = True
    interp_k: int = Field(3, ge=1)
    streams: Literal["raw", "+geo", "+vis", "+both"] = "+both"
    cn_epsilon: float = Field(1e-6, gt=0)
    bn_momentum: float = Field(0.9, ge=0, lt=1)
    min_matchable_fraction: float = Field(0.5, gt=0, le=1)
    augment_offsets: float = Field(0.5, ge=0, le=0.5)
    augment_noise: float = Field(0.05, ge=0)
    log_every: int = Field(50, ge=1)


class SceneSpec(BaseModel):
    """Synthetic scene pair generation."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    image_width: int = Field(256, gt=0)
    image_height: int = Field(256, gt=0)
    num_keypoints: int = Field(256, ge=2)
    ambiguity_groups: int = Field(8, ge=0)
    group_size: int = Field(4, ge=0)
    descriptor_noise: float = Field(0.05, ge=0)
    descriptor_dim: int = Field(128, ge=2)
    undiscovered_fraction: float = Field(0.1, ge=0, lt=1)
    unrepeatable_fraction: float = Field(0.1, ge=0, lt=1)
    homography_offset: float = Field(0.15, ge=0, lt=0.5)
    regional_depth: int = Field(64, ge=1, le=2048)
    grid_stride: float = Field(32.0, gt=0)
    jitter_px: float = Field(0.5, ge=0, le=0.5)
    seed: int = 0
    num_scenes: int = Field(32, ge=1)

    @model_validator(mode="after")
    def _check_composition(self):
        if self.undiscovered_fraction + self.unrepeatable_fraction >= 1:
            raise ValueError("undiscovered_fraction + unrepeatable_fraction must be below 1")
        if self.ambiguity_groups > 0:
            if self.group_size < 2:
                raise ValueError("group_size must be at least 2 when ambiguity groups are enabled")
            if self.num_keypoints < 2 * self.group_size:
                raise ValueError("num_keypoints must be at least 2 * group_size")
            if self.ambiguity_groups * self.group_size > self.matchable_count:
                raise ValueError("ambiguity groups need more matchable keypoints than available")
        if self.matchable_count < 4:
            raise ValueError("a scene needs at least 4 matchable keypoints")
        return self

    @property
    def undiscovered_count(self) -> int:
        return int(round(self.undiscovered_fraction * self.num_keypoints))

    @property
    def unrepeatable_count(self) -> int:
        return int(round(self.unrepeatable_fraction * self.num_keypoints))

    @property
    def matchable_count(self) -> int:
        return self.num_keypoints - self.undiscovered_count - self.unrepeatable_count


class RunConfig(TrainConfig, SceneSpec):
    """Every TrainConfig and SceneSpec key plus paths, in one flat namespace."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    scenes_dir: str | None = None
    out_dir: str | None = None
    model_path: str | None = None

    def train_config(self) -> TrainConfig:
        return TrainConfig.model_validate(self.model_dump(include=set(TrainConfig.model_fields)))

    def scene_spec(self) -> SceneSpec:
        return SceneSpec.model_validate(self.model_dump(include=set(SceneSpec.model_fields)))

    def dump(self) -> str:
        """Effective configuration, including defaulted keys, as sorted key=value lines."""
        lines = []
        for key, value in sorted(self.model_dump().items()):
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key}={'' if value is None else value}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {number}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise SpecError(f"line {number}: empty key")
        if key in values:
            raise SpecError(f"line {number}: key '{key}' repeated")
        values[key] = value
    return values


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        key = ".".join(str(p) for p in item["loc"]) or "config"
        parts.append(f"{key}: {item['msg']}")
    return "; ".join(parts)


def build_run_config(values: dict[str, Any]) -> RunConfig:
    cleaned = {k: (None if v == "" else v) for k, v in values.items()}
    try:
        return RunConfig.model_validate(cleaned)
    except ValidationError as e:
        raise SpecError(f"invalid configuration: {_describe(e)}") from e


def load_run_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a configuration file (or defaults when ``path`` is None) and apply overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            values = parse_config_text(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise SpecError(f"cannot read configuration {path}: {e}") from e
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    config = build_run_config(values)
    logger.debug(f"Loaded run configuration from {path or 'defaults'}")
    return config
