"""
設定管理モジュール
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import AliasChoices, BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings

from src.interp_trainer import ScheduleMode, ScheduleSpec, TrainConfig
from src.tensor_core import ConfigError

load_dotenv()


class DataConfig(BaseSettings):
    """データセット設定"""
    data_dir: Optional[str] = Field(
        default=None, validation_alias=AliasChoices("BIASBLEND_DATA", "data_dir")
    )
    dataset: str = Field(default="cifar10", validation_alias=AliasChoices("BIASBLEND_DATASET", "dataset"))
    subset: int = 0
    augment: bool = True
    normalize_eps: float = 1e-8


class OptimConfig(BaseSettings):
    """最適化設定"""
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 100


class InterpConfig(BaseSettings):
    """補間設定"""
    prior: str = "cnn"
    alpha: float = 0.0
    decay_a: Optional[float] = None
    decay_k: Optional[float] = None
    test_time_alpha: Optional[float] = None
    layer_mask: str = ""


class Settings(BaseSettings):
    """グローバル設定"""
    # サブ設定
    data: DataConfig = DataConfig()
    optim: OptimConfig = OptimConfig()
    interp: InterpConfig = InterpConfig()

    # 一般設定
    seed: int = Field(default=0, validation_alias=AliasChoices("BIASBLEND_SEED", "seed"))
    out_dir: str = Field(default="runs", validation_alias=AliasChoices("BIASBLEND_OUT", "out_dir"))
    log_level: str = Field(default="INFO", validation_alias=AliasChoices("LOG_LEVEL", "log_level"))
    jobs: int = Field(default=1, validation_alias=AliasChoices("BIASBLEND_JOBS", "jobs"))
    force: bool = Field(default=False, validation_alias=AliasChoices("BIASBLEND_FORCE", "force"))


# グローバル設定インスタンス
settings = Settings()


class RunConfig(BaseModel):
    """1回の実行のフラットな設定（YAML → CLI 上書きの順に適用）"""
    model_config = ConfigDict(extra="forbid")

    prior: Literal["cnn", "mixer", "none"] = "cnn"
    arch: Literal["standard", "budget-1", "budget-2"] = "standard"
    alpha: float = Field(default=0.0, ge=0.0, le=1.0)
    decay_a: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    decay_k: Optional[float] = Field(default=None, ge=0.0)
    test_time_alpha: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    no_interp: bool = False
    layer_mask: str = ""
    interpolate_bias: bool = False
    interpolate_head: bool = False
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=128, ge=1)
    lr: float = Field(default=1e-4, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    normalize_eps: float = Field(default=1e-8, gt=0.0)
    seed: int = 0
    subset: int = Field(default=0, ge=0)
    dataset: Literal["cifar10", "cifar100"] = "cifar10"
    data_dir: Optional[str] = None
    augment: bool = True

    @field_validator("layer_mask")
    @classmethod
    def parse_layer_mask(cls, v):
        if isinstance(v, str):
            parts = [x.strip() for x in v.split(",") if x.strip()]
            if any(p not in ("0", "1") for p in parts):
                raise ValueError("layer_mask must be a comma list of 0/1")
            return ",".join(parts)
        return v

    def mask(self) -> Optional[List[bool]]:
        if not self.layer_mask:
            return None
        return [p == "1" for p in self.layer_mask.split(",")]

    def schedule(self) -> ScheduleSpec:
        """フラグから補間スケジュールを決める"""
        if self.no_interp or self.prior == "none":
            return ScheduleSpec(mode=ScheduleMode.NONE)
        if self.test_time_alpha is not None:
            return ScheduleSpec(mode=ScheduleMode.TEST_TIME_ONLY, alpha_test=self.test_time_alpha)
        if self.decay_a is not None or self.decay_k is not None:
            return ScheduleSpec(
                mode=ScheduleMode.POLY_DECAY,
                a=self.decay_a if self.decay_a is not None else self.alpha,
                k=self.decay_k if self.decay_k is not None else 0.0,
                layer_mask=self.mask(),
            )
        return ScheduleSpec(mode=ScheduleMode.CONSTANT, a=self.alpha, layer_mask=self.mask())

    def content_hash(self) -> str:
        """正準 JSON の SHA-256（データの置き場所は含めない）"""
        payload = self.model_dump(exclude={"data_dir"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
            dataset=self.dataset,
            augment=self.augment,
            schedule=self.schedule(),
            prior_kind=self.prior,
            arch=self.arch,
            subset=self.subset,
            data_dir=self.data_dir,
            normalize_eps=self.normalize_eps,
            interpolate_bias=self.interpolate_bias,
            interpolate_head=self.interpolate_head,
        )


def _defaults_from_settings() -> Dict[str, Any]:
    return {
        "prior": settings.interp.prior,
        "alpha": settings.interp.alpha,
        "decay_a": settings.interp.decay_a,
        "decay_k": settings.interp.decay_k,
        "test_time_alpha": settings.interp.test_time_alpha,
        "layer_mask": settings.interp.layer_mask,
        "epochs": settings.optim.epochs,
        "batch_size": settings.optim.batch_size,
        "lr": settings.optim.learning_rate,
        "beta1": settings.optim.beta1,
        "beta2": settings.optim.beta2,
        "adam_eps": settings.optim.adam_eps,
        "normalize_eps": settings.data.normalize_eps,
        "seed": settings.seed,
        "subset": settings.data.subset,
        "dataset": settings.data.dataset,
        "data_dir": settings.data.data_dir,
        "augment": settings.data.augment,
    }


def load_run_config(
    path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """環境変数の既定値 → YAML ファイル → CLI 上書き の順に合成して検証"""
    values = _defaults_from_settings()
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError("config", f"Run config not found: {config_path}")
        with open(config_path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigError("config", f"{config_path} must be a flat key/value mapping")
        values.update({k.replace("-", "_"): v for k, v in data.items()})
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except ValidationError as e:
        error = e.errors()[0]
        field_name = ".".join(str(part) for part in error["loc"]) or "config"
        raise ConfigError(field_name, error["msg"]) from None
