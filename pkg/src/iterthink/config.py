"""Run configuration: one flat JSON object with a fixed key set."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .model import ModelSpec
from .training import TrainConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "save_config", "CONFIG_KEYS"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    variant: str = "DTL"
    width: int = 32
    activation: str | None = None
    use_batchnorm: bool | None = None
    final_bias: bool | None = None
    recall_bias: bool | None = None
    epsilon: float = 1e-3
    precision: str = "f64"
    epochs: int = 150
    batch_size: int = 500
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0002
    ipt_alpha: float = 0.5
    warmup_period: float = 3.0
    milestone_ratio: str = "8:4:2:1"
    milestone_multiplier: float = 0.1
    m_train: int = 30
    train_bits: int = 32
    dataset_size: int = 10000
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"config must be a JSON object, got {type(d).__name__}")
        unknown = sorted(set(d) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            variant=self.variant,
            width=self.width,
            activation=self.activation,
            use_batchnorm=self.use_batchnorm,
            final_bias=self.final_bias,
            recall_bias=self.recall_bias,
            epsilon=self.epsilon,
            precision=self.precision,
        )

    def train_config(self, **extra) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            weight_decay=self.weight_decay,
            ipt_alpha=self.ipt_alpha,
            warmup_period=self.warmup_period,
            milestone_ratio=self.milestone_ratio,
            milestone_multiplier=self.milestone_multiplier,
            m_train=self.m_train,
            train_bits=self.train_bits,
            dataset_size=self.dataset_size,
            seed=self.seed,
            **extra,
        )

    def validate(self) -> None:
        types = {
            "variant": str, "activation": (str, type(None)), "precision": str, "milestone_ratio": str,
            "use_batchnorm": (bool, type(None)), "final_bias": (bool, type(None)), "recall_bias": (bool, type(None)),
        }
        ints = ("width", "epochs", "batch_size", "m_train", "train_bits", "dataset_size", "seed")
        floats = ("epsilon", "lr", "beta1", "beta2", "weight_decay", "ipt_alpha", "warmup_period", "milestone_multiplier")
        for k, t in types.items():
            if not isinstance(getattr(self, k), t):
                raise ConfigError(f"{k}: expected {t}, got {getattr(self, k)!r}")
        for k in ints:
            v = getattr(self, k)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{k}: expected an integer, got {v!r}")
        for k in floats:
            v = getattr(self, k)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{k}: expected a number, got {v!r}")
        try:
            spec = self.model_spec().resolved()
            spec.dtype
            if spec.width < 2:
                raise ValueError(f"width must be >= 2, got {spec.width}")
            if not spec.epsilon > 0:
                raise ValueError(f"epsilon must be positive, got {spec.epsilon}")
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


CONFIG_KEYS = tuple(f.name for f in fields(RunConfig))


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
