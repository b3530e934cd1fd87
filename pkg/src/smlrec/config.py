"""Run configuration: built-in defaults < key-value config file < command-line flags."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .errors import ConfigError

STRATEGIES = ("sml", "full", "finetune", "reservoir")
VARIANTS = ("cnn", "weighted_sum", "mlp")
ABLATIONS = ("no-cnn", "no-fc", "no-future", "frozen-transfer", "direct-fit")


@dataclass
class TrainConfig:
    # recommender
    d: int = 32
    optimizer: str = "adam"
    batch_size: int = 256
    freeze_negatives: bool = False
    seed: int = 0
    # transfer network
    variant: str = "cnn"
    n1: int = 10
    n2: int = 5
    df: int = 512
    mlp_hidden: tuple[int, ...] = (64,)
    alpha: float = 0.5
    alpha_trainable: bool = True
    use_conv: bool = True
    use_fc: bool = True
    # sequential meta-learning
    lambda1: float = 0.0
    lambda2: float = 1e-4
    lr_hat: float = 0.01
    lr_theta: float = 0.001
    step1_epochs: int = 1
    step2_epochs: int = 1
    max_outer: int = 6
    early_stop_patience: int = 0  # 0 disables validation early stopping
    next_period_meta: bool = True  # False trains the transfer on D_t (SML-N)
    direct_fit: bool = False  # fit W_hat without the transfer (SML-FP)
    freeze_transfer_at_test: bool = False  # SML-S
    # baselines and pretraining
    lr_mf: float = 0.01
    lambda_mf: float = 0.0
    epochs_full: int = 10
    epochs_finetune: int = 10
    epochs_reservoir: int = 10
    epochs_pretrain: int = 20
    reservoir_capacity: int = 7000
    pretrain_periods: int = 0
    # evaluation
    eval_negatives: int = 999
    ks: tuple[int, ...] = (5, 10, 20)

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("d", "n1", "n2", "df", "step1_epochs", "step2_epochs", "max_outer", "eval_negatives")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr_hat", "lr_theta", "lr_mf"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda1", "lambda2", "lambda_mf", "early_stop_patience", "reservoir_capacity",
                     "pretrain_periods", "epochs_full", "epochs_finetune", "epochs_reservoir",
                     "epochs_pretrain"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be sgd or adam")
        if not (self.use_conv or self.use_fc):
            raise ConfigError("the cnn transfer needs at least its conv or its fc layer")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def with_ablations(self, ablations) -> "TrainConfig":
        kw = {}
        for a in ablations:
            if a == "no-cnn":
                kw["use_conv"] = False
            elif a == "no-fc":
                kw["use_fc"] = False
            elif a == "no-future":
                kw["next_period_meta"] = False
            elif a == "frozen-transfer":
                kw["freeze_transfer_at_test"] = True
            elif a == "direct-fit":
                kw["direct_fit"] = True
            else:
                raise ConfigError(f"unknown ablation {a!r}; choose from {ABLATIONS}")
        return self.replace(**kw)


def _coerce(value: str, ftype, name):
    ftype = str(ftype)
    try:
        if ftype == "bool":
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if ftype == "int":
            return int(value)
        if ftype == "float":
            return float(value)
        if ftype.startswith("tuple"):
            return tuple(int(x) for x in value.split(",") if x.strip())
        return value.strip().strip('"')
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {name}") from None


def config_from_kv(kv: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    types = {f.name: f.type for f in fields(TrainConfig)}
    kw = {}
    for k, v in kv.items():
        key = k.replace("-", "_")
        if key not in types:
            raise ConfigError(f"unknown config key {k!r}")
        kw[key] = _coerce(v, types[key], key) if isinstance(v, str) else v
    return base.replace(**kw)


def config_to_kv(cfg: TrainConfig) -> dict[str, str]:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
    return out


@dataclass
class RunConfig:
    """Everything a CLI run needs beyond the training hyperparameters."""

    train: TrainConfig = field(default_factory=TrainConfig)
    strategy: str = "sml"
    ablations: tuple[str, ...] = ()
    dataset: str = ""
    out_dir: str = "runs"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.ablations and self.strategy != "sml":
            raise ConfigError("ablation flags are only valid with --strategy sml")
        for a in self.ablations:
            if a not in ABLATIONS:
                raise ConfigError(f"unknown ablation {a!r}")

    def effective(self) -> TrainConfig:
        return self.train.with_ablations(self.ablations)
