"""Pipeline configuration: a TOML file of flat sections, every key optional.

Example::

    seed = 1

    [data]
    source = "idx"
    images = "digits-images.idx"
    labels = "digits-labels.idx"
    normalization = "scale255"

    [model]
    arch = "cnn:16,32"

    [stage1]
    T = 4

    [stage2]
    loss = "kl"
"""

import dataclasses
import os
import sys
import typing
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .calibration import Stage2Config
from .data import BUILTINS, DatasetSpec
from .snn import SHIFT_MODES

ARMS = {
    "just-copy": (False, False, False),
    "stage1-only": (True, False, False),
    "stage2-only": (False, True, True),
    "stage1+stage2": (True, True, True),
    "stage1+cc": (True, True, False),
    "stage1+fc": (True, False, True),
}


class ConfigError(ValueError):
    """Malformed configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ModelSection:
    arch: str = "mlp:128,128"
    recipe: str = "direct-clip"      # direct-clip | scaled-clip-then-fuse
    batchnorm: bool = True


@dataclass
class TrainSection:
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 64
    train_theta: typing.Optional[bool] = None   # None: recipe default


@dataclass
class Stage1Section:
    enabled: bool = True
    T: int = 4
    p: typing.Optional[float] = None            # None: 0.2 at T <= 4, 0.1 below 8, else 0
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 64


@dataclass
class ConvertSection:
    shift_mode: str = "init-half-theta"


@dataclass
class Stage2Section:
    cc: bool = True
    fc: bool = True
    loss: typing.Optional[str] = None           # None: kl for recognition, mse for regression
    lr: typing.Optional[float] = None           # None: 5e-4 recognition, 1e-4 regression
    epochs: int = 20
    patience: int = 5
    batch_size: int = 32
    alpha: typing.Optional[float] = None        # surrogate width; None: layer threshold
    train_weight: bool = True
    train_bias: bool = True
    train_u0: bool = True


@dataclass
class EvalSection:
    T_list: list = field(default_factory=list)  # empty: just stage1.T
    analysis_samples: int = 1024


@dataclass
class PipelineConfig:
    seed: int = 0
    task: typing.Optional[str] = None           # None: inferred from the dataset
    data: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    convert: ConvertSection = field(default_factory=ConvertSection)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def T(self) -> int:
        return self.stage1.T

    def time_steps(self) -> list:
        return list(self.eval.T_list) or [self.stage1.T]

    def stage2_config(self, task: str, seed: int | None = None) -> Stage2Config:
        s = self.stage2
        regression = task == "regression"
        return Stage2Config(
            cc=s.cc, fc=s.fc,
            loss=s.loss or ("mse" if regression else "kl"),
            lr=s.lr if s.lr is not None else (1e-4 if regression else 5e-4),
            epochs=s.epochs, patience=s.patience, batch_size=s.batch_size, alpha=s.alpha,
            train_weight=s.train_weight, train_bias=s.train_bias, train_u0=s.train_u0,
            seed=self.seed if seed is None else seed,
        )

    def with_arm(self, arm: str) -> "PipelineConfig":
        if arm not in ARMS:
            raise ConfigError("ablation", f"unknown arm {arm!r}; choose from {sorted(ARMS)}")
        s1, cc, fc = ARMS[arm]
        out = dataclasses.replace(self, stage1=dataclasses.replace(self.stage1, enabled=s1),
                                  stage2=dataclasses.replace(self.stage2, cc=cc, fc=fc))
        return out

    def arm(self) -> str | None:
        key = (self.stage1.enabled, self.stage2.cc, self.stage2.fc)
        return next((k for k, v in ARMS.items() if v == key), None)


# -- parsing -----------------------------------------------------------------

def _coerce(value, hint, path):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if hint is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    return value


def _fill(cls, table: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in table:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in table:
            kwargs[f.name] = _coerce(table[f.name], hints[f.name], f"{prefix}{f.name}")
    return cls(**kwargs)


SECTIONS = {"data": DatasetSpec, "model": ModelSection, "train": TrainSection, "stage1": Stage1Section,
            "convert": ConvertSection, "stage2": Stage2Section, "eval": EvalSection}


def config_from_dict(raw: dict, base_dir: str = ".") -> PipelineConfig:
    top = {k: v for k, v in raw.items() if k not in SECTIONS}
    for k in top:
        if k not in ("seed", "task"):
            raise ConfigError(k, "unknown key")
    kwargs = {}
    for name, cls in SECTIONS.items():
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(name, "expected a section")
        if name == "data" and "seed" in table:
            raise ConfigError("data.seed", "set the top-level seed instead; all randomness derives from it")
        kwargs[name] = _fill(cls, table, f"{name}.")
    if "seed" in top:
        kwargs["seed"] = _coerce(top["seed"], int, "seed")
    if "task" in top:
        kwargs["task"] = _coerce(top["task"], str, "task")
    cfg = PipelineConfig(**kwargs)
    cfg.data.seed = cfg.seed
    for attr in ("images", "labels", "path"):
        p = getattr(cfg.data, attr)
        if p and not os.path.isabs(p):
            setattr(cfg.data, attr, os.path.normpath(os.path.join(base_dir, p)))
    validate(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("<file>", f"{path}: {exc}") from None
    return config_from_dict(raw, os.path.dirname(os.path.abspath(path)))


def validate(cfg: PipelineConfig) -> None:
    def need(cond, path, msg):
        if not cond:
            raise ConfigError(path, msg)

    need(cfg.task in (None, "recognition", "regression"), "task", "must be recognition or regression")
    d = cfg.data
    need(d.source in BUILTINS + ("idx", "csv"), "data.source", f"must be one of {BUILTINS + ('idx', 'csv')}")
    need(d.normalization in ("none", "minmax", "standard", "scale255"), "data.normalization",
         "must be none, minmax, standard or scale255")
    need(0 <= d.val_fraction < 1, "data.val_fraction", "must lie in [0, 1)")
    need(0 <= d.test_fraction < 1 and d.val_fraction + d.test_fraction < 1, "data.test_fraction",
         "val_fraction + test_fraction must be below 1")
    need(d.n_calib >= 0, "data.n_calib", "must be >= 0")
    need(d.n_samples > 0, "data.n_samples", "must be positive")
    need(cfg.model.arch.split(":")[0] in ("mlp", "cnn"), "model.arch", "must look like mlp:H1,H2 or cnn:C1,C2")
    need(cfg.model.recipe in ("direct-clip", "scaled-clip-then-fuse"), "model.recipe",
         "must be direct-clip or scaled-clip-then-fuse")
    need(cfg.train.optimizer in ("sgd", "adam"), "train.optimizer", "must be sgd or adam")
    for sec in ("train", "stage1", "stage2"):
        s = getattr(cfg, sec)
        if s.lr is not None:
            need(s.lr > 0, f"{sec}.lr", "must be positive")
        need(s.epochs >= 0, f"{sec}.epochs", "must be >= 0")
        need(s.batch_size >= 1, f"{sec}.batch_size", "must be >= 1")
    need(cfg.train.weight_decay >= 0, "train.weight_decay", "must be >= 0")
    need(cfg.stage1.T >= 1, "stage1.T", "must be >= 1")
    need(cfg.stage1.p is None or 0 <= cfg.stage1.p <= 1, "stage1.p", "must lie in [0, 1]")
    need(cfg.convert.shift_mode in SHIFT_MODES, "convert.shift_mode", f"must be one of {SHIFT_MODES}")
    need(cfg.stage2.loss in (None, "kl", "mse"), "stage2.loss", "must be kl or mse")
    need(cfg.stage2.alpha is None or cfg.stage2.alpha > 0, "stage2.alpha", "must be positive")
    need(cfg.stage2.patience >= 1, "stage2.patience", "must be >= 1")
    for i, t in enumerate(cfg.eval.T_list):
        need(isinstance(t, int) and not isinstance(t, bool) and t >= 1, f"eval.T_list[{i}]", "must be an integer >= 1")


def dump_config(cfg: PipelineConfig) -> str:
    """Render ``cfg`` as TOML (None values are omitted)."""
    def val(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, list):
            return "[" + ", ".join(val(x) for x in v) + "]"
        return repr(v)

    lines = [f"seed = {cfg.seed}"]
    if cfg.task:
        lines.append(f"task = {val(cfg.task)}")
    for name in SECTIONS:
        lines.append(f"\n[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            v = getattr(getattr(cfg, name), f.name)
            if v is not None and (name, f.name) != ("data", "seed"):
                lines.append(f"{f.name} = {val(v)}")
    return "\n".join(lines) + "\n"
