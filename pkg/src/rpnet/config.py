"""Run configuration and its one-key-per-line text format.

File format (UTF-8)::

    # comment
    lambda_self = 10.0
    block_set = [2, 3]
    ls_mode = "both"

Values are Python literals (numbers, quoted strings, booleans, lists).
Fractions may be written as ``1/16``.
"""
from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

from .backbone import BackboneConfig

ALLOWED_FRACTIONS = (1.0, 0.5, 0.25, 0.125, 0.0625)
LS_MODES = ("both", "target-is-enhanced", "target-is-original")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # optimisation
    lambda_self: float = 10.0
    lr0: float = 0.02
    poly_power: float = 0.9
    epochs: int = 5
    momentum: float = 0.9
    grad_clip: float = 0.0
    batch_episodes: int = 1
    # episodes and prototypes
    episode_size: int = 2
    block_set: list[int] = field(default_factory=lambda: [2, 3])
    alpha: float = 0.3
    beta: float = 0.5
    sigma: float = 3.0
    gaussian: bool = True
    use_prototypes: bool = True
    ls_mode: str = "both"
    ls_reduction: str = "mean"
    foreground_grad: bool = False
    # data
    fraction: float = 1.0
    augment_flip: bool = True
    augment_crop_scale: bool = False
    seed: int = 0
    dtype: str = "float64"
    # backbone
    num_blocks: int = 3
    channels: list[int] = field(default_factory=lambda: [32, 64, 64])
    groups: int = 1
    unified_channels: int = 256
    # pseudo masks
    tau_bg: float = 0.25

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lambda_self < 0:
            raise ConfigError("lambda_self must be >= 0")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if not any(abs(self.fraction - f) < 1e-12 for f in ALLOWED_FRACTIONS):
            raise ConfigError(f"fraction must be one of 1, 1/2, 1/4, 1/8, 1/16, got {self.fraction}")
        if self.ls_reduction not in ("sum", "mean"):
            raise ConfigError("ls_reduction must be sum or mean")
        if self.ls_mode not in LS_MODES:
            raise ConfigError(f"ls_mode must be one of {LS_MODES}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta (keep probability) must lie in [0, 1]")
        if not 1 <= self.episode_size <= 4:
            raise ConfigError("episode_size must be 1, 2, 3 or 4")
        if self.epochs < 1 or self.batch_episodes < 1:
            raise ConfigError("epochs and batch_episodes must be >= 1")
        if not self.block_set:
            raise ConfigError("block_set must be nonempty")
        if any(not 1 <= b <= self.num_blocks for b in self.block_set):
            raise ConfigError(f"block_set {self.block_set} outside 1..{self.num_blocks}")
        if not 0.0 < self.tau_bg < 1.0:
            raise ConfigError("tau_bg must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def backbone(self, num_classes: int = 3, in_channels: int = 3) -> BackboneConfig:
        try:
            return BackboneConfig(self.num_blocks, list(self.channels), self.groups,
                                  in_channels, num_classes, self.unified_channels)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def updated(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def parse_value(key: str, text: str, cls=TrainConfig):
    """Parse one value for field ``key`` of dataclass ``cls``, checked against its default's type."""
    if key not in {f.name for f in fields(cls)}:
        raise ConfigError(f"unknown config key {key!r}")
    text = text.strip()
    default = getattr(cls(), key)
    if "/" in text and not text.startswith(("'", '"', "[")):
        try:
            return float(Fraction(text))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"bad value for {key}: {text!r}") from None
    if isinstance(default, bool) and text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if isinstance(default, str):
            value = text
        else:
            raise ConfigError(f"bad value for {key}: {text!r}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {text!r}")
    elif isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key} expects a number, got {text!r}")
        value = float(value)
    elif isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key} expects an integer, got {text!r}")
    elif isinstance(default, list):
        if isinstance(value, int):
            value = [value]
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{key} expects a list of integers, got {text!r}")
        value = list(value)
    elif isinstance(default, tuple) or default is None:
        if isinstance(value, (str, int, float)) and default is not None:
            value = (value,)
        if value is not None and not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {text!r}")
        value = None if value is None else tuple(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {text!r}")
    return value


def apply_overrides(config, pairs):
    """Apply ``key=value`` strings (or (key, value-text) pairs) to a config dataclass."""
    changes = {}
    for item in pairs:
        if isinstance(item, str):
            key, sep, text = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
        else:
            key, text = item
        changes[key.strip()] = parse_value(key.strip(), str(text), type(config))
    try:
        return replace(config, **changes)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def loads(text: str, cls=TrainConfig):
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        pairs.append((key.strip(), value))
    return apply_overrides(cls(), pairs)


def load(path, cls=TrainConfig):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text(encoding="utf-8"), cls)


def dumps(config) -> str:
    lines = []
    for key, value in asdict(config).items():
        if isinstance(value, tuple):
            value = list(value)
        if isinstance(value, str):
            lines.append(f"{key} = {value!r}")
        elif isinstance(value, bool):
            lines.append(f"{key} = {'true' if value else 'false'}")
        else:
            lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"


def save(config, path):
    Path(path).write_text(dumps(config), encoding="utf-8")
