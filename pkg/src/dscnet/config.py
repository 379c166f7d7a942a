"""Run configuration: dotted ``section.key = value`` settings.

A config file is plain text. Blank lines and ``#`` comments are ignored;
``[section]`` headers are optional shorthand for prefixing the keys that
follow. Values are layered as defaults < file < command-line flags, and
any key not listed in :data:`KEYS` is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable[[str], Any]
    help: str


KEYS: dict[str, Key] = {
    "data.dir": Key("data", str, "dataset directory written by `dscnet gen`"),
    "data.n": Key(400, int, "images generated by `dscnet gen` (half train, half test)"),
    "data.seed": Key(0, int, "base seed; image i uses seed + i"),
    "data.size": Key(64, int, "square image side in pixels"),
    "data.noise": Key(0.3, float, "additive Gaussian noise sigma"),
    "data.width_min": Key(1.0, float, "thinnest trunk curve width in pixels"),
    "data.width_max": Key(3.0, float, "thickest trunk curve width in pixels"),
    "data.branch_prob": Key(0.3, float, "probability that a curve spawns a branch"),
    "data.split": Key("parity", _choice("parity"), "train/test rule: even index train, odd index test"),
    "model.levels": Key(2, int, "encoder depth (pooling steps)"),
    "model.base_channels": Key(8, int, "channels at the first level, doubled per level"),
    "model.use_dsconv": Key(True, _bool, "false gives the plain 3x3 conv baseline"),
    "model.seed": Key(0, int, "parameter initialisation seed"),
    "fusion.m": Key(3, int, "templates per block (standard, snake-x, snake-y, repeating)"),
    "fusion.p": Key(1.0, float, "keep probability; floor(m*p) templates are kept per step"),
    "fusion.eval_mode": Key("expectation", _choice("expectation", "saved_mask"), "evaluation fusion rule"),
    "train.epochs": Key(20, int, "passes over the training split"),
    "train.lr": Key(0.05, float, "SGD learning rate"),
    "train.momentum": Key(0.9, float, "SGD heavy-ball momentum"),
    "train.batch_size": Key(8, int, "images per step"),
    "train.seed": Key(0, int, "shuffling and drop-mask seed"),
    "train.val_limit": Key(32, int, "test images scored per epoch for the log (0 = all)"),
    "train.clip_norm": Key(1.0, float, "cap on the global gradient norm per step (0 = off)"),
    "loss.type": Key("ce", _choice("ce", "tc"), "ce, or tc for cross-entropy plus the persistence term"),
    "loss.topo_weight": Key(1.0, float, "weight of the persistence term"),
    "loss.warmup": Key(5, int, "epochs of plain cross-entropy before the persistence term starts"),
    "loss.patch": Key(32, int, "persistence patch side during training (0 = whole image)"),
    "eval.split": Key("test", _choice("train", "test", "all"), "split scored by `dscnet eval`"),
    "eval.threshold": Key(0.5, float, "probability threshold for binary metrics"),
}


def describe() -> str:
    """Help text listing every key with its default."""
    width = max(len(k) for k in KEYS)
    lines = []
    for name, key in KEYS.items():
        default = str(key.default).lower() if isinstance(key.default, bool) else key.default
        lines.append(f"  {name:<{width}}  {default!s:<12} {key.help}")
    return "\n".join(lines)


class RunConfig:
    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self._values = {k: v.default for k, v in KEYS.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = KEYS[key].parse(value.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        self._values[key] = value

    def __getitem__(self, key: str) -> Any:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix) :]: v for k, v in self._values.items() if k.startswith(prefix)}

    def items(self) -> Iterable[tuple[str, Any]]:
        return self._values.items()

    def update_file(self, path) -> None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        for key, value in parse_text(text, str(p)):
            self.set(key, value)

    def update_pairs(self, pairs: Iterable[str]) -> None:
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"expected key=value, got {item!r}")
            k, v = item.split("=", 1)
            self.set(k.strip(), v)

    def to_text(self) -> str:
        out = []
        for k, v in self._values.items():
            out.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"


def parse_text(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    section = ""
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if section and "." not in k:
            k = f"{section}.{k}"
        pairs.append((k, v))
    return pairs


def load(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg.update_file(path)
    cfg.update_pairs(overrides)
    return cfg
