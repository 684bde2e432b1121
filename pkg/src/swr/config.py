"""Training configuration and its plain-text ``key = value`` file form."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    optimizer: str = "adam"  # adam | sgd
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    # synthetic benchmark
    noise: float = 0.5
    examples_per_class: tuple[int, ...] = (40, 10, 20)
    data_seed: int = 0
    # source pretraining
    epochs_pretrain: int = 30
    lr_pretrain: float = 1e-2
    # stage 1a: super-net
    epochs_supernet: int = 15
    lr_supernet: float = 1e-3
    # stage 1b: policy net
    epochs_policy: int = 30
    lr_policy: float = 1e-2
    lam: float = 3.0
    tau_start: float = 2.0
    tau_end: float = 0.5
    policy_hidden: int = 64
    r_mode: str = "param-weighted"
    # stage 2 and baselines
    epochs_transfer: int = 30
    lr_transfer: float = 1e-2
    bn_mode: str = "stats-only"
    c_grid: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        for name in ("epochs_pretrain", "epochs_supernet", "epochs_policy", "epochs_transfer", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ValueError("temperature endpoints must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.bn_mode not in ("stats-only", "stats-and-affine"):
            raise ValueError(f"unknown bn_mode {self.bn_mode!r}")
        if self.r_mode not in ("param-weighted", "equal"):
            raise ValueError(f"unknown r_mode {self.r_mode!r}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(tp, raw: str):
    origin = typing.get_origin(tp)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_coerce(inner, p.strip()) for p in raw.split(",") if p.strip())
    if tp is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return tp(raw)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    hints = typing.get_type_hints(TrainConfig)
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            changes[key] = _coerce(hints[key], raw)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value for {key}: {exc}") from None
    return (base or TrainConfig()).replace(**changes)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())
