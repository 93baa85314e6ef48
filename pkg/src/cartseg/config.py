"""Training and run configuration, loaded from YAML with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import CartsegError
from .phantom import PhantomSpec

REGIMES = ("coarse", "p1", "p2")
ROI_SOURCES = ("gt-centroid", "coarse-centroid")
CLASS_KEYS = ("fc", "tc", "pc")

DEFAULT_ROI_SIZES = {"fc": (32, 20, 32), "tc": (32, 16, 32), "pc": (16, 16, 16)}
# fallback ROI centres as fractions of the volume dims, measured on default phantoms
# mean class centroids of default 64^3 phantoms, as fractions of the dims
DEFAULT_CENTERS = {"fc": (0.5, 0.325, 0.574), "tc": (0.5, 0.687, 0.585), "pc": (0.5, 0.332, 0.216)}


@dataclass
class TrainConfig:
    regime: str = "p2"
    epochs: int = 40
    batch_size: int = 1
    lr_agents: float = 0.001
    lr_discriminator: float = 0.0002
    lr_decay: float = 0.95
    decay_epochs: int = 10
    w_s: float = 1.0
    w_m: float = 1.0
    w_a: float = 1.0
    seed: int = 7
    roi_sizes: dict = field(default_factory=lambda: dict(DEFAULT_ROI_SIZES))
    default_centers: dict = field(default_factory=lambda: dict(DEFAULT_CENTERS))
    roi_source: str = "gt-centroid"
    coarse_factors: tuple = (2, 2, 1)
    coarse_levels: int = 3
    coarse_channels: int = 16
    agent_levels: int = 2
    agent_channels: int = 16
    agent_attention: tuple = (True, True)
    disc_channels: int = 16
    disc_levels: int = 4
    threshold: float = 0.5
    deterministic: bool = True

    def __post_init__(self):
        self.roi_sizes = {k: tuple(int(v) for v in self.roi_sizes[k]) for k in CLASS_KEYS}
        self.default_centers = {k: tuple(float(v) for v in self.default_centers[k]) for k in CLASS_KEYS}
        self.coarse_factors = tuple(int(f) for f in self.coarse_factors)
        if isinstance(self.agent_attention, bool):
            self.agent_attention = (self.agent_attention,) * self.agent_levels
        self.agent_attention = tuple(bool(a) for a in self.agent_attention)
        self.validate()

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise CartsegError("invalid-config", f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 0:
            raise CartsegError("invalid-config", "epochs must be >= 0")
        if self.batch_size != 1:
            raise CartsegError("invalid-config", "only batch_size 1 is supported")
        if not (self.lr_agents > 0 and self.lr_discriminator > 0):
            raise CartsegError("invalid-config", "learning rates must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise CartsegError("invalid-config", "lr_decay must lie in (0, 1]")
        if self.decay_epochs < 1:
            raise CartsegError("invalid-config", "decay_epochs must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise CartsegError("invalid-config", "threshold must lie in (0, 1)")
        if self.roi_source not in ROI_SOURCES:
            raise CartsegError("invalid-config", f"roi_source must be one of {ROI_SOURCES}")
        if len(self.agent_attention) != self.agent_levels:
            raise CartsegError("invalid-config", "agent_attention needs one flag per agent level")
        if any(f < 1 for f in self.coarse_factors) or len(self.coarse_factors) != 3:
            raise CartsegError("invalid-factor", f"coarse_factors must be three ints >= 1")
        k = 2**self.agent_levels
        for key, size in self.roi_sizes.items():
            if len(size) != 3 or any(s < 1 or s % k for s in size):
                raise CartsegError(
                    "invalid-config", f"roi size {key}={size} must be positive and divisible by {k}"
                )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["roi_sizes"] = {k: list(v) for k, v in self.roi_sizes.items()}
        d["default_centers"] = {k: list(v) for k, v in self.default_centers.items()}
        d["coarse_factors"] = list(self.coarse_factors)
        d["agent_attention"] = list(self.agent_attention)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        _reject_unknown(d, cls, "train")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _reject_unknown(d: dict, cls, section: str) -> None:
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise CartsegError("unknown-config-key", f"unknown key {section}.{key}")


@dataclass
class RunConfig:
    data_dir: Path = Path("data")
    out_dir: Path = Path("runs")
    deterministic: bool = True
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    count: int = 30
    epochs: dict = field(default_factory=lambda: {"coarse": 60, "p1": 60, "p2": 40})
    train: TrainConfig = field(default_factory=TrainConfig)

    def train_config(self, regime: str) -> TrainConfig:
        if regime not in REGIMES:
            raise CartsegError("invalid-config", f"unknown regime {regime!r}")
        return self.train.replace(regime=regime, epochs=int(self.epochs[regime]), deterministic=self.deterministic)


_TOP_KEYS = {"data_dir", "out_dir", "deterministic", "phantom", "epochs", "train"}
_PHANTOM_KEYS = {"count", "dims", "spacing", "seed", "defect_probability", "noise_sigma", "jitter_voxels"}


def parse_run_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise CartsegError("invalid-config", "config root must be a mapping")
    for key in raw:
        if key not in _TOP_KEYS:
            raise CartsegError("unknown-config-key", f"unknown key {key}")
    phantom_raw = dict(raw.get("phantom") or {})
    for key in phantom_raw:
        if key not in _PHANTOM_KEYS:
            raise CartsegError("unknown-config-key", f"unknown key phantom.{key}")
    count = int(phantom_raw.pop("count", 30))
    epochs = {"coarse": 60, "p1": 60, "p2": 40}
    for key, value in (raw.get("epochs") or {}).items():
        if key not in REGIMES:
            raise CartsegError("unknown-config-key", f"unknown key epochs.{key}")
        epochs[key] = int(value)
    train_raw = dict(raw.get("train") or {})
    for key in ("regime", "epochs", "deterministic"):
        if key in train_raw:
            raise CartsegError("unknown-config-key", f"unknown key train.{key} (set it at top level)")
    train = TrainConfig.from_dict(train_raw)
    base = base_dir or Path(".")

    def path(key, default):
        p = Path(raw.get(key, default))
        return p if p.is_absolute() else base / p

    return RunConfig(
        data_dir=path("data_dir", "data"),
        out_dir=path("out_dir", "runs"),
        deterministic=bool(raw.get("deterministic", True)),
        phantom=PhantomSpec(**phantom_raw),
        count=count,
        epochs=epochs,
        train=train,
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise CartsegError("config-read-failed", f"{path}: {exc}") from exc
    return parse_run_config(raw, base_dir=path.parent)
