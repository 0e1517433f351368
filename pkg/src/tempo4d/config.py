"""Engine configuration: a JSON document where every field has a default.

Unknown keys are rejected at every nesting level so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, get_type_hints

from .denoiser import DenoiserConfig
from .losses import LossWeights
from .schedule import SIGMA_RULES
from .ssm import TriDirConfig
from .synthetic import SyntheticSpec


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-6
    beta_end: float = 1e-2
    sigma_rule: str = "posterior"
    ddim_steps: int = 50
    eta: float = 0.0


@dataclass(frozen=True)
class LossConfig:
    weights: LossWeights = LossWeights()
    wavelet_levels: int = 2


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stage2_decay: str = "linear"


@dataclass(frozen=True)
class TrainConfig:
    stage1_steps: int = 2000
    stage2_epochs: int = 20
    batch_size: int = 4
    checkpoint_every: int = 500
    val_cases: int = 2
    misalign_offsets: tuple[float, float] = (1.0, 0.0)


@dataclass(frozen=True)
class PathsConfig:
    stage1_checkpoint: str = "stage1"
    stage2_checkpoint: str = "stage2"
    log_dir: str = "logs"


@dataclass(frozen=True)
class EngineConfig:
    schedule: ScheduleConfig = ScheduleConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    tridir: TriDirConfig = TriDirConfig()
    loss: LossConfig = LossConfig()
    optim: OptimConfig = OptimConfig()
    train: TrainConfig = TrainConfig()
    synthetic: SyntheticSpec = SyntheticSpec()
    paths: PathsConfig = PathsConfig()
    seed: int = 0
    deterministic: bool = True

    def validate(self) -> "EngineConfig":
        s = self.schedule
        if s.T < 1 or not 0.0 < s.beta_start <= s.beta_end < 1.0:
            raise ValueError(f"invalid schedule {s}")
        if s.sigma_rule not in SIGMA_RULES:
            raise ValueError(f"unknown sigma rule {s.sigma_rule!r}")
        if s.ddim_steps < 1 or not 0.0 <= s.eta <= 1.0:
            raise ValueError(f"invalid DDIM settings steps={s.ddim_steps} eta={s.eta}")
        self.denoiser.validate()
        if self.denoiser.max_t != s.T:
            raise ValueError(f"denoiser.max_t ({self.denoiser.max_t}) must equal schedule.T ({s.T})")
        self.tridir.validate()
        if self.loss.wavelet_levels < 1:
            raise ValueError("loss.wavelet_levels must be >= 1")
        if self.optim.stage2_decay != "linear":
            raise ValueError(f"unsupported stage-2 decay {self.optim.stage2_decay!r}")
        if self.optim.lr < 0:
            raise ValueError("optim.lr must be non-negative")
        t = self.train
        if t.stage1_steps < 0 or t.stage2_epochs < 0 or t.batch_size < 1 or t.checkpoint_every < 1:
            raise ValueError(f"invalid training settings {t}")
        self.synthetic.validate()
        if self.synthetic.frames != self.denoiser.n_intermediate + 2:
            raise ValueError(
                f"synthetic frames ({self.synthetic.frames}) must equal n_intermediate + 2 "
                f"({self.denoiser.n_intermediate + 2})"
            )
        if tuple(self.synthetic.size) != tuple(self.denoiser.frame_size):
            raise ValueError("synthetic.size must equal denoiser.frame_size")
        m = 2**self.loss.wavelet_levels
        if self.synthetic.depth % m or any(n % m for n in self.synthetic.size):
            raise ValueError(f"synthetic depth and size must be divisible by 2**wavelet_levels = {m}")
        return self


def _build(cls, doc: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return doc
    if not isinstance(doc, dict):
        raise ValueError(f"{where or 'config'}: expected an object, got {type(doc).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ValueError(f"unknown config key(s) at {where or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        typ = hints[key]
        path = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(typ):
            kwargs[key] = _build(typ, value, path)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(doc: dict) -> EngineConfig:
    return _build(EngineConfig, doc, "").validate()


def load_config(path) -> EngineConfig:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def save_config(cfg: EngineConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2))


def replace(cfg: EngineConfig, **sections) -> EngineConfig:
    """Copy of ``cfg`` with whole sections or nested fields swapped.

    ``replace(cfg, train={"stage1_steps": 10})`` updates one field of one
    section; dataclass values replace the section wholesale.
    """
    changes = {}
    for name, value in sections.items():
        if isinstance(value, dict):
            changes[name] = dataclasses.replace(getattr(cfg, name), **value)
        else:
            changes[name] = value
    return dataclasses.replace(cfg, **changes).validate()


__all__ = [
    "EngineConfig", "LossConfig", "OptimConfig", "PathsConfig", "ScheduleConfig", "TrainConfig",
    "config_from_dict", "config_to_dict", "load_config", "replace", "save_config",
]
