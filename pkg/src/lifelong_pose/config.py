"""Run configuration: nested dataclasses loaded strictly from YAML.

Defaults are the full-scale hyperparameters; ``desk_scale()`` returns the
overrides used by the bundled experiments.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .generators import GeneratorConfig
from .losses import PENALTY_MODES


ESTIMATOR_CRITIC_MODES = ("literal", "adversarial", "off")


class ConfigError(ValueError):
    pass


@dataclass
class CameraConfig:
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 500.0
    cy: float = 500.0
    subject_depth_offset: float = 5000.0


@dataclass
class DomainConfig:
    name: str = "source"
    seed: int = 0
    scale: float = 1.0
    yaw_deg: list = field(default_factory=lambda: [-30.0, 30.0])
    pitch_deg: list = field(default_factory=lambda: [0.0, 0.0])
    noise_px: float = 0.0
    mixture: dict = field(default_factory=lambda: {"walk": 0.5, "reach": 0.5})
    seq_len: int = 125
    n_clips: int = 2000
    eval_clips: int = 500
    # optional pose files instead of synthesis (2D path; 3D labels found through the header)
    train_file: str | None = None
    eval_file: str | None = None


@dataclass
class ModelConfig:
    frames: int = 27
    channels: int = 128
    dilations: list = field(default_factory=lambda: [3, 9])
    activation: str = "relu"
    input_gain: float = 5.0
    disc_hidden: list = field(default_factory=lambda: [128, 128])


@dataclass
class TrainConfig:
    lr_gen_dis: float = 1e-4
    lr_estimator: float = 5e-5
    lr_pretrain: float = 5e-5
    weight_decay: float = 0.01
    batch_size: int = 1024
    epochs_pretrain: int = 40
    epochs_adapt: int = 30
    alpha: float = 0.35
    beta: float = 2.5
    gamma: float = 2.5
    penalty_mode: str = "standard-gp"
    swap_critic_sign: bool = False
    # how the estimator uses the critic term of its objective: "literal" (+gamma, shared with the
    # critic), "adversarial" (-gamma, opposes the critic like the generators) or "off"
    estimator_critic: str = "literal"
    ema_eta: float = 0.99


@dataclass
class DiffusionConfig:
    T: int = 400
    beta_start: float = 1e-4
    beta_end: float = 0.02
    epochs: int = 10
    lr: float = 2e-4
    batch_size: int = 64
    ddim_steps: int = 40
    ddim_eta: float = 0.2
    truncated: bool = False
    pool_size: int = 1024
    hidden: int = 256
    depth: int = 3


@dataclass
class AblationConfig:
    ema: bool = True
    l_dis: bool = True
    l_2d: bool = True
    l_3d: bool = True


@dataclass
class RunConfig:
    name: str = "lifelong"
    seed: int = 0
    skeleton: str | None = None
    camera: CameraConfig = field(default_factory=CameraConfig)
    source: DomainConfig = field(default_factory=DomainConfig)
    targets: list[DomainConfig] = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval_model: str = "anchor"

    def validate(self) -> "RunConfig":
        errs = []

        def need(cond, where, msg):
            if not cond:
                errs.append(f"{where}: {msg}")

        t, m, d = self.train, self.model, self.diffusion
        for name in ("lr_gen_dis", "lr_estimator", "lr_pretrain"):
            need(getattr(t, name) > 0, f"train.{name}", "must be > 0")
        need(t.batch_size > 0, "train.batch_size", "must be > 0")
        need(t.epochs_pretrain >= 0 and t.epochs_adapt >= 0, "train.epochs_*", "must be >= 0")
        need(min(t.alpha, t.beta, t.gamma) >= 0, "train.alpha/beta/gamma", "must be >= 0")
        need(t.penalty_mode in PENALTY_MODES, "train.penalty_mode", f"must be one of {PENALTY_MODES}")
        need(t.estimator_critic in ESTIMATOR_CRITIC_MODES, "train.estimator_critic",
             f"must be one of {ESTIMATOR_CRITIC_MODES}")
        need(0.0 <= t.ema_eta <= 1.0, "train.ema_eta", "must lie in [0, 1]")
        need(m.frames % 2 == 1 and m.frames > 0, "model.frames", "must be a positive odd number")
        need(1 + 2 * (1 + sum(m.dilations)) >= m.frames, "model.dilations", "receptive field smaller than frames")
        need(self.generator.te_frames % 2 == 1, "generator.te_frames", "must be odd")
        need(0 < self.generator.length_range < 1, "generator.length_range", "must lie in (0, 1)")
        need(d.T >= 1 and 0 < d.beta_start < d.beta_end < 1, "diffusion.T/beta", "invalid schedule")
        need(0 <= d.ddim_steps <= d.T, "diffusion.ddim_steps", f"must lie in [0, {d.T}]")
        need(d.ddim_eta >= 0, "diffusion.ddim_eta", "must be >= 0")
        need(d.pool_size > 0 or not self.generator.de, "diffusion.pool_size", "must be > 0 when generator.de is on")
        need(self.eval_model in ("anchor", "live"), "eval_model", "must be 'anchor' or 'live'")
        names = [self.source.name] + [x.name for x in self.targets]
        need(len(set(names)) == len(names), "targets", "domain names must be unique")
        for i, dom in enumerate([self.source, *self.targets]):
            where = "source" if i == 0 else f"targets[{i - 1}]"
            need(dom.scale > 0, f"{where}.scale", "must be > 0")
            need(dom.noise_px >= 0, f"{where}.noise_px", "must be >= 0")
            need(abs(sum(dom.mixture.values()) - 1.0) < 1e-9, f"{where}.mixture", "weights must sum to 1")
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Stable under key reordering; the seed is excluded (it names the run directory separately)."""
        d = self.to_dict()
        d.pop("seed")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def _coerce(tp, value, where):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is list and args and dataclasses.is_dataclass(args[0]):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_build(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        tp = next(a for a in args if a is not type(None))
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and not (isinstance(value, int) and not isinstance(value, bool)):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if tp is bool and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if tp is str and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def config_from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d, "").validate()


def load_config(path) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return config_from_dict(data)


def desk_scale(**overrides) -> RunConfig:
    """Two shifted synthetic target domains at CPU scale (a few minutes per lifelong run)."""
    cfg = RunConfig(
        name="desk",
        source=DomainConfig(name="source", seed=11, yaw_deg=[-30.0, 30.0],
                            mixture={"walk": 0.5, "reach": 0.5}, n_clips=2000, eval_clips=500),
        targets=[
            DomainConfig(name="tg1", seed=23, scale=1.1, yaw_deg=[30.0, 90.0], noise_px=1.0,
                         mixture={"squat": 0.6, "walk": 0.2, "wave": 0.2}, n_clips=2000, eval_clips=500),
            DomainConfig(name="tg2", seed=37, scale=0.9, yaw_deg=[-90.0, -30.0], noise_px=1.0,
                         mixture={"wave": 0.5, "reach": 0.3, "squat": 0.2}, n_clips=2000, eval_clips=500),
        ],
        model=ModelConfig(channels=64),
        train=TrainConfig(batch_size=64, lr_pretrain=1e-3, epochs_pretrain=15, epochs_adapt=4),
        diffusion=DiffusionConfig(epochs=10, pool_size=512, hidden=128),
    )
    d = cfg.to_dict()
    _merge(d, overrides)
    return config_from_dict(d)


def _merge(base: dict, upd: dict) -> dict:
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "mixture":
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def tiny(**overrides) -> RunConfig:
    """Seconds-scale variant of ``desk_scale`` for smoke tests and the step sweep."""
    small = {"n_clips": 300, "eval_clips": 100, "seq_len": 100}
    base = desk_scale()
    d = base.to_dict()
    _merge(d, {
        "name": "tiny",
        "source": small,
        "model": {"channels": 32},
        "generator": {"hidden": 32, "embed_dim": 8, "segment_dim": 4},
        "train": {"epochs_pretrain": 3, "epochs_adapt": 1},
        "diffusion": {"epochs": 2, "pool_size": 64, "hidden": 64, "depth": 2},
    })
    for t in d["targets"]:
        t.update(small)
    _merge(d, overrides)
    return config_from_dict(d)
