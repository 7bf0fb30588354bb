"""Run configuration: one INI-style key/value file covering every knob.

Sections ``[network]``, ``[loss]``, ``[sampling]``, ``[optim]``, ``[run]``.
Unknown keys are an error so typos don't silently fall back to defaults.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .losses import LossConfig
from .network import NetworkConfig
from .roialign import RoiSpec
from .sampling import SamplingConfig

MODES = ("offline", "online")


@dataclass
class OptimConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-4
    lr_drop_at: int = 30_000
    lr_low: float = 1e-6
    iterations: int = 80_000
    warmup: int = 0          # linear ramp from lr/warmup to lr over the first iterations
    clip_norm: float = 0.0   # per-layer gradient-norm cap; 0 disables


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    mode: str = "online"
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 500
    train_dir: str = ""
    out_dir: str = "runs/default"
    synth_train: int = 200   # scenes generated when train_dir is empty
    synth_eval: int = 200
    synth_seed: int = 0      # generator seed for those scenes, independent of the run seed

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def full(cls, **kw):
        """Full-length schedule: 1e-5 -> 1e-6 after 30k, 80k iterations."""
        return cls(**kw)

    @classmethod
    def desk(cls, **kw):
        """CPU-scale schedule: 2,000 iterations on 64 px synthetic scenes."""
        kw.setdefault("optim", OptimConfig(lr=0.2, weight_decay=1e-4, lr_drop_at=1500, lr_low=0.02,
                                           iterations=2000, clip_norm=0.5))
        return cls(**kw)


_SECTIONS = {"network": NetworkConfig, "loss": LossConfig, "sampling": SamplingConfig, "optim": OptimConfig}
_RUN_KEYS = ("mode", "seed", "augment", "checkpoint_every", "train_dir", "out_dir", "synth_train", "synth_eval", "synth_seed")


def _parse(text, like):
    if isinstance(like, bool):
        low = text.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(_parse(t, like[0]) for t in text.replace(",", " ").split())
    return text.strip()


def _fmt(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def load_config(path, base=None):
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    cfg = base or RunConfig.desk()
    parts = {}
    for section in cp.sections():
        items = dict(cp.items(section))
        if section == "run":
            for k, v in items.items():
                if k not in _RUN_KEYS:
                    raise ValueError(f"{path}: unknown key [run] {k}")
                parts[k] = _parse(v, getattr(cfg, k))
            continue
        if section == "roi":
            known = {f.name for f in fields(RoiSpec)}
            roi = cfg.network.roi
            for k, v in items.items():
                if k not in known:
                    raise ValueError(f"{path}: unknown key [roi] {k}")
                roi = replace(roi, **{k: _parse(v, getattr(roi, k))})
            cfg = replace(cfg, network=replace(cfg.network, roi=roi))
            continue
        if section not in _SECTIONS:
            raise ValueError(f"{path}: unknown section [{section}]")
        obj = getattr(cfg, section)
        known = {f.name for f in fields(obj)}
        upd = {}
        for k, v in items.items():
            if k not in known or k == "roi":
                raise ValueError(f"{path}: unknown key [{section}] {k}")
            upd[k] = _parse(v, getattr(obj, k))
        cfg = replace(cfg, **{section: replace(obj, **upd)})
    return replace(cfg, **parts)


def dump_config(cfg, path=None):
    cp = configparser.ConfigParser()
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        cp[section] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj) if f.name != "roi"}
    cp["roi"] = {f.name: _fmt(getattr(cfg.network.roi, f.name)) for f in fields(RoiSpec)}
    cp["run"] = {k: _fmt(getattr(cfg, k)) for k in _RUN_KEYS}
    if path is None:
        import io
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()
    with open(Path(path), "w") as fh:
        cp.write(fh)
    return None
