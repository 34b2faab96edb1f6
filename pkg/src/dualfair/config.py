"""Run configuration and its flat ``key = value`` text format.

A config file is a list of ``key = value`` lines; ``#`` starts a comment.
Values are typed on read: ``true``/``false``, integers, floats (written with
``repr`` so they round-trip exactly), ``none``, otherwise bare strings.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ParseError, SpecError

SHARING_MODES = ("layer-aware", "instance-aware", "combined")


@dataclass
class Dims:
    d_patch: int = 8
    n_patches: int = 16
    d_v: int = 32
    d_t: int = 32
    d_vl: int = 16
    n_vis_layers: int = 4
    n_txt_layers: int = 2
    mlp_ratio: int = 2
    d_k: int = 16
    d_p: int = 16
    proj_hidden: int = 16
    idx_in: int = 16        # branch / layer embedding width (I')
    idx_dim: int = 8        # hypernetwork index width (I)
    idx_hidden: int = 16
    adapter_hidden: int = 6  # h
    weight_std: float = 0.05
    text_embed_norm: float = 10.0
    proj_bias: bool = False


PRESETS = {
    "toy": Dims(),
    "paper": Dims(d_patch=768, n_patches=196, d_v=768, d_t=512, d_vl=512, n_vis_layers=12,
                  n_txt_layers=12, mlp_ratio=4, d_k=64, d_p=128, proj_hidden=512,
                  idx_in=128, idx_dim=32, idx_hidden=128, adapter_hidden=24),
}


@dataclass
class TrainConfig:
    preset: str = "toy"
    lr: float = 5e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 15
    tau: float = 0.1
    alpha: float = 60.0
    phi: float = 0.1
    lam: float = 0.1
    beta: float = 0.5
    delta: float = 1.0
    prompt_len: int = 4
    seed: int = 0
    sharing: str = "combined"
    instance_layer: int = 0          # 0 means the last visual layer
    use_dis: bool = True
    use_hyper: bool = True
    use_attn: bool = True
    use_proj: bool = True
    sa_loss_weight: float = 1.0
    stop_grad_anchors: bool = False
    share_index_mlp: bool = True
    encoder_seed: int = 1234
    ta_names: str = "benign,malignant"
    sa_names: str = "female,male"

    def dims(self) -> Dims:
        if self.preset not in PRESETS:
            raise SpecError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        return dataclasses.replace(PRESETS[self.preset])

    @property
    def ta_classes(self) -> list[str]:
        return [s.strip() for s in self.ta_names.split(",") if s.strip()]

    @property
    def sa_classes(self) -> list[str]:
        return [s.strip() for s in self.sa_names.split(",") if s.strip()]

    def validate(self):
        pos = ("lr", "batch_size", "epochs", "tau", "phi", "prompt_len")
        for name in pos:
            if getattr(self, name) <= 0:
                raise SpecError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("weight_decay", "alpha", "lam", "delta", "sa_loss_weight"):
            if getattr(self, name) < 0:
                raise SpecError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.beta <= 1.0:
            raise SpecError(f"beta must lie in [0, 1], got {self.beta}")
        if self.sharing not in SHARING_MODES:
            raise SpecError(f"sharing must be one of {SHARING_MODES}, got {self.sharing!r}")
        L = self.dims().n_vis_layers
        if not 0 <= self.instance_layer <= L:
            raise SpecError(f"instance_layer must be in [0, {L}], got {self.instance_layer}")
        if self.instance_layer == 1:
            raise SpecError("instance_layer must be >= 2 (needs a preceding visual layer)")
        return self

    def resolved_instance_layer(self) -> int:
        return self.instance_layer or self.dims().n_vis_layers


@dataclass
class DataConfig:
    n: int = 1000                    # split 70/10/20 into train/val/ID test
    n_ood: int = 400
    rho: float = 0.9
    ood_rho: float = -1.0            # negative: same as rho
    noise: float = 2.0
    target_scale: float = 1.0
    sensitive_scale: float = 1.0
    p_y: float = 0.5
    rotation_deg: float = 20.0
    offset: float = 0.5
    world_seed: int = 7              # signal directions and shift transform


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train_csv: str = ""
    test_csv: str = ""
    ood_csv: str = ""
    out_dir: str = "runs"
    grid_cells: str = "a,b,d,g,Ours"
    grid_seeds: int = 5

    def to_text(self) -> str:
        lines = ["# dualfair experiment config"]
        for section, obj in (("train", self.train), ("data", self.data)):
            for f in fields(obj):
                lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
        for f in fields(self):
            if f.name in ("train", "data"):
                continue
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{source}: expected 'key = value', got {raw!r}", lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, _parse(value), lineno=lineno, source=source)
        return cfg

    def set(self, key: str, value, lineno=None, source="<config>"):
        target, name = self, key
        if "." in key:
            section, name = key.split(".", 1)
            if section not in ("train", "data"):
                raise ParseError(f"{source}: unknown section {section!r}", lineno)
            target = getattr(self, section)
        names = {f.name: f for f in fields(target)}
        if name not in names or name in ("train", "data"):
            raise ParseError(f"{source}: unknown key {key!r}", lineno)
        setattr(target, name, _coerce(value, type(getattr(target, name)), key, lineno, source))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        cfg = cls.from_text(path.read_text(), source=str(path))
        seed = os.environ.get("FAIRPROMPT_SEED")
        if seed is not None:
            cfg.train.seed = int(seed)
        return cfg

    def save(self, path):
        Path(path).write_text(self.to_text())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    return str(v)


def _parse(s: str):
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "none":
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def _coerce(value, typ, key, lineno, source):
    if typ is bool:
        if not isinstance(value, bool):
            raise ParseError(f"{source}: {key} expects true/false, got {value!r}", lineno)
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParseError(f"{source}: {key} expects an integer, got {value!r}", lineno)
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(f"{source}: {key} expects a number, got {value!r}", lineno)
        return float(value)
    return "" if value is None else str(value)
