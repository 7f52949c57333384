"""Experiment configuration: nested dataclasses with JSON round-trip and hashing.

Everything that controls a run lives here so that (config, seed) fully
determines every artifact. Defaults are the desk-scale toy settings; the
paper-scale dimensions (18 x 512 latents, 11 edited levels, 30k iterations)
stay reachable by editing a JSON config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

# The 12 DISFA-annotated action units, in canonical column order.
AU_NAMES = (
    "AU1", "AU2", "AU4", "AU5", "AU6", "AU9",
    "AU12", "AU15", "AU17", "AU20", "AU25", "AU26",
)
AU_ROLES = (
    "inner brow raiser", "outer brow raiser", "brow lowerer",
    "upper lid raiser", "cheek raiser", "nose wrinkler",
    "lip corner puller", "lip corner depressor", "chin raiser",
    "lip stretcher", "lips part", "jaw drop",
)
N_ATTRS = len(AU_NAMES)
MAX_LEVEL = 5  # ordinal intensity grid is {0..5}

AU25_INDEX = AU_NAMES.index("AU25")  # lips part, used by extrapolation checks
AU6_INDEX = AU_NAMES.index("AU6")
AU12_INDEX = AU_NAMES.index("AU12")


@dataclass
class Dims:
    """Sizes of the latent space and the editing modules."""

    n_attrs: int = N_ATTRS
    levels_total: int = 6      # rows of the multi-level latent
    latent_dim: int = 32       # per-level width
    edited_levels: int = 4     # M: only levels < M are touched by edits
    embed_dim: int = 48        # width of the attribute embedding z
    editor_hidden: int = 64    # hidden width of per-level encoder/decoder MLPs
    codec_hidden: int = 128    # hidden width of the label codec
    image_size: int = 64


@dataclass
class DatasetConfig:
    train_subjects: int = 18
    test_subjects: int = 9
    frames_per_subject: int = 400
    imbalance: str = "disfa-like"   # or "uniform"
    zero_frame_fraction: float = 0.6
    level_decay: float = 0.55       # geometric decay of nonzero level frequency
    max_active_aus: int = 4


@dataclass
class InversionConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1.2e-3         # >= 2e-3 saturates the decoder at full scale
    recon_gate: float = 0.01   # mean per-pixel squared error on held-out frames
    grad_weight: float = 4.0   # image-gradient term keeps thin strokes sharp
    code_noise: float = 0.15   # denoising: forces information to O(1) code scale
    base_channels: int = 32


@dataclass
class EstimatorConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1.5e-3
    mse_gate: float = 0.15     # held-out absolute-intensity MSE, squared levels


@dataclass
class IdentityConfig:
    steps: int = 1200
    batch_size: int = 32
    lr: float = 2e-3
    embed_dim: int = 32
    margin: float = 0.2
    scale: float = 16.0
    separation_gate: float = 0.3   # within-subject minus cross-subject cosine


@dataclass
class LossWeights:
    """Weights of the five training losses (defaults from the training recipe)."""

    pixel: float = 8.0
    perceptual: float = 1.0
    pretrained_fn: float = 125.0
    identity: float = 20.0
    label: float = 20.0

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


@dataclass
class TrainConfig:
    iterations: int = 8000
    batch_size: int = 2
    grad_accum: int = 1
    lr: float = 1e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    cycle: bool = True
    log_every: int = 50
    checkpoint_every: int = 2000
    dual_branch: bool = True        # False: target conditions go on the source embedding
    label_mapping: bool = True      # False: broadcast global labels to every level


@dataclass
class EvalConfig:
    anchor_mode: str = "synthetic"  # or "real"
    hard_gates: bool = False        # threshold gates at 0.5 instead of soft gating


@dataclass
class Config:
    seed: int = 7
    dims: Dims = field(default_factory=Dims)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    estimator_fpre: EstimatorConfig = field(default_factory=EstimatorConfig)
    estimator_hest: EstimatorConfig = field(default_factory=EstimatorConfig)
    identity: IdentityConfig = field(default_factory=IdentityConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @property
    def config_hash(self) -> str:
        return sha256_of_json(dataclasses.asdict(self))


def _from_dict(cls: type, data: dict[str, Any]) -> Any:
    import typing

    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints.get(f.name)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            kwargs[f.name] = _from_dict(hint, value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any]) -> Config:
    unknown = set(data) - {f.name for f in dataclasses.fields(Config)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return _from_dict(Config, data)


def load_config(path: str | Path) -> Config:
    return config_from_dict(json.loads(Path(path).read_text()))


def sha256_of_json(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# Deterministic per-stage seed derivation. Stage names are fixed so that the
# pretrained-function estimator and the held-out estimator can never share a
# stream (they must stay architecturally and stochastically independent).
_STAGE_OFFSETS = {
    "dataset": 1,
    "inversion": 2,
    "estimator_fpre": 3,
    "estimator_hest": 4,
    "identity": 5,
    "editor": 6,
    "eval": 7,
    "augmentation": 8,
    "annotation": 9,
}


def stage_seed(base_seed: int, stage: str) -> int:
    if stage not in _STAGE_OFFSETS:
        raise KeyError(f"unknown stage {stage!r}")
    return base_seed * 1000 + _STAGE_OFFSETS[stage]
