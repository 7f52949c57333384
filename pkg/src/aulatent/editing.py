"""The editing algebra on multi-level latents.

One trainable editor per edited level j:

  * encode:   level vector w^j  ->  (gates, intensities, embedding)
  * normalize: subtract every attribute's contribution from the embedding,
    leaving a canonical zero-intensity status
  * condition: add new attribute contributions, each a direction row scaled
    by the requested intensity
  * decode:   embedding -> latent residual for that level

Editing a latent stack is then two residual steps: removal of the source
status followed by addition of the target status; levels beyond the edited
range pass through bit-exactly.

Gates are soft by default (a bounded squashing into [0, 1], differentiable);
hard 0.5-threshold selection is available as an inference-time flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


class ShapeMismatchError(ValueError):
    """Contract violation: an operand's dimensions disagree with the module."""


@dataclass
class MultiLevelLatent:
    """Stack of level-wise latent vectors, shape (levels_total, latent_dim)."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ShapeMismatchError(f"latent stack must be 2-D, got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ValueError("latent stack contains non-finite entries")

    @property
    def levels_total(self) -> int:
        return self.values.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.values.shape[1]


@dataclass
class AUConditions:
    """Editing conditions: per-attribute existence gates and intensities."""

    existence: torch.Tensor  # (N,) in [0, 1]
    intensity: torch.Tensor  # (N,) reals; ordinal {0..5} at training time only

    def __post_init__(self):
        self.existence = torch.as_tensor(self.existence, dtype=torch.get_default_dtype()) \
            if not torch.is_tensor(self.existence) else self.existence
        self.intensity = torch.as_tensor(self.intensity, dtype=torch.get_default_dtype()) \
            if not torch.is_tensor(self.intensity) else self.intensity
        if self.existence.shape != self.intensity.shape:
            raise ShapeMismatchError("existence and intensity must share a shape")
        if torch.any(self.existence < 0) or torch.any(self.existence > 1):
            raise ValueError("existence gates must lie in [0, 1]")
        if not (torch.isfinite(self.existence).all() and torch.isfinite(self.intensity).all()):
            raise ValueError("conditions contain non-finite entries")

    @property
    def n_attrs(self) -> int:
        return self.existence.shape[-1]

    @classmethod
    def from_intensities(cls, intensity) -> "AUConditions":
        a = torch.as_tensor(intensity, dtype=torch.get_default_dtype())
        return cls((a != 0).to(a.dtype), a)

    def assert_on_training_grid(self) -> None:
        ok = torch.all((self.intensity >= 0) & (self.intensity <= 5)
                       & (self.intensity == self.intensity.round()))
        if not ok:
            raise ValueError("training-time intensities must lie on the ordinal grid {0..5}")


@dataclass
class EmbeddingTriple:
    """Output of one level's encoder: soft gates, estimated intensities, and
    the attribute embedding. Fields may carry leading batch dimensions."""

    gates: torch.Tensor        # (..., N) in [0, 1]
    intensities: torch.Tensor  # (..., N)
    embedding: torch.Tensor    # (..., embed_dim)


class DirectionMatrix(nn.Module):
    """N trainable editing directions, one per attribute, width embed_dim."""

    def __init__(self, n_attrs: int, embed_dim: int):
        super().__init__()
        rows = torch.empty(n_attrs, embed_dim)
        nn.init.orthogonal_(rows)  # unit-norm, disentangled starting directions
        self.rows = nn.Parameter(rows)

    @property
    def n_attrs(self) -> int:
        return self.rows.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.rows.shape[1]

    def row(self, i: int) -> torch.Tensor:
        return self.rows[i]


class LevelEditor(nn.Module):
    """Encoder/decoder pair owning one level of the latent stack.

    Modules never share parameters across levels. The decoder's final layer
    is zero-initialized so an untrained editor is the identity edit.
    """

    def __init__(self, level_index: int, latent_dim: int, embed_dim: int,
                 n_attrs: int, hidden: int = 64):
        super().__init__()
        self.level_index = level_index
        self.latent_dim = latent_dim
        self.embed_dim = embed_dim
        self.n_attrs = n_attrs
        # two parallel readouts: the status estimates train against the
        # label space while the embedding serves the image losses, so they
        # get separate trunks instead of competing for shared features
        self.enc_trunk = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.Tanh(),
            nn.Linear(hidden, hidden), nn.Tanh(),
        )
        self.est_trunk = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.Tanh(),
            nn.Linear(hidden, hidden), nn.Tanh(),
        )
        self.head_gates = nn.Linear(hidden, n_attrs)
        self.head_intensities = nn.Linear(hidden, n_attrs)
        self.head_embedding = nn.Linear(hidden, embed_dim)
        # decoder inputs carry intensity-scaled direction displacements whose
        # magnitude grows with the requested edit; saturating activations
        # here flatten the response to conditions, so the decoder uses SiLU
        self.dec = nn.Sequential(
            nn.Linear(embed_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, latent_dim),
        )
        nn.init.zeros_(self.dec[-1].weight)
        nn.init.zeros_(self.dec[-1].bias)

    def encode(self, w: torch.Tensor) -> EmbeddingTriple:
        if w.shape[-1] != self.latent_dim:
            raise ShapeMismatchError(
                f"level {self.level_index} expects width {self.latent_dim}, got {w.shape[-1]}")
        if not torch.isfinite(w).all():
            raise ValueError("level vector contains non-finite entries")
        h = self.enc_trunk(w)
        e = self.est_trunk(w)
        return EmbeddingTriple(
            gates=torch.sigmoid(self.head_gates(e)),
            intensities=self.head_intensities(e),
            embedding=self.head_embedding(h),
        )

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.embed_dim:
            raise ShapeMismatchError(
                f"level {self.level_index} expects embedding width {self.embed_dim}, got {z.shape[-1]}")
        if not torch.isfinite(z).all():
            raise ValueError("embedding contains non-finite entries")
        return self.dec(z)


def encode_level(module: LevelEditor, w: torch.Tensor) -> EmbeddingTriple:
    return module.encode(w)


def decode_residual(module: LevelEditor, z: torch.Tensor) -> torch.Tensor:
    return module.decode(z)


def _condition_sum(gates: torch.Tensor, intensities: torch.Tensor,
                   directions: DirectionMatrix, hard_gates: bool) -> torch.Tensor:
    if gates.shape[-1] != directions.n_attrs:
        raise ShapeMismatchError(
            f"{gates.shape[-1]} gates vs {directions.n_attrs} direction rows")
    g = (gates > 0.5).to(gates.dtype) if hard_gates else gates
    return (intensities * g) @ directions.rows


def normalize_embedding(triple: EmbeddingTriple, directions: DirectionMatrix,
                        hard_gates: bool = False) -> torch.Tensor:
    """Subtract all gated attribute contributions: the canonical status."""
    return triple.embedding - _condition_sum(triple.gates, triple.intensities,
                                             directions, hard_gates)


def apply_conditions(z_normalized: torch.Tensor, cond, directions: DirectionMatrix,
                     hard_gates: bool = False) -> torch.Tensor:
    """Add new gated attribute contributions onto a normalized embedding.

    `cond` is an AUConditions or a plain (gates, intensities) pair; the
    latter lets level-wise pseudo-labels drive the same update.
    """
    if isinstance(cond, AUConditions):
        gates, intensities = cond.existence, cond.intensity
    else:
        gates, intensities = cond
    if z_normalized.shape[-1] != directions.embed_dim:
        raise ShapeMismatchError(
            f"embedding width {z_normalized.shape[-1]} vs directions {directions.embed_dim}")
    return z_normalized + _condition_sum(gates, intensities, directions, hard_gates)


def edit_latents(latents: torch.Tensor, removals: torch.Tensor,
                 additions: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Two-step edit of a latent stack.

    latents: (..., L, D); removals/additions: (..., M, D) with M <= L.
    Returns (neutralized, edited). Edited rows are computed as
    w + (addition - removal) so that addition == removal restores the source
    row bit-exactly; rows beyond M are copied unchanged.
    """
    values = latents.values if isinstance(latents, MultiLevelLatent) else latents
    if removals.shape != additions.shape:
        raise ShapeMismatchError("removal and addition residual stacks must match")
    m = removals.shape[-2]
    if m > values.shape[-2] or removals.shape[-1] != values.shape[-1]:
        raise ShapeMismatchError(
            f"residuals {tuple(removals.shape)} incompatible with latents {tuple(values.shape)}")
    neutral = values.clone()
    neutral[..., :m, :] = values[..., :m, :] - removals
    edited = values.clone()
    edited[..., :m, :] = values[..., :m, :] + (additions - removals)
    return neutral, edited
