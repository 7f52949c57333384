"""The label 'latent space': global N-attribute conditions mapped onto M
level-wise pseudo-labels, and level-wise estimates decoded back.

The encoder and decoder are separate fully connected maps; their losses are
computed independently (estimates are decoded, not the encoder's own output)
so the encoder cannot collapse to copying its input. The gate channel of the
encoded level conditions passes through the same [0, 1] squashing the level
editors use, keeping the two spaces comparable; the decoder emits raw
estimates of those values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .editing import AUConditions, ShapeMismatchError


@dataclass
class LevelConditions:
    """Per-level gates and intensities, each of shape (..., M, N)."""

    gates: torch.Tensor
    intensities: torch.Tensor

    def __post_init__(self):
        if self.gates.shape != self.intensities.shape:
            raise ShapeMismatchError("level gates and intensities must share a shape")

    @property
    def levels(self) -> int:
        return self.gates.shape[-2]

    @property
    def n_attrs(self) -> int:
        return self.gates.shape[-1]


class DecodedLabels(NamedTuple):
    """Raw decoded estimates of global conditions (not range-validated)."""

    gates: torch.Tensor
    intensities: torch.Tensor


GATE_LOGIT_SCALE = 4.0  # maps gates {0,1} to logits -2/+2 on the skip path


class LabelCodec(nn.Module):
    """Fully connected encoder (2N -> M x 2N) and decoder (M x 2N -> 2N).

    The encoder carries a broadcast skip connection with a zero-initialized
    refinement MLP: level-wise pseudo-labels start as exact copies of the
    global conditions and learn per-level deviations, which keeps the
    conditioning informative from the first training step.
    """

    def __init__(self, n_attrs: int, levels: int, hidden: int = 128):
        super().__init__()
        self.n_attrs = n_attrs
        self.levels = levels
        self.enc = nn.Sequential(
            nn.Linear(2 * n_attrs, hidden), nn.SiLU(),
            nn.Linear(hidden, levels * 2 * n_attrs),
        )
        nn.init.zeros_(self.enc[-1].weight)
        nn.init.zeros_(self.enc[-1].bias)
        self.dec = nn.Sequential(
            nn.Linear(levels * 2 * n_attrs, hidden), nn.SiLU(),
            nn.Linear(hidden, 2 * n_attrs),
        )

    @property
    def trainable(self) -> bool:
        return True


class BroadcastCodec(nn.Module):
    """Label mapping turned off: conditions are broadcast identically to every
    level and estimates are decoded by averaging over levels. No parameters."""

    def __init__(self, n_attrs: int, levels: int):
        super().__init__()
        self.n_attrs = n_attrs
        self.levels = levels

    @property
    def trainable(self) -> bool:
        return False


def _as_pair(cond) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(cond, AUConditions):
        return cond.existence, cond.intensity
    return cond


def encode_labels(codec, cond) -> LevelConditions:
    """Global conditions -> level-wise pseudo-labels (gate channel squashed)."""
    gates, intensities = _as_pair(cond)
    if gates.shape[-1] != codec.n_attrs:
        raise ShapeMismatchError(f"{gates.shape[-1]} attributes vs codec {codec.n_attrs}")
    if isinstance(codec, BroadcastCodec):
        shape = gates.shape[:-1] + (codec.levels, codec.n_attrs)
        return LevelConditions(gates.unsqueeze(-2).expand(shape).clone(),
                               intensities.unsqueeze(-2).expand(shape).clone())
    x = torch.cat([gates, intensities], dim=-1)
    out = codec.enc(x).reshape(*x.shape[:-1], codec.levels, 2 * codec.n_attrs)
    raw_gates, delta_intens = out.split(codec.n_attrs, dim=-1)
    gate_logits = GATE_LOGIT_SCALE * (gates.unsqueeze(-2) - 0.5) + raw_gates
    level_intens = intensities.unsqueeze(-2) + delta_intens
    return LevelConditions(torch.sigmoid(gate_logits), level_intens)


def decode_labels(codec, level_cond: LevelConditions) -> DecodedLabels:
    """Level-wise estimates -> estimated global conditions (raw outputs)."""
    if level_cond.n_attrs != codec.n_attrs or level_cond.levels != codec.levels:
        raise ShapeMismatchError(
            f"level conditions {level_cond.levels}x{level_cond.n_attrs} vs "
            f"codec {codec.levels}x{codec.n_attrs}")
    if isinstance(codec, BroadcastCodec):
        return DecodedLabels(level_cond.gates.mean(dim=-2), level_cond.intensities.mean(dim=-2))
    x = torch.cat([level_cond.gates, level_cond.intensities], dim=-1)
    out = codec.dec(x.flatten(-2))
    gates, intensities = out.split(codec.n_attrs, dim=-1)
    return DecodedLabels(gates, intensities)


def label_loss_terms(codec, estimated_levelwise: LevelConditions,
                     source_cond) -> tuple[torch.Tensor, torch.Tensor]:
    """(decoded-label term, level-wise term), each averaged per the loss.

    The level-wise term compares the editors' estimates against the encoded
    pseudo-labels; the decoded term compares the decoded estimates against
    the true global labels. Leading batch dimensions are averaged.
    """
    gates, intensities = _as_pair(source_cond)
    encoded = encode_labels(codec, (gates, intensities))
    decoded = decode_labels(codec, estimated_levelwise)
    decoded_term = (F.mse_loss(decoded.gates, gates)
                    + F.mse_loss(decoded.intensities, intensities))
    level_term = (F.mse_loss(estimated_levelwise.gates, encoded.gates)
                  + F.mse_loss(estimated_levelwise.intensities, encoded.intensities))
    return decoded_term, level_term


def label_loss(codec, estimated_levelwise: LevelConditions, source_cond) -> torch.Tensor:
    decoded_term, level_term = label_loss_terms(codec, estimated_levelwise, source_cond)
    return decoded_term + level_term
