"""Small convolutional building blocks shared by the toy generator/encoder
and the estimator trunks. Everything is sized for minutes-scale CPU training."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ModulatedStage(nn.Module):
    """One generator stage: optional 2x upsample, 3x3 conv, then a FiLM
    modulation (per-channel scale and shift) driven by one latent level."""

    def __init__(self, in_ch: int, out_ch: int, level_dim: int,
                 upsample: bool = False, kernel: int = 3):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2)
        self.affine = nn.Linear(level_dim, 2 * out_ch)
        nn.init.zeros_(self.affine.bias)

    def forward(self, h: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv(h)
        scale, shift = self.affine(w).chunk(2, dim=-1)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return F.silu(h)


class ConvTrunk(nn.Module):
    """Plain stack of stride-2 conv blocks ("vgg-ish"); exposes tap points."""

    def __init__(self, channels: tuple[int, ...] = (12, 24, 32, 48), taps: int = 3):
        super().__init__()
        blocks, in_ch = [], 1
        for ch in channels:
            blocks.append(nn.Sequential(nn.Conv2d(in_ch, ch, 3, 2, 1), nn.SiLU()))
            in_ch = ch
        self.blocks = nn.ModuleList(blocks)
        self.taps = taps
        self.out_dim = channels[-1]

    def forward(self, x: torch.Tensor, return_taps: bool = False):
        tap_maps = []
        h = x
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < self.taps:
                tap_maps.append(h)
        feat = h.mean(dim=(2, 3))
        if return_taps:
            return feat, tap_maps
        return feat


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1)
        self.skip = (nn.Identity() if stride == 1 and in_ch == out_ch
                     else nn.Conv2d(in_ch, out_ch, 1, stride))

    def forward(self, x):
        h = F.silu(self.conv1(x))
        h = self.conv2(h)
        return F.silu(h + self.skip(x))


class ResTrunk(nn.Module):
    """Six residual blocks with skip connections ("resnet-ish")."""

    def __init__(self, widths: tuple[int, ...] = (16, 16, 32, 32, 48, 48), taps: int = 3):
        super().__init__()
        self.stem = nn.Conv2d(1, widths[0], 3, 2, 1)
        blocks, in_ch = [], widths[0]
        for i, ch in enumerate(widths):
            stride = 2 if i in (0, 2, 4) else 1
            blocks.append(ResidualBlock(in_ch, ch, stride))
            in_ch = ch
        self.blocks = nn.ModuleList(blocks)
        self.taps = taps
        self.out_dim = widths[-1]

    def forward(self, x: torch.Tensor, return_taps: bool = False):
        tap_maps = []
        h = F.silu(self.stem(x))
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < self.taps:
                tap_maps.append(h)
        feat = h.mean(dim=(2, 3))
        if return_taps:
            return feat, tap_maps
        return feat


class OddHead(nn.Module):
    """Bias-free tanh MLP: an odd function, so head(-d) == -head(d) exactly.

    Feeding it feature differences makes Siamese outputs antisymmetric by
    construction, down to the bit level.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden, bias=False)
        self.fc2 = nn.Linear(hidden, out_dim, bias=False)

    def forward(self, d: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.tanh(self.fc1(d)))


def images_to_tensor(images, device=None) -> torch.Tensor:
    """(n, H, W) or (H, W) numpy array in [0,1] -> (n, 1, H, W) float tensor."""
    import numpy as np

    arr = np.asarray(images, dtype="float32")
    if arr.ndim == 2:
        arr = arr[None]
    t = torch.from_numpy(arr).unsqueeze(1)
    return t.to(device) if device is not None else t
