"""The frozen inversion pair: a multi-level autoencoder standing in for a
pretrained encoder/generator.

The encoder maps a 64 x 64 face to `levels_total` latent vectors; the
generator consumes them coarse-to-fine, one level modulating each stage of
upsampling, so the levels carry different semantic granularities and
level-wise editing is meaningful. After pretraining against a reconstruction
gate the pair is frozen for all downstream use.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import Dims, InversionConfig
from ..nets import ModulatedStage, images_to_tensor


class FrozenPairError(RuntimeError):
    pass


def _gradient_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    dax = a[..., :, 1:] - a[..., :, :-1]
    dbx = b[..., :, 1:] - b[..., :, :-1]
    day = a[..., 1:, :] - a[..., :-1, :]
    dby = b[..., 1:, :] - b[..., :-1, :]
    return F.mse_loss(dax, dbx) + F.mse_loss(day, dby)


class InversionGateError(RuntimeError):
    pass


class _Encoder(nn.Module):
    def __init__(self, dims: Dims):
        super().__init__()
        self.conv = nn.ModuleList([
            nn.Conv2d(1, 16, 3, 2, 1),    # 32
            nn.Conv2d(16, 32, 3, 2, 1),   # 16
            nn.Conv2d(32, 48, 3, 2, 1),   # 8
            nn.Conv2d(48, 64, 3, 2, 1),   # 4
        ])
        flat = 64 * (dims.image_size // 16) ** 2
        self.fc1 = nn.Linear(flat, 256)
        self.fc2 = nn.Linear(256, dims.levels_total * dims.latent_dim)
        # pin the code distribution to zero mean / unit variance per dim:
        # otherwise reconstruction hides all content in tiny deviations
        # around a large constant vector, unusable for latent editing
        self.norm = nn.BatchNorm1d(dims.levels_total * dims.latent_dim, affine=False)
        self.dims = dims

    def forward(self, x: torch.Tensor, return_features: bool = False):
        h = x
        feats = []
        for conv in self.conv:
            h = F.silu(conv(h))
            feats.append(h)
        h = h.flatten(1)
        out = self.norm(self.fc2(F.silu(self.fc1(h))))
        lat = out.view(-1, self.dims.levels_total, self.dims.latent_dim)
        if return_features:
            return lat, feats
        return lat


class _Generator(nn.Module):
    def __init__(self, dims: Dims):
        super().__init__()
        c0 = dims.latent_dim  # 32 by default
        base = dims.image_size // 8  # three upsampling stages follow
        self.const = nn.Parameter(torch.randn(1, c0, base, base) * 0.1)
        d = dims.latent_dim
        self.stages = nn.ModuleList([
            ModulatedStage(c0, 32, d, upsample=False),          # 8
            ModulatedStage(32, 24, d, upsample=True),           # 16
            ModulatedStage(24, 16, d, upsample=True),           # 32
            ModulatedStage(16, 12, d, upsample=True),           # 64
            ModulatedStage(12, 8, d, upsample=False),           # 64 refine
            ModulatedStage(8, 8, d, upsample=False, kernel=1),  # 64 mix
        ])
        if len(self.stages) != dims.levels_total:
            raise ValueError("generator stages must match levels_total")
        self.to_image = nn.Conv2d(8, 1, 1)

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        h = self.const.expand(latents.shape[0], -1, -1, -1)
        for j, stage in enumerate(self.stages):
            h = stage(h, latents[:, j])
        return torch.sigmoid(self.to_image(h))


class ToyInversionPair(nn.Module):
    """Encoder E and generator G; `freeze()` makes both immutable."""

    def __init__(self, dims: Dims | None = None):
        super().__init__()
        self.dims = dims or Dims()
        self.encoder = _Encoder(self.dims)
        self.generator = _Generator(self.dims)
        self.frozen = False

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def generate(self, latents: torch.Tensor) -> torch.Tensor:
        return self.generator(latents)

    def perceptual_features(self, images: torch.Tensor) -> torch.Tensor:
        """Frozen mid-level encoder features used as the perceptual extractor."""
        _, feats = self.encoder(images, return_features=True)
        return feats[2].flatten(1)  # the 8x8 map

    def freeze(self) -> "ToyInversionPair":
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def training_step(self, optimizer: torch.optim.Optimizer, batch: torch.Tensor,
                      grad_weight: float = 4.0, code_noise: float = 0.15) -> float:
        """One reconstruction step.

        The loss adds an image-gradient term (plain MSE underweights the thin
        action-unit markings, whose energy lives mostly in local gradients),
        and gaussian noise is injected on the code so reconstruction-relevant
        information must be encoded at unit scale rather than hiding in tiny
        deviations that downstream latent editing could never exploit.
        """
        if self.frozen:
            raise FrozenPairError("inversion pair is frozen; parameter updates rejected")
        optimizer.zero_grad()
        code = self.encode(batch)
        if code_noise > 0:
            code = code + code_noise * torch.randn_like(code)
        recon = self.generate(code)
        loss = F.mse_loss(recon, batch) + grad_weight * _gradient_mse(recon, batch)
        loss.backward()
        optimizer.step()
        return float(loss.detach())

    def reconstruction_mse(self, images: np.ndarray, batch_size: int = 128) -> float:
        """Mean per-pixel squared error of G(E(I)) over an image stack."""
        total, count = 0.0, 0
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                batch = images_to_tensor(images[i:i + batch_size])
                recon = self.generate(self.encode(batch))
                total += float(((recon - batch) ** 2).sum())
                count += batch.numel()
        return total / count


def pretrain_inversion_pair(dataset, cfg: InversionConfig | None = None,
                            seed: int = 7, dims: Dims | None = None,
                            steps: int | None = None) -> ToyInversionPair:
    """Train the autoencoder on the train split, check the held-out
    reconstruction gate, then freeze. Deterministic given the seed."""
    cfg = cfg or InversionConfig()
    steps = steps if steps is not None else cfg.steps
    if len(dataset.train) == 0:
        raise ValueError("dataset is empty")

    torch.manual_seed(seed)
    pair = ToyInversionPair(dims)
    optimizer = torch.optim.Adam(pair.parameters(), lr=cfg.lr)
    rng = np.random.Generator(np.random.PCG64(seed))
    images = dataset.train.images

    for step in range(steps):
        idx = rng.integers(0, len(images), size=cfg.batch_size)
        pair.training_step(optimizer, images_to_tensor(images[idx]),
                           grad_weight=cfg.grad_weight, code_noise=cfg.code_noise)

    held_out = dataset.test.images[:512]
    mse = pair.reconstruction_mse(held_out)
    if mse > cfg.recon_gate:
        raise InversionGateError(
            f"held-out reconstruction MSE {mse:.5f} exceeds gate {cfg.recon_gate}; "
            f"steps={steps} lr={cfg.lr} batch={cfg.batch_size}")
    pair.gate_mse = mse
    return pair.freeze()


def save_inversion(path, pair: ToyInversionPair, seed: int, config_hash: str = "") -> None:
    from ..io_utils import save_checkpoint

    save_checkpoint(path, {
        "state_dict": pair.state_dict(),
        "dims": vars(pair.dims).copy(),
        "gate_mse": getattr(pair, "gate_mse", None),
    }, {"seed": seed, "config_hash": config_hash,
        "metric_gates": {"reconstruction_mse": getattr(pair, "gate_mse", None)}})


def load_inversion(path) -> ToyInversionPair:
    from ..config import Dims
    from ..io_utils import load_checkpoint

    blob = load_checkpoint(path)
    pair = ToyInversionPair(Dims(**blob["dims"]))
    pair.load_state_dict(blob["state_dict"])
    pair.gate_mse = blob.get("gate_mse")
    return pair.freeze()
