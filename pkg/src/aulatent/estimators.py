"""Siamese AU-intensity estimators and the identity embedder.

Both estimator roles share one design: a convolutional trunk f applied to
the target and the anchor image, and a bias-free odd regression head on the
feature difference, head(f(target) - f(anchor)). Identical inputs give an
exact zero vector and swapping the pair negates the output bit-exactly.
With a zero-intensity anchor the output reads as absolute intensities.

The training-time role ("vgg-ish", 4 plain conv blocks) and the held-out
evaluation role ("resnet-ish", 6 residual blocks) are architecturally
distinct and never share parameters or a seed.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EstimatorConfig, IdentityConfig, N_ATTRS
from .nets import ConvTrunk, OddHead, ResTrunk, images_to_tensor

BACKBONES = ("vgg-ish", "resnet-ish")


class SiameseEstimator(nn.Module):
    def __init__(self, backbone_tag: str = "vgg-ish", n_attrs: int = N_ATTRS,
                 tap_count: int = 3):
        super().__init__()
        if backbone_tag not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone_tag!r}")
        self.backbone_tag = backbone_tag
        self.tap_count = tap_count
        self.trunk = (ConvTrunk(taps=tap_count) if backbone_tag == "vgg-ish"
                      else ResTrunk(taps=tap_count))
        self.head = OddHead(self.trunk.out_dim, n_attrs)
        self.held_out_mse: float | None = None

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.trunk(images)

    def forward(self, target: torch.Tensor, anchor: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(target) - self.trunk(anchor))


def _as_batch(images) -> torch.Tensor:
    if torch.is_tensor(images):
        return images if images.dim() == 4 else images.unsqueeze(0)
    return images_to_tensor(images)


def estimate_pair(model: SiameseEstimator, target, anchor) -> torch.Tensor:
    """Estimated AU intensity difference between target and anchor."""
    return model(_as_batch(target), _as_batch(anchor)).squeeze(0)


def estimate_absolute(model: SiameseEstimator, target, anchor) -> torch.Tensor:
    """Absolute intensities, assuming the anchor has every AU deactivated
    (the caller's responsibility, flagged in dataset metadata)."""
    return estimate_pair(model, target, anchor)


def feature_taps(model: SiameseEstimator, images) -> list[torch.Tensor]:
    """The K intermediate activation maps of the trunk, shallowest first."""
    _, taps = model.trunk(_as_batch(images), return_taps=True)
    return taps


def _anchor_pools(split) -> dict[int, list[int]]:
    pools = {}
    skipped = []
    for sid in split.subjects:
        zeros = split.zero_frame_indices(sid)
        if zeros:
            pools[sid] = zeros
        else:
            skipped.append(sid)
    if skipped:
        warnings.warn(f"subjects {skipped} have no zero-intensity frame; "
                      "excluded from anchor sampling")
    return pools


def train_estimator(dataset, backbone_tag: str, seed: int,
                    cfg: EstimatorConfig | None = None,
                    extra_images: np.ndarray | None = None,
                    extra_labels: np.ndarray | None = None,
                    inversion=None) -> SiameseEstimator:
    """Train one Siamese estimator on within-subject pairs.

    Anchors are drawn from the same subject's zero-intensity frames, so
    regression targets are the target frame's absolute intensities. Half of
    each batch is drawn from frames with a strong activation (intensity
    >= 3) so rare high levels don't regress toward the mean. When the frozen
    inversion pair is supplied, half the pairs are swapped for their
    reconstructions, closing the real-vs-generated domain gap the editing
    evaluation reads through.

    `extra_images` with `extra_labels` (a list of (subject_id, intensities))
    appends synthetic frames for augmentation studies; synthetic frames
    reuse their source subject's real anchors.
    """
    cfg = cfg or EstimatorConfig()
    torch.manual_seed(seed)
    model = SiameseEstimator(backbone_tag)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.Generator(np.random.PCG64(seed))

    split = dataset.train
    pools = _anchor_pools(split)
    usable = [i for i, r in enumerate(split.records) if r.subject_id in pools]
    labels = split.intensity_matrix()
    strong = [i for i in usable if labels[i].max() >= 3]

    n_real = len(usable)
    n_extra = 0 if extra_images is None else len(extra_images)

    recon_cache = None
    if inversion is not None:
        # reconstruct the train split once up front; per-batch generator
        # passes would dominate the training time otherwise
        chunks = []
        with torch.no_grad():
            for start in range(0, len(split.images), 256):
                batch = images_to_tensor(split.images[start:start + 256])
                chunks.append(inversion.generate(
                    inversion.encode(batch)).squeeze(1).numpy())
        recon_cache = np.concatenate(chunks)

    for _ in range(cfg.steps):
        t_imgs, a_imgs, y = [], [], []
        for b in range(cfg.batch_size):
            use_recon = recon_cache is not None and rng.random() < 0.5
            bank = recon_cache if use_recon else split.images
            if n_extra and rng.random() < n_extra / (n_real + n_extra):
                k = int(rng.integers(0, n_extra))
                sid, y_vec = extra_labels[k]
                t_imgs.append(extra_images[k])  # synthetic frames stay as-is
                y.append(y_vec)
            else:
                if strong and b % 2 == 0:
                    i = int(rng.choice(strong))
                else:
                    i = usable[int(rng.integers(0, n_real))]
                sid = split.records[i].subject_id
                t_imgs.append(bank[i])
                y.append(labels[i])
            a_imgs.append(bank[rng.choice(pools[sid])])
        pred = model(images_to_tensor(np.stack(t_imgs)),
                     images_to_tensor(np.stack(a_imgs)))
        loss = F.mse_loss(pred, torch.as_tensor(np.stack(y)))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    model.eval()
    model.held_out_mse = held_out_intensity_mse(model, dataset)
    return model


def held_out_intensity_mse(model: SiameseEstimator, dataset, limit: int = 600) -> float:
    """Absolute-intensity MSE on the test split with real zero anchors."""
    split = dataset.test
    pools = _anchor_pools(split)
    idx = [i for i, r in enumerate(split.records) if r.subject_id in pools][:limit]
    rng = np.random.Generator(np.random.PCG64(0))
    errs = []
    with torch.no_grad():
        for start in range(0, len(idx), 64):
            chunk = idx[start:start + 64]
            anchors = [split.images[rng.choice(pools[split.records[i].subject_id])]
                       for i in chunk]
            pred = model(images_to_tensor(split.images[chunk]),
                         images_to_tensor(np.stack(anchors)))
            truth = torch.as_tensor(np.stack([split.records[i].intensities for i in chunk]),
                                    dtype=torch.float32)
            errs.append(((pred - truth) ** 2).mean(dim=1))
    return float(torch.cat(errs).mean())


class IdentityEmbedder(nn.Module):
    """Face -> unit-norm embedding, trained with a cosine-margin objective."""

    def __init__(self, n_subjects: int, embed_dim: int = 32):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(1, 16, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, 2, 1), nn.SiLU(),
            nn.Conv2d(32, 48, 3, 2, 1), nn.SiLU(),
        )
        self.norm = nn.LayerNorm(48)
        self.proj = nn.Linear(48, embed_dim)
        self.prototypes = nn.Parameter(torch.randn(n_subjects, embed_dim))
        self.separation_gap: float | None = None

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.trunk(images).mean(dim=(2, 3)))
        # fixed gain keeps the pre-normalization magnitude O(1): the cosine
        # is then well conditioned for gradient checks at finite step sizes
        e = 2.0 * self.proj(h)
        return F.normalize(e, dim=-1)


def embed(model: IdentityEmbedder, images) -> torch.Tensor:
    with torch.no_grad():
        return model(_as_batch(images)).squeeze(0)


def train_identity_embedder(dataset, seed: int,
                            cfg: IdentityConfig | None = None) -> IdentityEmbedder:
    cfg = cfg or IdentityConfig()
    split = dataset.train
    if len(split.subjects) < 2:
        raise ValueError("identity training needs at least two subjects")
    torch.manual_seed(seed)
    model = IdentityEmbedder(len(split.subjects), cfg.embed_dim)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.Generator(np.random.PCG64(seed))
    sid_to_class = {sid: k for k, sid in enumerate(split.subjects)}
    class_ids = np.array([sid_to_class[r.subject_id] for r in split.records])

    for _ in range(cfg.steps):
        idx = rng.integers(0, len(split.records), size=cfg.batch_size)
        emb = model(images_to_tensor(split.images[idx]))
        protos = F.normalize(model.prototypes, dim=-1)
        cos = emb @ protos.t()
        target = torch.as_tensor(class_ids[idx])
        margin = torch.zeros_like(cos)
        margin[torch.arange(len(idx)), target] = cfg.margin
        loss = F.cross_entropy(cfg.scale * (cos - margin), target)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    model.eval()
    gap = identity_separation_gap(model, dataset)
    model.separation_gap = gap
    if gap < cfg.separation_gate:
        warnings.warn(f"identity separation gap {gap:.3f} below gate {cfg.separation_gate}")
    return model


def identity_separation_gap(model: IdentityEmbedder, dataset,
                            per_subject: int = 30) -> float:
    """Mean within-subject cosine minus mean cross-subject cosine on the
    held-out split (unseen subjects)."""
    split = dataset.test
    embs = {}
    with torch.no_grad():
        for sid in split.subjects:
            idx = split.indices_of_subject(sid)[:per_subject]
            embs[sid] = model(images_to_tensor(split.images[idx]))
    within, cross = [], []
    sids = list(embs)
    for i, sid in enumerate(sids):
        e = embs[sid]
        sims = e @ e.t()
        n = len(e)
        within.append(float((sims.sum() - sims.trace()) / (n * (n - 1))))
        for other in sids[i + 1:]:
            cross.append(float((e @ embs[other].t()).mean()))
    return float(np.mean(within) - np.mean(cross))


def save_estimator(path, model: SiameseEstimator, seed: int, config_hash: str = "") -> None:
    from .io_utils import save_checkpoint

    save_checkpoint(path, {
        "state_dict": model.state_dict(),
        "backbone_tag": model.backbone_tag,
        "held_out_mse": model.held_out_mse,
    }, {"backbone_tag": model.backbone_tag, "seed": seed, "config_hash": config_hash,
        "metric_gates": {"held_out_mse": model.held_out_mse}})


def load_estimator(path) -> SiameseEstimator:
    from .io_utils import load_checkpoint

    blob = load_checkpoint(path)
    model = SiameseEstimator(blob["backbone_tag"])
    model.load_state_dict(blob["state_dict"])
    model.held_out_mse = blob.get("held_out_mse")
    model.eval()
    return model


def save_identity(path, model: IdentityEmbedder, seed: int, config_hash: str = "") -> None:
    from .io_utils import save_checkpoint

    save_checkpoint(path, {
        "state_dict": model.state_dict(),
        "n_subjects": model.prototypes.shape[0],
        "embed_dim": model.prototypes.shape[1],
        "separation_gap": model.separation_gap,
    }, {"seed": seed, "config_hash": config_hash,
        "metric_gates": {"separation_gap": model.separation_gap}})


def load_identity(path) -> IdentityEmbedder:
    from .io_utils import load_checkpoint

    blob = load_checkpoint(path)
    model = IdentityEmbedder(blob["n_subjects"], blob["embed_dim"])
    model.load_state_dict(blob["state_dict"])
    model.separation_gap = blob.get("separation_gap")
    model.eval()
    return model
