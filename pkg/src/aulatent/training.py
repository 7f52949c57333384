"""Dual-branch training of the editing modules.

Per step, on a (source, target, random) triplet:

  source branch   encode each edited level of the source latents and decode
                  the raw embeddings into removal residuals (the source's
                  attribute status);
  target branch   encode the random other-subject image, normalize its
                  embeddings, re-condition them with the level-wise encoded
                  target labels, and decode addition residuals.

Both outcomes are supervised: the edited image against the real target
frame (pixel, perceptual, pretrained-function losses), both generated
images against the target for identity, and the label codec against the
source labels. Every step additionally feeds the edited image back with the
source conditions for a cycled reconstruction pass.

Only the level editors, the direction matrix, and the label codec train;
the inversion pair, the training-time estimator, and the identity embedder
stay frozen throughout.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import Config, Dims, LossWeights, TrainConfig, stage_seed
from .editing import (AUConditions, DirectionMatrix, EmbeddingTriple, LevelEditor,
                      apply_conditions, edit_latents, normalize_embedding)
from .estimators import IdentityEmbedder, SiameseEstimator, feature_taps
from .io_utils import param_hash, save_checkpoint
from .labels import BroadcastCodec, LabelCodec, LevelConditions, encode_labels, label_loss
from .nets import images_to_tensor
from .toyface.inversion import ToyInversionPair


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingTriplet:
    """Indices of one (source, target, random) sample in the train split."""

    source_idx: int
    target_idx: int
    random_idx: int

    def validate(self, split) -> None:
        src, tar, rnd = (split.records[self.source_idx], split.records[self.target_idx],
                         split.records[self.random_idx])
        if src.subject_id != tar.subject_id:
            raise ValueError("source and target frames must share a subject")
        if rnd.subject_id == src.subject_id:
            raise ValueError("the random frame must come from a different subject")
        if not np.any(src.intensities):
            raise ValueError("source frame must have at least one nonzero AU intensity")


class AUEditModel(nn.Module):
    """M independent level editors + direction matrix + label codec, wired to
    frozen dependencies (inversion pair, pretrained estimator, identity
    embedder). Only the first three are trainable."""

    def __init__(self, dims: Dims | None = None, label_mapping: bool = True,
                 dual_branch: bool = True):
        super().__init__()
        self.dims = dims or Dims()
        d = self.dims
        self.editors = nn.ModuleList([
            LevelEditor(j, d.latent_dim, d.embed_dim, d.n_attrs, d.editor_hidden)
            for j in range(d.edited_levels)
        ])
        self.directions = DirectionMatrix(d.n_attrs, d.embed_dim)
        self.codec = (LabelCodec(d.n_attrs, d.edited_levels, d.codec_hidden)
                      if label_mapping else BroadcastCodec(d.n_attrs, d.edited_levels))
        self.dual_branch = dual_branch
        self._deps: dict = {}

    # frozen dependencies live outside the module tree so state_dict() and
    # parameters() cover exactly the trainable pieces
    def attach(self, inversion: ToyInversionPair, estimator: SiameseEstimator,
               identity: IdentityEmbedder) -> "AUEditModel":
        if not inversion.frozen:
            raise ValueError("inversion pair must be frozen before attachment")
        for dep in (estimator, identity):
            dep.eval()
            dep.requires_grad_(False)
        self._deps = {"inversion": inversion, "estimator": estimator, "identity": identity}
        return self

    @property
    def inversion(self) -> ToyInversionPair:
        return self._deps["inversion"]

    @property
    def estimator(self) -> SiameseEstimator:
        return self._deps["estimator"]

    @property
    def identity(self) -> IdentityEmbedder:
        return self._deps["identity"]

    @property
    def model_hash(self) -> str:
        return param_hash(self)

    # ---- level-wise pieces ---------------------------------------------

    def encode_levels(self, latents: torch.Tensor):
        """Run every level editor; returns (triples, gates, intensities)
        where the stacked tensors have shape (..., M, N)."""
        triples = [self.editors[j].encode(latents[..., j, :])
                   for j in range(self.dims.edited_levels)]
        gates = torch.stack([t.gates for t in triples], dim=-2)
        intens = torch.stack([t.intensities for t in triples], dim=-2)
        return triples, gates, intens

    def removal_residuals(self, triples) -> torch.Tensor:
        return torch.stack([self.editors[j].decode(t.embedding)
                            for j, t in enumerate(triples)], dim=-2)

    def addition_residuals(self, donor_triples, level_cond: LevelConditions,
                           hard_gates: bool = False) -> torch.Tensor:
        # The status estimates act as stop-gradient measurements here: they
        # train against the label loss only. Letting image losses backprop
        # through them wrecks their calibration and the normalization never
        # becomes canonical.
        out = []
        for j, t in enumerate(donor_triples):
            frozen = EmbeddingTriple(t.gates.detach(), t.intensities.detach(),
                                     t.embedding)
            z_n = normalize_embedding(frozen, self.directions, hard_gates)
            z_t = apply_conditions(z_n, (level_cond.gates[..., j, :],
                                         level_cond.intensities[..., j, :]),
                                   self.directions, hard_gates)
            out.append(self.editors[j].decode(z_t))
        return torch.stack(out, dim=-2)

    # ---- inference paths -----------------------------------------------

    @torch.no_grad()
    def edit_images(self, images, target_cond: AUConditions | torch.Tensor,
                    hard_gates: bool = False):
        """Inference edit using the source's own normalized embeddings.

        Returns dict with neutral/edited images (numpy, (n, H, W)) and the
        latent stacks.
        """
        if not isinstance(target_cond, AUConditions):
            target_cond = AUConditions.from_intensities(target_cond)
        x = images_to_tensor(images)
        lat = self.inversion.encode(x)
        triples, _, _ = self.encode_levels(lat)
        removals = self.removal_residuals(triples)
        gates = target_cond.existence.expand(lat.shape[0], -1)
        intens = target_cond.intensity.expand(lat.shape[0], -1)
        level_cond = encode_labels(self.codec, (gates, intens))
        additions = self.addition_residuals(triples, level_cond, hard_gates)
        lat_n, lat_t = edit_latents(lat, removals, additions)
        neutral = self.inversion.generate(lat_n).squeeze(1).numpy()
        edited = self.inversion.generate(lat_t).squeeze(1).numpy()
        return {"neutral": neutral, "edited": edited,
                "latents": lat, "latents_neutral": lat_n, "latents_edited": lat_t}

    @torch.no_grad()
    def neutralize_images(self, images):
        x = images_to_tensor(images)
        lat = self.inversion.encode(x)
        triples, _, _ = self.encode_levels(lat)
        removals = self.removal_residuals(triples)
        lat_n, _ = edit_latents(lat, removals, removals)
        return self.inversion.generate(lat_n).squeeze(1).numpy()

    @torch.no_grad()
    def transfer_images(self, source_images, target_images):
        """Expression transfer: the target image's embeddings are decoded
        directly into addition residuals after source removal."""
        xs = images_to_tensor(source_images)
        xt = images_to_tensor(target_images)
        lat_s = self.inversion.encode(xs)
        lat_t = self.inversion.encode(xt)
        triples_s, _, _ = self.encode_levels(lat_s)
        triples_t, _, _ = self.encode_levels(lat_t)
        removals = self.removal_residuals(triples_s)
        additions = self.removal_residuals(triples_t)
        lat_n, lat_e = edit_latents(lat_s, removals, additions)
        neutral = self.inversion.generate(lat_n).squeeze(1).numpy()
        edited = self.inversion.generate(lat_e).squeeze(1).numpy()
        return {"neutral": neutral, "edited": edited}

    def estimated_source_labels(self, images):
        """Decoded global labels estimated from images (inference helper)."""
        from .labels import decode_labels

        with torch.no_grad():
            lat = self.inversion.encode(images_to_tensor(images))
            _, gates, intens = self.encode_levels(lat)
            return decode_labels(self.codec, LevelConditions(gates, intens))


def forward_dual_branch(model: AUEditModel, batch: dict,
                        target_cond: tuple[torch.Tensor, torch.Tensor]):
    """One dual-branch forward pass.

    batch: dict with image tensors I_src, I_tar, I_rnd of shape (B, 1, H, W)
    (I_src may carry gradients during the cycle pass). target_cond is a
    (gates, intensities) pair of (B, N) tensors.
    Returns the generated images plus branch intermediates.
    """
    src_needs_grad = batch["I_src"].requires_grad or batch["I_src"].grad_fn is not None
    with torch.set_grad_enabled(src_needs_grad):
        lat_src = model.inversion.encode(batch["I_src"])
    with torch.no_grad():
        lat_rnd = model.inversion.encode(batch["I_rnd"])

    triples_src, gates_src, intens_src = model.encode_levels(lat_src)
    removals = model.removal_residuals(triples_src)

    level_cond = encode_labels(model.codec, target_cond)
    donor = triples_src
    if model.dual_branch:
        donor, _, _ = model.encode_levels(lat_rnd)
    additions = model.addition_residuals(donor, level_cond)

    lat_n, lat_t = edit_latents(lat_src, removals, additions)
    both = model.inversion.generate(torch.cat([lat_n, lat_t], dim=0))
    img_neutral, img_edited = both.split(lat_n.shape[0], dim=0)

    for name, t in (("neutral latents", lat_n), ("edited latents", lat_t)):
        if not torch.isfinite(t).all():
            raise TrainingDivergedError(f"non-finite {name} in forward pass")

    return {
        "I_tar_hat": img_edited,
        "I_neutral_hat": img_neutral,
        "levelwise_src": LevelConditions(gates_src, intens_src),
        "level_cond_tar": level_cond,
        "lat_src": lat_src,
        "lat_neutral": lat_n,
        "lat_edited": lat_t,
    }


def _per_sample_l2(diff: torch.Tensor) -> torch.Tensor:
    return diff.flatten(1).norm(dim=1)


def compute_losses(model: AUEditModel, outputs: dict, batch: dict,
                   target_cond: tuple[torch.Tensor, torch.Tensor] | None = None,
                   weights: LossWeights | None = None) -> dict:
    """The five loss components and their weighted total (batch means)."""
    weights = weights or LossWeights()
    i_tar = batch["I_tar"]
    i_hat = outputs["I_tar_hat"]
    i_neutral = outputs["I_neutral_hat"]

    pixel = _per_sample_l2(i_hat - i_tar).mean()

    with torch.no_grad():
        feats_tar = model.inversion.perceptual_features(i_tar)
    perceptual = _per_sample_l2(model.inversion.perceptual_features(i_hat) - feats_tar).mean()

    # tap maps are compared at RMS scale so distances are comparable across
    # resolutions and never swamp the estimate-difference term
    taps_hat = feature_taps(model.estimator, i_hat)
    with torch.no_grad():
        taps_tar = feature_taps(model.estimator, i_tar)
    tap_term = sum(_per_sample_l2(a - b).mean() / (a[0].numel() ** 0.5)
                   for a, b in zip(taps_hat, taps_tar))
    tap_term = tap_term / len(taps_hat)
    anchor = batch["I_anchor"]
    est_hat = model.estimator(i_hat, anchor)
    with torch.no_grad():
        est_tar = model.estimator(i_tar, anchor)
    n_attrs = est_hat.shape[-1]
    pretrained_fn = tap_term + _per_sample_l2(est_hat - est_tar).mean() / n_attrs

    with torch.no_grad():
        id_tar = model.identity(i_tar)
    id_hat = model.identity(i_hat)
    id_neutral = model.identity(i_neutral)
    identity = ((1.0 - (id_hat * id_tar).sum(-1))
                + (1.0 - (id_neutral * id_tar).sum(-1))).mean()

    label = label_loss(model.codec, outputs["levelwise_src"], batch["src_cond"])

    total = (weights.pixel * pixel + weights.perceptual * perceptual
             + weights.pretrained_fn * pretrained_fn + weights.identity * identity
             + weights.label * label)
    return {"pixel": pixel, "perceptual": perceptual, "pretrained_fn": pretrained_fn,
            "identity": identity, "label": label, "total": total}


class TripletSampler:
    """Draws training triplets: a source frame with at least one active AU, a
    target frame from the same subject, and a random other-subject frame."""

    def __init__(self, split, seed: int):
        self.split = split
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.nonzero = [i for i, r in enumerate(split.records) if np.any(r.intensities)]
        if not self.nonzero:
            raise ValueError("train split has no frames with active AUs")
        self.anchor_pool = {sid: split.zero_frame_indices(sid) for sid in split.subjects}

    def sample(self, batch_size: int) -> list[TrainingTriplet]:
        out = []
        for _ in range(batch_size):
            src = int(self.rng.choice(self.nonzero))
            sid = self.split.records[src].subject_id
            same = self.split.indices_of_subject(sid)
            tar = src
            while tar == src:
                tar = int(self.rng.choice(same))
            rnd = src
            while self.split.records[rnd].subject_id == sid:
                rnd = int(self.rng.integers(0, len(self.split.records)))
            t = TrainingTriplet(src, tar, rnd)
            t.validate(self.split)
            out.append(t)
        return out

    def batch_tensors(self, triplets: list[TrainingTriplet]) -> dict:
        split = self.split
        src = [t.source_idx for t in triplets]
        tar = [t.target_idx for t in triplets]
        rnd = [t.random_idx for t in triplets]
        anchors = [split.images[int(self.rng.choice(self.anchor_pool[split.records[i].subject_id]))]
                   for i in src]
        lab = split.intensity_matrix()
        src_int = torch.as_tensor(lab[src])
        tar_int = torch.as_tensor(lab[tar])
        return {
            "I_src": images_to_tensor(split.images[src]),
            "I_tar": images_to_tensor(split.images[tar]),
            "I_rnd": images_to_tensor(split.images[rnd]),
            "I_anchor": images_to_tensor(np.stack(anchors)),
            "src_cond": ((src_int != 0).float(), src_int),
            "tar_cond": ((tar_int != 0).float(), tar_int),
        }


def _cycle_weights(weights: LossWeights) -> LossWeights:
    """Cycle-pass weights: image-level reconstruction only. The cycled source
    is a generated image whose true AU content need not match its nominal
    conditions early in training, so supervising the label space there
    poisons the estimate heads."""
    return LossWeights(pixel=weights.pixel, perceptual=weights.perceptual,
                       pretrained_fn=weights.pretrained_fn,
                       identity=weights.identity, label=0.0)


def _cycle_batch(batch: dict, outputs: dict) -> dict:
    """The cycled pass: the edited image goes back in as the source, asked to
    reproduce the original source image under the source conditions."""
    return {
        "I_src": outputs["I_tar_hat"],
        "I_tar": batch["I_src"],
        "I_rnd": batch["I_rnd"],
        "I_anchor": batch["I_anchor"],
        "src_cond": batch["tar_cond"],
        "tar_cond": batch["src_cond"],
    }


def train(model: AUEditModel, dataset, cfg: Config, out_dir: str | Path | None = None,
          iterations: int | None = None) -> dict:
    """Run the training loop; returns {"log": rows, "model_hash": ...}.

    Frozen dependencies are untouched (hash-checked by tests); NaN losses
    halt training and dump the last good checkpoint.
    """
    tc: TrainConfig = cfg.training
    iterations = iterations if iterations is not None else tc.iterations
    seed = stage_seed(cfg.seed, "editor")
    torch.manual_seed(seed)
    sampler = TripletSampler(dataset.train, seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log_rows: list[dict] = []
    last_good: dict | None = None
    components = ("pixel", "perceptual", "pretrained_fn", "identity", "label", "total")

    for step in range(iterations):
        lr_scale = min(1.0, (step + 1) / max(1, tc.warmup_steps))
        for group in optimizer.param_groups:
            group["lr"] = tc.lr * lr_scale

        optimizer.zero_grad()
        accum_losses = None
        try:
            for _ in range(tc.grad_accum):
                batch = sampler.batch_tensors(sampler.sample(tc.batch_size))
                outputs = forward_dual_branch(model, batch, batch["tar_cond"])
                losses = compute_losses(model, outputs, batch, weights=cfg.weights)
                step_total = losses["total"]
                if tc.cycle:
                    cyc = _cycle_batch(batch, outputs)
                    cyc_out = forward_dual_branch(model, cyc, cyc["tar_cond"])
                    cyc_losses = compute_losses(model, cyc_out, cyc,
                                                weights=_cycle_weights(cfg.weights))
                    step_total = step_total + cyc_losses["total"]
                if not torch.isfinite(step_total):
                    breakdown = {k: float(v.detach()) for k, v in losses.items()}
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}: {breakdown}")
                (step_total / tc.grad_accum).backward()
                accum_losses = losses
        except (TrainingDivergedError, ValueError) as exc:
            if isinstance(exc, ValueError) and "non-finite" not in str(exc):
                raise
            if out_dir is not None and last_good is not None:
                save_checkpoint(out_dir / "editor_last_good.pt", last_good,
                                {"iteration": step, "reason": str(exc)})
            raise TrainingDivergedError(f"halted at step {step}: {exc}") from exc
        optimizer.step()

        if step % tc.log_every == 0 or step == iterations - 1:
            row = {"iteration": step}
            row.update({k: float(accum_losses[k].detach()) for k in components})
            log_rows.append(row)
        if step % 100 == 0:
            last_good = copy.deepcopy(model.state_dict())
        if out_dir is not None and tc.checkpoint_every and step > 0 \
                and step % tc.checkpoint_every == 0:
            save_editor(out_dir / f"editor_step{step}.pt", model, cfg, seed, step)

    model.eval()
    if out_dir is not None:
        save_editor(out_dir / "editor.pt", model, cfg, seed, iterations)
        write_training_log(out_dir / "train_log.csv", log_rows)
        plot_loss_curves(out_dir / "loss_curves.png", log_rows)
    return {"log": log_rows, "model_hash": model.model_hash}


def write_training_log(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def plot_loss_curves(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r["iteration"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in rows[0]:
        if key == "iteration":
            continue
        ax.plot(steps, [max(r[key], 1e-8) for r in rows], label=key)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_editor(path: Path, model: AUEditModel, cfg: Config, seed: int,
                iteration: int) -> None:
    state = {
        "state_dict": model.state_dict(),
        "dims": vars(model.dims).copy(),
        "label_mapping": not isinstance(model.codec, BroadcastCodec),
        "dual_branch": model.dual_branch,
    }
    save_checkpoint(path, state, {
        "seed": seed,
        "iteration": iteration,
        "config_hash": cfg.config_hash,
        "model_hash": param_hash(model),
    })


def load_editor(path: str | Path, inversion: ToyInversionPair,
                estimator: SiameseEstimator, identity: IdentityEmbedder) -> AUEditModel:
    from .io_utils import load_checkpoint

    blob = load_checkpoint(path)
    model = AUEditModel(Dims(**blob["dims"]), label_mapping=blob["label_mapping"],
                        dual_branch=blob["dual_branch"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model.attach(inversion, estimator, identity)
