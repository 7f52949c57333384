"""Metrics and experiment protocols.

The editing protocol mirrors the paper-style evaluation at toy scale: every
test frame supplies target conditions, a different frame of the same subject
is edited toward them, and the held-out estimator reads the result back.
Agreement is scored per AU with ICC(3,1) (two-way mixed, single rater,
consistency; the intended targets and the estimates act as k = 2 raters)
plus MSE; the removal-only output is scored against all-zero targets.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import (AU6_INDEX, AU12_INDEX, AU25_INDEX, AU_NAMES, Config,
                     EstimatorConfig, N_ATTRS, stage_seed)
from .estimators import SiameseEstimator, estimate_absolute, train_estimator
from .nets import images_to_tensor
from .toyface.dataset import ToyDataset, subject_identity_of
from .toyface.render import FaceState, mouth_open_mass, render


def icc31(x, y, with_flag: bool = False):
    """ICC(3,1): two-way mixed model, single rater, consistency, k = 2.

    Degenerate inputs (zero total variance, or a vanishing denominator)
    return 0.0 with the degenerate flag set instead of propagating NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("icc31 needs two equal-length 1-D vectors")
    n = x.size
    if n < 2:
        raise ValueError("icc31 needs at least two targets")

    data = np.stack([x, y], axis=1)
    k = 2
    grand = data.mean()
    rows = data.mean(axis=1)
    cols = data.mean(axis=0)
    bms = k * ((rows - grand) ** 2).sum() / (n - 1)
    # residual sum of squares computed directly (not by subtraction) so that
    # identical raters give an exact zero and therefore an exact ICC of 1.0
    resid = data - rows[:, None] - cols[None, :] + grand
    ems = (resid ** 2).sum() / ((n - 1) * (k - 1))
    denom = bms + (k - 1) * ems
    if data.var() == 0.0 or denom == 0.0:
        return (0.0, True) if with_flag else 0.0
    value = float((bms - ems) / denom)
    return (value, False) if with_flag else value


@dataclass
class MetricsReport:
    per_au_icc: dict[str, float]
    per_au_mse: dict[str, float]
    per_au_neutral_mse: dict[str, float]
    icc_average: float
    mse_average: float
    neutral_mse_average: float
    identity_distance_mean: float
    neutral_identity_distance_mean: float
    image_mse: float
    perceptual_distance: float
    degenerate_aus: list[str]
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, prefix: str | Path) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{prefix}.json").write_text(json.dumps(self.to_json_dict(), indent=2))
        lines = ["metric," + ",".join(AU_NAMES) + ",Avg"]
        for name, per_au, avg in (("ICC", self.per_au_icc, self.icc_average),
                                  ("MSE", self.per_au_mse, self.mse_average),
                                  ("MSE_neutral", self.per_au_neutral_mse,
                                   self.neutral_mse_average)):
            vals = ",".join(f"{per_au[au]:.4f}" for au in AU_NAMES)
            lines.append(f"{name},{vals},{avg:.4f}")
        Path(f"{prefix}.csv").write_text("\n".join(lines) + "\n")


def _subject_anchor_frames(split) -> dict[int, int]:
    """Designated anchor frame per subject: lowest-index all-zero frame."""
    anchors = {}
    for sid in split.subjects:
        zeros = split.zero_frame_indices(sid)
        anchors[sid] = min(zeros) if zeros else None
    return anchors


def _anchor_images(model, split, anchor_mode: str) -> dict[int, np.ndarray]:
    """Per-subject anchor for the Siamese estimator: a real zero-intensity
    frame, or the model's own neutralization of the designated frame."""
    frames = _subject_anchor_frames(split)
    out = {}
    for sid, idx in frames.items():
        if anchor_mode == "real":
            if idx is None:
                warnings.warn(f"subject {sid} has no zero-intensity frame; "
                              "falling back to a synthetic anchor")
            else:
                out[sid] = split.images[idx]
                continue
        base = idx if idx is not None else split.indices_of_subject(sid)[0]
        out[sid] = model.neutralize_images(split.images[base][None])[0]
    return out


def _subject_centroids(identity_model, split, per_subject: int = 40) -> dict[int, torch.Tensor]:
    cents = {}
    with torch.no_grad():
        for sid in split.subjects:
            idx = split.indices_of_subject(sid)[:per_subject]
            e = identity_model(images_to_tensor(split.images[idx])).mean(dim=0)
            cents[sid] = e / e.norm()
    return cents


def eval_editing(model, hest: SiameseEstimator, dataset: ToyDataset,
                 anchor_mode: str = "synthetic", condition_source: str = "labels",
                 limit: int | None = None, batch_size: int = 64,
                 hard_gates: bool = False) -> MetricsReport:
    """Edit every test frame's conditions onto a sibling frame and score the
    result with the held-out estimator."""
    if anchor_mode not in ("real", "synthetic"):
        raise ValueError(f"unknown anchor_mode {anchor_mode!r}")
    if condition_source not in ("labels", "target_image"):
        raise ValueError(f"unknown condition_source {condition_source!r}")

    split = dataset.test
    anchors = _anchor_images(model, split, anchor_mode)
    centroids = _subject_centroids(model.identity, split)

    # target frame t <- conditions; source frame = next frame of the subject
    jobs = []
    for sid in split.subjects:
        idx = split.indices_of_subject(sid)
        for pos, t in enumerate(idx):
            s = idx[(pos + 1) % len(idx)]
            if s == t:
                continue
            jobs.append((sid, t, s))
    if limit is not None:
        jobs = jobs[:limit]

    targets = np.zeros((len(jobs), N_ATTRS))
    estimates = np.zeros((len(jobs), N_ATTRS))
    neutral_estimates = np.zeros((len(jobs), N_ATTRS))
    id_dist = np.zeros(len(jobs))
    id_dist_neutral = np.zeros(len(jobs))
    img_mse = np.zeros(len(jobs))
    feat_dist = np.zeros(len(jobs))

    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start:start + batch_size]
        sids = [c[0] for c in chunk]
        tgt_idx = [c[1] for c in chunk]
        src_idx = [c[2] for c in chunk]
        src_images = split.images[src_idx]
        tgt_labels = np.stack([split.records[i].intensities for i in tgt_idx])

        if condition_source == "labels":
            res = model.edit_images(src_images, torch.as_tensor(tgt_labels, dtype=torch.float32),
                                    hard_gates=hard_gates)
        else:
            res = model.transfer_images(src_images, split.images[tgt_idx])
        edited, neutral = res["edited"], res["neutral"]

        anchor_stack = images_to_tensor(np.stack([anchors[s] for s in sids]))
        with torch.no_grad():
            est = hest(images_to_tensor(edited), anchor_stack).numpy()
            est_n = hest(images_to_tensor(neutral), anchor_stack).numpy()
            emb_e = model.identity(images_to_tensor(edited))
            emb_n = model.identity(images_to_tensor(neutral))
            feats_e = model.inversion.perceptual_features(images_to_tensor(edited))

        # ideal edit: target intensities on the source frame's nuisance/pose
        ideal = np.stack([
            render(FaceState(subject_identity_of(dataset, sid),
                             lab, split.records[si].nuisance, split.records[si].pose))
            for sid, lab, si in zip(sids, tgt_labels, src_idx)
        ])
        with torch.no_grad():
            feats_ideal = model.inversion.perceptual_features(images_to_tensor(ideal))

        rows = slice(start, start + len(chunk))
        targets[rows] = tgt_labels
        estimates[rows] = est
        neutral_estimates[rows] = est_n
        cents = torch.stack([centroids[s] for s in sids])
        id_dist[rows] = (1.0 - (emb_e * cents).sum(-1)).numpy()
        id_dist_neutral[rows] = (1.0 - (emb_n * cents).sum(-1)).numpy()
        img_mse[rows] = ((edited - ideal) ** 2).mean(axis=(1, 2))
        feat_dist[rows] = (feats_e - feats_ideal).norm(dim=1).numpy()

    per_icc, per_mse, per_neutral, degenerate = {}, {}, {}, []
    for a, au in enumerate(AU_NAMES):
        value, flag = icc31(targets[:, a], estimates[:, a], with_flag=True)
        per_icc[au] = value
        if flag:
            degenerate.append(au)
        per_mse[au] = float(((estimates[:, a] - targets[:, a]) ** 2).mean())
        per_neutral[au] = float((neutral_estimates[:, a] ** 2).mean())

    return MetricsReport(
        per_au_icc=per_icc,
        per_au_mse=per_mse,
        per_au_neutral_mse=per_neutral,
        icc_average=float(np.mean(list(per_icc.values()))),
        mse_average=float(np.mean(list(per_mse.values()))),
        neutral_mse_average=float(np.mean(list(per_neutral.values()))),
        identity_distance_mean=float(id_dist.mean()),
        neutral_identity_distance_mean=float(id_dist_neutral.mean()),
        image_mse=float(img_mse.mean()),
        perceptual_distance=float(feat_dist.mean()),
        degenerate_aus=degenerate,
        metadata={
            "anchor_mode": anchor_mode,
            "condition_source": condition_source,
            "n_frames": len(jobs),
            "model_hash": model.model_hash,
            "dataset_hash": dataset.dataset_hash,
        },
    )


def smile_protocol(model, hest: SiameseEstimator, dataset: ToyDataset,
                   levels: int = 8, max_level: float = 5.0) -> dict:
    """Joint cheek-raiser + lip-corner-puller sweep across evenly spaced
    levels; identity drift and manipulation efficiency."""
    if levels < 2:
        raise ValueError("the sweep needs at least two levels")
    split = dataset.test
    anchors = _anchor_images(model, split, "synthetic")
    anchor_frames = _subject_anchor_frames(split)
    sweep = np.linspace(0.0, max_level, levels)

    per_source_range = []
    consecutive_dists = []
    level_means = np.zeros(levels)
    for sid in split.subjects:
        base_idx = anchor_frames[sid]
        if base_idx is None:
            base_idx = split.indices_of_subject(sid)[0]
        source = split.images[base_idx][None].repeat(levels, axis=0)
        conds = np.zeros((levels, N_ATTRS), dtype=np.float32)
        conds[:, AU6_INDEX] = sweep
        conds[:, AU12_INDEX] = sweep
        res = model.edit_images(source, torch.as_tensor(conds))
        edited = res["edited"]
        with torch.no_grad():
            anchor = images_to_tensor(anchors[sid][None]).repeat(levels, 1, 1, 1)
            est = hest(images_to_tensor(edited), anchor).numpy()
            emb = model.identity(images_to_tensor(edited))
        joint = est[:, [AU6_INDEX, AU12_INDEX]].mean(axis=1)
        per_source_range.append(joint.max() - joint.min())
        level_means += joint / len(split.subjects)
        cos = (emb[1:] * emb[:-1]).sum(-1).numpy()
        consecutive_dists.extend((1.0 - cos).tolist())

    e_d = float(np.mean(consecutive_dists))
    mean_range = float(np.mean(per_source_range))
    rho = 0.0 if e_d == 0.0 else mean_range / e_d
    from scipy.stats import spearmanr

    spearman = float(spearmanr(sweep, level_means).statistic)
    return {"E_d": e_d, "rho": rho, "mean_range": mean_range,
            "level_means": level_means.tolist(), "spearman": spearman}


def lips_part_sweep(model, dataset: ToyDataset, lo: float = -2.0, hi: float = 5.0,
                    points: int = 8, n_sources: int | None = None) -> dict:
    """Extrapolation probe: sweep the lips-part intensity below the training
    grid and read back the mouth-open pixel statistic."""
    split = dataset.test
    anchor_frames = _subject_anchor_frames(split)
    sources = []
    for sid in split.subjects[:n_sources] if n_sources else split.subjects:
        idx = anchor_frames[sid]
        sources.append(split.images[idx if idx is not None else split.indices_of_subject(sid)[0]])
    sweep = np.linspace(lo, hi, points)
    masses = np.zeros((len(sources), points))
    for s, img in enumerate(sources):
        conds = np.zeros((points, N_ATTRS), dtype=np.float32)
        conds[:, AU25_INDEX] = sweep
        res = model.edit_images(np.stack([img] * points), torch.as_tensor(conds))
        masses[s] = [mouth_open_mass(e) for e in res["edited"]]
    mean_mass = masses.mean(axis=0)
    from scipy.stats import spearmanr

    return {"sweep": sweep.tolist(), "mean_mass": mean_mass.tolist(),
            "spearman": float(spearmanr(sweep, mean_mass).statistic)}


ABLATION_VARIANTS = ("sngl", "dual", "label_mapping",
                     "wo_pixel_perceptual", "wo_pretrained_fn", "wo_identity")


def _variant_config(base: Config, name: str) -> Config:
    from .config import config_from_dict

    cfg = config_from_dict(json.loads(base.to_json()))
    if name == "sngl":
        cfg.training.dual_branch = False
        cfg.training.label_mapping = False
    elif name == "dual":
        cfg.training.label_mapping = False
    elif name == "label_mapping":
        pass  # the full model
    elif name == "wo_pixel_perceptual":
        cfg.weights.pixel = 0.0
        cfg.weights.perceptual = 0.0
    elif name == "wo_pretrained_fn":
        cfg.weights.pretrained_fn = 0.0
    elif name == "wo_identity":
        cfg.weights.identity = 0.0
    else:
        raise ValueError(f"unknown ablation variant {name!r}; "
                         f"known: {ABLATION_VARIANTS}")
    return cfg


def ablation_grid(dataset: ToyDataset, variants: list[str], base_cfg: Config,
                  inversion, estimator, identity, hest,
                  iterations: int | None = None, eval_limit: int | None = 900) -> list[dict]:
    """Train each requested variant with identical seeds and schedules and
    emit one comparison row per variant."""
    from .training import AUEditModel, train

    rows = []
    for name in variants:
        cfg = _variant_config(base_cfg, name)
        model = AUEditModel(cfg.dims, label_mapping=cfg.training.label_mapping,
                            dual_branch=cfg.training.dual_branch)
        model.attach(inversion, estimator, identity)
        train(model, dataset, cfg, out_dir=None, iterations=iterations)
        report = eval_editing(model, hest, dataset, anchor_mode=base_cfg.eval.anchor_mode,
                              limit=eval_limit)
        rows.append({
            "variant": name,
            "target_mse": report.mse_average,
            "target_icc": report.icc_average,
            "target_id": report.identity_distance_mean,
            "neutral_mse": report.neutral_mse_average,
            "neutral_id": report.neutral_identity_distance_mean,
        })
    return rows


def ablation_rows_to_csv(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    header = ",".join(rows[0])
    lines = [header] + [",".join(str(r[k]) for k in rows[0]) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def estimator_icc(est: SiameseEstimator, dataset: ToyDataset, limit: int = 600) -> float:
    """Held-out estimation quality: per-AU ICC of absolute estimates against
    ground truth, averaged (real zero anchors)."""
    split = dataset.test
    pools = {sid: split.zero_frame_indices(sid) for sid in split.subjects}
    idx = [i for i, r in enumerate(split.records) if pools[r.subject_id]][:limit]
    rng = np.random.Generator(np.random.PCG64(1))
    preds, truths = [], []
    with torch.no_grad():
        for start in range(0, len(idx), 64):
            chunk = idx[start:start + 64]
            anchors = np.stack([split.images[rng.choice(pools[split.records[i].subject_id])]
                                for i in chunk])
            preds.append(est(images_to_tensor(split.images[chunk]),
                             images_to_tensor(anchors)).numpy())
            truths.append(np.stack([split.records[i].intensities for i in chunk]))
    pred = np.concatenate(preds)
    truth = np.concatenate(truths)
    values = [icc31(truth[:, a], pred[:, a]) for a in range(N_ATTRS)]
    return float(np.mean(values))


def augmentation_study(model, dataset: ToyDataset, backbone_tag: str = "resnet-ish",
                       seed: int = 0, n_synthetic: int = 1200,
                       est_cfg: EstimatorConfig | None = None,
                       mode: str = "edited") -> dict:
    """Estimator trained on real frames vs real + model-edited frames.

    mode "edited": synthetic frames are random-condition edits labeled by
    their conditions; mode "duplicate": synthetic frames are verbatim copies
    of real frames (control).
    """
    est_cfg = est_cfg or EstimatorConfig(steps=1500)
    baseline = train_estimator(dataset, backbone_tag, seed, est_cfg)
    baseline_icc = estimator_icc(baseline, dataset)

    if n_synthetic == 0:
        augmented = train_estimator(dataset, backbone_tag, seed, est_cfg,
                                    extra_images=None, extra_labels=None)
        return {"baseline_icc": baseline_icc,
                "augmented_icc": estimator_icc(augmented, dataset)}

    split = dataset.train
    rng = np.random.Generator(np.random.PCG64(seed + 17))
    src_idx = rng.integers(0, len(split.records), size=n_synthetic)
    if mode == "duplicate":
        extra_images = split.images[src_idx].copy()
        extra_labels = [(split.records[i].subject_id, split.records[i].intensities)
                        for i in src_idx]
    elif mode == "edited":
        from .toyface.dataset import _sample_intensities

        conds = np.stack([_sample_intensities(rng, _dataset_cfg(dataset))
                          for _ in range(n_synthetic)]).astype(np.float32)
        extra_images = np.zeros_like(split.images[src_idx])
        for start in range(0, n_synthetic, 64):
            sl = slice(start, min(start + 64, n_synthetic))
            res = model.edit_images(split.images[src_idx[sl]], torch.as_tensor(conds[sl]))
            extra_images[sl] = res["edited"]
        extra_labels = [(split.records[i].subject_id, conds[k])
                        for k, i in enumerate(src_idx)]
    else:
        raise ValueError(f"unknown augmentation mode {mode!r}")

    augmented = train_estimator(dataset, backbone_tag, seed, est_cfg,
                                extra_images=extra_images, extra_labels=extra_labels)
    return {"baseline_icc": baseline_icc, "augmented_icc": estimator_icc(augmented, dataset)}


def _dataset_cfg(dataset: ToyDataset):
    from .config import DatasetConfig

    return DatasetConfig(**dataset.meta["config"])


def export_contact_sheet(model, dataset: ToyDataset, frame_indices: list[int],
                         path: str | Path, split: str = "test") -> None:
    """PNG grid with columns source | inverted | removal | edited | target."""
    from .io_utils import image_to_png_bytes

    sp = dataset.split(split)
    tiles = []
    for t in frame_indices:
        rec = sp.records[t]
        idx = sp.indices_of_subject(rec.subject_id)
        s = idx[(idx.index(t) + 1) % len(idx)]
        src = sp.images[s]
        with torch.no_grad():
            inverted = model.inversion.generate(
                model.inversion.encode(images_to_tensor(src[None]))).squeeze().numpy()
        res = model.edit_images(src[None], torch.as_tensor(rec.intensities[None],
                                                           dtype=torch.float32))
        tiles.append(np.concatenate([src, inverted, res["neutral"][0],
                                     res["edited"][0], sp.images[t]], axis=1))
    sheet = np.concatenate(tiles, axis=0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(image_to_png_bytes(sheet))
