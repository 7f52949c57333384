"""Annotation by coordinate descent over the condition space.

With every network weight frozen, the conditions are the only free variable:
for each AU in ascending index order, all six ordinal levels are probed while
the others stay fixed, and the level minimizing the blended search loss
(pixel term plus pretrained-function term, reusing the training loss weights)
is kept. The sweep repeats `passes` times. Ties break toward the lower level,
and the accepted loss never increases, so the procedure is deterministic and
monotone per sweep.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .config import LossWeights, MAX_LEVEL, N_ATTRS
from .editing import AUConditions
from .estimators import SiameseEstimator, estimate_absolute
from .labels import encode_labels


@dataclass
class AnnotationResult:
    conditions: AUConditions
    trace: list[dict] = field(default_factory=list)  # one entry per AU sweep
    passes: int = 0
    probes: int = 0
    final_loss: float = math.inf

    @property
    def intensities(self) -> np.ndarray:
        return self.conditions.intensity.numpy()


GenerateFn = Callable[[np.ndarray], np.ndarray]


def make_model_generator(model, image: np.ndarray) -> GenerateFn:
    """Closure that edits `image` to probed conditions via the frozen model.

    The source encoding and removal residuals are cached; each probe only
    re-runs the label encoder, the condition step, and the generator.
    """
    from .editing import apply_conditions, edit_latents, normalize_embedding
    from .nets import images_to_tensor

    with torch.no_grad():
        lat = model.inversion.encode(images_to_tensor(image))
        triples, _, _ = model.encode_levels(lat)
        removals = model.removal_residuals(triples)
        normalized = [normalize_embedding(t, model.directions) for t in triples]

    def generate(intensities: np.ndarray) -> np.ndarray:
        cond = AUConditions.from_intensities(
            torch.as_tensor(intensities, dtype=torch.float32))
        with torch.no_grad():
            level_cond = encode_labels(model.codec, (cond.existence[None], cond.intensity[None]))
            additions = torch.stack([
                model.editors[j].decode(apply_conditions(
                    normalized[j], (level_cond.gates[:, j], level_cond.intensities[:, j]),
                    model.directions))
                for j in range(model.dims.edited_levels)
            ], dim=-2)
            _, lat_t = edit_latents(lat, removals, additions)
            return model.inversion.generate(lat_t).squeeze().numpy()

    return generate


def _search_loss(generated: np.ndarray, target: np.ndarray, weights: LossWeights,
                 estimator: SiameseEstimator | None, anchor: np.ndarray | None,
                 target_estimate: torch.Tensor | None) -> float:
    pixel = float(np.linalg.norm(generated.astype(np.float64) - target))
    loss = weights.pixel * pixel
    if estimator is not None:
        est = estimate_absolute(estimator, generated, anchor)
        loss += weights.pretrained_fn * float((est - target_estimate).norm()) / est.shape[-1]
    return loss


def annotate(generate_fn: GenerateFn, image: np.ndarray, passes: int = 2,
             weights: LossWeights | None = None,
             estimator: SiameseEstimator | None = None,
             anchor: np.ndarray | None = None) -> AnnotationResult:
    """Recover the AU conditions whose generated image best matches `image`.

    `generate_fn` maps an intensity vector to an image; wrap a frozen model
    with `make_model_generator` or supply any oracle. Probe count is exactly
    passes x N x 6 generator evaluations (passes = 0 performs the single
    initial evaluation needed to report the loss of the all-zero conditions).
    """
    if passes < 0:
        raise ValueError("passes must be >= 0")
    weights = weights or LossWeights()
    image = np.asarray(image, dtype=np.float32)
    target_estimate = None
    if estimator is not None:
        if anchor is None:
            raise ValueError("annotation with an estimator needs an anchor image")
        with torch.no_grad():
            target_estimate = estimate_absolute(estimator, image, anchor)

    current = np.zeros(N_ATTRS)
    result = AnnotationResult(AUConditions.from_intensities(torch.zeros(N_ATTRS)))

    def probe_loss(candidate: np.ndarray) -> float:
        generated = generate_fn(candidate)
        return _search_loss(generated, image, weights, estimator, anchor, target_estimate)

    if passes == 0:
        result.final_loss = probe_loss(current)
        return result

    current_loss = math.inf
    for sweep in range(passes):
        for au in range(N_ATTRS):
            losses: dict[int, float] = {}
            for level in range(MAX_LEVEL + 1):
                candidate = current.copy()
                candidate[au] = level
                loss = probe_loss(candidate)
                result.probes += 1
                if not math.isfinite(loss):
                    warnings.warn(f"non-finite search loss at AU {au} level {level}; "
                                  "probe discarded")
                    continue
                losses[level] = loss
            if losses:
                best_level = min(losses, key=lambda lv: (losses[lv], lv))
                if losses[best_level] <= current_loss:
                    current[au] = best_level
                    current_loss = losses[best_level]
            result.trace.append({"pass": sweep, "au": au, "level": int(current[au]),
                                 "loss": current_loss})
        result.passes = sweep + 1

    result.final_loss = current_loss
    result.conditions = AUConditions.from_intensities(
        torch.as_tensor(current, dtype=torch.float32))
    return result
