"""Local HTTP inference service powering the editor UI.

All endpoints are JSON over HTTP; images travel as base64 PNG. Inference is
read-only over a shared model, so concurrent requests are safe and responses
are deterministic for identical requests.
"""

from __future__ import annotations

import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel, Field, model_validator

from .annotate import annotate, make_model_generator
from .config import Config, N_ATTRS, load_config
from .estimators import SiameseEstimator, load_estimator, load_identity
from .io_utils import b64_to_image, image_to_b64, image_to_png_bytes
from .nets import images_to_tensor
from .toyface.dataset import ToyDataset, load_dataset
from .toyface.inversion import load_inversion
from .training import AUEditModel, load_editor


@dataclass
class ArtifactBundle:
    config: Config
    dataset: ToyDataset
    model: AUEditModel
    hest: SiameseEstimator

    def __post_init__(self):
        self.frame_index: dict[str, tuple[str, int]] = {}
        for split_name in ("train", "test"):
            split = self.dataset.split(split_name)
            for i, rec in enumerate(split.records):
                self.frame_index[rec.frame_id] = (split_name, i)
        self._anchors: dict[int, np.ndarray] = {}

    def frame(self, frame_id: str):
        if frame_id not in self.frame_index:
            raise KeyError(frame_id)
        split_name, i = self.frame_index[frame_id]
        split = self.dataset.split(split_name)
        return split.records[i], split.images[i]

    def subject_anchor(self, subject_id: int) -> np.ndarray:
        """Synthetic per-subject anchor: the model's neutralization of the
        subject's designated (lowest-index zero-intensity) frame."""
        if subject_id not in self._anchors:
            for split_name in ("test", "train"):
                split = self.dataset.split(split_name)
                if subject_id in split.subjects:
                    zeros = split.zero_frame_indices(subject_id)
                    base = min(zeros) if zeros else split.indices_of_subject(subject_id)[0]
                    img = split.images[base]
                    self._anchors[subject_id] = self.model.neutralize_images(img[None])[0]
                    break
            else:
                raise KeyError(subject_id)
        return self._anchors[subject_id]


def load_bundle(run_dir: str | Path) -> ArtifactBundle:
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.json")
    dataset = load_dataset(run_dir / "dataset")
    inversion = load_inversion(run_dir / "inversion.pt")
    fpre = load_estimator(run_dir / "fpre.pt")
    hest = load_estimator(run_dir / "hest.pt")
    identity = load_identity(run_dir / "idemb.pt")
    model = load_editor(run_dir / "editor.pt", inversion, fpre, identity)
    return ArtifactBundle(config, dataset, model, hest)


class EditRequest(BaseModel):
    source_frame_id: Optional[str] = None
    source_image_b64: Optional[str] = None
    target_intensities: Optional[list[float]] = Field(default=None)
    target_frame_id: Optional[str] = None
    target_image_b64: Optional[str] = None
    mode: Literal["edit", "neutralize", "transfer"] = "edit"

    @model_validator(mode="after")
    def _check(self):
        if (self.source_frame_id is None) == (self.source_image_b64 is None):
            raise ValueError("provide exactly one of source_frame_id, source_image_b64")
        has_intensities = self.target_intensities is not None
        has_target_image = (self.target_frame_id is not None
                            or self.target_image_b64 is not None)
        if self.mode == "edit":
            if not has_intensities or has_target_image:
                raise ValueError("mode 'edit' takes target_intensities only")
            if len(self.target_intensities) != N_ATTRS:
                raise ValueError(f"target_intensities must have length {N_ATTRS}")
        elif self.mode == "transfer":
            if has_intensities or not has_target_image:
                raise ValueError("mode 'transfer' takes a target frame or image only")
        elif has_intensities or has_target_image:
            raise ValueError("mode 'neutralize' takes no target")
        return self


class EditResponse(BaseModel):
    edited_image_b64: str
    neutral_image_b64: str
    estimated_intensities: list[float]
    latency_ms: float


class AnnotateRequest(BaseModel):
    image_b64: Optional[str] = None
    frame_id: Optional[str] = None
    passes: int = 2

    @model_validator(mode="after")
    def _check(self):
        if (self.image_b64 is None) == (self.frame_id is None):
            raise ValueError("provide exactly one of image_b64, frame_id")
        if self.passes < 0:
            raise ValueError("passes must be >= 0")
        return self


def build_app(bundle: ArtifactBundle) -> FastAPI:
    app = FastAPI(title="aulatent editor service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    model_hash = bundle.model.model_hash

    @app.exception_handler(RequestValidationError)
    async def _validation_handler(request: Request, exc: RequestValidationError):
        details = [{"field": ".".join(str(p) for p in e["loc"]), "message": e["msg"]}
                   for e in exc.errors()]
        return JSONResponse(status_code=400, content={"error": "validation",
                                                      "details": details})

    @app.exception_handler(Exception)
    async def _failure_handler(request: Request, exc: Exception):
        diag = uuid.uuid4().hex[:12]
        return JSONResponse(status_code=500,
                            content={"error": "inference", "diagnostic_id": diag,
                                     "message": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "model_hash": model_hash}

    @app.get("/subjects")
    def subjects():
        return {"test": bundle.dataset.test.subjects,
                "train": bundle.dataset.train.subjects}

    @app.get("/frames/{subject_id}")
    def frames(subject_id: int):
        for split_name in ("test", "train"):
            split = bundle.dataset.split(split_name)
            if subject_id in split.subjects:
                idx = split.indices_of_subject(subject_id)
                return {"subject_id": subject_id, "split": split_name,
                        "frames": [{
                            "frame_id": split.records[i].frame_id,
                            "intensities": [float(v) for v in split.records[i].intensities],
                        } for i in idx]}
        return JSONResponse(status_code=404,
                            content={"error": "not_found",
                                     "message": f"unknown subject {subject_id}"})

    @app.get("/image/{frame_id}")
    def image(frame_id: str):
        try:
            _, img = bundle.frame(frame_id)
        except KeyError:
            return JSONResponse(status_code=404,
                                content={"error": "not_found",
                                         "message": f"unknown frame {frame_id}"})
        return Response(content=image_to_png_bytes(img), media_type="image/png")

    @app.post("/edit", response_model=EditResponse)
    def edit(req: EditRequest):
        t0 = time.perf_counter()
        subject_id = None
        if req.source_frame_id is not None:
            try:
                rec, source = bundle.frame(req.source_frame_id)
            except KeyError:
                return JSONResponse(status_code=404,
                                    content={"error": "not_found",
                                             "message": f"unknown frame {req.source_frame_id}"})
            subject_id = rec.subject_id
        else:
            source = b64_to_image(req.source_image_b64)

        if req.mode == "transfer":
            if req.target_frame_id is not None:
                try:
                    _, target_img = bundle.frame(req.target_frame_id)
                except KeyError:
                    return JSONResponse(status_code=404,
                                        content={"error": "not_found",
                                                 "message": f"unknown frame {req.target_frame_id}"})
            else:
                target_img = b64_to_image(req.target_image_b64)
            res = bundle.model.transfer_images(source[None], target_img[None])
            edited, neutral = res["edited"][0], res["neutral"][0]
        elif req.mode == "neutralize":
            neutral = bundle.model.neutralize_images(source[None])[0]
            edited = neutral
        else:
            conds = torch.as_tensor(np.asarray(req.target_intensities, dtype=np.float32))
            res = bundle.model.edit_images(source[None], conds[None])
            edited, neutral = res["edited"][0], res["neutral"][0]

        anchor = (bundle.subject_anchor(subject_id) if subject_id is not None
                  else neutral)
        with torch.no_grad():
            est = bundle.hest(images_to_tensor(edited), images_to_tensor(anchor))
        return EditResponse(
            edited_image_b64=image_to_b64(edited),
            neutral_image_b64=image_to_b64(neutral),
            estimated_intensities=[float(v) for v in est.squeeze(0)],
            latency_ms=(time.perf_counter() - t0) * 1000,
        )

    @app.post("/annotate")
    def annotate_endpoint(req: AnnotateRequest):
        if req.frame_id is not None:
            try:
                _, img = bundle.frame(req.frame_id)
            except KeyError:
                return JSONResponse(status_code=404,
                                    content={"error": "not_found",
                                             "message": f"unknown frame {req.frame_id}"})
        else:
            img = b64_to_image(req.image_b64)
        result = annotate(make_model_generator(bundle.model, img), img,
                          passes=req.passes, weights=bundle.config.weights)
        return {"intensities": [float(v) for v in result.intensities],
                "final_loss": result.final_loss,
                "passes": result.passes,
                "probes": result.probes}

    return app


def serve(run_dir: str | Path, host: str = "127.0.0.1", port: int = 8750) -> None:
    import uvicorn

    bundle = load_bundle(run_dir)
    uvicorn.run(build_app(bundle), host=host, port=port, log_level="warning")
