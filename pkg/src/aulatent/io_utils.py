"""Checkpoint and image IO plumbing: atomic writes, parameter hashing,
JSON sidecars, PNG <-> base64."""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def atomic_write_bytes(path: str | Path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def param_hash(module: torch.nn.Module) -> str:
    """Canonical hash of a module's parameters and buffers (file-format free)."""
    h = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        h.update(key.encode())
        t = state[key].detach().cpu().contiguous()
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, state: dict, sidecar: dict | None = None) -> None:
    buf = io.BytesIO()
    torch.save(state, buf)
    atomic_write_bytes(path, buf.getvalue())
    if sidecar is not None:
        atomic_write_bytes(Path(str(path) + ".json"),
                           json.dumps(sidecar, indent=2, sort_keys=True).encode())


def load_checkpoint(path: str | Path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def load_sidecar(path: str | Path) -> dict:
    return json.loads(Path(str(path) + ".json").read_text())


def image_to_png_bytes(image: np.ndarray) -> bytes:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def image_to_b64(image: np.ndarray) -> str:
    return base64.b64encode(image_to_png_bytes(image)).decode("ascii")


def b64_to_image(data: str) -> np.ndarray:
    raw = base64.b64decode(data, validate=True)
    img = Image.open(io.BytesIO(raw)).convert("L")
    return np.asarray(img, dtype=np.float32) / 255.0
