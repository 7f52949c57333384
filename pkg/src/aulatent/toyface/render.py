"""Parametric grayscale face renderer: the synthetic ground truth of the toy world.

A face is a smooth composition of soft primitives (ellipse masks, capsule
strokes, gaussian blobs) on a 64 x 64 canvas. Twelve controls mirror the
DISFA action units: each AU deforms one local region and the deformation
magnitude grows monotonically with the ordinal intensity (0..5). Identity
comes from ten per-subject shape parameters, plus a global illumination
nuisance and an in-plane tilt.

All primitives are evaluated as smooth functions of continuous coordinates,
so rendering is deterministic and free of rasterization snapping; intensity
responses are smooth, which the monotonicity property tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import AU_NAMES, MAX_LEVEL, N_ATTRS

IMAGE_SIZE = 64
BACKGROUND = 0.06
INTERIOR = 0.02  # mouth interior brightness before illumination

_AU = {name: i for i, name in enumerate(AU_NAMES)}

# Fixed image-coordinate boxes (x_lo, x_hi, y_lo, y_hi) used by the per-AU
# activation statistics; |x| is used for the laterally symmetric regions.
_REGIONS = {
    "AU1": (0.0, 0.32, -0.66, -0.16),
    "AU2": (0.22, 0.80, -0.72, -0.20),
    "AU4": (0.0, 0.80, -0.70, -0.10),
    "AU5": (0.05, 0.60, -0.40, 0.06),
    "AU6": (0.12, 0.70, -0.02, 0.34),
    "AU9": (0.0, 0.26, -0.30, 0.10),
    "AU12": (0.0, 0.62, 0.16, 0.70),
    "AU15": (0.0, 0.62, 0.16, 0.74),
    "AU17": (0.0, 0.40, 0.40, 0.92),
    "AU20": (0.0, 0.70, 0.16, 0.72),
    "AU25": (0.0, 0.55, 0.18, 0.72),
    "AU26": (0.0, 0.60, 0.16, 0.85),
}

MOUTH_BOX = (-0.55, 0.55, 0.18, 0.75)
MOUTH_DARK_THRESHOLD = 0.12


@dataclass(frozen=True)
class SubjectIdentity:
    """Immutable per-subject shape parameters (drawn once, never mutated)."""

    subject_id: int
    params: np.ndarray  # 10 values in [-1, 1]

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (10,):
            raise ValueError(f"identity needs 10 shape parameters, got {p.shape}")
        object.__setattr__(self, "params", p)


def identity_from_seed(subject_id: int, seed: int) -> SubjectIdentity:
    rng = np.random.Generator(np.random.PCG64(seed * 100_003 + subject_id))
    return SubjectIdentity(subject_id, rng.uniform(-1.0, 1.0, size=10))


@dataclass
class FaceState:
    """Ground truth behind one frame: who, which AU intensities, and nuisances."""

    identity: SubjectIdentity
    intensities: np.ndarray = field(default_factory=lambda: np.zeros(N_ATTRS))
    nuisance: float = 0.5   # global illumination, [0, 1]
    pose: float = 0.0       # in-plane tilt, [-1, 1]

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.intensities.shape != (N_ATTRS,):
            raise ValueError(f"need {N_ATTRS} intensities, got {self.intensities.shape}")

    def validate(self) -> None:
        if np.any(self.intensities < 0) or np.any(self.intensities > MAX_LEVEL):
            raise ValueError("AU intensities out of the [0, 5] generation range")
        if not (0.0 <= self.nuisance <= 1.0 and -1.0 <= self.pose <= 1.0):
            raise ValueError("nuisance/pose out of range")

    def replace_intensities(self, intensities: np.ndarray) -> "FaceState":
        return FaceState(self.identity, np.asarray(intensities, dtype=np.float64),
                         self.nuisance, self.pose)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))


def _soft_ellipse(dx, dy, w, h, softness=0.15):
    u = (dx / w) ** 2 + (dy / h) ** 2
    return _sigmoid((1.0 - u) / softness)


def _blob(dx, dy, r):
    return np.exp(-(dx * dx + dy * dy) / (2.0 * r * r))


def _capsule(x, y, ax, ay, bx, by, thickness):
    # soft stroke along segment A-B with gaussian cross-section
    vx, vy = bx - ax, by - ay
    vv = vx * vx + vy * vy + 1e-12
    t = np.clip(((x - ax) * vx + (y - ay) * vy) / vv, 0.0, 1.0)
    dx = x - (ax + t * vx)
    dy = y - (ay + t * vy)
    return np.exp(-(dx * dx + dy * dy) / (2.0 * thickness * thickness))


def _parabolic_stroke(x, y, half_w, x0, y_mid, y_corner, thickness):
    # lip-like stroke: passes through (x0, y_mid), corners at (x0 +- half_w, y_corner)
    rel = (x - x0) / half_w
    curve = y_mid + (y_corner - y_mid) * rel * rel
    window = _sigmoid((1.08 - np.abs(rel)) / 0.06)
    return np.exp(-((y - curve) ** 2) / (2.0 * thickness * thickness)) * window


def render(state: FaceState, validate: bool = True) -> np.ndarray:
    """Render one face as a (64, 64) float32 raster in [0, 1]."""
    if validate:
        state.validate()
    p = state.identity.params
    lvl = state.intensities / MAX_LEVEL

    # subject geometry
    face_w = 0.70 + 0.06 * p[0]
    face_h = 0.88 + 0.06 * p[1]
    eye_x = 0.30 + 0.05 * p[2]
    eye_r = 0.085 + 0.018 * p[3]
    brow_y = -0.40 + 0.04 * p[4]
    brow_th = 0.034 + 0.008 * p[5]
    mouth_w = 0.26 + 0.05 * p[6]
    mouth_y = 0.42 + 0.04 * p[7]
    skin = 0.58 + 0.10 * p[8]
    nose_len = 0.16 + 0.04 * p[9]

    n = IMAGE_SIZE
    c = (np.arange(n) - (n - 1) / 2.0) / (n / 2.0)
    x, y = np.meshgrid(c, c)  # y grows downward

    theta = 0.12 * state.pose
    ct, st = np.cos(theta), np.sin(theta)
    xf = ct * x + st * y
    yf = -st * x + ct * y

    face = np.full_like(xf, skin)

    a = {name: lvl[i] for name, i in _AU.items()}

    # Every AU owns an exclusive channel (a distinct local deformation or
    # marking): effects never share an axis, so pixel losses separate them
    # and single-coordinate probes during annotation stay reliable.
    # --- brows: AU1 raises inner ends (plus a forehead furrow arc), AU2
    #     raises outer ends, AU4 knits the brows inward and darkens a
    #     glabella wrinkle
    inner_dy = -0.055 * a["AU1"]
    outer_dy = -0.060 * a["AU2"]
    inner_dx = -0.035 * a["AU4"]
    for side in (-1.0, 1.0):
        ax_, ay_ = side * (0.13 + inner_dx), brow_y + inner_dy
        bx_, by_ = side * 0.46, brow_y - 0.03 + outer_dy
        face -= 0.30 * _capsule(xf, yf, ax_, ay_, bx_, by_, brow_th)
    face -= 0.28 * a["AU1"] * _capsule(xf, yf, -0.18, brow_y - 0.11, 0.18,
                                       brow_y - 0.11, 0.030)
    face -= 0.30 * a["AU4"] * _capsule(xf, yf, 0.0, brow_y + 0.03, 0.0,
                                       brow_y + 0.13, 0.034)

    # --- eyes: AU5 raises the upper lid (taller opening)
    eye_h = eye_r * (0.62 + 0.55 * a["AU5"])
    eye_w = eye_r * 1.45
    for side in (-1.0, 1.0):
        face -= 0.40 * _soft_ellipse(xf - side * eye_x, yf + 0.16, eye_w, eye_h, 0.20)

    # --- nose line (identity) and AU9 wrinkle patch at the bridge
    face -= 0.10 * _capsule(xf, yf, 0.0, -0.02, 0.0, nose_len, 0.020)
    face -= 0.36 * a["AU9"] * _blob(xf, yf + 0.06, 0.090)

    # --- cheeks: AU6 brightens two blobs beside the nose
    for side in (-1.0, 1.0):
        face += 0.22 * a["AU6"] * _blob(xf - side * (eye_x + 0.06), yf - 0.10, 0.105)

    # --- mouth: the lip curves keep a fixed footprint; AU25 raises the upper
    #     midpoint (lips part), AU26 drops the lower midpoint (jaw), and the
    #     corner-adjacent AUs draw exclusive markings: AU12 up-angled smile
    #     commas, AU15 down-angled frown hooks, AU20 lateral stretch furrows,
    #     AU17 a bright chin boss
    m_y = mouth_y
    upper_mid = m_y - 0.006 - 0.100 * a["AU25"]
    lower_mid = m_y + 0.006 + 0.060 * a["AU26"]
    center = (upper_mid + lower_mid) / 2
    half_h = np.maximum((lower_mid - upper_mid) / 2, 0.004)
    interior = _soft_ellipse(xf, yf - center, mouth_w * 0.92, half_h, 0.10)
    face = face + (INTERIOR - face) * interior
    upper = _parabolic_stroke(xf, yf, mouth_w, 0.0, upper_mid, m_y, 0.016)
    lower = _parabolic_stroke(xf, yf, mouth_w, 0.0, lower_mid + 0.012,
                              m_y + 0.012, 0.020)
    face -= 0.13 * upper
    face -= 0.13 * lower
    for side in (-1.0, 1.0):
        cx = side * mouth_w
        face -= 0.34 * a["AU12"] * _capsule(xf, yf, cx, m_y - 0.012,
                                            cx + side * 0.07, m_y - 0.085, 0.034)
        face -= 0.32 * a["AU15"] * _capsule(xf, yf, cx * 1.02, m_y + 0.025,
                                            cx * 1.02 + side * 0.065, m_y + 0.105, 0.034)
        face -= 0.30 * a["AU20"] * _capsule(xf, yf, cx + side * 0.10, m_y - 0.06,
                                            cx + side * 0.10, m_y + 0.06, 0.034)
    face += 0.20 * a["AU17"] * _blob(xf, yf - (mouth_y + 0.19), 0.085)

    illum = 0.80 + 0.18 * state.nuisance
    mask = _soft_ellipse(xf, yf, face_w, face_h, 0.05)
    img = BACKGROUND + mask * (np.clip(face, 0.02, 0.98) * illum - BACKGROUND)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _region_mask(name: str) -> np.ndarray:
    x_lo, x_hi, y_lo, y_hi = _REGIONS[name]
    n = IMAGE_SIZE
    c = (np.arange(n) - (n - 1) / 2.0) / (n / 2.0)
    x, y = np.meshgrid(c, c)
    return ((np.abs(x) >= x_lo) & (np.abs(x) <= x_hi) & (y >= y_lo) & (y <= y_hi))


_REGION_MASKS = {name: _region_mask(name) for name in _REGIONS}


def activation_statistic(state: FaceState, au_index: int) -> float:
    """Pixel displacement mass of one AU: L1 image change versus the same
    state with that AU zeroed, restricted to the AU's region."""
    img = render(state)
    zeroed = state.intensities.copy()
    zeroed[au_index] = 0.0
    base = render(state.replace_intensities(zeroed))
    mask = _REGION_MASKS[AU_NAMES[au_index]]
    return float(np.abs(img.astype(np.float64) - base).__mul__(mask).sum())


def mouth_open_mass(image: np.ndarray) -> float:
    """Soft count of dark mouth-interior pixels; works on generated images."""
    n = image.shape[-1]
    c = (np.arange(n) - (n - 1) / 2.0) / (n / 2.0)
    x, y = np.meshgrid(c, c)
    x_lo, x_hi, y_lo, y_hi = MOUTH_BOX
    box = (x >= x_lo) & (x <= x_hi) & (y >= y_lo) & (y <= y_hi)
    soft = _sigmoid((MOUTH_DARK_THRESHOLD - image.astype(np.float64)) / 0.02)
    return float((soft * box).sum())


def mouth_open_pixel_count(image: np.ndarray) -> int:
    """Hard count of mouth-interior pixels below the darkness threshold."""
    n = image.shape[-1]
    c = (np.arange(n) - (n - 1) / 2.0) / (n / 2.0)
    x, y = np.meshgrid(c, c)
    x_lo, x_hi, y_lo, y_hi = MOUTH_BOX
    box = (x >= x_lo) & (x <= x_hi) & (y >= y_lo) & (y <= y_hi)
    return int(((image < MOUTH_DARK_THRESHOLD) & box).sum())
