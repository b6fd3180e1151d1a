"""Keypoint sequences and their Gaussian heatmap renderings.

A sequence of per-frame joint coordinates is rendered into dense volumes: one
Gaussian bump per joint per frame, in 2D stacks ``[F,K,H,W]``, 3D volumes
``[F,K,D,H,W]``, or tri-plane projections ``[F,3K,H,W]``. All rendering is
pure numpy; these volumes are model inputs, not differentiated through.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DataError, ShapeError

LAYOUT_2D = "2d"
LAYOUT_3D = "3d"
LAYOUT_TRIPLANE = "triplane"

# Reference spread: 2 px at 128x128, scaled proportionally elsewhere.
SIGMA_REF = 2.0
RESOLUTION_REF = 128


@dataclass
class KeypointSequence:
    """Per-frame 2D or 3D joint coordinates with validity flags.

    ``coords`` is [F,K,dims] with axis order (x, y[, z]) in pixel/voxel units.
    """

    coords: np.ndarray
    validity: np.ndarray = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[2] not in (2, 3):
            raise ShapeError(f"coords must be [F,K,2] or [F,K,3], got {self.coords.shape}")
        if self.coords.shape[0] < 1 or self.coords.shape[1] < 1:
            raise ArgumentError("need at least one frame and one joint")
        if self.validity is None:
            self.validity = np.ones(self.coords.shape[:2], dtype=bool)
        else:
            self.validity = np.asarray(self.validity, dtype=bool)
            if self.validity.shape != self.coords.shape[:2]:
                raise ShapeError(f"validity must be [F,K], got {self.validity.shape}")
        if not np.all(np.isfinite(self.coords[self.validity])):
            raise ArgumentError("valid keypoints must have finite coordinates")

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @property
    def joints(self) -> int:
        return self.coords.shape[1]

    @property
    def dims(self) -> int:
        return self.coords.shape[2]


@dataclass
class HeatmapVolume:
    """Dense Gaussian-rendered motion tensor with values in [0,1]."""

    values: np.ndarray
    layout: str
    sigma: float = field(default=SIGMA_REF)

    def __post_init__(self):
        expected_rank = {LAYOUT_2D: 4, LAYOUT_3D: 5, LAYOUT_TRIPLANE: 4}
        if self.layout not in expected_rank:
            raise ArgumentError(f"unknown layout {self.layout!r}")
        self.values = np.asarray(self.values)
        if self.values.ndim != expected_rank[self.layout]:
            raise ShapeError(f"layout {self.layout} expects rank {expected_rank[self.layout]}, "
                             f"got {self.values.ndim}")


def sigma_for_resolution(h: int, w: int) -> float:
    """Spread keeping peak width resolution-invariant."""
    return SIGMA_REF * min(h, w) / RESOLUTION_REF


def _gauss_1d(grid: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    # centers [F,K] against grid [E] -> [F,K,E]
    d = grid[None, None, :] - centers[:, :, None]
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def render2d(kp: KeypointSequence, h: int, w: int, sigma: float) -> HeatmapVolume:
    """Gaussian bump per joint per frame on an HxW grid.

    Pixel (i,j) of a joint's map holds exp(-((j-x)^2 + (i-y)^2) / (2 sigma^2));
    rows index y, columns index x. Invalid keypoints give all-zero maps.
    """
    if sigma <= 0:
        raise ArgumentError(f"sigma must be positive, got {sigma}")
    if kp.dims != 2:
        raise ArgumentError(f"render2d needs 2-D keypoints, got dims={kp.dims}")
    gy = _gauss_1d(np.arange(h, dtype=np.float64), kp.coords[:, :, 1], sigma)
    gx = _gauss_1d(np.arange(w, dtype=np.float64), kp.coords[:, :, 0], sigma)
    vals = gy[:, :, :, None] * gx[:, :, None, :]
    vals *= kp.validity[:, :, None, None]
    return HeatmapVolume(vals, LAYOUT_2D, sigma)


def render3d(kp: KeypointSequence, d: int, h: int, w: int, sigma: float) -> HeatmapVolume:
    """3-D extension: voxel (k,i,j) holds the Gaussian of (x,y,z) distance."""
    if sigma <= 0:
        raise ArgumentError(f"sigma must be positive, got {sigma}")
    if kp.dims != 3:
        raise ArgumentError(f"render3d needs 3-D keypoints, got dims={kp.dims}")
    gz = _gauss_1d(np.arange(d, dtype=np.float64), kp.coords[:, :, 2], sigma)
    gy = _gauss_1d(np.arange(h, dtype=np.float64), kp.coords[:, :, 1], sigma)
    gx = _gauss_1d(np.arange(w, dtype=np.float64), kp.coords[:, :, 0], sigma)
    vals = gz[:, :, :, None, None] * gy[:, :, None, :, None] * gx[:, :, None, None, :]
    vals *= kp.validity[:, :, None, None, None]
    return HeatmapVolume(vals, LAYOUT_3D, sigma)


def project_triplane(vol: HeatmapVolume) -> HeatmapVolume:
    """Max-project a 3-D volume onto the X-Y, Y-Z, and X-Z planes.

    Projections run over D, W, and H respectively and are stacked on the
    channel axis as [xy(K), yz(K), xz(K)]; all three plane shapes must agree.
    """
    if vol.layout != LAYOUT_3D:
        raise ArgumentError(f"project_triplane needs a 3D layout, got {vol.layout!r}")
    v = vol.values
    xy = v.max(axis=2)   # over D -> [F,K,H,W]
    yz = v.max(axis=4)   # over W -> [F,K,D,H]
    xz = v.max(axis=3)   # over H -> [F,K,D,W]
    if not (xy.shape == yz.shape == xz.shape):
        raise ShapeError("tri-plane stacking needs matching plane shapes; "
                         f"got {xy.shape[2:]}, {yz.shape[2:]}, {xz.shape[2:]} (use D=H=W)")
    return HeatmapVolume(np.concatenate([xy, yz, xz], axis=1), LAYOUT_TRIPLANE, vol.sigma)


def window(kp: KeypointSequence, length: int, stride: int) -> list:
    """Fixed-length windows at offsets 0, stride, 2*stride, ...; partials dropped."""
    if length < 1 or stride < 1:
        raise ArgumentError("window length and stride must be >= 1")
    out = []
    start = 0
    while start + length <= kp.frames:
        out.append(KeypointSequence(kp.coords[start:start + length].copy(),
                                    kp.validity[start:start + length].copy()))
        start += stride
    return out


def render_limbs2d(kp: KeypointSequence, pairs, h: int, w: int, sigma: float) -> HeatmapVolume:
    """Optional limb mode: Gaussian of distance to each joint-pair segment."""
    if sigma <= 0:
        raise ArgumentError(f"sigma must be positive, got {sigma}")
    if kp.dims != 2:
        raise ArgumentError("render_limbs2d needs 2-D keypoints")
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    maps = np.zeros((kp.frames, len(pairs), h, w))
    for f in range(kp.frames):
        for c, (a, b) in enumerate(pairs):
            if not (kp.validity[f, a] and kp.validity[f, b]):
                continue
            pa = kp.coords[f, a]
            pb = kp.coords[f, b]
            seg = pb - pa
            denom = float(seg @ seg)
            dx = xx - pa[0]
            dy = yy - pa[1]
            if denom == 0.0:
                d2 = dx * dx + dy * dy
            else:
                t = np.clip((dx * seg[0] + dy * seg[1]) / denom, 0.0, 1.0)
                d2 = (dx - t * seg[0]) ** 2 + (dy - t * seg[1]) ** 2
            maps[f, c] = np.exp(-d2 / (2.0 * sigma * sigma))
    return HeatmapVolume(maps, LAYOUT_2D, sigma)


# ---------------------------------------------------------------------------
# Keypoint file: one JSON object per line, {"frame", "kp", "valid"}.
# ---------------------------------------------------------------------------

def save_keypoints(path, kp: KeypointSequence) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i in range(kp.frames):
            rec = {
                "frame": i,
                "kp": [[float(v) for v in joint] for joint in kp.coords[i]],
                "valid": [bool(v) for v in kp.validity[i]],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_keypoints(path) -> KeypointSequence:
    coords = []
    valid = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                coords.append(rec["kp"])
                valid.append(rec["valid"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: malformed keypoint record: {exc}") from exc
    if not coords:
        raise DataError(f"{path}: empty keypoint file")
    try:
        return KeypointSequence(np.asarray(coords, dtype=np.float64), np.asarray(valid))
    except ValueError as exc:
        raise DataError(f"{path}: inconsistent joint counts across frames") from exc
