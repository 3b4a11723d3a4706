"""Cameras, ray generation, depth samplers, and the frequency encoding.

Geometry convention: cameras look along -Z in their own frame, +X right,
+Y up, and cam_to_world is a row-major 4x4 rigid transform. Rays pass
through pixel centers, so pixel (row, col) maps to the camera-frame
direction ((col + .5 - W/2)/f, -(row + .5 - H/2)/f, -1) before rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, ShapeError

WEIGHT_FLOOR = 1e-5


def focal_from_angle(camera_angle_x: float, width: int) -> float:
    """Pinhole focal length in pixels from the horizontal field of view."""
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


@dataclass
class Camera:
    """Pinhole camera with a rigid cam-to-world transform."""

    width: int
    height: int
    focal: float
    cam_to_world: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        if self.cam_to_world.shape != (4, 4):
            raise ShapeError(
                f"cam_to_world must be 4x4, got {self.cam_to_world.shape}")
        if self.focal <= 0:
            raise ContractError(f"focal must be positive, got {self.focal}")
        if not (0 < self.near < self.far):
            raise ContractError(
                f"need 0 < near < far, got near={self.near} far={self.far}")
        if self.width < 1 or self.height < 1:
            raise ContractError("image dimensions must be at least 1x1")
        rot = self.cam_to_world[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ContractError("cam_to_world rotation is not orthonormal")

    @property
    def origin(self) -> np.ndarray:
        return self.cam_to_world[:3, 3]


@dataclass
class RayBatch:
    """A batch of world-space rays with unit directions."""

    origins: np.ndarray      # [R, 3]
    directions: np.ndarray   # [R, 3]
    near: np.ndarray         # [R]
    far: np.ndarray          # [R]

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=-1)
        if not np.allclose(norms, 1.0, atol=1e-12):
            raise ContractError("ray directions must be unit length")

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class SampleSet:
    """Per-ray depth samples and their world positions.

    Depths are strictly increasing along each ray and bounded by the ray's
    [near, far] interval; positions satisfy p = o + t*d.
    """

    depths: np.ndarray       # [R, N]
    positions: np.ndarray    # [R, N, 3]
    view_dirs: np.ndarray    # [R, 3]
    near: np.ndarray         # [R]
    far: np.ndarray          # [R]

    def __post_init__(self):
        d = self.depths
        if not (np.diff(d, axis=-1) > 0).all():
            raise ContractError("sample depths must be strictly increasing")
        if (d < self.near[:, None] - 1e-12).any() or \
           (d > self.far[:, None] + 1e-12).any():
            raise ContractError("sample depths fall outside [near, far]")

    @property
    def n_samples(self) -> int:
        return self.depths.shape[1]


def pixel_grid(camera: Camera) -> np.ndarray:
    """All (row, col) pairs of an image in row-major order, shape [H*W, 2]."""
    rows, cols = np.mgrid[0:camera.height, 0:camera.width]
    return np.stack([rows.ravel(), cols.ravel()], axis=-1)


def generate_rays(camera: Camera, pixels: np.ndarray) -> RayBatch:
    """World-space rays through the centers of the given (row, col) pixels."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ShapeError(f"pixels must be [R, 2], got {pixels.shape}")
    rows, cols = pixels[:, 0], pixels[:, 1]
    if (rows < 0).any() or (rows >= camera.height).any() or \
       (cols < 0).any() or (cols >= camera.width).any():
        raise ContractError(
            f"pixel index outside {camera.height}x{camera.width} image")
    x = (cols + 0.5 - camera.width / 2.0) / camera.focal
    y = -(rows + 0.5 - camera.height / 2.0) / camera.focal
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    rot = camera.cam_to_world[:3, :3]
    dirs = dirs_cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    n = len(pixels)
    return RayBatch(
        origins=np.broadcast_to(camera.origin, (n, 3)).copy(),
        directions=dirs,
        near=np.full(n, camera.near),
        far=np.full(n, camera.far),
    )


def stratified_samples(batch: RayBatch, n: int,
                       rng: Optional[np.random.Generator] = None) -> SampleSet:
    """One depth per equal-width bin of [near, far]; midpoints when rng is None."""
    if n < 1:
        raise ContractError(f"need at least one sample, got {n}")
    r = len(batch)
    if rng is None:
        u = np.full((r, n), 0.5)
    else:
        u = rng.random((r, n))
    span = (batch.far - batch.near)[:, None]
    depths = batch.near[:, None] + (np.arange(n) + u) * span / n
    positions = batch.origins[:, None, :] + \
        depths[:, :, None] * batch.directions[:, None, :]
    return SampleSet(depths=depths, positions=positions,
                     view_dirs=batch.directions, near=batch.near,
                     far=batch.far)


def _bin_edges(depths: np.ndarray, near: Optional[float],
               far: Optional[float]) -> np.ndarray:
    """One bin per depth: interior edges at midpoints, outer edges at
    near/far when given, else reflected symmetrically."""
    mids = 0.5 * (depths[:-1] + depths[1:])
    lo = near if near is not None else depths[0] - (mids[0] - depths[0])
    hi = far if far is not None else depths[-1] + (depths[-1] - mids[-1])
    return np.concatenate([[lo], mids, [hi]])


def importance_samples(coarse_depths: np.ndarray, weights: np.ndarray,
                       m: int, rng: Optional[np.random.Generator] = None,
                       near: Optional[float] = None,
                       far: Optional[float] = None) -> np.ndarray:
    """Inverse-transform draws from the piecewise-constant depth density.

    Each coarse depth owns one bin; weights get an additive 1e-5 floor
    before normalization so no bin has zero mass. rng None draws the m
    midpoint quantiles (i + .5)/m instead. Output is sorted ascending and
    confined to [near, far] (the outermost bin edges by default).
    """
    coarse_depths = np.asarray(coarse_depths, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if coarse_depths.ndim != 1 or coarse_depths.shape != weights.shape:
        raise ShapeError(
            f"depths {coarse_depths.shape} and weights {weights.shape} "
            "must be matching 1-D arrays")
    if coarse_depths.size < 2:
        raise ContractError("importance sampling needs at least two bins")
    if (weights < 0).any():
        raise ContractError("weights must be nonnegative")
    edges = _bin_edges(coarse_depths, near, far)
    p = weights + WEIGHT_FLOOR
    p = p / p.sum()
    cdf = np.concatenate([[0.0], np.cumsum(p)])
    cdf[-1] = 1.0
    if rng is None:
        u = (np.arange(m) + 0.5) / m
    else:
        u = rng.random(m)
    idx = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, p.size - 1)
    frac = (u - cdf[idx]) / p[idx]
    out = edges[idx] + frac * (edges[idx + 1] - edges[idx])
    return np.sort(out)


def _searchsorted_rows(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise searchsorted(side='right') via vectorized bisection.

    a is [R, C] with each row sorted; v is [R, M]. Float comparisons are
    exact, so this matches a per-row np.searchsorted loop bit for bit.
    """
    r, c = a.shape
    rows = np.arange(r)[:, None]
    lo = np.zeros(v.shape, dtype=np.int64)
    hi = np.full(v.shape, c, dtype=np.int64)
    while True:
        active = lo < hi
        if not active.any():
            break
        mid = (lo + hi) >> 1
        go_right = a[rows, np.minimum(mid, c - 1)] <= v
        lo = np.where(active & go_right, mid + 1, lo)
        hi = np.where(active & ~go_right, mid, hi)
    return lo


def importance_samples_batch(coarse_depths: np.ndarray, weights: np.ndarray,
                             m: int,
                             rng: Optional[np.random.Generator] = None,
                             near: Optional[np.ndarray] = None,
                             far: Optional[np.ndarray] = None) -> np.ndarray:
    """importance_samples over a whole [R, N] batch at once.

    With rng None this reproduces the per-ray function exactly; with an
    rng it draws the full [R, m] uniform block in one call, so the stream
    differs from looping rays one by one.
    """
    d = np.asarray(coarse_depths, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if d.ndim != 2 or d.shape != w.shape:
        raise ShapeError(f"need matching [R, N] arrays, got {d.shape} "
                         f"and {w.shape}")
    if d.shape[1] < 2:
        raise ContractError("importance sampling needs at least two bins")
    if (w < 0).any():
        raise ContractError("weights must be nonnegative")
    r, n = d.shape
    mids = 0.5 * (d[:, :-1] + d[:, 1:])
    lo = (near if near is not None
          else d[:, 0] - (mids[:, 0] - d[:, 0]))
    hi = (far if far is not None
          else d[:, -1] + (d[:, -1] - mids[:, -1]))
    edges = np.concatenate([lo[:, None], mids, hi[:, None]], axis=1)
    p = w + WEIGHT_FLOOR
    p = p / p.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((r, 1)), np.cumsum(p, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(m) + 0.5) / m, (r, m))
    else:
        u = rng.random((r, m))
    idx = np.clip(_searchsorted_rows(cdf, u) - 1, 0, n - 1)
    rows = np.arange(r)[:, None]
    frac = (u - cdf[rows, idx]) / p[rows, idx]
    out = edges[rows, idx] + frac * (edges[rows, idx + 1] - edges[rows, idx])
    return np.sort(out, axis=1)


def positional_encode(v: np.ndarray, n_freq: int) -> np.ndarray:
    """Frequency features: raw v followed by sin/cos of 2^l * pi * v.

    Layout along the last axis is [v, sin(pi v), cos(pi v),
    sin(2 pi v), cos(2 pi v), ...]; output width is dim * (1 + 2 * n_freq).
    """
    v = np.asarray(v)
    if n_freq < 0:
        raise ContractError(f"frequency count must be >= 0, got {n_freq}")
    parts = [v]
    for level in range(n_freq):
        scaled = v * (math.pi * 2.0 ** level)
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


def merge_depths(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sorted merge of two sorted depth vectors, duplicates kept."""
    a = np.asarray(a)
    b = np.asarray(b)
    if (np.diff(a, axis=-1) < 0).any() or (np.diff(b, axis=-1) < 0).any():
        raise ContractError("merge_depths requires sorted inputs")
    return np.sort(np.concatenate([a, b], axis=-1), axis=-1)
