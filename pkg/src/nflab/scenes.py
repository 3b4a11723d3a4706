"""Analytic test scenes and the Blender-style dataset pipeline.

A scene is a handful of constant-density primitives with a 3-D
checkerboard albedo, so density and color at any point have closed forms.
Ground-truth images come from densely sampled deterministic renders of
those closed forms; nothing learned is involved. Datasets are written in
the transforms_<split>.json layout: a shared horizontal field of view plus
one 4x4 cam-to-world matrix per frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ContractError, ParseError
from .fields.network import RadianceOutput
from .rays import Camera, focal_from_angle
from .render import ImageRender, render_image

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float
    density: float


@dataclass(frozen=True)
class Box:
    center: Tuple[float, float, float]
    half_extent: Tuple[float, float, float]
    density: float


@dataclass(frozen=True)
class AnalyticScene:
    """Constant-density primitives with a parity-checkered albedo.

    Color at a point is one of two palette entries chosen by the parity of
    the point's integer cell coordinates, optionally shifted by the view
    direction (clamped to [0, 1]); density is the sum over primitives
    containing the point.
    """
    spheres: Tuple[Sphere, ...] = ()
    boxes: Tuple[Box, ...] = ()
    checker_cell: float = 0.45
    palette: Tuple[Tuple[float, float, float],
                   Tuple[float, float, float]] = ((0.9, 0.25, 0.2),
                                                  (0.2, 0.35, 0.9))
    view_tint: float = 0.0
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def density(self, positions: np.ndarray) -> np.ndarray:
        p = np.asarray(positions, dtype=np.float64)
        sigma = np.zeros(p.shape[:-1])
        for s in self.spheres:
            inside = ((p - s.center) ** 2).sum(-1) < s.radius ** 2
            sigma += s.density * inside
        for b in self.boxes:
            inside = (np.abs(p - b.center) <= b.half_extent).all(-1)
            sigma += b.density * inside
        return sigma

    def albedo(self, positions: np.ndarray) -> np.ndarray:
        p = np.asarray(positions, dtype=np.float64)
        cells = np.floor(p / self.checker_cell).sum(-1).astype(np.int64)
        pal = np.asarray(self.palette)
        return pal[cells & 1]

    def color(self, positions: np.ndarray,
              view_dirs: np.ndarray) -> np.ndarray:
        base = self.albedo(positions)
        if self.view_tint != 0.0:
            d = np.asarray(view_dirs, dtype=np.float64)
            base = base + self.view_tint * d
        return np.clip(base, 0.0, 1.0)


def scene_field(scene: AnalyticScene):
    """Adapt a scene to the field-callable protocol used by the renderer."""

    def field_fn(samples, graph=None, scope=None):
        sigma = scene.density(samples.positions)
        rgb = scene.color(samples.positions,
                          samples.view_dirs[:, None, :])
        return RadianceOutput(sigma=sigma, rgb=rgb)

    return field_fn


def oracle_render(scene: AnalyticScene, camera: Camera,
                  n_samples: int = 512, chunk: int = 8192) -> ImageRender:
    """Densely sampled deterministic single-pass render of the closed form.

    Ground-truth images must not inherit sampling noise or coarse-grid
    bias, so fewer than 256 samples per ray is rejected.
    """
    if n_samples < 256:
        raise ContractError(
            f"reference renders need >= 256 samples per ray, got {n_samples}")
    return render_image(camera, scene_field(scene), None,
                        n_coarse=n_samples, background=scene.background,
                        rng=None, chunk=chunk)


def default_scene() -> AnalyticScene:
    """A checkered sphere plus a small off-center box on white."""
    return AnalyticScene(
        spheres=(Sphere(center=(0.0, 0.0, 0.0), radius=0.85, density=20.0),),
        boxes=(Box(center=(0.8, -0.55, -0.35),
                   half_extent=(0.25, 0.25, 0.25), density=20.0),),
        checker_cell=0.45,
        view_tint=0.15,
    )


def look_at_pose(eye: np.ndarray, target=(0.0, 0.0, 0.0),
                 up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Rigid cam-to-world with -Z aimed from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    z = eye - np.asarray(target, dtype=np.float64)
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ContractError("eye and target coincide")
    z = z / nz
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ContractError("view direction is parallel to up")
    x = x / nx
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, 0] = x
    pose[:3, 1] = y
    pose[:3, 2] = z
    pose[:3, 3] = eye
    return pose


def ring_cameras(n: int, *, radius: float = 4.0, width: int = 64,
                 height: int = 64,
                 camera_angle_x: float = 0.6911112070083618,
                 near: float = 2.0, far: float = 6.0,
                 elevation_range: Tuple[float, float] = (-0.15, 0.75),
                 azimuth_offset: float = 0.0) -> List[Camera]:
    """n deterministic inward-looking cameras on a sphere around the origin.

    Azimuths are evenly spaced; elevations cycle through the range on a
    golden-ratio schedule so consecutive views differ.
    """
    focal = focal_from_angle(camera_angle_x, width)
    lo, hi = elevation_range
    cams = []
    for i in range(n):
        azim = 2.0 * math.pi * i / n + azimuth_offset
        elev = lo + (hi - lo) * ((i * GOLDEN) % 1.0)
        eye = radius * np.array([math.cos(azim) * math.cos(elev),
                                 math.sin(azim) * math.cos(elev),
                                 math.sin(elev)])
        cams.append(Camera(width=width, height=height, focal=focal,
                           cam_to_world=look_at_pose(eye), near=near,
                           far=far))
    return cams


DEFAULT_SPLITS = {"train": 24, "val": 4, "test": 4}
_SPLIT_OFFSETS = {"train": 0.0, "val": 0.31, "test": 0.62}


def gen_dataset(root, scene: Optional[AnalyticScene] = None, *,
                splits: Optional[Dict[str, int]] = None, width: int = 64,
                height: int = 64,
                camera_angle_x: float = 0.6911112070083618,
                radius: float = 4.0, near: float = 2.0, far: float = 6.0,
                n_samples: int = 512) -> Dict[str, int]:
    """Render a scene into a Blender-layout dataset directory.

    Writes <root>/<split>/r_<i>.png and <root>/transforms_<split>.json.
    Matrices serialize through repr, so a reader gets the written floats
    back bit for bit. Returns the frame count per split.
    """
    scene = scene if scene is not None else default_scene()
    splits = dict(splits) if splits is not None else dict(DEFAULT_SPLITS)
    root = Path(root)
    for split, count in splits.items():
        cams = ring_cameras(
            count, radius=radius, width=width, height=height,
            camera_angle_x=camera_angle_x, near=near, far=far,
            azimuth_offset=_SPLIT_OFFSETS.get(split, 0.77))
        img_dir = root / split
        img_dir.mkdir(parents=True, exist_ok=True)
        frames = []
        for i, cam in enumerate(cams):
            img = oracle_render(scene, cam, n_samples=n_samples).rgb
            buf = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(buf, mode="RGB").save(img_dir / f"r_{i}.png")
            frames.append({
                "file_path": f"./{split}/r_{i}",
                "transform_matrix": cam.cam_to_world.tolist(),
            })
        meta = {"camera_angle_x": camera_angle_x, "frames": frames}
        with open(root / f"transforms_{split}.json", "w") as fh:
            json.dump(meta, fh, indent=2)
    return splits


def load_blender(root, split: str, *, near: float, far: float,
                 background=(1.0, 1.0, 1.0)
                 ) -> Tuple[List[Camera], np.ndarray]:
    """Read one split of a transforms_<split>.json dataset.

    Returns the cameras and float images in [0, 1], shape [n, H, W, 3].
    RGBA images are composited onto the given background; RGB images are
    taken as already composited.
    """
    root = Path(root)
    meta_path = root / f"transforms_{split}.json"
    if not meta_path.exists():
        raise ParseError(f"no such split manifest: {meta_path}")
    with open(meta_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed JSON in {meta_path}: {e}") from e
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise ParseError(f"{meta_path} lacks camera_angle_x or frames")
    angle = float(meta["camera_angle_x"])
    bg = np.asarray(background, dtype=np.float64)
    cameras: List[Camera] = []
    images: List[np.ndarray] = []
    for frame in meta["frames"]:
        rel = frame["file_path"]
        img_path = root / (rel[2:] if rel.startswith("./") else rel)
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        raw = np.asarray(Image.open(img_path), dtype=np.float64) / 255.0
        if raw.ndim != 3 or raw.shape[2] not in (3, 4):
            raise ParseError(f"{img_path} is not an RGB or RGBA image")
        if raw.shape[2] == 4:
            alpha = raw[..., 3:4]
            raw = raw[..., :3] * alpha + bg * (1.0 - alpha)
        h, w = raw.shape[:2]
        pose = np.asarray(frame["transform_matrix"], dtype=np.float64)
        cameras.append(Camera(width=w, height=h,
                              focal=focal_from_angle(angle, w),
                              cam_to_world=pose, near=near, far=far))
        images.append(raw)
    return cameras, np.stack(images)
