"""Analytic scene and dataset pipeline tests."""

import json

import numpy as np
import pytest
from PIL import Image

from nflab.errors import ContractError, ParseError
from nflab.rays import Camera, focal_from_angle, generate_rays, pixel_grid
from nflab.scenes import (AnalyticScene, Box, Sphere, default_scene,
                          gen_dataset, load_blender, look_at_pose,
                          oracle_render, ring_cameras, scene_field)


def test_density_membership():
    scene = AnalyticScene(
        spheres=(Sphere(center=(0, 0, 0), radius=1.0, density=3.0),),
        boxes=(Box(center=(2, 0, 0), half_extent=(0.5, 0.5, 0.5),
                   density=4.0),))
    pts = np.array([
        [0.0, 0.0, 0.0],    # sphere only
        [0.99, 0.0, 0.0],   # just inside the sphere
        [1.01, 0.0, 0.0],   # outside everything
        [2.0, 0.4, -0.4],   # box only
        [2.5, 0.5, 0.5],    # box boundary counts as inside
        [5.0, 5.0, 5.0],    # far away
    ])
    assert np.array_equal(scene.density(pts), [3.0, 3.0, 0.0, 4.0, 4.0, 0.0])


def test_density_sums_overlapping_primitives():
    scene = AnalyticScene(
        spheres=(Sphere((0, 0, 0), 1.0, 3.0), Sphere((0.5, 0, 0), 1.0, 5.0)))
    assert scene.density(np.array([[0.25, 0.0, 0.0]]))[0] == 8.0


def test_checker_parity():
    scene = AnalyticScene(checker_cell=0.5,
                          palette=((1.0, 0.0, 0.0), (0.0, 0.0, 1.0)))
    pts = np.array([
        [0.1, 0.1, 0.1],     # cells (0,0,0), even
        [0.6, 0.1, 0.1],     # cells (1,0,0), odd
        [0.6, 0.6, 0.1],     # even
        [-0.1, 0.0, 0.0],    # cells (-1,0,0), odd
    ])
    got = scene.albedo(pts)
    assert np.array_equal(got, [[1, 0, 0], [0, 0, 1], [1, 0, 0], [0, 0, 1]])


def test_view_tint_shifts_and_clamps():
    scene = AnalyticScene(view_tint=0.5,
                          palette=((0.9, 0.5, 0.1), (0.9, 0.5, 0.1)))
    p = np.array([[0.1, 0.1, 0.1]])
    d = np.array([[1.0, 0.0, -1.0]])  # not unit; fine for the formula
    got = scene.color(p, d)
    assert np.allclose(got, [[1.0, 0.5, 0.0]])  # clamped both ends
    plain = AnalyticScene(view_tint=0.0).color(p, d)
    assert np.array_equal(plain, AnalyticScene().albedo(p))


def test_scene_field_protocol():
    scene = default_scene()
    cam = ring_cameras(1, width=4, height=4)[0]
    rays = generate_rays(cam, pixel_grid(cam))
    from nflab.rays import stratified_samples
    ss = stratified_samples(rays, 8)
    out = scene_field(scene)(ss)
    assert out.sigma.shape == (16, 8)
    assert out.rgb.shape == (16, 8, 3)
    assert (out.sigma >= 0).all()
    assert (out.rgb >= 0).all() and (out.rgb <= 1).all()


# ------------------------------------------------------------------ cameras

def test_look_at_pose_geometry():
    eye = np.array([3.0, -2.0, 1.5])
    pose = look_at_pose(eye)
    rot = pose[:3, :3]
    assert np.allclose(rot.T @ rot, np.eye(3), atol=1e-12)
    # -Z column points from eye back toward the origin
    assert np.allclose(-pose[:3, 2], -eye / np.linalg.norm(eye), atol=1e-12)
    assert np.array_equal(pose[:3, 3], eye)
    with pytest.raises(ContractError):
        look_at_pose(np.zeros(3))
    with pytest.raises(ContractError):
        look_at_pose(np.array([0.0, 0.0, 2.0]))  # parallel to world up


def test_ring_cameras_layout():
    cams = ring_cameras(6, radius=4.0, width=32, height=32)
    assert len(cams) == 6
    for cam in cams:
        assert np.isclose(np.linalg.norm(cam.origin), 4.0)
        assert cam.width == 32 and cam.focal == focal_from_angle(
            0.6911112070083618, 32)
    # distinct azimuths
    origins = np.stack([c.origin for c in cams])
    assert np.unique(np.round(origins, 6), axis=0).shape[0] == 6


def test_center_ray_hits_sphere_and_corner_misses():
    scene = default_scene()
    cam = ring_cameras(1, width=9, height=9)[0]
    img = oracle_render(scene, cam, n_samples=256)
    assert img.acc[4, 4] > 0.9               # straight at the sphere
    assert img.acc[0, 0] == 0.0              # corner ray sails past
    assert np.array_equal(img.rgb[0, 0], np.ones(3))  # exact background
    assert not np.allclose(img.rgb[4, 4], 1.0)


def test_oracle_render_enforces_density():
    with pytest.raises(ContractError):
        oracle_render(default_scene(), ring_cameras(1, width=2, height=2)[0],
                      n_samples=64)


def test_oracle_render_chunk_invariant():
    scene = default_scene()
    cam = ring_cameras(1, width=5, height=5)[0]
    a = oracle_render(scene, cam, n_samples=256, chunk=100)
    b = oracle_render(scene, cam, n_samples=256, chunk=3)
    assert np.array_equal(a.rgb, b.rgb)


# ------------------------------------------------------------------ dataset

def test_dataset_round_trip(tmp_path):
    root = tmp_path / "toy"
    counts = gen_dataset(root, splits={"train": 2, "val": 1}, width=8,
                         height=8, n_samples=256)
    assert counts == {"train": 2, "val": 1}
    cams, images = load_blender(root, "train", near=2.0, far=6.0)
    assert len(cams) == 2 and images.shape == (2, 8, 8, 3)
    assert images.min() >= 0.0 and images.max() <= 1.0

    # poses round trip bit for bit through the JSON text
    ring = ring_cameras(2, width=8, height=8, azimuth_offset=0.0)
    for cam, ref in zip(cams, ring):
        assert np.array_equal(cam.cam_to_world, ref.cam_to_world)
        assert cam.focal == ref.focal

    # pixels only underwent 8-bit quantization
    rendered = oracle_render(default_scene(), ring[0], n_samples=256).rgb
    assert np.abs(images[0] - rendered).max() <= 0.5 / 255.0 + 1e-12


def test_dataset_regeneration_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for root in (a, b):
        gen_dataset(root, splits={"train": 1}, width=6, height=6,
                    n_samples=256)
    for rel in ("transforms_train.json", "train/r_0.png"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_load_blender_composites_rgba(tmp_path):
    root = tmp_path / "alpha"
    (root / "train").mkdir(parents=True)
    rgba = np.zeros((2, 2, 4), dtype=np.uint8)
    rgba[..., 0] = 255          # pure red foreground
    rgba[..., 3] = [[0, 255], [128, 255]]
    Image.fromarray(rgba, mode="RGBA").save(root / "train" / "r_0.png")
    pose = look_at_pose(np.array([4.0, 0.0, 0.0])).tolist()
    meta = {"camera_angle_x": 0.6911112070083618,
            "frames": [{"file_path": "./train/r_0",
                        "transform_matrix": pose}]}
    (root / "transforms_train.json").write_text(json.dumps(meta))
    _, images = load_blender(root, "train", near=2.0, far=6.0,
                             background=(0.0, 1.0, 0.0))
    assert np.allclose(images[0][0, 0], [0.0, 1.0, 0.0])   # transparent
    assert np.allclose(images[0][0, 1], [1.0, 0.0, 0.0])   # opaque red
    a = 128.0 / 255.0
    assert np.allclose(images[0][1, 0], [a, 1.0 - a, 0.0])


def test_load_blender_errors(tmp_path):
    with pytest.raises(ParseError):
        load_blender(tmp_path, "train", near=2.0, far=6.0)
    (tmp_path / "transforms_train.json").write_text("{not json")
    with pytest.raises(ParseError):
        load_blender(tmp_path, "train", near=2.0, far=6.0)
    (tmp_path / "transforms_train.json").write_text("{\"frames\": []}")
    with pytest.raises(ParseError):
        load_blender(tmp_path, "train", near=2.0, far=6.0)
