"""Metrics, optimizer, checkpoint, and training loop tests."""

import dataclasses
import math

import numpy as np
import pytest

from nflab.errors import (CheckpointChecksumError, CheckpointError,
                          CheckpointVersionError, ContractError, ShapeError,
                          TrainingDivergedError)
from nflab.fields import NetworkConfig, activation_accounting
from nflab.scenes import default_scene, gen_dataset, load_blender
from nflab.trainer import (LOG_COLUMNS, TrainConfig, Trainer, adam_init,
                           adam_step, load_checkpoint, lr_at,
                           photometric_loss, psnr, save_checkpoint, ssim)
from nflab.trainer.metrics import mse

# ------------------------------------------------------------------ metrics


def test_psnr_known_value():
    a = np.zeros((4, 4))
    b = np.full((4, 4), 0.5)
    assert math.isclose(psnr(a, b), 10 * math.log10(1 / 0.25))


def test_psnr_identical_is_infinite():
    img = np.random.default_rng(0).uniform(size=(5, 5, 3))
    assert psnr(img, img) == math.inf


def test_psnr_mask():
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    b[0, 0] = 1.0
    mask = np.ones((4, 4), dtype=bool)
    mask[0, 0] = False
    assert psnr(a, b, mask=mask) == math.inf
    assert math.isclose(mse(a, b, mask=~mask), 1.0)
    with pytest.raises(ShapeError):
        mse(a, b, mask=np.zeros((4, 4), dtype=bool))


def test_psnr_matches_skimage():
    from skimage.metrics import peak_signal_noise_ratio
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.uniform(size=(16, 16, 3))
        b = rng.uniform(size=(16, 16, 3))
        assert math.isclose(psnr(a, b),
                            peak_signal_noise_ratio(a, b, data_range=1.0),
                            rel_tol=1e-6)


def test_ssim_identical_is_one():
    img = np.random.default_rng(2).uniform(size=(16, 16, 3))
    assert math.isclose(ssim(img, img), 1.0)


def test_ssim_constant_images_closed_form():
    # constant inputs have zero variance, so only the luminance term
    # survives: (2ab + C1) / (a^2 + b^2 + C1)
    a, b = 0.3, 0.7
    c1 = 0.01 ** 2
    expect = (2 * a * b + c1) / (a * a + b * b + c1)
    got = ssim(np.full((12, 12), a), np.full((12, 12), b))
    assert math.isclose(got, expect, rel_tol=1e-12)


def test_ssim_matches_skimage():
    from skimage.metrics import structural_similarity
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = rng.uniform(size=(20, 20, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ours = ssim(a, b)
        ref = structural_similarity(
            a.mean(-1), b.mean(-1), win_size=11, gaussian_weights=True,
            sigma=1.5, use_sample_covariance=False, data_range=1.0)
        assert abs(ours - ref) < 1e-4


def test_ssim_rejects_small_images():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# ---------------------------------------------------------------- optimizer

def test_adam_first_step_is_signed_lr():
    # with bias correction the very first update is lr * sign(g) for any
    # nonzero gradient (up to the epsilon)
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -4.0, 1e-3])}
    state = adam_init(params)
    adam_step(params, grads, state, lr=0.1)
    expect = np.array([1.0, -2.0, 3.0]) - 0.1 * np.sign([0.5, -4.0, 1e-3])
    assert np.allclose(params["w"], expect, atol=1e-5)


def test_adam_three_steps_hand_computed():
    b1, b2, eps = 0.9, 0.999, 1e-8
    p = 1.0
    m = v = 0.0
    gs = [0.3, -0.2, 0.7]
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= 0.05 * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    params = {"w": np.array([1.0])}
    state = adam_init(params)
    for g in gs:
        adam_step(params, {"w": np.array([g])}, state, lr=0.05)
    assert math.isclose(params["w"][0], p, rel_tol=1e-12)
    assert state.step == 3


def test_adam_preserves_dtype_and_identity():
    arr = np.ones(4, dtype=np.float32)
    params = {"w": arr}
    state = adam_init(params)
    adam_step(params, {"w": np.full(4, 0.5, dtype=np.float32)}, state, 0.01)
    assert params["w"] is arr and arr.dtype == np.float32
    assert state.m["w"].dtype == np.float32


def test_adam_rejects_unknown_names():
    params = {"w": np.ones(2)}
    with pytest.raises(ContractError):
        adam_step(params, {"q": np.ones(2)}, adam_init(params), 0.1)


def test_lr_schedule_endpoints():
    cfg = TrainConfig(iterations=101, lr_init=5e-4, lr_final=5e-5)
    assert lr_at(cfg, 0) == 5e-4
    assert math.isclose(lr_at(cfg, 100), 5e-5)
    assert math.isclose(lr_at(cfg, 50), math.sqrt(5e-4 * 5e-5), rel_tol=1e-12)


# --------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "state.nflb"
    tensors = {
        "a": np.random.default_rng(0).normal(size=(3, 4)),
        "b": np.arange(5, dtype=np.float32),
        "c": np.array(7, dtype=np.int64),
    }
    meta = {"iteration": 12, "nested": {"x": [1, 2, 3]}}
    save_checkpoint(path, tensors, meta)
    loaded, meta2 = load_checkpoint(path)
    assert meta2 == meta
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].dtype == tensors[k].dtype
        assert np.array_equal(loaded[k], tensors[k])


def test_checkpoint_detects_corruption(tmp_path):
    path = tmp_path / "state.nflb"
    save_checkpoint(path, {"a": np.arange(8.0)}, {})
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointChecksumError):
        load_checkpoint(path)


def test_checkpoint_rejects_future_version(tmp_path):
    path = tmp_path / "state.nflb"
    save_checkpoint(path, {"a": np.arange(4.0)}, {})
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"WXYZ" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# ------------------------------------------------------------ training loop

TOY_NET = NetworkConfig(variant="unerf-sub", width=16, pos_freqs=2,
                        dir_freqs=1, down_levels=3, dtype="float64")


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "scene"
    gen_dataset(root, splits={"train": 2, "val": 1}, width=12, height=12,
                n_samples=256)
    cams, imgs = load_blender(root, "train", near=2.0, far=6.0)
    vcams, vimgs = load_blender(root, "val", near=2.0, far=6.0)
    return cams, imgs, vcams, vimgs


def make_trainer(tiny_dataset, iterations=4, log_path=None, seed=0,
                 net=TOY_NET, eval_every=0):
    cams, imgs, vcams, vimgs = tiny_dataset
    cfg = TrainConfig(iterations=iterations, rays_per_batch=8, n_coarse=16,
                      n_fine=16, seed=seed, eval_every=eval_every, chunk=64)
    return Trainer(net, cfg, cams, imgs, val_cameras=vcams,
                   val_images=vimgs, log_path=log_path)


def test_training_reduces_loss(tiny_dataset):
    tr = make_trainer(tiny_dataset, iterations=60, seed=1)
    rows = tr.run()
    assert len(rows) == 60
    first = np.mean([r["loss"] for r in rows[:10]])
    last = np.mean([r["loss"] for r in rows[-10:]])
    assert last < first


def test_activation_log_matches_closed_form(tiny_dataset):
    tr = make_trainer(tiny_dataset, iterations=1)
    row = tr.step()
    r = tr.train_config.rays_per_batch
    want = (activation_accounting(TOY_NET, 16, r).total
            + activation_accounting(TOY_NET, 32, r).total)
    assert row["activation_elems"] == want


def test_single_ray_overfit(tiny_dataset):
    cams, imgs, _, _ = tiny_dataset
    # restrict to one pixel: a 1x1 image is a single repeated ray
    from nflab.rays import Camera
    cam = cams[0]
    one = Camera(width=1, height=1, focal=cam.focal,
                 cam_to_world=cam.cam_to_world, near=cam.near, far=cam.far)
    target = imgs[0][6:7, 6:7, :]
    cfg = TrainConfig(iterations=500, rays_per_batch=4, n_coarse=16,
                      n_fine=16, seed=0, eval_every=0, lr_init=5e-3,
                      lr_final=5e-4)
    tr = Trainer(TOY_NET, cfg, [one], target[None], log_path=None)
    rows = tr.run()
    assert rows[-1]["loss"] < 1e-4, rows[-1]["loss"]


def test_resume_reproduces_trajectory(tmp_path, tiny_dataset):
    ckpt = tmp_path / "mid.nflb"
    a = make_trainer(tiny_dataset, iterations=8, seed=3)
    for _ in range(4):
        a.step()
    a.save(ckpt)
    for _ in range(4):
        a.step()

    b = make_trainer(tiny_dataset, iterations=8, seed=3)
    b.load(ckpt)
    assert b.iteration == 4
    for _ in range(4):
        b.step()
    for k in a.params_coarse:
        assert np.array_equal(a.params_coarse[k], b.params_coarse[k]), k
        assert np.array_equal(a.params_fine[k], b.params_fine[k]), k


def test_load_rejects_mismatched_network(tmp_path, tiny_dataset):
    ckpt = tmp_path / "net.nflb"
    a = make_trainer(tiny_dataset, iterations=2)
    a.step()
    a.save(ckpt)
    other = dataclasses.replace(TOY_NET, variant="unerf-conv")
    b = make_trainer(tiny_dataset, iterations=2, net=other)
    with pytest.raises(CheckpointError, match="variant"):
        b.load(ckpt)


def test_divergence_names_offending_op(tiny_dataset):
    tr = make_trainer(tiny_dataset, iterations=2)
    tr.params_coarse["trunk0.w"][:] = np.nan
    with pytest.raises(TrainingDivergedError, match="dense"):
        tr.step()


def test_csv_log_format(tmp_path, tiny_dataset):
    log = tmp_path / "train.csv"
    tr = make_trainer(tiny_dataset, iterations=4, log_path=log,
                      eval_every=2)
    tr.run()
    lines = log.read_text().strip().split("\n")
    assert lines[0] == ",".join(LOG_COLUMNS)
    assert len(lines) == 5
    # eval columns filled only on the cadence
    row1 = lines[1].split(",")
    row2 = lines[2].split(",")
    assert row1[3] == "" and row1[4] == ""
    assert row2[3] != "" and row2[4] != ""
    assert float(row2[3]) > 0


def test_evaluate_returns_metrics(tiny_dataset):
    tr = make_trainer(tiny_dataset, iterations=1)
    p, s = tr.evaluate()
    assert np.isfinite(p) and -1.0 <= s <= 1.0


def test_photometric_loss_value():
    from nflab.diffcore.tensor import Tensor
    from nflab.render import RayRender, RenderResult

    rgb_c = np.array([[0.2, 0.4, 0.6]])
    rgb_f = np.array([[0.5, 0.5, 0.5]])
    target = np.array([[0.0, 0.5, 1.0]])
    rr = lambda x: RenderResult(rgb=Tensor(x), weights=np.zeros((1, 2)),
                                depth=np.zeros(1), acc=np.zeros(1))
    out = RayRender(coarse=rr(rgb_c), fine=rr(rgb_f),
                    coarse_samples=None, fine_samples=None)
    loss = photometric_loss(out, target)
    want = ((rgb_c - target) ** 2).mean() + ((rgb_f - target) ** 2).mean()
    assert math.isclose(float(loss.data), want, rel_tol=1e-12)
