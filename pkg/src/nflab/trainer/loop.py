"""Two-network training: coarse and fine fields fit jointly by photometric
error, with the fine pass importance-sampled from detached coarse weights.

The loop is deterministic given its seed: ray selection, stratified
jitter, and importance draws all consume one generator whose state rides
along in checkpoints, so a resumed run retraces the interrupted one bit
for bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..diffcore import Graph, ops
from ..errors import CheckpointError, ContractError, TrainingDivergedError
from ..fields.config import NetworkConfig
from ..fields.network import attach_params, forward, init_params
from ..rays import Camera, RayBatch, generate_rays, pixel_grid
from ..render import RayRender, render_image, render_rays
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import psnr, ssim
from .optim import OptimizerState, adam_init, adam_step

LOG_COLUMNS = ("iteration", "loss", "lr", "val_psnr", "val_ssim",
               "ms_per_iter", "activation_elems")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    rays_per_batch: int = 64
    n_coarse: int = 16
    n_fine: int = 32
    lr_init: float = 5e-4
    lr_final: float = 5e-5
    seed: int = 0
    eval_every: int = 500
    eval_views: int = 2
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    chunk: int = 1024

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractError("iterations must be positive")
        if self.rays_per_batch < 1:
            raise ContractError("rays_per_batch must be positive")
        if not (0 < self.lr_final <= self.lr_init):
            raise ContractError("need 0 < lr_final <= lr_init")


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Exponential decay from lr_init to lr_final across the run."""
    span = max(config.iterations - 1, 1)
    frac = min(max(iteration, 0), span) / span
    return config.lr_init * (config.lr_final / config.lr_init) ** frac


def photometric_loss(render: RayRender, target: np.ndarray):
    """Mean squared error of both passes against the target colors."""
    rgb_c = render.coarse.rgb
    t = np.asarray(target, dtype=rgb_c.data.dtype)
    dc = ops.sub(rgb_c, t)
    loss = ops.tmean(ops.mul(dc, dc))
    if render.fine is not None:
        df = ops.sub(render.fine.rgb, t)
        loss = ops.add(loss, ops.tmean(ops.mul(df, df)))
    return loss


def _flatten_views(cameras: Sequence[Camera],
                   images: np.ndarray) -> Tuple[np.ndarray, ...]:
    """All rays of all views in one flat pool, with their target colors."""
    if len(cameras) != len(images):
        raise ContractError(f"{len(cameras)} cameras but {len(images)} images")
    origins, dirs, nears, fars, targets = [], [], [], [], []
    for cam, img in zip(cameras, images):
        if img.shape != (cam.height, cam.width, 3):
            raise ContractError(
                f"image {img.shape} does not match camera "
                f"{cam.height}x{cam.width}")
        rays = generate_rays(cam, pixel_grid(cam))
        origins.append(rays.origins)
        dirs.append(rays.directions)
        nears.append(rays.near)
        fars.append(rays.far)
        targets.append(img.reshape(-1, 3))
    return (np.concatenate(origins), np.concatenate(dirs),
            np.concatenate(nears), np.concatenate(fars),
            np.concatenate(targets))


class Trainer:
    """Owns both networks, the optimizer, the ray pool, and the log."""

    def __init__(self, net_config: NetworkConfig, train_config: TrainConfig,
                 cameras: Sequence[Camera], images: np.ndarray, *,
                 val_cameras: Sequence[Camera] = (),
                 val_images: Optional[np.ndarray] = None,
                 log_path=None):
        self.net_config = net_config
        self.train_config = train_config
        self.val_cameras = list(val_cameras)
        self.val_images = val_images if val_images is not None else \
            np.zeros((0, 1, 1, 3))
        (self.ray_origins, self.ray_dirs, self.ray_near, self.ray_far,
         self.ray_targets) = _flatten_views(cameras, images)
        seed_rng = np.random.default_rng(train_config.seed)
        self.params_coarse = init_params(net_config,
                                         int(seed_rng.integers(1 << 31)))
        self.params_fine = init_params(net_config,
                                       int(seed_rng.integers(1 << 31)))
        self.optimizer = adam_init(self._merged_params())
        self.rng = np.random.default_rng(train_config.seed)
        self.iteration = 0
        self.history: List[dict] = []
        self.log_path = Path(log_path) if log_path is not None else None
        if self.log_path is not None and not self.log_path.exists():
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text(",".join(LOG_COLUMNS) + "\n")

    # ------------------------------------------------------------- plumbing

    def _merged_params(self) -> Dict[str, np.ndarray]:
        out = {f"coarse.{k}": v for k, v in self.params_coarse.items()}
        out.update({f"fine.{k}": v for k, v in self.params_fine.items()})
        return out

    def _field(self, params):
        def field_fn(samples, graph=None, scope=None):
            return forward(self.net_config, params, samples, graph=graph,
                           scope=scope)
        return field_fn

    def _append_log(self, row: dict) -> None:
        self.history.append(row)
        if self.log_path is None:
            return
        cells = []
        for col in LOG_COLUMNS:
            v = row.get(col)
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        with open(self.log_path, "a") as fh:
            fh.write(",".join(cells) + "\n")

    def _debug_nonfinite(self, batch: RayBatch, targets: np.ndarray,
                         rng_state: dict) -> str:
        """Re-run the failed step retaining every node output and name the
        first op that produced a non-finite value."""
        replay_rng = np.random.default_rng(0)
        replay_rng.bit_generator.state = rng_state
        graph = Graph(retain_outputs=True)
        cfg = self.train_config
        try:
            out = render_rays(batch, self._field(attach_params(
                graph, self.params_coarse)),
                self._field(attach_params(graph, self.params_fine)),
                n_coarse=cfg.n_coarse, n_fine=cfg.n_fine,
                background=cfg.background, rng=replay_rng, graph=graph)
            photometric_loss(out, targets)
        except ContractError:
            pass  # the nodes recorded before the crash still identify it
        for nid, node in enumerate(graph.nodes):
            if node.out is not None and not np.isfinite(node.out).all():
                where = f" in scope {node.scope!r}" if node.scope else ""
                return (f"; first non-finite output from op {node.op!r}"
                        f"{where} (node {nid})")
        return ""

    # ------------------------------------------------------------- training

    def step(self) -> dict:
        cfg = self.train_config
        t0 = time.perf_counter()
        idx = self.rng.integers(0, len(self.ray_origins), cfg.rays_per_batch)
        batch = RayBatch(origins=self.ray_origins[idx],
                         directions=self.ray_dirs[idx],
                         near=self.ray_near[idx], far=self.ray_far[idx])
        rng_before = self.rng.bit_generator.state
        graph = Graph()
        handles_c = attach_params(graph, self.params_coarse)
        handles_f = attach_params(graph, self.params_fine)
        try:
            out = render_rays(batch, self._field(handles_c),
                              self._field(handles_f), n_coarse=cfg.n_coarse,
                              n_fine=cfg.n_fine, background=cfg.background,
                              rng=self.rng, graph=graph)
            loss = photometric_loss(out, self.ray_targets[idx])
        except ContractError as e:
            # non-finite densities poison the importance sampler before any
            # loss exists; distinguish that from a genuine contract bug
            detail = self._debug_nonfinite(batch, self.ray_targets[idx],
                                           rng_before)
            if detail:
                raise TrainingDivergedError(
                    f"render failed at iteration {self.iteration} ({e})"
                    + detail) from e
            raise
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            detail = self._debug_nonfinite(batch, self.ray_targets[idx],
                                           rng_before)
            raise TrainingDivergedError(
                f"loss is {loss_value} at iteration {self.iteration}"
                + detail)
        graph.backward(loss)
        grads = {f"coarse.{k}": graph.grad(t) for k, t in handles_c.items()}
        grads.update(
            {f"fine.{k}": graph.grad(t) for k, t in handles_f.items()})
        lr = lr_at(cfg, self.iteration)
        adam_step(self._merged_params(), grads, self.optimizer, lr)
        self.iteration += 1
        acts = (graph.activation_elements("coarse")
                + graph.activation_elements("fine"))
        return {"iteration": self.iteration, "loss": loss_value, "lr": lr,
                "ms_per_iter": (time.perf_counter() - t0) * 1e3,
                "activation_elems": acts}

    def evaluate(self, n_views: Optional[int] = None) -> Tuple[float, float]:
        """Mean PSNR / SSIM over the first n validation views (all if None)."""
        if not self.val_cameras:
            return math.nan, math.nan
        count = len(self.val_cameras) if n_views is None else \
            min(n_views, len(self.val_cameras))
        cfg = self.train_config
        ps, ss_ = [], []
        for cam, img in zip(self.val_cameras[:count], self.val_images[:count]):
            render = render_image(cam, self._field(self.params_coarse),
                                  self._field(self.params_fine),
                                  n_coarse=cfg.n_coarse, n_fine=cfg.n_fine,
                                  background=cfg.background, rng=None,
                                  chunk=cfg.chunk)
            ps.append(psnr(render.rgb, img))
            ss_.append(ssim(render.rgb, img))
        return float(np.mean(ps)), float(np.mean(ss_))

    def run(self) -> List[dict]:
        cfg = self.train_config
        while self.iteration < cfg.iterations:
            row = self.step()
            due = (cfg.eval_every > 0
                   and self.iteration % cfg.eval_every == 0)
            if (due or self.iteration == cfg.iterations) and self.val_cameras:
                n = None if self.iteration == cfg.iterations else \
                    cfg.eval_views
                row["val_psnr"], row["val_ssim"] = self.evaluate(n)
            self._append_log(row)
        return self.history

    # ----------------------------------------------------------- persistence

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        tensors = dict(self._merged_params())
        tensors.update({f"adam.m.{k}": v
                        for k, v in self.optimizer.m.items()})
        tensors.update({f"adam.v.{k}": v
                        for k, v in self.optimizer.v.items()})
        meta = dict(extra_meta) if extra_meta else {}
        meta.update({
            "iteration": self.iteration,
            "adam_step": self.optimizer.step,
            "rng_state": self.rng.bit_generator.state,
            "net_config": dataclasses.asdict(self.net_config),
            "train_config": dataclasses.asdict(self.train_config),
        })
        save_checkpoint(path, tensors, meta)

    def load(self, path) -> None:
        tensors, meta = load_checkpoint(path)
        saved_net = meta.get("net_config", {})
        current = _jsonify(dataclasses.asdict(self.net_config))
        if _jsonify(saved_net) != current:
            diffs = [k for k in current
                     if _jsonify(saved_net.get(k)) != current[k]]
            raise CheckpointError(
                "checkpoint network config does not match this trainer "
                f"(differs in: {', '.join(sorted(diffs))})")
        merged = self._merged_params()
        if set(tensors) != (set(merged)
                            | {f"adam.m.{k}" for k in merged}
                            | {f"adam.v.{k}" for k in merged}):
            raise CheckpointError("checkpoint tensor names do not match "
                                  "this trainer's parameters")
        for name, arr in merged.items():
            src = tensors[name]
            if src.shape != arr.shape or src.dtype != arr.dtype:
                raise CheckpointError(
                    f"tensor {name!r} has shape {src.shape} {src.dtype}, "
                    f"expected {arr.shape} {arr.dtype}")
            arr[...] = src
        self.optimizer.m = {k: tensors[f"adam.m.{k}"] for k in merged}
        self.optimizer.v = {k: tensors[f"adam.v.{k}"] for k in merged}
        self.optimizer.step = int(meta["adam_step"])
        self.iteration = int(meta["iteration"])
        self.rng.bit_generator.state = meta["rng_state"]


def _jsonify(obj):
    return json.loads(json.dumps(obj))
