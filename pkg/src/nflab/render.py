"""Differentiable volume rendering: compositing and the two-pass driver.

Compositing follows the emission-absorption model on a per-ray depth
partition: segment i spans [t_i, t_{i+1}) (the last segment ends at far),
its opacity is alpha_i = 1 - exp(-sigma_i * delta_i), and the
transmittance in front of it is T_i = exp(-sum of earlier sigma*delta).
Because 1 - alpha equals exp(-sigma*delta) exactly, T is computed from an
exclusive cumulative sum with no epsilon guard.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Tuple, Union

import numpy as np

from .diffcore import ops
from .diffcore.tensor import Graph, Tensor
from .errors import ContractError, ShapeError
from .fields.network import RadianceOutput
from .rays import (Camera, RayBatch, SampleSet, generate_rays,
                   importance_samples_batch, merge_depths, pixel_grid,
                   stratified_samples)

# depth estimates divide by accumulated opacity; fully transparent rays
# would divide by zero
DEPTH_GUARD = 1e-10

WHITE = (1.0, 1.0, 1.0)


class FieldFn(Protocol):
    def __call__(self, samples: SampleSet, graph: Optional[Graph] = None,
                 scope: Optional[str] = None) -> RadianceOutput: ...


@dataclass(frozen=True)
class RenderResult:
    """One compositing pass. rgb stays on the tape when inputs were; the
    diagnostic channels are always detached numpy."""
    rgb: Union[np.ndarray, Tensor]   # [R, 3]
    weights: np.ndarray              # [R, N]
    depth: np.ndarray                # [R]
    acc: np.ndarray                  # [R]


@dataclass(frozen=True)
class RayRender:
    """Hierarchical render of one ray batch."""
    coarse: RenderResult
    fine: Optional[RenderResult]
    coarse_samples: SampleSet
    fine_samples: Optional[SampleSet]

    @property
    def final(self) -> RenderResult:
        return self.fine if self.fine is not None else self.coarse


@dataclass(frozen=True)
class ImageRender:
    rgb: np.ndarray     # [H, W, 3]
    depth: np.ndarray   # [H, W]
    acc: np.ndarray     # [H, W]


def segment_lengths(depths: np.ndarray, far: np.ndarray) -> np.ndarray:
    """delta_i = t_{i+1} - t_i, with the last segment running to far."""
    last = np.maximum(far - depths[:, -1], 0.0)[:, None]
    return np.concatenate([np.diff(depths, axis=1), last], axis=1)


def composite(sigma, rgb, depths: np.ndarray, far: np.ndarray,
              background=WHITE) -> RenderResult:
    """Alpha-composite per-sample density and color along each ray.

    sigma [R, N] and rgb [R, N, 3] may be raw arrays or tape tensors; the
    returned rgb [R, 3] is attached exactly when they were. Unclaimed
    transmittance falls onto the background color.
    """
    st = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    ct = rgb if isinstance(rgb, Tensor) else Tensor(rgb)
    depths = np.asarray(depths, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    r, n = depths.shape
    if st.shape != (r, n) or ct.shape != (r, n, 3):
        raise ShapeError(f"sigma {st.shape} / rgb {ct.shape} do not match "
                         f"depths {depths.shape}")
    dt = st.data.dtype
    one = dt.type(1.0)
    delta = segment_lengths(depths, far).astype(dt, copy=False)
    bg = np.asarray(background, dtype=dt)
    if bg.shape != (3,):
        raise ShapeError(f"background must be a color triple, got {bg.shape}")

    tau = ops.mul(st, delta)
    alpha = ops.sub(one, ops.exp(ops.neg(tau)))
    trans = ops.exp(ops.neg(ops.cumsum_exclusive(tau)))
    weights = ops.mul(trans, alpha)
    acc = ops.tsum(weights, axis=1, keepdims=True)           # [R, 1]
    lit = ops.tsum(ops.mul(ops.reshape(weights, (r, n, 1)), ct), axis=1)
    color = ops.add(lit, ops.mul(ops.sub(one, acc), bg))

    wv = weights.data
    acc_v = wv.sum(axis=1)
    depth = (wv * depths).sum(axis=1) / np.maximum(acc_v, DEPTH_GUARD)
    out_rgb = color if color.graph is not None else color.data
    return RenderResult(rgb=out_rgb, weights=wv, depth=depth, acc=acc_v)


def strictify_depths(depths: np.ndarray) -> np.ndarray:
    """Bump duplicate merged depths up by one ulp so rows strictly increase.

    Duplicates only appear when an importance sample lands exactly on a
    coarse depth, so the loop almost never runs more than once.
    """
    d = depths.copy()
    for _ in range(8):
        flat = d[:, 1:] <= d[:, :-1]
        if not flat.any():
            return d
        bumped = np.nextafter(d[:, :-1], np.inf)
        d[:, 1:] = np.where(flat, np.maximum(d[:, 1:], bumped), d[:, 1:])
    if not (np.diff(d, axis=1) > 0).all():
        raise ContractError("could not separate duplicate sample depths")
    return d


def render_rays(batch: RayBatch, coarse_field: FieldFn,
                fine_field: Optional[FieldFn] = None, *,
                n_coarse: int = 64, n_fine: int = 128,
                background=WHITE,
                rng: Optional[np.random.Generator] = None,
                graph: Optional[Graph] = None) -> RayRender:
    """Stratified coarse pass, then an importance-sampled fine pass.

    The fine pass evaluates the union of coarse and importance depths. The
    coarse weights driving the importance draw are detached, so gradients
    reach the coarse network only through its own rendered color.
    """
    ss_c = stratified_samples(batch, n_coarse, rng)
    out_c = coarse_field(ss_c, graph=graph, scope="coarse")
    res_c = composite(out_c.sigma, out_c.rgb, ss_c.depths, batch.far,
                      background)
    if fine_field is None:
        return RayRender(coarse=res_c, fine=None, coarse_samples=ss_c,
                         fine_samples=None)
    extra = importance_samples_batch(ss_c.depths, res_c.weights, n_fine,
                                     rng, near=batch.near, far=batch.far)
    depths_f = strictify_depths(merge_depths(ss_c.depths, extra))
    positions = batch.origins[:, None, :] + \
        depths_f[:, :, None] * batch.directions[:, None, :]
    ss_f = SampleSet(depths=depths_f, positions=positions,
                     view_dirs=batch.directions, near=batch.near,
                     far=batch.far)
    out_f = fine_field(ss_f, graph=graph, scope="fine")
    res_f = composite(out_f.sigma, out_f.rgb, ss_f.depths, batch.far,
                      background)
    return RayRender(coarse=res_c, fine=res_f, coarse_samples=ss_c,
                     fine_samples=ss_f)


def render_image(camera: Camera, coarse_field: FieldFn,
                 fine_field: Optional[FieldFn] = None, *,
                 n_coarse: int = 64, n_fine: int = 128,
                 background=WHITE,
                 rng: Optional[np.random.Generator] = None,
                 chunk: int = 4096) -> ImageRender:
    """Render a full image in ray chunks without building any tape."""
    if chunk < 1:
        raise ContractError(f"chunk must be positive, got {chunk}")
    pixels = pixel_grid(camera)
    parts = []
    for start in range(0, len(pixels), chunk):
        batch = generate_rays(camera, pixels[start:start + chunk])
        out = render_rays(batch, coarse_field, fine_field,
                          n_coarse=n_coarse, n_fine=n_fine,
                          background=background, rng=rng).final
        parts.append((np.asarray(out.rgb.data if isinstance(out.rgb, Tensor)
                                 else out.rgb), out.depth, out.acc))
    h, w = camera.height, camera.width
    rgb = np.concatenate([p[0] for p in parts]).reshape(h, w, 3)
    depth = np.concatenate([p[1] for p in parts]).reshape(h, w)
    acc = np.concatenate([p[2] for p in parts]).reshape(h, w)
    return ImageRender(rgb=rgb, depth=depth, acc=acc)
