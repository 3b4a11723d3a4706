"""Radiance field networks: the dense baseline and both U-shaped variants.

All three share the same skeleton: an input layer, a symmetric trunk of
2*down_levels middle layers, a final full-resolution layer, then a density
head and a view-conditioned color head. The baseline keeps every middle
layer at full sample resolution; the U variants halve it on the way down
(strided convolution or subsampling) and restore it on the way up with
depth-aware interpolation plus a skip connection.
"""

from __future__ import annotations

import dataclasses
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from ..diffcore.ops import conv1d_indices
from ..diffcore.tensor import Graph, Tensor
from ..errors import ContractError, ShapeError
from ..rays import SampleSet, positional_encode
from ..resample import lerp_weights
from .config import NetworkConfig
from .layers import (conv_act, dense2_act, dense_act, dense_bcast_act,
                     subsample_dense_act, upsample_merge_act)

# softplus(-1) ~= 0.31: start mostly transparent so early renders are not
# uniform fog in front of the background
SIGMA_BIAS_INIT = -1.0

Params = Dict[str, Union[np.ndarray, Tensor]]


@dataclass(frozen=True)
class RadianceOutput:
    """Per-sample field outputs: sigma [R, N] and rgb [R, N, 3]."""
    sigma: Union[np.ndarray, Tensor]
    rgb: Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class ActivationReport:
    """Closed-form activation storage for one forward pass, in elements."""
    trunk_elements: int
    head_elements: int

    @property
    def total(self) -> int:
        return self.trunk_elements + self.head_elements


def validate_sample_count(config: NetworkConfig, n_samples: int) -> None:
    """Reject sample counts the trunk cannot halve cleanly."""
    if n_samples < 1:
        raise ContractError("need at least one sample per ray")
    if config.variant == "nerf":
        return
    step = 1 << config.down_levels
    if n_samples % step != 0:
        raise ContractError(
            f"variant {config.variant!r} with {config.down_levels} down "
            f"levels needs the sample count to be a multiple of {step}, "
            f"got {n_samples}")
    if n_samples // step < 2:
        raise ContractError(
            f"{n_samples} samples leave fewer than 2 at the bottom level; "
            f"need at least {2 * step}")


def _param_specs(config: NetworkConfig) -> List[Tuple[str, Tuple[int, ...], float]]:
    """(name, shape, init_std) for every parameter, biases with std 0."""
    w, d = config.width, config.down_levels
    dx, dd = config.pos_dim, config.dir_dim
    relu = lambda fan: float(np.sqrt(2.0 / fan))
    head = lambda fan: float(np.sqrt(1.0 / fan))
    specs: List[Tuple[str, Tuple[int, ...], float]] = []
    specs.append(("trunk0.w", (dx, w), relu(dx)))
    specs.append(("trunk0.b", (w,), 0.0))
    for i in range(1, d + 1):  # down path
        if config.variant == "unerf-conv":
            k = config.kernel
            specs.append((f"trunk{i}.k", (k, w, w), relu(k * w)))
        else:
            specs.append((f"trunk{i}.w", (w, w), relu(w)))
        specs.append((f"trunk{i}.b", (w,), 0.0))
    for i in range(d + 1, 2 * d + 1):  # up path
        inject = config.skip_injection and i == d + 1
        fan = w + dx if inject else w
        specs.append((f"trunk{i}.w", (w, w), relu(fan)))
        if inject:
            specs.append((f"trunk{i}.wb", (dx, w), relu(fan)))
        specs.append((f"trunk{i}.b", (w,), 0.0))
    specs.append((f"trunk{2 * d + 1}.w", (w, w), relu(w)))
    specs.append((f"trunk{2 * d + 1}.b", (w,), 0.0))
    specs.append(("sigma.w", (w, 1), head(w)))
    specs.append(("sigma.b", (1,), 0.0))
    half = w // 2
    specs.append(("color0.wa", (w, half), relu(w + dd)))
    specs.append(("color0.wb", (dd, half), relu(w + dd)))
    specs.append(("color0.b", (half,), 0.0))
    specs.append(("color1.w", (half, 3), head(half)))
    specs.append(("color1.b", (3,), 0.0))
    return specs


def init_params(config: NetworkConfig, rng) -> Dict[str, np.ndarray]:
    """He-style gaussian init; biases zero except the density bias."""
    rng = np.random.default_rng(rng)
    dt = np.dtype(config.dtype)
    params: Dict[str, np.ndarray] = {}
    for name, shape, std in _param_specs(config):
        if std == 0.0:
            arr = np.zeros(shape, dtype=dt)
            if name == "sigma.b":
                arr += SIGMA_BIAS_INIT
        else:
            arr = (rng.standard_normal(shape) * std).astype(dt)
        params[name] = arr
    return params


def count_parameters(config: NetworkConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_specs(config))


def attach_params(graph: Graph, params: Params) -> Dict[str, Tensor]:
    """Wrap raw arrays as gradient leaves; pass through attached tensors."""
    out: Dict[str, Tensor] = {}
    for name, value in params.items():
        if isinstance(value, Tensor):
            if value.graph is not graph:
                raise ContractError(f"parameter {name!r} lives on a "
                                    "different graph")
            out[name] = value
        else:
            out[name] = graph.leaf(value, grad=True)
    return out


def _trunk_level_sizes(config: NetworkConfig, n_samples: int) -> List[int]:
    """Output sample count of every trunk layer, input layer first."""
    d = config.down_levels
    if config.variant == "nerf":
        return [n_samples] * (2 * d + 2)
    sizes = [n_samples]
    sizes += [n_samples >> lv for lv in range(1, d + 1)]
    sizes += [n_samples >> lv for lv in range(d - 1, -1, -1)]
    sizes.append(n_samples)
    return sizes


def activation_accounting(config: NetworkConfig, n_samples: int,
                          n_rays: int) -> ActivationReport:
    """Closed-form count of the feature elements one forward pass retains.

    Every trunk layer stores exactly one width-wide map at its own sample
    resolution; the heads store one 1-, width/2-, and 3-channel map at
    full resolution. Encoded inputs and parameters are not activations.
    """
    validate_sample_count(config, n_samples)
    sizes = _trunk_level_sizes(config, n_samples)
    trunk = n_rays * config.width * sum(sizes)
    heads = n_rays * n_samples * (1 + config.width // 2 + 3)
    return ActivationReport(trunk_elements=trunk, head_elements=heads)


def _up_geometry(fine_depths: np.ndarray, mode: str):
    """Anchor indices and combination weights for one up-path level.

    Anchors are the even-indexed depths of the target level; the odd
    depths are reconstructed from the two nearest anchors (clamped at the
    ends, which extrapolates).
    """
    n = fine_depths.shape[1]
    anchors = fine_depths[:, 0::2]
    queries = fine_depths[:, 1::2]
    a = anchors.shape[1]
    idx = np.arange(queries.shape[1])
    left = np.minimum(idx, a - 2)
    right = left + 1
    d_l = anchors[:, left]
    d_r = anchors[:, right]
    if mode == "position-aware":
        t = lerp_weights(d_l, d_r, queries)
        wl, wr = 1.0 - t, t
    elif mode == "nearest":
        take_left = (queries - d_l) <= (d_r - queries)
        wl = take_left.astype(np.float64)
        wr = 1.0 - wl
    elif mode == "average":
        wl = np.full_like(d_l, 0.5)
        wr = np.full_like(d_l, 0.5)
    else:
        raise ContractError(f"unknown interpolation mode {mode!r}")
    return left, right, wl, wr


def forward(config: NetworkConfig, params: Params, samples: SampleSet,
            graph: Optional[Graph] = None,
            scope: Optional[str] = None) -> RadianceOutput:
    """Evaluate the field at every sample. With a graph, records the tape.

    Density is view-independent by construction: the direction encoding
    enters only the color head.
    """
    depths = samples.depths
    r, n = depths.shape
    validate_sample_count(config, n)
    dt = np.dtype(config.dtype)
    gx = positional_encode(samples.positions, config.pos_freqs).astype(
        dt, copy=False)
    gd = positional_encode(samples.view_dirs, config.dir_freqs).astype(
        dt, copy=False)
    if gx.shape != (r, n, config.pos_dim):
        raise ShapeError(f"encoded positions {gx.shape} do not match "
                         f"(rays={r}, samples={n}, dim={config.pos_dim})")
    if graph is None:
        p: Dict[str, Union[np.ndarray, Tensor]] = {
            k: (v.data if isinstance(v, Tensor) else v)
            for k, v in params.items()}
    else:
        p = attach_params(graph, params)
    d = config.down_levels
    final = 2 * d + 1
    ctx = graph.scope(scope) if (graph is not None and scope) else nullcontext()
    with ctx:
        h = dense_act(graph, gx, p["trunk0.w"], p["trunk0.b"])
        if config.variant == "nerf":
            for i in range(1, final):
                if config.skip_injection and i == d + 1:
                    h = dense2_act(graph, h, gx, p[f"trunk{i}.w"],
                                   p[f"trunk{i}.wb"], p[f"trunk{i}.b"])
                else:
                    h = dense_act(graph, h, p[f"trunk{i}.w"],
                                  p[f"trunk{i}.b"])
        else:
            level_depths = [depths]
            skips = [h]
            for i in range(1, d + 1):
                if config.variant == "unerf-conv":
                    h = conv_act(graph, h, p[f"trunk{i}.k"], p[f"trunk{i}.b"])
                else:
                    h = subsample_dense_act(graph, h, p[f"trunk{i}.w"],
                                            p[f"trunk{i}.b"])
                level_depths.append(level_depths[-1][:, 0::2])
                skips.append(h)
            for i in range(d + 1, final):
                lv = 2 * d - i  # output level of this layer; 0 is full res
                fine_d = level_depths[lv]
                left, right, wl, wr = _up_geometry(fine_d,
                                                   config.interpolation)
                inject = config.skip_injection and i == d + 1
                xb = gx[:, :: 1 << lv] if inject else None
                wb = p[f"trunk{i}.wb"] if inject else None
                h = upsample_merge_act(graph, h, skips[lv], left, right,
                                       wl, wr, p[f"trunk{i}.w"],
                                       p[f"trunk{i}.b"], xb=xb, wb=wb)
        h = dense_act(graph, h, p[f"trunk{final}.w"], p[f"trunk{final}.b"])
        sig = dense_act(graph, h, p["sigma.w"], p["sigma.b"], act="softplus")
        sigma = sig.reshape((r, n)) if graph is not None else sig.reshape(r, n)
        hid = dense_bcast_act(graph, h, gd, p["color0.wa"], p["color0.wb"],
                              p["color0.b"])
        rgb = dense_act(graph, hid, p["color1.w"], p["color1.b"],
                        act="sigmoid")
    return RadianceOutput(sigma=sigma, rgb=rgb)


def receptive_field(config: NetworkConfig, n_samples: int) -> np.ndarray:
    """Boolean [N, N] matrix: entry [i, j] is True when output sample i may
    depend on input sample j. Derived purely from the index structure."""
    validate_sample_count(config, n_samples)
    dep = np.eye(n_samples, dtype=bool)
    if config.variant == "nerf":
        return dep
    d = config.down_levels
    stack = [dep]
    cur = dep
    for _ in range(1, d + 1):
        s = cur.shape[0]
        if config.variant == "unerf-conv":
            idx = conv1d_indices(s, config.kernel, 2, "replicate")
            nxt = np.zeros((idx.shape[0], n_samples), dtype=bool)
            for u in range(idx.shape[1]):
                nxt |= cur[idx[:, u]]
        else:
            nxt = cur[0::2]
        stack.append(nxt)
        cur = nxt
    for lv in range(d - 1, -1, -1):
        fine = stack[lv]
        nf = fine.shape[0]
        a = cur.shape[0]
        idx = np.arange(nf - a)
        left = np.minimum(idx, a - 2)
        merged = np.zeros_like(fine)
        merged[0::2] = cur
        merged[1::2] = cur[left] | cur[left + 1]
        cur = merged | fine  # skip connection unions the same-level rows
    return cur


def params_sub_from_conv(config: NetworkConfig,
                         params: Dict[str, np.ndarray]
                         ) -> Tuple[NetworkConfig, Dict[str, np.ndarray]]:
    """Reinterpret width-1-kernel convolution weights as the subsampling
    variant's dense weights. The two forwards then agree to rounding."""
    if config.variant != "unerf-conv":
        raise ContractError("expected the convolutional variant")
    if config.kernel != 1:
        raise ContractError(
            f"only a size-1 kernel maps onto subsampling, got "
            f"{config.kernel}")
    out: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        if name.endswith(".k"):
            out[name[:-2] + ".w"] = value[0]
        else:
            out[name] = value
    sub_config = dataclasses.replace(config, variant="unerf-sub", kernel=1)
    return sub_config, out
