"""Depth-indexed feature resampling along a ray.

The central rule: a feature at query depth x1 bracketed by anchors at x0
and x2 is reconstructed as f(x0) + (f(x2) - f(x0)) * (x1 - x0)/(x2 - x0),
evaluated here in the equivalent two-weight form f(x0)*(1-w) + f(x2)*w so
that a query exactly at an anchor depth returns that anchor's feature with
no drift. Queries outside the anchor span extrapolate from the two nearest
anchors; coincident anchors fall back to the left feature. Everything is
differentiable with respect to the features; depths are plain geometry.

Baselines for ablation: nearest anchor (ties to the smaller depth) and the
unweighted average of the two bracketing anchors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .diffcore.ops import _as_pair
from .diffcore.tensor import Tensor
from .errors import ContractError, ShapeError

Features = Union[np.ndarray, Tensor]


@dataclass
class DepthedFeatures:
    """Per-sample features tagged with their strictly increasing depths."""

    depths: np.ndarray    # [M]
    features: Features    # [M, C], optionally graph-attached

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        feat = self.features.data if isinstance(self.features, Tensor) \
            else np.asarray(self.features)
        if self.depths.ndim != 1 or feat.ndim != 2 or \
                feat.shape[0] != self.depths.shape[0]:
            raise ShapeError(
                f"need depths [M] with features [M, C], got "
                f"{self.depths.shape} and {feat.shape}")
        if (np.diff(self.depths) <= 0).any():
            raise ContractError("anchor depths must be strictly increasing")

    def __len__(self) -> int:
        return self.depths.shape[0]


def bracket_indices(anchor_depths: np.ndarray,
                    query_depths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left/right anchor indices bracketing each query.

    Interior queries get their enclosing pair; queries at or beyond either
    end get the two nearest anchors, which makes the downstream combination
    an extrapolation there.
    """
    i = np.searchsorted(anchor_depths, query_depths, side="left")
    right = np.clip(i, 1, anchor_depths.size - 1)
    return right - 1, right


def lerp_weights(d_left: np.ndarray, d_right: np.ndarray,
                 query_depths: np.ndarray) -> np.ndarray:
    """Fractional position of each query inside its bracket; 0 when the
    bracket is degenerate."""
    span = d_right - d_left
    with np.errstate(invalid="ignore", divide="ignore"):
        w = (query_depths - d_left) / span
    return np.where(span == 0, 0.0, w)


def lerp_combine(f_left: np.ndarray, f_right: np.ndarray,
                 w: np.ndarray) -> np.ndarray:
    """f_left*(1-w) + f_right*w, exact at w == 0 and w == 1."""
    w = w.astype(f_left.dtype, copy=False)
    return f_left * (1.0 - w) + f_right * w


def _gather_combined(features: Features, left: np.ndarray, right: np.ndarray,
                     wl: np.ndarray, wr: np.ndarray, op: str) -> Features:
    """out[q] = f[left[q]]*wl[q] + f[right[q]]*wr[q], with feature gradients."""
    fv, ft = _as_pair(features)
    wl = wl.astype(fv.dtype, copy=False)[:, None]
    wr = wr.astype(fv.dtype, copy=False)[:, None]
    out = fv[left] * wl + fv[right] * wr
    if ft is None:
        return out
    n_anchor = fv.shape[0]

    def bw(grad):
        df = np.zeros_like(fv)
        np.add.at(df, left, grad * wl)
        np.add.at(df, right, grad * wr)
        return (df,)

    # wl/wr/indices are retained geometry, not graph-produced activations
    return ft.graph.record(out, (ft,), bw, saved=(fv, wl, wr), op=op)


def _query_array(query_depths) -> np.ndarray:
    q = np.asarray(query_depths, dtype=np.float64)
    if q.ndim != 1:
        raise ShapeError(f"query depths must be 1-D, got {q.shape}")
    return q


def interp_position_aware(anchors: DepthedFeatures,
                          query_depths: np.ndarray) -> Features:
    """Depth-weighted linear reconstruction at each query depth."""
    q = _query_array(query_depths)
    d = anchors.depths
    if d.size == 1:
        left = np.zeros(q.size, dtype=int)
        return _gather_combined(anchors.features, left, left,
                                np.ones(q.size), np.zeros(q.size),
                                "interp_position_aware")
    left, right = bracket_indices(d, q)
    w = lerp_weights(d[left], d[right], q)
    return _gather_combined(anchors.features, left, right, 1.0 - w, w,
                            "interp_position_aware")


def interp_nearest(anchors: DepthedFeatures,
                   query_depths: np.ndarray) -> Features:
    """Copy the depth-nearest anchor feature; ties pick the smaller depth."""
    q = _query_array(query_depths)
    d = anchors.depths
    if d.size == 1:
        left = np.zeros(q.size, dtype=int)
    else:
        lo, hi = bracket_indices(d, q)
        take_left = np.abs(q - d[lo]) <= np.abs(d[hi] - q)
        left = np.where(take_left, lo, hi)
    ones = np.ones(q.size)
    return _gather_combined(anchors.features, left, left, ones,
                            np.zeros(q.size), "interp_nearest")


def interp_average(anchors: DepthedFeatures,
                   query_depths: np.ndarray) -> Features:
    """Unweighted mean of the two bracketing (or two nearest) anchors."""
    q = _query_array(query_depths)
    d = anchors.depths
    if d.size == 1:
        left = right = np.zeros(q.size, dtype=int)
    else:
        left, right = bracket_indices(d, q)
    half = np.full(q.size, 0.5)
    return _gather_combined(anchors.features, left, right, half, half,
                            "interp_average")


def split_anchors(df: DepthedFeatures) -> tuple[DepthedFeatures,
                                                DepthedFeatures]:
    """Even-indexed samples become anchors, odd-indexed ones intermediates."""
    if len(df) < 2:
        raise ContractError(
            f"need at least two samples to split, got {len(df)}")
    return (_take_rows(df, slice(0, None, 2)),
            _take_rows(df, slice(1, None, 2)))


def _take_rows(df: DepthedFeatures, rows) -> DepthedFeatures:
    fv, ft = _as_pair(df.features)
    idx = np.arange(len(df))[rows]
    out = fv[idx]
    if ft is None:
        return DepthedFeatures(df.depths[idx], out)
    n = fv.shape[0]

    def bw(grad):
        dfull = np.zeros_like(fv)
        dfull[idx] = grad
        return (dfull,)

    t = ft.graph.record(out, (ft,), bw, op="take_rows")
    return DepthedFeatures(df.depths[idx], t)


def interleave(a: DepthedFeatures, b: DepthedFeatures) -> DepthedFeatures:
    """Merge two depth-tagged feature sets into depth order.

    Duplicate depths are a contract error: a sample cannot sit at two
    features at once.
    """
    depths = np.concatenate([a.depths, b.depths])
    order = np.argsort(depths, kind="stable")
    merged = depths[order]
    if (np.diff(merged) <= 0).any():
        raise ContractError("interleave requires all depths distinct")
    fa, ta = _as_pair(a.features)
    fb, tb = _as_pair(b.features)
    if fa.shape[1] != fb.shape[1]:
        raise ShapeError(
            f"feature widths differ: {fa.shape} vs {fb.shape}")
    if (ta is None) != (tb is None):
        raise ContractError(
            "cannot interleave attached features with detached ones")
    stacked = np.concatenate([fa, fb], axis=0)[order]
    if ta is None:
        return DepthedFeatures(merged, stacked)
    graph = ta.graph
    na = fa.shape[0]
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)

    def bw(grad):
        g = grad[inv]
        return (g[:na], g[na:])

    t = graph.record(stacked, (ta, tb), bw, op="interleave")
    return DepthedFeatures(merged, t)
