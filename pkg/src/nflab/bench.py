"""Experiment matrix runner.

Each spec names one training configuration. The runner trains it on its
scene, cross-checks the measured activation count against the closed-form
prediction, records peak allocation and median wall time per iteration,
scores held-out views, and emits one CSV row per spec. A failing spec is
recorded in its row and the rest of the matrix keeps running.

Timing needs a quiet machine and a sequential schedule, so parallel
execution refuses to time; peak bytes and per-iteration milliseconds are
the two columns excluded from byte-determinism comparisons.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
import statistics
import time
import tracemalloc
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

from .errors import ContractError
from .fields.config import INTERP_MODES, VARIANTS, NetworkConfig
from .fields.network import activation_accounting, count_parameters
from .render import WHITE
from .scenes import load_blender
from .trainer.loop import TrainConfig, Trainer

BENCH_HEADER = ("spec_id,variant,kernel,interp,n_coarse,n_fine,rays,params,"
                "activation_elems,peak_bytes,ms_per_iter_median,"
                "val_psnr,val_ssim")

# platform-dependent measurements; masked when comparing CSVs for determinism
TIMING_COLUMNS = ("peak_bytes", "ms_per_iter_median")

WARMUP_ITERS = 50
MIN_TIMED_ITERS = 200

# shared base architecture; each spec overrides variant / kernel / interp
BENCH_NETWORK = NetworkConfig(variant="nerf", width=32, kernel=3,
                              pos_freqs=4, dir_freqs=2, down_levels=3,
                              dtype="float32")


@dataclass(frozen=True)
class ExperimentSpec:
    """One cell of the comparison matrix."""

    spec_id: str
    variant: str
    kernel: int
    interp: str
    n_coarse: int
    n_fine: int
    rays: int
    scene: str
    iterations: int
    seed: int

    def __post_init__(self):
        if not self.spec_id:
            raise ContractError("spec_id must be nonempty")
        if self.variant not in VARIANTS:
            raise ContractError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.interp not in INTERP_MODES:
            raise ContractError(
                f"interp must be one of {INTERP_MODES}, got {self.interp!r}")
        if self.kernel < 1:
            raise ContractError(f"kernel must be >= 1, got {self.kernel}")
        for field in ("n_coarse", "n_fine", "rays", "iterations"):
            if getattr(self, field) < 1:
                raise ContractError(f"{field} must be positive")
        if self.seed < 0:
            raise ContractError("seed must be nonnegative")
        if not str(self.scene):
            raise ContractError("scene path must be nonempty")


@dataclass(frozen=True)
class BenchRow:
    """Result record for one spec; metrics are unset when error is set."""

    spec_id: str
    params: int = 0
    activation_elems: int = 0
    peak_bytes: int = 0
    ms_per_iter_median: Optional[float] = None
    val_psnr: float = 0.0
    val_ssim: float = 0.0
    error: str = ""

    def __post_init__(self):
        if self.error:
            return
        for name in ("params", "activation_elems", "peak_bytes", "val_psnr"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ContractError(
                    f"{name} must be finite and nonnegative, got {v}")
        # structural similarity is signed by definition; a barely trained
        # model can dip below zero and that is still a real measurement
        if not math.isfinite(self.val_ssim) or abs(self.val_ssim) > 1 + 1e-9:
            raise ContractError(
                f"val_ssim must be finite in [-1, 1], got {self.val_ssim}")
        if self.ms_per_iter_median is not None and (
                not math.isfinite(self.ms_per_iter_median)
                or self.ms_per_iter_median < 0):
            raise ContractError("ms_per_iter_median must be finite and "
                                f"nonnegative, got {self.ms_per_iter_median}")


def _network_for(spec: ExperimentSpec, base: NetworkConfig) -> NetworkConfig:
    return dataclasses.replace(base, variant=spec.variant,
                               kernel=spec.kernel, interpolation=spec.interp)


def _run_spec(spec: ExperimentSpec, base: NetworkConfig, timed: bool,
              eval_views: Optional[int], near: float, far: float,
              background) -> BenchRow:
    if timed and spec.iterations < WARMUP_ITERS + MIN_TIMED_ITERS:
        raise ContractError(
            f"timed runs need >= {WARMUP_ITERS + MIN_TIMED_ITERS} iterations "
            f"({WARMUP_ITERS} warmup + {MIN_TIMED_ITERS} timed), "
            f"got {spec.iterations}")
    root = Path(spec.scene)
    if not root.exists():
        raise ContractError(f"scene path does not exist: {root}")
    net = _network_for(spec, base)
    cams, imgs = load_blender(root, "train", near=near, far=far,
                              background=background)
    val_cams, val_imgs = load_blender(root, "val", near=near, far=far,
                                      background=background)
    tcfg = TrainConfig(iterations=spec.iterations, rays_per_batch=spec.rays,
                       n_coarse=spec.n_coarse, n_fine=spec.n_fine,
                       seed=spec.seed, eval_every=0, background=background)
    trainer = Trainer(net, tcfg, cams, imgs, val_cameras=val_cams,
                      val_images=val_imgs)

    # peak allocation is probed on one early (untimed) iteration; tracing
    # slows the interpreter, so it never overlaps the timing window
    trace_at = 1 if spec.iterations > 1 else 0
    times: List[float] = []
    measured = 0
    peak = 0
    for i in range(spec.iterations):
        if i == trace_at and not tracemalloc.is_tracing():
            tracemalloc.start()
            try:
                row = trainer.step()
                peak = tracemalloc.get_traced_memory()[1]
            finally:
                tracemalloc.stop()
        else:
            t0 = time.perf_counter()
            row = trainer.step()
            if timed and i >= WARMUP_ITERS:
                times.append((time.perf_counter() - t0) * 1e3)
        measured = row["activation_elems"]

    predicted = (activation_accounting(net, spec.n_coarse, spec.rays).total
                 + activation_accounting(net, spec.n_coarse + spec.n_fine,
                                         spec.rays).total)
    if measured != predicted:
        raise ContractError(
            f"activation accounting drift: tape counted {measured}, "
            f"closed form predicts {predicted}")

    val_psnr, val_ssim = trainer.evaluate(eval_views)
    return BenchRow(
        spec_id=spec.spec_id,
        params=2 * count_parameters(net),  # coarse + fine networks
        activation_elems=measured,
        peak_bytes=peak,
        ms_per_iter_median=statistics.median(times) if times else None,
        val_psnr=val_psnr,
        val_ssim=val_ssim,
    )


def _safe_run_spec(spec: ExperimentSpec, base: NetworkConfig, timed: bool,
                   eval_views: Optional[int], near: float, far: float,
                   background) -> BenchRow:
    try:
        return _run_spec(spec, base, timed, eval_views, near, far, background)
    except Exception as e:  # noqa: BLE001 - one bad spec must not sink the run
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        return BenchRow(spec_id=spec.spec_id, error=msg)


def _spec_worker(args) -> BenchRow:
    return _safe_run_spec(*args)


def _worker_cap(n_specs: int) -> int:
    env = os.environ.get("NF_LAB_THREADS", "").strip()
    if env:
        cap = int(env)
        if cap < 1:
            raise ContractError(f"NF_LAB_THREADS must be >= 1, got {env!r}")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(n_specs, cap))


def _csv(pairs: Sequence[Tuple[ExperimentSpec, BenchRow]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_HEADER.split(","))
    for spec, row in pairs:
        cells = [spec.spec_id, spec.variant, str(spec.kernel), spec.interp,
                 str(spec.n_coarse), str(spec.n_fine), str(spec.rays)]
        if row.error:
            # metrics unavailable; the message rides in one extra cell
            cells += [""] * 6 + [row.error]
        else:
            ms = ("" if row.ms_per_iter_median is None
                  else f"{row.ms_per_iter_median:.3f}")
            cells += [str(row.params), str(row.activation_elems),
                      str(row.peak_bytes), ms, repr(row.val_psnr),
                      repr(row.val_ssim)]
        writer.writerow(cells)
    return buf.getvalue()


def mask_timing(csv_text: str) -> str:
    """Blank the measurement columns so two runs can be compared by bytes."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows:
        return csv_text
    header = rows[0]
    masked = {header.index(c) for c in TIMING_COLUMNS if c in header}
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows[1:]:
        writer.writerow(["" if i in masked else cell
                         for i, cell in enumerate(row)])
    return out.getvalue()


def run_benchmark(specs: Sequence[ExperimentSpec], *,
                  network: Optional[NetworkConfig] = None,
                  timed: bool = True, parallel: bool = False,
                  eval_views: Optional[int] = None,
                  near: float = 2.0, far: float = 6.0,
                  background=WHITE,
                  log: Optional[Callable[[str], None]] = None) -> str:
    """Train and score every spec; return the CSV report as text.

    Specs run sequentially unless parallel is set, in which case they run
    on separate worker processes (capped by NF_LAB_THREADS) and timing is
    refused because contention would corrupt it. eval_views limits the
    final scoring to the first views of the val split (None scores all).
    """
    specs = list(specs)
    ids = [s.spec_id for s in specs]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ContractError(f"spec_id values must be unique, repeated: {dupes}")
    if parallel and timed:
        raise ContractError("parallel execution cannot produce trustworthy "
                            "timings; pass timed=False to run parallel")
    if eval_views is not None and eval_views < 1:
        raise ContractError(f"eval_views must be >= 1, got {eval_views}")
    base = network if network is not None else BENCH_NETWORK

    if parallel and len(specs) > 1:
        args = [(s, base, timed, eval_views, near, far, background)
                for s in specs]
        with ProcessPoolExecutor(max_workers=_worker_cap(len(specs))) as pool:
            rows = list(pool.map(_spec_worker, args))
    else:
        rows = []
        for spec in specs:
            if log is not None:
                log(f"running {spec.spec_id}")
            rows.append(_safe_run_spec(spec, base, timed, eval_views,
                                       near, far, background))
    return _csv(list(zip(specs, rows)))


def interp_ablation(specs: Sequence[ExperimentSpec], **kwargs) -> str:
    """Sweep every spec over all interpolation strategies, same budget each.

    Only the sample-collapsing variants touch the interpolation path, so a
    plain trunk in the matrix would waste three identical runs; it is
    rejected instead.
    """
    specs = list(specs)
    for spec in specs:
        if spec.variant == "nerf":
            raise ContractError(
                f"interp ablation needs sample-collapsing variants, "
                f"spec {spec.spec_id!r} is nerf")
    expanded = [dataclasses.replace(spec, spec_id=f"{spec.spec_id}-{mode}",
                                    interp=mode)
                for spec in specs for mode in INTERP_MODES]
    return run_benchmark(expanded, **kwargs)
