"""Central-difference verification of tape gradients.

The relative error is guarded: |a - n| / (|a| + |n| + guard). Evaluations
whose two perturbed passes disagree on any piecewise-activation pattern
(a relu flipping state, a nearest-anchor selection switching) straddle a
kink where the finite-difference quotient is meaningless; those elements
are excluded from the pass/fail decision and reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Graph, Tensor


@dataclass
class GradCheckFailure:
    input_index: int
    element: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    n_excluded: int
    failures: list[GradCheckFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self) -> str:
        state = "pass" if self.passed else f"FAIL ({len(self.failures)} elements)"
        return (f"gradcheck {state}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.1e}, {self.n_checked} checked, "
                f"{self.n_excluded} excluded)")


def _signatures_match(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y)
               for x, y in zip(a, b))


def gradient_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-5,
    step: float = 1e-6,
    guard: float = 1e-3,
    max_per_input: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare tape gradients of a scalar-valued fn against central differences.

    fn receives one grad-enabled leaf Tensor per entry of `inputs` and must
    return a scalar Tensor. All arithmetic runs in float64. When
    max_per_input is given, that many elements per input are sampled with
    the provided rng (default seed 0) instead of checking exhaustively.
    """
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]

    graph = Graph(track_kinks=True)
    leaves = [graph.leaf(a, grad=True) for a in arrays]
    loss = fn(*leaves)
    graph.backward(loss)
    analytic = [graph.grad(t) for t in leaves]

    def evaluate(perturbed: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
        g = Graph(track_kinks=True)
        out = fn(*[g.leaf(a, grad=True) for a in perturbed])
        return float(out.data), g.kink_signature()

    if rng is None:
        rng = np.random.default_rng(0)

    max_rel = 0.0
    n_checked = 0
    n_excluded = 0
    failures: list[GradCheckFailure] = []
    for i, base in enumerate(arrays):
        grad_i = analytic[i]
        flat_analytic = (np.zeros(base.size) if grad_i is None
                         else np.asarray(grad_i, dtype=np.float64).ravel())
        if max_per_input is not None and base.size > max_per_input:
            elements = rng.choice(base.size, size=max_per_input, replace=False)
        else:
            elements = range(base.size)
        for e in elements:
            work = [a if j != i else a.copy() for j, a in enumerate(arrays)]
            flat = work[i].ravel()
            orig = flat[e]
            flat[e] = orig + step
            f_plus, sig_plus = evaluate(work)
            flat[e] = orig - step
            f_minus, sig_minus = evaluate(work)
            if not _signatures_match(sig_plus, sig_minus):
                n_excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(flat_analytic[e])
            rel = abs(a - numeric) / (abs(a) + abs(numeric) + guard)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
            if rel > tolerance:
                failures.append(GradCheckFailure(i, int(e), a, numeric, rel))
    return GradCheckReport(max_rel_error=max_rel, tolerance=tolerance,
                           n_checked=n_checked, n_excluded=n_excluded,
                           failures=failures)
