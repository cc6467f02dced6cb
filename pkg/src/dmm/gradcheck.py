"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, zero_grads


class NonDeterminismError(RuntimeError):
    pass


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    ambiguous: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    worst: tuple[int, tuple[int, ...]] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def rel_error(analytic: float, numeric: float, atol: float = 1e-8) -> float:
    diff = abs(analytic - numeric)
    if diff <= atol:
        return 0.0
    return diff / max(abs(analytic), abs(numeric))


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-8,
    max_coords: int | None = None,
    seed: int = 0,
    kink_tol: float = 1e-3,
) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` against central differences.

    Inputs are perturbed in place and restored, so ``f`` may also close over
    them.  A failing coordinate whose one-sided difference quotients disagree
    by more than ``kink_tol`` sits on a non-differentiable point (a max-pool
    tie, a ReLU at zero) and is reported in ``ambiguous`` instead of scored.
    ``max_coords`` caps the number of coordinates probed per input, chosen
    with a seeded generator.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires 64-bit tensors")

    def value() -> float:
        return float(f(*inputs).data)

    base = value()
    if value() != base:
        raise NonDeterminismError("f returned different values for identical inputs")

    flags = [t.requires_grad for t in inputs]
    zero_grads(inputs)
    for t in inputs:
        t.requires_grad = True
    try:
        out = f(*inputs)
        if out.size != 1:
            raise ValueError("gradcheck needs a scalar-valued function")
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    finally:
        for t, flag in zip(inputs, flags):
            t.requires_grad = flag
        zero_grads(inputs)

    rng = np.random.default_rng(seed)
    report = GradcheckReport(0.0, tol, 0)
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = value()
            flat[c] = orig - h
            fm = value()
            flat[c] = orig
            idx = tuple(int(i) for i in np.unravel_index(c, t.shape))
            err = rel_error(float(analytic[k].reshape(-1)[c]), (fp - fm) / (2 * h), atol)
            fwd, bwd = (fp - base) / h, (base - fm) / h
            # only a failing coordinate can be excused as a kink
            if err >= tol and abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                report.ambiguous.append((k, idx))
                continue
            report.n_checked += 1
            if report.worst is None or err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (k, idx)
    return report
