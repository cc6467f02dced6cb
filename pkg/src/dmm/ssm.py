"""Selective state-space kernels and the four-direction 2-D scan."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DIRECTIONS = ("row-fwd", "row-bwd", "col-fwd", "col-bwd")


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass(eq=False)
class SSMParams:
    """Parameters of one selective SSM over ``dim`` channels.

    ``A = -exp(A_log)`` is the diagonal of the state matrix, one row of
    ``n_state`` entries per channel.  Step sizes come from
    ``softplus(x @ W_delta + b_delta)``; ``B`` and ``C`` are linear in ``x``.
    """

    A_log: Tensor
    D_skip: Tensor
    W_delta: Tensor
    b_delta: Tensor
    W_B: Tensor
    W_C: Tensor
    skip: bool = True

    @property
    def dim(self) -> int:
        return self.A_log.shape[0]

    @property
    def n_state(self) -> int:
        return self.A_log.shape[1]

    @classmethod
    def init(
        cls,
        dim: int,
        n_state: int,
        rng: np.random.Generator,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
        skip: bool = True,
        weight_scale: float | None = None,
    ) -> "SSMParams":
        scale = weight_scale if weight_scale is not None else dim**-0.5
        # -A = 1..n_state for every channel
        a_log = np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64), (dim, 1)))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=dim))
        return cls(
            A_log=Tensor(a_log, requires_grad=True),
            D_skip=Tensor(np.ones(dim), requires_grad=skip),
            W_delta=Tensor(rng.normal(0, 0.1 * scale, size=(dim, dim)), requires_grad=True),
            b_delta=Tensor(inverse_softplus(dt), requires_grad=True),
            W_B=Tensor(rng.normal(0, scale, size=(dim, n_state)), requires_grad=True),
            W_C=Tensor(rng.normal(0, scale, size=(dim, n_state)), requires_grad=True),
            skip=skip,
        )

    @classmethod
    def zeros(cls, dim: int, n_state: int, skip: bool = True) -> "SSMParams":
        return cls(
            A_log=Tensor(np.zeros((dim, n_state)), requires_grad=True),
            D_skip=Tensor(np.zeros(dim), requires_grad=skip),
            W_delta=Tensor(np.zeros((dim, dim)), requires_grad=True),
            b_delta=Tensor(np.zeros(dim), requires_grad=True),
            W_B=Tensor(np.zeros((dim, n_state)), requires_grad=True),
            W_C=Tensor(np.zeros((dim, n_state)), requires_grad=True),
            skip=skip,
        )

    def A(self) -> Tensor:
        return -T.exp(self.A_log)


def selective_params(x: Tensor, p: SSMParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent (Delta, B, C) for a sequence ``x`` of shape (N, L, D)."""
    if x.ndim != 3 or x.shape[-1] != p.dim:
        raise ShapeError(f"selective_params: input {x.shape} does not end in D={p.dim}")
    delta = T.softplus(T.linear(x, p.W_delta, p.b_delta))
    return delta, T.linear(x, p.W_B), T.linear(x, p.W_C)


def _diagonal(A) -> Tensor:
    if isinstance(A, Tensor) and A.ndim == 2:
        return A
    arr = np.asarray(A.data if isinstance(A, Tensor) else A, dtype=T.get_default_dtype())
    if arr.ndim == 2:
        return Tensor(arr)
    if arr.ndim == 3 and arr.shape[1] == arr.shape[2]:
        diag = np.diagonal(arr, axis1=1, axis2=2)
        if np.any(arr - np.einsum("dn,nm->dnm", diag, np.eye(arr.shape[1])) != 0):
            raise ValueError("discretize_zoh: A must be diagonal")
        return Tensor(np.ascontiguousarray(diag))
    raise ShapeError(f"discretize_zoh: cannot interpret A of shape {arr.shape}")


def discretize_zoh(delta: Tensor, A, B: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization with per-position step sizes.

    ``delta`` is (N, L, D), ``A`` holds diagonals (D, Nstate) and ``B`` is
    (N, L, Nstate).  Returns ``Abar = exp(delta*A)`` and
    ``Bbar = (exp(delta*A) - 1) / (delta*A) * delta * B``, both (N, L, D, Nstate).
    """
    delta, B = T.as_tensor(delta), T.as_tensor(B)
    A = _diagonal(A)
    if not np.all(delta.data > 0):
        raise ValueError("discretize_zoh: step sizes must be strictly positive")
    N, L, D = delta.shape
    if A.shape[0] != D or B.shape != (N, L, A.shape[1]):
        raise ShapeError(f"discretize_zoh: delta {delta.shape}, A {A.shape}, B {B.shape} disagree")
    d4 = T.reshape(delta, (N, L, D, 1))
    dA = d4 * A
    Abar = T.exp(dA)
    Bbar = T.expm1_div(dA) * d4 * T.reshape(B, (N, L, 1, A.shape[1]))
    return Abar, Bbar


def _arrays(*xs):
    return [x.data if isinstance(x, Tensor) else np.asarray(x) for x in xs]


def _check_scan_shapes(x, Abar, Bbar, C):
    N, L, D = x.shape
    if Abar.shape != Bbar.shape or Abar.shape[:3] != (N, L, D) or len(Abar.shape) != 4:
        raise ShapeError(f"scan: x {x.shape}, Abar {Abar.shape}, Bbar {Bbar.shape} disagree")
    if C.shape != (N, L, Abar.shape[3]):
        raise ShapeError(f"scan: C {C.shape} does not match state size {Abar.shape[3]}")


def scan_sequential(x, Abar, Bbar, C, D_skip=None) -> np.ndarray:
    """Reference recurrence, one step at a time from h = 0.  Returns a NumPy array."""
    x, Abar, Bbar, C = _arrays(x, Abar, Bbar, C)
    _check_scan_shapes(x, Abar, Bbar, C)
    N, L, D = x.shape
    h = np.zeros(Abar.shape[:1] + Abar.shape[2:], dtype=x.dtype)
    y = np.empty_like(x)
    for t in range(L):
        h = Abar[:, t] * h + Bbar[:, t] * x[:, t, :, None]
        y[:, t] = (h * C[:, t, None, :]).sum(axis=-1)
    if D_skip is not None:
        y = y + _arrays(D_skip)[0] * x
    return y


def scan_parallel(x: Tensor, Abar: Tensor, Bbar: Tensor, C: Tensor, D_skip: Tensor | None = None) -> Tensor:
    """Differentiable selective scan via the associative recurrence primitive."""
    x, Abar, Bbar, C = (T.as_tensor(v) for v in (x, Abar, Bbar, C))
    _check_scan_shapes(x, Abar, Bbar, C)
    N, L, D = x.shape
    h = T.recurrence(Abar, Bbar * T.reshape(x, (N, L, D, 1)), axis=1)
    y = T.tsum(h * T.reshape(C, (N, L, 1, C.shape[-1])), axis=-1)
    if D_skip is not None:
        y = y + x * D_skip
    return y


def selective_scan(x: Tensor, p: SSMParams, fused: bool = True) -> Tensor:
    """Full selective SSM on (N, L, D): parametrize, discretize, scan.

    ``fused=False`` routes through :func:`discretize_zoh` and
    :func:`scan_parallel` as separate taped ops; both routes compute the same
    values.
    """
    delta, B, C = selective_params(x, p)
    if fused:
        y = T.selective_scan_core(x, delta, p.A(), B, C)
        return y + x * p.D_skip if p.skip else y
    Abar, Bbar = discretize_zoh(delta, p.A(), B)
    return scan_parallel(x, Abar, Bbar, C, p.D_skip if p.skip else None)


def selective_scan_reference(x, p: SSMParams) -> np.ndarray:
    """Same computation as :func:`selective_scan` with the sequential scan."""
    with T.no_grad():
        x = T.as_tensor(x)
        delta, B, C = selective_params(x, p)
        Abar, Bbar = discretize_zoh(delta, p.A(), B)
    return scan_sequential(x, Abar, Bbar, C, p.D_skip if p.skip else None)


# -- 2-D orderings ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScanOrder:
    direction: str
    perm: np.ndarray
    inv_perm: np.ndarray = field(repr=False)

    @classmethod
    def from_perm(cls, direction: str, perm) -> "ScanOrder":
        perm = np.asarray(perm, dtype=np.intp)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        if not np.array_equal(perm[inv], np.arange(perm.size)):
            raise ValueError(f"{direction}: not a permutation")
        return cls(direction, perm, inv)


def ss2d_orders(H: int, W: int) -> list[ScanOrder]:
    """Row-major and column-major flattenings of an H x W grid, each both ways."""
    if H < 1 or W < 1:
        raise ValueError(f"ss2d_orders: extents must be positive, got {H}x{W}")
    grid = np.arange(H * W).reshape(H, W)
    row = grid.ravel()
    col = grid.T.ravel()
    return [
        ScanOrder.from_perm("row-fwd", row),
        ScanOrder.from_perm("row-bwd", row[::-1]),
        ScanOrder.from_perm("col-fwd", col),
        ScanOrder.from_perm("col-bwd", col[::-1]),
    ]


@dataclass(eq=False)
class SS2DParams:
    directions: list[SSMParams]
    norm_gamma: Tensor
    norm_beta: Tensor

    @classmethod
    def init(cls, dim: int, n_state: int, rng: np.random.Generator, shared: bool = False, skip: bool = True):
        if shared:
            dirs = [SSMParams.init(dim, n_state, rng, skip=skip)] * 4
        else:
            dirs = [SSMParams.init(dim, n_state, rng, skip=skip) for _ in range(4)]
        return cls(dirs, Tensor(np.ones(dim), requires_grad=True), Tensor(np.zeros(dim), requires_grad=True))


def ss2d_directions(x: Tensor, p: SS2DParams) -> list[Tensor]:
    """Per-direction scan outputs mapped back to spatial order, each (N, C, H*W)."""
    N, C, H, W = x.shape
    if len(p.directions) != 4:
        raise ValueError("ss2d needs four parameter sets")
    seq = T.reshape(x, (N, C, H * W))
    outs = []
    for order, sp in zip(ss2d_orders(H, W), p.directions):
        s = T.permute(T.take(seq, order.perm, axis=2), (0, 2, 1))
        y = selective_scan(s, sp)
        outs.append(T.permute(T.take(y, order.inv_perm, axis=1), (0, 2, 1)))
    return outs


def ss2d_forward(x: Tensor, p: SS2DParams, eps: float = 1e-5) -> Tensor:
    """Scan an (N, C, H, W) map in four directions, sum, and layer-normalize over C."""
    if x.ndim != 4:
        raise ShapeError(f"ss2d_forward: expected NCHW input, got {x.shape}")
    N, C, H, W = x.shape
    outs = ss2d_directions(x, p)
    total = outs[0]
    for o in outs[1:]:
        total = total + o
    return T.layernorm(T.reshape(total, (N, C, H, W)), p.norm_gamma, p.norm_beta, eps, axis=1)


def scan_flops(L: int, D: int, n_state: int) -> int:
    """Exact arithmetic count of one scan: 3 per state update, 2 per readout term, 2 for the skip."""
    return 5 * L * D * n_state + 2 * L * D
