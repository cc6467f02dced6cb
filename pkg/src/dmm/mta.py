"""Multi-scale target-aware attention, the frozen target-prior head, and losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Conv
from .tensor import ShapeError, Tensor

MTA_KERNELS = (3, 7)


@dataclass(eq=False)
class MtaParams:
    pre: Conv
    attn: list[Conv]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, kernels=MTA_KERNELS) -> "MtaParams":
        return cls(
            pre=Conv.init(rng, channels, channels, 3, padding=1),
            attn=[Conv.init(rng, 2, 1, k, padding=k // 2) for k in kernels],
        )


def mta_weights(x: Tensor, p: MtaParams) -> Tensor:
    """Spatial attention map (N, 1, H, W) in (0, 1)."""
    xp = p.pre(x)
    m = T.concat([T.pool_avg(xp, (1,)), T.pool_max(xp, (1,))], axis=1)
    acc = p.attn[0](m)
    for conv in p.attn[1:]:
        acc = acc + conv(m)
    return T.sigmoid(acc * (1.0 / len(p.attn)))


def mta_forward(x: Tensor, p: MtaParams) -> Tensor:
    """Reweight ``x`` by multi-kernel spatial attention, with residual: w * x + x."""
    return mta_weights(x, p) * x + x


@dataclass(eq=False)
class TpaHead:
    """1x1 objectness and 4-channel offset convs; frozen after pre-fitting."""

    objectness: Conv
    offsets: Conv
    frozen: bool = False

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "TpaHead":
        return cls(Conv.init(rng, channels, 1, 1), Conv.init(rng, channels, 4, 1))

    def tensors(self) -> list[Tensor]:
        return [self.objectness.weight, self.objectness.bias, self.offsets.weight, self.offsets.bias]

    def freeze(self) -> None:
        for t in self.tensors():
            t.requires_grad = False
            t.grad = None
        self.frozen = True


def tpa_forward(feat: Tensor, head: TpaHead, target_mask, offset_target=None) -> tuple[Tensor, Tensor]:
    """Auxiliary (cls, reg) losses of the target-prior head on MTA features.

    ``target_mask`` is (N, 1, H, W) with 0/1 entries.  ``offset_target`` is
    (N, 4, H, W) and only read at positive positions; regression is zero when
    the mask is empty.
    """
    mask = np.asarray(target_mask.data if isinstance(target_mask, Tensor) else target_mask)
    N, C, H, W = feat.shape
    if mask.shape != (N, 1, H, W):
        raise ShapeError(f"tpa: mask {mask.shape} does not match features {(N, 1, H, W)}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("tpa: mask values must be 0 or 1")
    aux_cls = T.bce_logits(head.objectness(feat), mask)
    pos = np.flatnonzero(mask.reshape(-1))
    if pos.size == 0 or offset_target is None:
        return aux_cls, T.as_tensor(0.0, like=feat)
    aux_reg = masked_smooth_l1(head.offsets(feat), offset_target, pos)
    return aux_cls, aux_reg


def masked_smooth_l1(pred: Tensor, target, positions: np.ndarray) -> Tensor:
    """Smooth-L1 over the 4-vectors at flat (n, h, w) ``positions`` of an (N, 4, H, W) map."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    N, K, H, W = pred.shape
    flat = T.reshape(T.permute(pred, (0, 2, 3, 1)), (N * H * W, K))
    tflat = target.transpose(0, 2, 3, 1).reshape(N * H * W, K)
    return T.smooth_l1(T.take(flat, positions, axis=0), tflat[positions])


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return T.cross_entropy(logits, labels)


def smooth_l1(pred: Tensor, target) -> Tensor:
    return T.smooth_l1(pred, target)


@dataclass
class LossBreakdown:
    det_cls: Tensor
    det_reg: Tensor
    aux_cls: Tensor
    aux_reg: Tensor
    total: Tensor

    def row(self) -> tuple[float, float, float, float, float]:
        return tuple(float(t.data) for t in (self.det_cls, self.det_reg, self.aux_cls, self.aux_reg, self.total))


def total_loss(det_cls, det_reg, aux_cls, aux_reg) -> LossBreakdown:
    """Unweighted sum of detection and auxiliary losses."""
    parts = [T.as_tensor(v) for v in (det_cls, det_reg, aux_cls, aux_reg)]
    for v in parts:
        if v.size != 1:
            raise ShapeError("total_loss: every term must be a scalar")
        if not math.isfinite(float(v.data.reshape(-1)[0])):
            raise T.NonFiniteError("total_loss: non-finite term")
    total = ((parts[0] + parts[1]) + parts[2]) + parts[3]
    return LossBreakdown(*parts, total)
