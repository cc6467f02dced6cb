"""Disparity-guided cross-modal fusion.

The fused output for one stage is::

    F_rgb, F_ir = LN(rgb), LN(ir);  F_d = F_rgb - F_ir
    F'_i = Project_i(F_i);  f_i = SiLU(DWConv_i(F'_i))
    y_rgb, y_ir = DSSM(f_rgb, f_ir, f_d)
    out = Project_out(y_rgb * CAB_rgb(F'_rgb) + y_ir * CAB_ir(F'_ir))
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Conv, FeaturePair, Linear, Norm
from .ssm import SSMParams, selective_scan
from .tensor import ShapeError, Tensor


@dataclass(eq=False)
class CABParams:
    """1x1 conv + ReLU shared by the average- and max-pooled paths."""

    conv: Conv

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "CABParams":
        return cls(Conv.init(rng, channels, channels, 1))


def cab_forward(F: Tensor, p: CABParams) -> Tensor:
    """Channel attention with residual: w * F + F, w = sigmoid(CR(avg) + CR(max))."""
    s = T.silu(F)
    avg = T.pool_avg(s, (2, 3))
    mx = T.pool_max(s, (2, 3))
    w = T.sigmoid(T.relu(p.conv(avg)) + T.relu(p.conv(mx)))
    return w * F + F


@dataclass(eq=False)
class DcfmParams:
    norm_rgb: Norm
    norm_ir: Norm
    proj_rgb: Linear
    proj_ir: Linear
    proj_d: Linear
    dw_rgb: Conv
    dw_ir: Conv
    dw_d: Conv
    cab_rgb: CABParams
    cab_ir: CABParams
    ssm_rgb: SSMParams
    ssm_ir: SSMParams
    out: Linear

    @property
    def channels(self) -> int:
        return self.proj_rgb.weight.shape[0]

    @classmethod
    def init(cls, channels: int, n_state: int, rng: np.random.Generator, skip: bool = True) -> "DcfmParams":
        hidden = 2 * channels
        return cls(
            norm_rgb=Norm.init(channels),
            norm_ir=Norm.init(channels),
            proj_rgb=Linear.init(rng, channels, hidden),
            proj_ir=Linear.init(rng, channels, hidden),
            proj_d=Linear.init(rng, channels, hidden),
            dw_rgb=Conv.init(rng, hidden, hidden, 3, padding=1, groups=hidden),
            dw_ir=Conv.init(rng, hidden, hidden, 3, padding=1, groups=hidden),
            dw_d=Conv.init(rng, hidden, hidden, 3, padding=1, groups=hidden),
            cab_rgb=CABParams.init(hidden, rng),
            cab_ir=CABParams.init(hidden, rng),
            ssm_rgb=SSMParams.init(hidden, n_state, rng, skip=skip),
            ssm_ir=SSMParams.init(hidden, n_state, rng, skip=skip),
            out=Linear.init(rng, hidden, channels),
        )

    def swapped(self) -> "DcfmParams":
        """Parameters for the rgb<->ir mirrored problem.

        Swapping the inputs negates the disparity, so the disparity projection
        weight is negated to keep ``proj_d(F_d)`` unchanged.
        """
        neg_d = Linear(Tensor(-self.proj_d.weight.data, requires_grad=True), self.proj_d.bias)
        return DcfmParams(
            self.norm_ir, self.norm_rgb, self.proj_ir, self.proj_rgb, neg_d,
            self.dw_ir, self.dw_rgb, self.dw_d, self.cab_ir, self.cab_rgb,
            self.ssm_ir, self.ssm_rgb, self.out,
        )


@dataclass
class Prepared:
    f_rgb: Tensor
    f_ir: Tensor
    f_d: Tensor
    Fp_rgb: Tensor
    Fp_ir: Tensor
    F_d: Tensor


def dcfm_prepare(pair: FeaturePair, p: DcfmParams) -> Prepared:
    """Normalize, form the disparity, project to 2C and mix with depthwise conv + SiLU."""
    if pair.rgb.shape != pair.ir.shape:
        raise ShapeError(f"dcfm: rgb {pair.rgb.shape} and ir {pair.ir.shape} differ")
    F_rgb = p.norm_rgb(pair.rgb)
    F_ir = p.norm_ir(pair.ir)
    F_d = F_rgb - F_ir
    Fp_rgb = p.proj_rgb.channels(F_rgb)
    Fp_ir = p.proj_ir.channels(F_ir)
    Fp_d = p.proj_d.channels(F_d)
    return Prepared(
        f_rgb=T.silu(p.dw_rgb(Fp_rgb)),
        f_ir=T.silu(p.dw_ir(Fp_ir)),
        f_d=T.silu(p.dw_d(Fp_d)),
        Fp_rgb=Fp_rgb,
        Fp_ir=Fp_ir,
        F_d=F_d,
    )


def _tokens(x: Tensor) -> Tensor:
    N, D, H, W = x.shape
    return T.permute(T.reshape(x, (N, D, H * W)), (0, 2, 1))


def _branch(f_mod: Tensor, f_d: Tensor, p: SSMParams, reverse_branch: bool) -> Tensor:
    N, D, H, W = f_mod.shape
    seq = T.concat([_tokens(f_mod), _tokens(f_d)], axis=1)
    y = selective_scan(seq, p)
    if reverse_branch:
        y = y + T.reverse(selective_scan(T.reverse(seq, 1), p), 1)
    first, _ = T.split(y, [H * W, H * W], axis=1)
    return T.reshape(T.permute(first, (0, 2, 1)), (N, D, H, W))


def dssm_forward(
    f_rgb: Tensor,
    f_ir: Tensor,
    f_d: Tensor,
    ssm_rgb: SSMParams,
    ssm_ir: SSMParams,
    reverse_branch: bool = True,
) -> tuple[Tensor, Tensor]:
    """Scan [modality tokens ; disparity tokens] both ways and keep the modality half."""
    if not f_rgb.shape == f_ir.shape == f_d.shape or f_rgb.ndim != 4:
        raise ShapeError(f"dssm: inputs {f_rgb.shape}, {f_ir.shape}, {f_d.shape} must match")
    return (
        _branch(f_rgb, f_d, ssm_rgb, reverse_branch),
        _branch(f_ir, f_d, ssm_ir, reverse_branch),
    )


def dcfm_forward(pair: FeaturePair, p: DcfmParams, reverse_branch: bool = True) -> Tensor:
    """Fuse one stage's rgb/ir features into an (N, C, H, W) map."""
    prep = dcfm_prepare(pair, p)
    y_rgb, y_ir = dssm_forward(prep.f_rgb, prep.f_ir, prep.f_d, p.ssm_rgb, p.ssm_ir, reverse_branch)
    merged = y_rgb * cab_forward(prep.Fp_rgb, p.cab_rgb) + y_ir * cab_forward(prep.Fp_ir, p.cab_ir)
    return p.out.channels(merged)
