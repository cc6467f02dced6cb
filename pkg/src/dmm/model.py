"""Desk-scale detector: dual-stream backbone, MTA + TPA on RGB, DCFM fusion, toy head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, BackboneParams, Conv, FeaturePair, backbone_forward
from .dcfm import DcfmParams, dcfm_forward
from .mta import MTA_KERNELS, LossBreakdown, MtaParams, TpaHead, masked_smooth_l1, mta_forward, total_loss, tpa_forward
from .sfac import Box
from .tensor import Tensor


@dataclass(eq=False)
class DetHead:
    cls: Conv
    reg: Conv

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "DetHead":
        return cls(Conv.init(rng, channels, 2, 1), Conv.init(rng, channels, 4, 1))


@dataclass(eq=False)
class DMMModel:
    backbone: BackboneParams
    mta: list[MtaParams]
    dcfm: list[DcfmParams]
    det: list[DetHead]
    tpa: list[TpaHead] = field(default_factory=list)
    aux_into_backbone: bool = True
    reverse_branch: bool = True

    @classmethod
    def init(
        cls,
        cfg: BackboneConfig,
        seed: int = 0,
        aux_into_backbone: bool = True,
        mta_kernels: tuple[int, ...] = MTA_KERNELS,
        reverse_branch: bool = True,
    ) -> "DMMModel":
        rng = np.random.default_rng(seed)
        backbone = BackboneParams.init(cfg, rng)
        return cls(
            backbone=backbone,
            mta=[MtaParams.init(w, rng, mta_kernels) for w in cfg.widths],
            dcfm=[DcfmParams.init(w, cfg.n_state, rng, cfg.skip) for w in cfg.widths],
            det=[DetHead.init(w, rng) for w in cfg.widths],
            tpa=[TpaHead.init(w, rng) for w in cfg.widths],
            aux_into_backbone=aux_into_backbone,
            reverse_branch=reverse_branch,
        )

    def trainable(self) -> list[Tensor]:
        """Every tensor updated in the joint phase (the TPA heads are excluded)."""
        return T.parameters([self.backbone, self.mta, self.dcfm, self.det])


@dataclass
class StageTargets:
    mask: np.ndarray  # (N, 1, h, w) 0/1
    offsets: np.ndarray  # (N, 4, h, w)
    labels: np.ndarray  # (N*h*w,) int
    positives: np.ndarray  # flat indices into (N, h, w)


def stage_targets(boxes: list[list[Box]], H: int, W: int, stride: int) -> StageTargets:
    """Cell labels and centre-offset targets at one feature stride.

    A cell is positive when its centre lies inside a box; a box covering no
    cell centre claims the cell holding its own centre.  Offsets are
    ``((cx - x) / s, (cy - y) / s, log(w / s), log(h / s))``.
    """
    h, w = H // stride, W // stride
    N = len(boxes)
    mask = np.zeros((N, 1, h, w))
    off = np.zeros((N, 4, h, w))
    centres = (np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride
    for n, bs in enumerate(boxes):
        for b in bs:
            x0, x1 = b.cx - b.w / 2, b.cx + b.w / 2
            y0, y1 = b.cy - b.h / 2, b.cy + b.h / 2
            rows = np.flatnonzero((centres[0] >= y0) & (centres[0] < y1))
            cols = np.flatnonzero((centres[1] >= x0) & (centres[1] < x1))
            cells = [(r, c) for r in rows for c in cols]
            if not cells:
                cells = [(min(int(b.cy // stride), h - 1), min(int(b.cx // stride), w - 1))]
            for r, c in cells:
                if mask[n, 0, r, c]:
                    continue
                mask[n, 0, r, c] = 1.0
                off[n, :, r, c] = (
                    (b.cx - centres[1][c]) / stride,
                    (b.cy - centres[0][r]) / stride,
                    math.log(b.w / stride),
                    math.log(b.h / stride),
                )
    labels = mask.reshape(-1).astype(np.int64)
    return StageTargets(mask, off, labels, np.flatnonzero(labels))


def build_targets(boxes: list[list[Box]], H: int, W: int, stages: int) -> list[StageTargets]:
    return [stage_targets(boxes, H, W, 4 * 2**s) for s in range(stages)]


def rgb_attention_features(model: DMMModel, rgb: Tensor, ir: Tensor) -> list[tuple[Tensor, Tensor]]:
    """(pre-MTA, post-MTA) RGB features per stage."""
    pairs = backbone_forward(rgb, ir, model.backbone)
    return [(p.rgb, mta_forward(p.rgb, m)) for p, m in zip(pairs, model.mta)]


def attention_maps(model: DMMModel, rgb: Tensor, ir: Tensor, stage: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Channel-mean |feature| maps (N, h, w) of the RGB stream before and after MTA."""
    with T.no_grad():
        pre, post = rgb_attention_features(model, rgb, ir)[stage]
    return np.abs(pre.data).mean(axis=1), np.abs(post.data).mean(axis=1)


def _mean(ts: list[Tensor]) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = acc + t
    return acc * (1.0 / len(ts))


def model_loss(model: DMMModel, rgb: Tensor, ir: Tensor, targets: list[StageTargets]) -> LossBreakdown:
    pairs = backbone_forward(rgb, ir, model.backbone)
    det_cls, det_reg, aux_cls, aux_reg = [], [], [], []
    for s, pair in enumerate(pairs):
        tg = targets[s]
        x_rgb = mta_forward(pair.rgb, model.mta[s])
        aux_in = x_rgb if model.aux_into_backbone else mta_forward(pair.rgb.detach(), model.mta[s])
        a_cls, a_reg = tpa_forward(aux_in, model.tpa[s], tg.mask, tg.offsets)
        aux_cls.append(a_cls)
        aux_reg.append(a_reg)

        fused = dcfm_forward(FeaturePair(x_rgb, pair.ir, s), model.dcfm[s], model.reverse_branch)
        logits = model.det[s].cls(fused)
        N, K, h, w = logits.shape
        flat = T.reshape(T.permute(logits, (0, 2, 3, 1)), (N * h * w, K))
        det_cls.append(T.cross_entropy(flat, tg.labels))
        if tg.positives.size:
            det_reg.append(masked_smooth_l1(model.det[s].reg(fused), tg.offsets, tg.positives))
        else:
            det_reg.append(T.as_tensor(0.0, like=fused))
    return total_loss(_mean(det_cls), _mean(det_reg), _mean(aux_cls), _mean(aux_reg))
