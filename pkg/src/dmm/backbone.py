"""Dual-stream VSS feature extractor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ssm import SS2DParams, ss2d_forward
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    stem_channels: int = 8
    depths: tuple[int, ...] = (1, 1, 1)
    widths: tuple[int, ...] = (8, 16, 32)
    n_state: int = 8
    shared_streams: bool = False
    skip: bool = True

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.depths) != len(self.widths) or not self.depths:
            raise ConfigError("depths and widths must name the same, nonzero number of stages")
        if any(d < 1 for d in self.depths):
            raise ConfigError("every stage needs depth >= 1")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"widths must strictly increase, got {self.widths}")
        if self.stem_channels < 1 or self.n_state < 1:
            raise ConfigError("stem_channels and n_state must be positive")

    @property
    def stages(self) -> int:
        return len(self.widths)


@dataclass
class FeaturePair:
    rgb: Tensor
    ir: Tensor
    stage: int = 0

    def __post_init__(self):
        if self.rgb.shape != self.ir.shape:
            raise ShapeError(f"FeaturePair: rgb {self.rgb.shape} and ir {self.ir.shape} differ")


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=T.get_default_dtype()), requires_grad=True)


def _conv_init(rng, cout, cin, k) -> Tensor:
    return _param(rng.normal(0, (cin * k * k) ** -0.5, size=(cout, cin, k, k)))


@dataclass(eq=False)
class Conv:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    groups: int = 1

    @classmethod
    def init(cls, rng, cin, cout, k, stride=1, padding=0, groups=1):
        return cls(_conv_init(rng, cout, cin // groups, k), _param(np.zeros(cout)), stride, padding, groups)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


@dataclass(eq=False)
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, din, dout, scale=None):
        scale = din**-0.5 if scale is None else scale
        return cls(_param(rng.normal(0, scale, size=(din, dout))), _param(np.zeros(dout)))

    def channels(self, x: Tensor) -> Tensor:
        """Apply over the channel axis of an NCHW tensor."""
        y = T.linear(T.permute(x, (0, 2, 3, 1)), self.weight, self.bias)
        return T.permute(y, (0, 3, 1, 2))


@dataclass(eq=False)
class Norm:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, dim):
        return cls(_param(np.ones(dim)), _param(np.zeros(dim)))

    def __call__(self, x: Tensor, axis: int = 1) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, 1e-5, axis=axis)


@dataclass(eq=False)
class VSSBlockParams:
    norm: Norm
    expand: Linear
    dwconv: Conv
    ss2d: SS2DParams
    project: Linear

    @classmethod
    def init(cls, dim: int, n_state: int, rng: np.random.Generator, skip: bool = True):
        inner = 2 * dim
        return cls(
            norm=Norm.init(dim),
            expand=Linear.init(rng, dim, inner),
            dwconv=Conv.init(rng, inner, inner, 3, padding=1, groups=inner),
            ss2d=SS2DParams.init(inner, n_state, rng, skip=skip),
            project=Linear.init(rng, inner, dim),
        )

    def zero_branch(self) -> None:
        """Zero every weight of the residual branch."""
        for p in T.parameters(self):
            p.data[...] = 0.0


def vss_block(x: Tensor, p: VSSBlockParams) -> Tensor:
    """Residual VSS block: x + project(ss2d(silu(dwconv(expand(LN(x))))))."""
    h = p.expand.channels(p.norm(x))
    h = T.silu(p.dwconv(h))
    h = ss2d_forward(h, p.ss2d)
    return x + p.project.channels(h)


@dataclass(eq=False)
class StreamParams:
    stem: Conv
    adapters: list[Conv | None]
    blocks: list[list[VSSBlockParams]]


def _init_stream(cfg: BackboneConfig, rng: np.random.Generator) -> StreamParams:
    stem = Conv.init(rng, 3, cfg.stem_channels, 4, stride=4)
    adapters: list[Conv | None] = []
    blocks = []
    prev = cfg.stem_channels
    for s, (depth, width) in enumerate(zip(cfg.depths, cfg.widths)):
        if s == 0:
            adapters.append(None if width == prev else Conv.init(rng, prev, width, 1))
        else:
            adapters.append(Conv.init(rng, prev, width, 2, stride=2))
        blocks.append([VSSBlockParams.init(width, cfg.n_state, rng, cfg.skip) for _ in range(depth)])
        prev = width
    return StreamParams(stem, adapters, blocks)


@dataclass(eq=False)
class BackboneParams:
    config: BackboneConfig
    rgb: StreamParams
    ir: StreamParams

    @classmethod
    def init(cls, cfg: BackboneConfig, rng: np.random.Generator) -> "BackboneParams":
        rgb = _init_stream(cfg, rng)
        ir = rgb if cfg.shared_streams else _init_stream(cfg, rng)
        return cls(cfg, rgb, ir)


def patch_embed(img: Tensor, stem: Conv) -> Tensor:
    """Stride-4 convolutional stem: (N, 3, H, W) -> (N, C0, H/4, W/4)."""
    if img.ndim != 4 or img.shape[1] != 3:
        raise ShapeError(f"patch_embed: expected (N, 3, H, W), got {img.shape}")
    if img.shape[2] % 4 or img.shape[3] % 4:
        raise ShapeError(f"patch_embed: H and W must be divisible by 4, got {img.shape[2:]}")
    return stem(img)


def stream_forward(img: Tensor, p: StreamParams) -> list[Tensor]:
    x = patch_embed(img, p.stem)
    feats = []
    for adapter, blocks in zip(p.adapters, p.blocks):
        if adapter is not None:
            x = adapter(x)
        for b in blocks:
            x = vss_block(x, b)
        feats.append(x)
    return feats


def backbone_forward(rgb_img: Tensor, ir_img: Tensor, p: BackboneParams) -> list[FeaturePair]:
    """One FeaturePair per stage; spatial extent at stage s is H / 4 / 2**s."""
    rgb_img, ir_img = T.as_tensor(rgb_img), T.as_tensor(ir_img)
    if rgb_img.shape != ir_img.shape:
        raise ShapeError(f"backbone: rgb {rgb_img.shape} and ir {ir_img.shape} differ")
    H, W = rgb_img.shape[2:]
    need = 4 * 2 ** (p.config.stages - 1)
    if H % need or W % need:
        raise ShapeError(f"backbone: H and W must be divisible by {need} for {p.config.stages} stages")
    rgb = stream_forward(rgb_img, p.rgb)
    ir = stream_forward(ir_img, p.ir)
    return [FeaturePair(r, i, s) for s, (r, i) in enumerate(zip(rgb, ir))]


__all__ = [
    "BackboneConfig",
    "BackboneParams",
    "ConfigError",
    "Conv",
    "FeaturePair",
    "Linear",
    "Norm",
    "VSSBlockParams",
    "backbone_forward",
    "patch_embed",
    "stream_forward",
    "vss_block",
]
