"""Synthetic aligned RGB/IR pairs with planted targets.

The RGB image carries uneven illumination and bright distractor blobs that
the IR image does not; targets are low-contrast in RGB and warm in IR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sfac import Box, bilinear_resize, rasterize


@dataclass
class SyntheticPair:
    rgb: np.ndarray  # (3, H, W)
    ir: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (1, H, W), 1 inside targets
    boxes: list[Box]
    distractor_mask: np.ndarray  # (H, W) bool, rgb-only blobs


def _smooth_field(rng, H, W, coarse=4):
    return bilinear_resize(rng.uniform(0.0, 1.0, size=(coarse, coarse)), H, W)


def _place_targets(rng, H, W, count, size_range):
    taken = np.zeros((H, W), dtype=bool)
    boxes = []
    for _ in range(200):
        if len(boxes) == count:
            break
        w, h = (int(v) for v in rng.integers(size_range[0], size_range[1] + 1, size=2))
        x0 = int(rng.integers(1, W - w))
        y0 = int(rng.integers(1, H - h))
        # keep a one-pixel gap between targets
        if taken[max(y0 - 1, 0) : y0 + h + 1, max(x0 - 1, 0) : x0 + w + 1].any():
            continue
        taken[y0 : y0 + h, x0 : x0 + w] = True
        boxes.append(Box(x0 + w / 2, y0 + h / 2, float(w), float(h), 0.0, "vehicle"))
    return boxes


def gen_synthetic_pairs(
    n: int,
    H: int = 64,
    W: int = 64,
    seed: int = 0,
    targets: tuple[int, int] = (1, 3),
    target_size: tuple[int, int] = (6, 14),
    distractors: tuple[int, int] = (1, 2),
) -> list[SyntheticPair]:
    """Deterministic list of ``n`` pairs; every pair has at least one target."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if H % 4 or W % 4 or H < 16 or W < 16:
        raise ValueError(f"H and W must be multiples of 4 and at least 16, got {H}x{W}")
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:H, 0:W]
    pairs = []
    for _ in range(n):
        scene = 0.25 + 0.25 * _smooth_field(rng, H, W)
        tint = rng.uniform(0.8, 1.2, size=(3, 1, 1))
        rgb = scene[None] * tint

        boxes = _place_targets(rng, H, W, int(rng.integers(targets[0], targets[1] + 1)), target_size)
        mask = np.zeros((H, W))
        for b in boxes:
            mask.reshape(-1)[rasterize(b, H, W)] = 1.0

        colour = rng.uniform(0.08, 0.15, size=(3, 1, 1)) * rng.choice([-1.0, 1.0])
        rgb = rgb + colour * mask[None]

        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * (xs - W / 2) + np.sin(angle) * (ys - H / 2)) / max(H, W)
        rgb = rgb * (1.0 + 0.8 * ramp)[None]

        blobs = np.zeros((H, W), dtype=bool)
        glow = np.zeros((H, W))
        grown = np.zeros((H, W), dtype=bool)
        for b in boxes:
            x0, y0 = int(b.cx - b.w / 2), int(b.cy - b.h / 2)
            grown[max(y0 - 2, 0) : y0 + int(b.h) + 2, max(x0 - 2, 0) : x0 + int(b.w) + 2] = True
        want = int(rng.integers(distractors[0], distractors[1] + 1))
        for _ in range(100):
            if want == 0:
                break
            r = rng.uniform(3.0, 6.0)
            cx, cy = rng.uniform(r, W - r), rng.uniform(r, H - r)
            disc = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 < r * r
            if (disc & (grown | blobs)).any():
                continue
            blobs |= disc
            d2 = ((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2) / (r * r)
            glow += np.where(disc, 0.6 * (1.0 - d2) + 0.3, 0.0)
            want -= 1
        rgb = rgb + glow[None]
        rgb = rgb + rng.normal(0, 0.01, size=rgb.shape)

        heat = 0.2 + 0.3 * scene + 0.35 * mask
        ir = np.repeat(heat[None], 3, axis=0) + rng.normal(0, 0.01, size=(3, H, W))
        pairs.append(SyntheticPair(rgb, ir, mask[None], boxes, blobs))
    return pairs
