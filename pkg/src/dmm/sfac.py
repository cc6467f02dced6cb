"""Spatial attention contrast (SFAC) between target boxes and background."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

BUCKETS = ("es", "rs", "gs", "nl")
_BOUNDS = (144, 400, 1024)


def size_bucket(area: int) -> str:
    """es <= 144 < rs <= 400 < gs <= 1024 < nl (areas in pixels)."""
    for name, bound in zip(BUCKETS, _BOUNDS):
        if area <= bound:
            return name
    return "nl"


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    angle_deg: float = 0.0
    cls: str = ""


def rasterize(box: Box, H: int, W: int) -> np.ndarray:
    """Flat indices of pixels whose centres fall inside the (possibly rotated) box.

    Pixel (i, j) has centre (j + 0.5, i + 0.5); the box is half-open along its
    own axes so boxes on integer edges cover exactly w*h pixels.
    """
    ys, xs = np.mgrid[0:H, 0:W]
    dx = xs + 0.5 - box.cx
    dy = ys + 0.5 - box.cy
    t = math.radians(box.angle_deg)
    c, s = math.cos(t), math.sin(t)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    eps = 1e-9
    inside = (u >= -box.w / 2 - eps) & (u < box.w / 2 - eps) & (v >= -box.h / 2 - eps) & (v < box.h / 2 - eps)
    return np.flatnonzero(inside)


@dataclass
class AnnotatedImage:
    attention: np.ndarray
    H: int
    W: int
    boxes: list[np.ndarray] = field(default_factory=list)
    image_id: str = ""

    def __post_init__(self):
        self.attention = np.asarray(self.attention, dtype=np.float64)
        if self.attention.ndim != 2:
            raise ValueError(f"attention map must be 2-D, got shape {self.attention.shape}")
        cleaned = []
        for b in self.boxes:
            b = np.unique(np.asarray(b, dtype=np.int64))
            if b.size and (b[0] < 0 or b[-1] >= self.H * self.W):
                raise ValueError(f"box pixel outside {self.H}x{self.W} image")
            cleaned.append(b)
        self.boxes = cleaned

    @classmethod
    def from_boxes(cls, attention, H: int, W: int, boxes: list[Box], image_id: str = "") -> "AnnotatedImage":
        return cls(attention, H, W, [rasterize(b, H, W) for b in boxes], image_id)

    @property
    def areas(self) -> list[int]:
        return [int(b.size) for b in self.boxes]


def bilinear_resize(a: np.ndarray, H: int, W: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling with edge clamping."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape
    if (h, w) == (H, W):
        return a.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis_weights(h, H)
    c0, c1, fc = axis_weights(w, W)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def prepare_attention(attention, H: int, W: int) -> np.ndarray:
    """Upsample to H x W and min-max scale to [0, 255]; a constant map becomes all zeros."""
    a = np.asarray(attention, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise ValueError(f"attention map must be 2-D and nonempty, got {a.shape}")
    up = bilinear_resize(a, H, W)
    lo, hi = up.min(), up.max()
    if hi == lo:
        return np.zeros_like(up)
    return (up - lo) * (255.0 / (hi - lo))


@dataclass
class SFACReport:
    sfac_all: float
    sfac_es: float
    sfac_rs: float
    sfac_gs: float
    sfac_nl: float
    counts: dict[str, int]
    images: dict[str, int]
    excluded: dict[str, int]

    def value(self, bucket: str) -> float:
        return getattr(self, f"sfac_{bucket}")

    def rows(self) -> list[tuple[str, float, int, int, int]]:
        return [
            (b, self.value(b), self.counts[b], self.images[b], self.excluded[b])
            for b in ("all",) + BUCKETS
        ]


def image_ratio(img: AnnotatedImage, bucket: str | None = None, scale: bool = True) -> float | None:
    """In-box over background attention sum for one image, or None when it does not contribute.

    The background always excludes every annotated box, whatever the bucket.
    """
    if bucket is None:
        chosen = img.boxes
    else:
        chosen = [b for b in img.boxes if size_bucket(b.size) == bucket]
    if not chosen:
        return None
    I = prepare_attention(img.attention, img.H, img.W) if scale else _unscaled(img)
    flat = I.reshape(-1)
    fg = np.zeros(flat.size, dtype=bool)
    fg[np.concatenate(chosen)] = True
    any_box = np.zeros(flat.size, dtype=bool)
    any_box[np.concatenate(img.boxes)] = True
    inside = flat[fg].sum()
    outside = flat[~any_box].sum()
    if outside == 0:
        return math.nan
    return float(inside / outside)


def _unscaled(img: AnnotatedImage) -> np.ndarray:
    if img.attention.shape != (img.H, img.W):
        return bilinear_resize(img.attention, img.H, img.W)
    return img.attention


def sfac(images: list[AnnotatedImage], bucket: str | None = None, scale: bool = True) -> tuple[float, int, int]:
    """Mean per-image ratio over contributing images.

    Returns ``(value, n_images, n_excluded)``; images whose background sums to
    zero are excluded and counted.  ``value`` is NaN when nothing contributes.
    """
    if not images:
        raise ValueError("sfac needs at least one image")
    if bucket is not None and bucket not in BUCKETS:
        raise ValueError(f"unknown bucket {bucket!r}")
    ratios, excluded = [], 0
    for img in images:
        r = image_ratio(img, bucket, scale)
        if r is None:
            continue
        if math.isnan(r):
            excluded += 1
            log.warning("image %s excluded: zero background attention", img.image_id or "?")
            continue
        ratios.append(r)
    value = math.fsum(ratios) / len(ratios) if ratios else math.nan
    return value, len(ratios), excluded


def sfac_report(images: list[AnnotatedImage], scale: bool = True) -> SFACReport:
    values, counts, n_img, n_exc = {}, {}, {}, {}
    for key, bucket in [("all", None)] + [(b, b) for b in BUCKETS]:
        values[key], n_img[key], n_exc[key] = sfac(images, bucket, scale)
        counts[key] = sum(
            1 for img in images for b in img.boxes if bucket is None or size_bucket(b.size) == bucket
        )
    return SFACReport(
        values["all"], values["es"], values["rs"], values["gs"], values["nl"], counts, n_img, n_exc
    )


# -- files ----------------------------------------------------------------------


def read_annotations(path: str | Path) -> dict[str, list[Box]]:
    """Parse ``image_id, cx, cy, w, h, angle_deg, class`` rows (an optional header is skipped)."""
    out: dict[str, list[Box]] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            row = [c.strip() for c in row]
            if not row or not any(row) or row[0].startswith("#"):
                continue
            if row[0] == "image_id":
                continue
            if len(row) != 7:
                raise ValueError(f"{path}: expected 7 columns, got {len(row)}: {row}")
            image_id, cx, cy, w, h, ang, cls = row
            out.setdefault(image_id, []).append(Box(float(cx), float(cy), float(w), float(h), float(ang), cls))
    return out


def write_annotations(path: str | Path, boxes: dict[str, list[Box]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["image_id", "cx", "cy", "w", "h", "angle_deg", "class"])
        for image_id, bs in boxes.items():
            for b in bs:
                wr.writerow([image_id, b.cx, b.cy, b.w, b.h, b.angle_deg, b.cls])


def write_report_csv(path: str | Path, report: SFACReport) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["bucket", "sfac", "targets", "images", "excluded"])
        for row in report.rows():
            wr.writerow([row[0], repr(row[1]), *row[2:]])


def format_report(report: SFACReport, title: str = "SFAC") -> str:
    lines = [title]
    for b, v, n, k, e in report.rows():
        lines.append(f"  SFAC@{b:<3} = {v:.6f}  targets={n} images={k} excluded={e}")
    return "\n".join(lines)
