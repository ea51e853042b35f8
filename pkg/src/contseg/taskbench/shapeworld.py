"""Deterministic synthetic segmentation data: colored shapes on a textured ground.

Stands in for street-scene corpora at desk scale. Every pixel covered by a
shape is labeled with that shape's class; everything else is the background
class 0, so label maps are pixel-accurate by construction.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from contseg.taskbench.samples import IGNORE_ID, Dataset, LabeledSample

_SHAPE_KINDS = ("disk", "box", "triangle")


def default_palette(n: int) -> tuple[tuple[int, int, int], ...]:
    """Evenly spaced, saturated hues for n shape classes."""
    cols = []
    for i in range(n):
        r, g, b = colorsys.hsv_to_rgb(i / max(n, 1), 0.85, 0.92)
        cols.append((int(r * 255), int(g * 255), int(b * 255)))
    return tuple(cols)


@dataclass(frozen=True)
class DomainParams:
    """Appearance knobs that define one input domain.

    class_colors covers shape classes 1..num_classes-1; None picks the default
    palette. hue_shift rotates that palette (fraction of a turn). texture adds
    a periodic pattern to the background before noise.
    """

    name: str = "default"
    background: tuple[int, int, int] = (30, 32, 36)
    class_colors: tuple[tuple[int, int, int], ...] | None = None
    hue_shift: float = 0.0
    noise_std: float = 5.0
    texture: str = "none"  # none | stripes | checker
    texture_period: int = 8
    texture_contrast: float = 0.0

    def palette(self, num_shape_classes: int) -> tuple[tuple[int, int, int], ...]:
        if self.class_colors is not None:
            if len(self.class_colors) < num_shape_classes:
                raise ValueError(
                    f"domain {self.name!r} supplies {len(self.class_colors)} colors "
                    f"for {num_shape_classes} shape classes"
                )
            cols = self.class_colors[:num_shape_classes]
        else:
            cols = default_palette(num_shape_classes)
        if self.hue_shift:
            shifted = []
            for r, g, b in cols:
                h, s, v = colorsys.rgb_to_hsv(r / 255, g / 255, b / 255)
                r2, g2, b2 = colorsys.hsv_to_rgb((h + self.hue_shift) % 1.0, s, v)
                shifted.append((int(r2 * 255), int(g2 * 255), int(b2 * 255)))
            cols = tuple(shifted)
        return tuple(cols)


@dataclass(frozen=True)
class ShapeWorldConfig:
    """Full recipe for one generated domain; (config, seed) fixes every byte."""

    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 8  # background + num_classes-1 shape classes
    num_images: int = 120
    shapes_per_image: tuple[int, int] = (2, 4)
    shape_size_range: tuple[float, float] = (0.18, 0.4)  # fraction of min(H, W)
    class_weights: tuple[float, ...] | None = None  # draw weights, classes 1..K-1
    domain: DomainParams = DomainParams()
    seed: int = 0


def _raster_mask(kind: str, h: int, w: int, cy: float, cx: float, r: float,
                 angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    if kind == "box":
        return (np.abs(u) <= r) & (np.abs(v) <= r * 0.8)
    # upright isoceles triangle in rotated frame: apex at v=-r, base at v=+r
    inside = (v >= -r) & (v <= r)
    half_width = (v + r) / 2.0
    return inside & (np.abs(u) <= half_width)


def generate_shapeworld(config: ShapeWorldConfig) -> Dataset:
    """Generate the dataset described by `config`, bit-identically per seed.

    When shapes are requested at all, every class (background included)
    appears in at least one image: class c is pinned to the first shape of
    image c-1. shapes_per_image == (0, 0) degenerates to all-background maps.
    """
    h, w = config.image_size
    k = config.num_classes
    if k < 2:
        raise ValueError(f"num_classes must be >= 2, got {k}")
    s_lo, s_hi = config.shapes_per_image
    if s_lo < 0 or s_hi < s_lo:
        raise ValueError(f"bad shapes_per_image range {config.shapes_per_image}")
    if s_hi > 0 and config.num_images < k - 1:
        raise ValueError(
            f"need at least {k - 1} images to cover {k - 1} shape classes, "
            f"got {config.num_images}"
        )
    lo_frac, hi_frac = config.shape_size_range
    min_radius = lo_frac * min(h, w) / 2.0
    if min(h, w) < 16 or min_radius < 1.5:
        raise ValueError(
            f"image size {config.image_size} too small for shapes of relative "
            f"size {config.shape_size_range}"
        )

    weights = None
    if config.class_weights is not None:
        if len(config.class_weights) != k - 1:
            raise ValueError(
                f"class_weights must have {k - 1} entries, got "
                f"{len(config.class_weights)}"
            )
        weights = np.asarray(config.class_weights, dtype=float)
        weights = weights / weights.sum()

    palette = config.domain.palette(k - 1)
    rng = np.random.default_rng(config.seed)
    bg = np.asarray(config.domain.background, dtype=np.float64)

    samples = []
    for i in range(config.num_images):
        image = np.broadcast_to(bg, (h, w, 3)).copy()
        if config.domain.texture != "none" and config.domain.texture_contrast > 0:
            period = max(2, config.domain.texture_period)
            yy, xx = np.mgrid[0:h, 0:w]
            if config.domain.texture == "stripes":
                pat = ((xx // period) % 2).astype(np.float64)
            elif config.domain.texture == "checker":
                pat = (((xx // period) + (yy // period)) % 2).astype(np.float64)
            else:
                raise ValueError(f"unknown texture {config.domain.texture!r}")
            image += (pat[..., None] - 0.5) * 2 * config.domain.texture_contrast

        label = np.zeros((h, w), dtype=np.uint8)
        n_shapes = int(rng.integers(s_lo, s_hi + 1)) if s_hi > 0 else 0
        if i < k - 1 and s_hi > 0:
            n_shapes = max(n_shapes, 1)
        for j in range(n_shapes):
            if i < k - 1 and j == 0:
                cls = i + 1  # coverage pin
            elif weights is None:
                cls = int(rng.integers(1, k))
            else:
                cls = 1 + int(rng.choice(k - 1, p=weights))
            kind = _SHAPE_KINDS[(cls - 1) % len(_SHAPE_KINDS)]
            radius = float(rng.uniform(lo_frac, hi_frac)) * min(h, w) / 2.0
            cy = float(rng.uniform(radius, h - radius))
            cx = float(rng.uniform(radius, w - radius))
            angle = float(rng.uniform(0, 2 * np.pi))
            mask = _raster_mask(kind, h, w, cy, cx, radius, angle)
            image[mask] = palette[cls - 1]
            label[mask] = cls

        if config.domain.noise_std > 0:
            image = image + rng.normal(0.0, config.domain.noise_std, size=(h, w, 3))
        image = np.clip(np.round(image), 0, 255).astype(np.uint8)
        samples.append(
            LabeledSample(
                image=image,
                label=label,
                ignore_id=IGNORE_ID,
                source_id=f"{config.domain.name}-{i:05d}",
            )
        )

    return Dataset(
        samples=tuple(samples),
        num_classes=k,
        ignore_id=IGNORE_ID,
        domain_tag=config.domain.name,
    )
