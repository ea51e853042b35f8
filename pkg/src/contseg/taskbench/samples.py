"""Core data unit (image + label map) plus label masking and augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from contseg.errors import ShapeMismatchError

# Reserved label value for unlabeled pixels (Cityscapes trainId convention).
IGNORE_ID = 255


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LabeledSample:
    """One training/eval unit: an RGB raster and its per-pixel class-id map.

    Arrays are frozen after construction; samples are safe for concurrent reads.
    """

    image: np.ndarray  # H x W x 3, uint8
    label: np.ndarray  # H x W, integer class ids or ignore_id
    ignore_id: int = IGNORE_ID
    source_id: str = ""
    task_id: int = -1

    def __post_init__(self):
        image = np.asarray(self.image)
        label = np.asarray(self.label)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeMismatchError(f"image must be HxWx3, got {image.shape}")
        if label.shape != image.shape[:2]:
            raise ShapeMismatchError(
                f"label shape {label.shape} does not match image {image.shape[:2]}"
            )
        if not np.issubdtype(label.dtype, np.integer):
            raise ValueError(f"label dtype must be integer, got {label.dtype}")
        if np.issubdtype(image.dtype, np.integer) and image.min(initial=0) < 0:
            raise ValueError("image values must be nonnegative")
        object.__setattr__(self, "image", _readonly(image))
        object.__setattr__(self, "label", _readonly(label))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def present_classes(self) -> frozenset[int]:
        """Class ids occurring in the label map, ignore excluded."""
        vals = np.unique(self.label)
        return frozenset(int(v) for v in vals if v != self.ignore_id)

    def with_label(self, label: np.ndarray) -> "LabeledSample":
        return replace(self, label=label)

    def with_task_id(self, task_id: int) -> "LabeledSample":
        return replace(self, task_id=task_id)


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of samples from one domain."""

    samples: tuple[LabeledSample, ...]
    num_classes: int
    ignore_id: int = IGNORE_ID
    domain_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        for s in self.samples:
            bad = [c for c in s.present_classes() if not 0 <= c < self.num_classes]
            if bad:
                raise ValueError(
                    f"sample {s.source_id!r} has labels {sorted(bad)} outside "
                    f"[0, {self.num_classes})"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def present_classes(self) -> frozenset[int]:
        out: set[int] = set()
        for s in self.samples:
            out |= s.present_classes()
        return frozenset(out)


def mask_labels(label: np.ndarray, allowed, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Keep pixels whose class is in `allowed`; everything else becomes ignore.

    Raises ValueError if `allowed` contains the ignore id itself.
    """
    allowed = frozenset(int(c) for c in allowed)
    if ignore_id in allowed:
        raise ValueError(f"allowed set must not contain ignore_id {ignore_id}")
    label = np.asarray(label)
    keep = np.isin(label, sorted(allowed))
    out = np.where(keep, label, ignore_id).astype(label.dtype)
    return out


@dataclass(frozen=True)
class AugmentPolicy:
    """Geometric training augmentation: crop-to-ratio, scale, random crop.

    crop_ratio is width/height (None skips the ratio crop); scale_range is the
    inclusive uniform sampling interval; crop_size is the final (H, W).
    """

    crop_ratio: float | None = 2.0
    scale_range: tuple[float, float] = (1.0, 2.0)
    crop_size: tuple[int, int] = (512, 1024)

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if self.crop_ratio is not None and self.crop_ratio <= 0:
            raise ValueError(f"bad crop_ratio {self.crop_ratio}")


def _ratio_crop_shape(h: int, w: int, ratio: float) -> tuple[int, int]:
    # largest h' x w' with w'/h' == ratio fitting inside h x w
    if w / h >= ratio:
        return h, max(1, int(round(h * ratio)))
    return max(1, int(round(w / ratio))), w


def _resize(image: np.ndarray, label: np.ndarray, out_hw: tuple[int, int]):
    # image bilinear, label nearest: label values never interpolated
    img_t = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1).unsqueeze(0)
    lab_t = torch.from_numpy(label.astype(np.float32)).unsqueeze(0).unsqueeze(0)
    img_r = F.interpolate(img_t, size=out_hw, mode="bilinear", align_corners=False)
    lab_r = F.interpolate(lab_t, size=out_hw, mode="nearest-exact")
    image_out = img_r.squeeze(0).permute(1, 2, 0).clamp(0, 255).round().numpy()
    label_out = lab_r.squeeze().numpy()
    return image_out.astype(np.uint8), label_out.astype(label.dtype)


def augment(
    sample: LabeledSample, policy: AugmentPolicy, rng: np.random.Generator
) -> LabeledSample:
    """Apply one seeded draw of the policy; image and label share every transform."""
    h, w = sample.height, sample.width
    image, label = sample.image, sample.label

    if policy.crop_ratio is not None:
        ch, cw = _ratio_crop_shape(h, w, policy.crop_ratio)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        image = image[top : top + ch, left : left + cw]
        label = label[top : top + ch, left : left + cw]
        h, w = ch, cw

    lo, hi = policy.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else lo
    if scale != 1.0:
        sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        image, label = _resize(image, label, (sh, sw))
        h, w = sh, sw

    fh, fw = policy.crop_size
    if fh > h or fw > w:
        raise ValueError(
            f"final crop {policy.crop_size} larger than scaled image ({h}, {w})"
        )
    top = int(rng.integers(0, h - fh + 1))
    left = int(rng.integers(0, w - fw + 1))
    image = image[top : top + fh, left : left + fw]
    label = label[top : top + fh, left : left + fw]

    return replace(sample, image=np.ascontiguousarray(image), label=np.ascontiguousarray(label))
