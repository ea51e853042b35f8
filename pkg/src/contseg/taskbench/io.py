"""On-disk dataset layout and split manifests.

Layout per split: <root>/<split>/images/<id>.png (RGB) paired with
<root>/<split>/labels/<id>.png (single-channel 8-bit class ids, ignore=255).
Manifests are line-oriented: "<source_id>\t<task_id>\t<train|holdout>".
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from contseg.errors import DataLayoutError
from contseg.taskbench.samples import IGNORE_ID, Dataset, LabeledSample
from contseg.taskbench.splits import TaskSequence


def save_dataset(dataset: Dataset, root, split: str = "train") -> Path:
    root = Path(root)
    img_dir = root / split / "images"
    lab_dir = root / split / "labels"
    img_dir.mkdir(parents=True, exist_ok=True)
    lab_dir.mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        Image.fromarray(s.image, mode="RGB").save(img_dir / f"{s.source_id}.png")
        Image.fromarray(s.label.astype(np.uint8), mode="L").save(
            lab_dir / f"{s.source_id}.png"
        )
    return root / split


def load_dataset(
    root,
    split: str = "train",
    num_classes: int | None = None,
    domain_tag: str = "",
    ignore_id: int = IGNORE_ID,
) -> Dataset:
    """Read a split back; image/label files are paired by stem."""
    root = Path(root)
    img_dir = root / split / "images"
    lab_dir = root / split / "labels"
    if not img_dir.is_dir() or not lab_dir.is_dir():
        raise DataLayoutError(
            f"expected {img_dir} and {lab_dir}; layout is "
            f"<root>/<split>/images + <root>/<split>/labels"
        )
    img_files = sorted(img_dir.glob("*.png"))
    if not img_files:
        raise DataLayoutError(f"no .png images under {img_dir}")

    samples = []
    max_class = 0
    for f in img_files:
        lab_path = lab_dir / f.name
        if not lab_path.exists():
            raise DataLayoutError(f"image {f.name} has no label file {lab_path}")
        image = np.asarray(Image.open(f).convert("RGB"))
        label = np.asarray(Image.open(lab_path))
        if label.ndim != 2:
            raise DataLayoutError(
                f"label {lab_path} must be single-channel, got shape {label.shape}"
            )
        real = label[label != ignore_id]
        if real.size:
            max_class = max(max_class, int(real.max()))
        samples.append(
            LabeledSample(
                image=image, label=label, ignore_id=ignore_id, source_id=f.stem
            )
        )
    if num_classes is None:
        num_classes = max_class + 1
    return Dataset(
        samples=tuple(samples),
        num_classes=num_classes,
        ignore_id=ignore_id,
        domain_tag=domain_tag or root.name,
    )


def write_manifest(sequence: TaskSequence, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for task in sequence.tasks:
        for s in task.samples:
            lines.append(f"{s.source_id}\t{task.task_id}\ttrain")
        for s in task.holdout:
            lines.append(f"{s.source_id}\t{task.task_id}\tholdout")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> list[tuple[str, int, str]]:
    out = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("train", "holdout"):
            raise DataLayoutError(f"bad manifest line {ln}: {line!r}")
        out.append((parts[0], int(parts[1]), parts[2]))
    return out


def buffer_manifest_lines(slots) -> list[str]:
    """Replay-buffer manifest: one "<source_id>\t<task_id>" line per slot."""
    return [f"{s.source_id}\t{t}" for s, t in slots]


def ensure_empty_dir(path, force: bool = False) -> Path:
    """Create `path`; refuse to reuse a non-empty directory unless forced."""
    path = Path(path)
    if path.exists() and any(os.scandir(path)) and not force:
        raise DataLayoutError(
            f"output directory {path} exists and is not empty (use --force)"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path
