"""Compact encoder-decoder segmentation network with incremental heads.

The encoder downsamples by 8 through three strided convolutions followed by
residual dilated blocks. Each decoder head upsamples back to input resolution
for its own class subset; the forward pass concatenates all head logits and
applies one softmax across them, so posteriors always sum to 1 per pixel.
New heads can be attached without touching existing parameters, old states
can be snapshotted as immutable teachers, and the encoder or every norm
layer can be frozen (parameters and running statistics alike).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from contseg.errors import ShapeMismatchError

DOWNSAMPLE_FACTOR = 8


@dataclass(frozen=True)
class ModelCapacity:
    """Width/depth knob standing in for the architecture-size study."""

    widths: tuple[int, int, int] = (16, 32, 48)
    dilations: tuple[int, ...] = (1, 2)


def _seeded_init(module: nn.Module, seed: int) -> None:
    """Kaiming-style fan-in init drawn from a dedicated generator.

    Independent of global RNG state so attaching a head mid-run is
    reproducible.
    """
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.in_channels
            for k in m.kernel_size:
                fan_in *= k
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


class ResidualDilatedBlock(nn.Module):
    def __init__(self, channels: int, dilation: int):
        super().__init__()
        self.conv1 = nn.Conv2d(
            channels, channels, 3, padding=dilation, dilation=dilation, bias=False
        )
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + x)


class Encoder(nn.Module):
    def __init__(self, capacity: ModelCapacity):
        super().__init__()
        c1, c2, c3 = capacity.widths
        self.down = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c2),
            nn.ReLU(inplace=True),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c3),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(
            *[ResidualDilatedBlock(c3, d) for d in capacity.dilations]
        )

    def forward(self, x):
        return self.blocks(self.down(x))


class DecoderHead(nn.Module):
    """Transposed-conv decoder emitting one logit channel per class."""

    def __init__(self, capacity: ModelCapacity, num_out: int):
        super().__init__()
        c1, c2, c3 = capacity.widths
        self.up = nn.Sequential(
            nn.ConvTranspose2d(c3, c2, 3, stride=2, padding=1, output_padding=1,
                               bias=False),
            nn.BatchNorm2d(c2),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c2, c1, 3, stride=2, padding=1, output_padding=1,
                               bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c1, num_out, 3, stride=2, padding=1,
                               output_padding=1),
        )

    def forward(self, feat):
        return self.up(feat)


class SegModel(nn.Module):
    """Encoder plus an ordered list of class-disjoint decoder heads."""

    def __init__(self, classes, capacity: ModelCapacity = ModelCapacity(),
                 seed: int = 0):
        super().__init__()
        self.capacity = capacity
        self.seed = seed
        self.encoder = Encoder(capacity)
        _seeded_init(self.encoder, _component_seed(seed, 0))
        self.heads = nn.ModuleList()
        self.head_classes: list[tuple[int, ...]] = []
        self.encoder_frozen = False
        self.norm_frozen = False
        self.add_decoder_head(classes)

    # -- class/channel bookkeeping ------------------------------------------

    @property
    def class_ids(self) -> tuple[int, ...]:
        """Class id of every posterior channel, in channel order."""
        out: list[int] = []
        for ids in self.head_classes:
            out.extend(ids)
        return tuple(out)

    def channel_of(self, class_id: int) -> int:
        return self.class_ids.index(class_id)

    def label_lookup(self, num_classes: int, ignore_id: int) -> np.ndarray:
        """Map raw class ids -> channel indices; unknown ids -> ignore."""
        table = np.full(max(num_classes, ignore_id + 1), ignore_id, dtype=np.int64)
        for ch, cid in enumerate(self.class_ids):
            table[cid] = ch
        table[ignore_id] = ignore_id
        return table

    # -- structure mutation ---------------------------------------------------

    def add_decoder_head(self, new_classes) -> int:
        """Attach a head for `new_classes`; existing parameters stay untouched."""
        ids = tuple(sorted(int(c) for c in new_classes))
        if not ids:
            raise ValueError("a decoder head needs at least one class")
        dup = set(ids) & set(self.class_ids)
        if dup:
            raise ValueError(f"classes {sorted(dup)} already have a decoder head")
        head = DecoderHead(self.capacity, len(ids))
        _seeded_init(head, _component_seed(self.seed, len(self.heads) + 1))
        self.heads.append(head)
        self.head_classes.append(ids)
        return len(self.heads) - 1

    # -- forward ---------------------------------------------------------------

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Posterior tensor B x K x H x W; channel softmax spans all heads."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeMismatchError(f"expected Bx3xHxW input, got {tuple(images.shape)}")
        h, w = images.shape[2], images.shape[3]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ShapeMismatchError(
                f"spatial dims ({h}, {w}) must be divisible by {DOWNSAMPLE_FACTOR}"
            )
        feat = self.encoder(images - 0.5)
        logits = torch.cat([head(feat) for head in self.heads], dim=1)
        return torch.softmax(logits, dim=1)

    # -- freezing ----------------------------------------------------------------

    def freeze_encoder(self) -> None:
        """Pin encoder weights and running statistics; decoders stay live."""
        self.encoder_frozen = True
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.encoder.eval()

    def freeze_norm_layers(self) -> None:
        """Pin every BatchNorm: affine parameters and running statistics."""
        self.norm_frozen = True
        for m in self.modules():
            if isinstance(m, nn.BatchNorm2d):
                for p in m.parameters():
                    p.requires_grad_(False)
                m.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.encoder_frozen:
            self.encoder.eval()
        if self.norm_frozen:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
        return self

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def parameter_copy(self) -> dict[str, torch.Tensor]:
        """Detached clone of every parameter, keyed by name."""
        return {n: p.detach().clone() for n, p in self.named_parameters()}


def _component_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index * 7919) % (2**31 - 1)


def predict_mask(posteriors, channels=None) -> np.ndarray:
    """Argmax class map; ties break to the lowest channel index.

    `channels` restricts the argmax to a channel subset (subset-wise
    evaluation); returned values are always indices into the full channel
    axis.
    """
    if isinstance(posteriors, torch.Tensor):
        arr = posteriors.detach().cpu().numpy()
    else:
        arr = np.asarray(posteriors)
    if channels is None:
        return np.argmax(arr, axis=1)
    channels = np.asarray(sorted(channels), dtype=np.int64)
    sub = arr[:, channels]
    return channels[np.argmax(sub, axis=1)]


class TeacherSnapshot:
    """Deep, frozen copy of a model; outputs never change after creation."""

    def __init__(self, model: SegModel):
        self._model = copy.deepcopy(model)
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)
        self.class_ids = self._model.class_ids
        self.head_classes = [tuple(ids) for ids in self._model.head_classes]

    @property
    def num_channels(self) -> int:
        return len(self.class_ids)

    def posteriors(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self._model(images)

    def parameter_copy(self) -> dict[str, torch.Tensor]:
        return self._model.parameter_copy()


def snapshot(model: SegModel) -> TeacherSnapshot:
    return TeacherSnapshot(model)


CHECKPOINT_VERSION = 1


def save_checkpoint(model: SegModel, path, extra: dict | None = None) -> None:
    """Stable serialization: parameters, head layout, freeze flags, seed."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "capacity": {
            "widths": list(model.capacity.widths),
            "dilations": list(model.capacity.dilations),
        },
        "head_classes": [list(ids) for ids in model.head_classes],
        "encoder_frozen": model.encoder_frozen,
        "norm_frozen": model.norm_frozen,
        "seed": model.seed,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SegModel, dict]:
    payload = torch.load(path, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    capacity = ModelCapacity(
        widths=tuple(payload["capacity"]["widths"]),
        dilations=tuple(payload["capacity"]["dilations"]),
    )
    heads = payload["head_classes"]
    model = SegModel(heads[0], capacity=capacity, seed=payload["seed"])
    for ids in heads[1:]:
        model.add_decoder_head(ids)
    model.load_state_dict(payload["state_dict"])
    if payload["encoder_frozen"]:
        model.freeze_encoder()
    if payload["norm_frozen"]:
        model.freeze_norm_layers()
    return model, payload["extra"]
