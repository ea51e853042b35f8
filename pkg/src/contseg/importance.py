"""Per-parameter importance estimation for the prior-regularization family.

Three estimators share one output type: EWC accumulates squared gradients of
the cross-entropy against the model's own hard predictions (empirical Fisher
diagonal), MAS accumulates absolute gradients of the squared output norm
(label-free sensitivity), and the L2 baseline weights every parameter 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from contseg.errors import LayoutMismatchError
from contseg.losses import cross_entropy
from contseg.model import predict_mask

DEFAULT_SAMPLE_CAP = 200


@dataclass
class ImportanceMap:
    """Nonnegative per-parameter weights aligned with a model's layout."""

    names: tuple[str, ...]
    values: tuple[torch.Tensor, ...]
    method: str
    task_id: int = -1
    n_samples: int = 0
    weight: int = 1  # tasks folded in; drives the running mean

    def __post_init__(self):
        self.names = tuple(self.names)
        self.values = tuple(v.detach() for v in self.values)
        if len(self.names) != len(self.values):
            raise LayoutMismatchError(
                f"{len(self.names)} names for {len(self.values)} tensors"
            )
        for n, v in zip(self.names, self.values):
            if (v < 0).any():
                raise ValueError(f"negative importance entries in {n}")

    def as_dict(self) -> dict[str, torch.Tensor]:
        return dict(zip(self.names, self.values))

    def aligned_with(self, model) -> bool:
        named = dict(model.named_parameters())
        return set(named) == set(self.names) and all(
            named[n].shape == v.shape for n, v in zip(self.names, self.values)
        )


def _input_tensor(sample) -> torch.Tensor:
    """Accept a LabeledSample or a ready 3xHxW / Bx3xHxW tensor."""
    if isinstance(sample, torch.Tensor):
        t = sample
    else:
        arr = np.asarray(sample.image, dtype=np.float32) / 255.0
        t = torch.from_numpy(arr).permute(2, 0, 1)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t


def _pick_samples(task_samples, n_samples, rng):
    items = list(task_samples)
    if not items:
        raise ValueError("importance estimation needs at least one sample")
    if n_samples is None:
        n_samples = min(DEFAULT_SAMPLE_CAP, len(items))
    if n_samples > len(items):
        raise ValueError(
            f"n_samples {n_samples} exceeds available {len(items)} samples"
        )
    if n_samples == len(items):
        return items
    if rng is None:
        return items[:n_samples]
    picks = rng.choice(len(items), size=n_samples, replace=False)
    return [items[int(i)] for i in sorted(picks)]


def _estimate(model, samples, per_sample_loss, reduce_grad):
    was_training = model.training
    model.eval()  # estimation must not touch norm statistics
    names = [n for n, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    acc = [torch.zeros_like(p) for p in params]
    n = len(samples)
    for s in samples:
        x = _input_tensor(s)
        model.zero_grad(set_to_none=True)
        loss = per_sample_loss(model, x)
        loss.backward()
        for a, p in zip(acc, params):
            if p.grad is not None:
                a += reduce_grad(p.grad)
    model.zero_grad(set_to_none=True)
    if was_training:
        model.train()
    return names, [a / n for a in acc]


def estimate_ewc(model, task_samples, n_samples=None, rng=None) -> ImportanceMap:
    """Empirical Fisher diagonal using the model's own argmax as targets."""
    samples = _pick_samples(task_samples, n_samples, rng)

    def loss_fn(m, x):
        p = m(x)
        targets = torch.from_numpy(predict_mask(p)).long()
        return cross_entropy(p, targets, ignore_id=-1)

    names, values = _estimate(model, samples, loss_fn, lambda g: g.detach() ** 2)
    return ImportanceMap(
        names=tuple(names), values=tuple(values), method="ewc",
        n_samples=len(samples),
    )


def estimate_mas(model, task_samples, n_samples=None, rng=None) -> ImportanceMap:
    """Mean |d ||f(x)||^2 / d theta|; uses no labels at all."""
    samples = _pick_samples(task_samples, n_samples, rng)

    def loss_fn(m, x):
        return (m(x) ** 2).sum()

    names, values = _estimate(model, samples, loss_fn, lambda g: g.detach().abs())
    return ImportanceMap(
        names=tuple(names), values=tuple(values), method="mas",
        n_samples=len(samples),
    )


def uniform_importance(model) -> ImportanceMap:
    """The L2 baseline: every parameter weighted 1."""
    names, values = [], []
    for n, p in model.named_parameters():
        names.append(n)
        values.append(torch.ones_like(p))
    return ImportanceMap(names=tuple(names), values=tuple(values), method="l2")


def accumulate(
    prev: ImportanceMap,
    new: ImportanceMap,
    mode: str = "mean",
    allow_growth: bool = False,
) -> ImportanceMap:
    """Fold a new task's importance into the running map.

    Mean mode keeps a task-count-weighted running mean so the penalty scale
    stays stable across long sequences; sum mode adds. With allow_growth,
    parameters that appear only in `new` (a freshly attached head) enter at
    their new value.
    """
    if mode not in ("mean", "sum"):
        raise ValueError(f"unknown accumulation mode {mode!r}")
    prev_d = prev.as_dict()
    new_d = new.as_dict()
    missing = set(prev_d) - set(new_d)
    if missing:
        raise LayoutMismatchError(
            f"new map lost parameters {sorted(missing)[:4]}..."
        )
    grown = set(new_d) - set(prev_d)
    if grown and not allow_growth:
        raise LayoutMismatchError(
            f"new map adds parameters {sorted(grown)[:4]}... "
            f"(pass allow_growth=True after attaching a head)"
        )
    names, values = [], []
    for n in new.names:
        v_new = new_d[n]
        if n in prev_d:
            v_prev = prev_d[n]
            if v_prev.shape != v_new.shape:
                raise LayoutMismatchError(f"shape changed for {n}")
            if mode == "mean":
                v = (v_prev * prev.weight + v_new * new.weight) / (
                    prev.weight + new.weight
                )
            else:
                v = v_prev + v_new
        else:
            v = v_new
        names.append(n)
        values.append(v)
    return ImportanceMap(
        names=tuple(names),
        values=tuple(values),
        method=new.method,
        task_id=new.task_id,
        n_samples=new.n_samples,
        weight=prev.weight + new.weight,
    )


def save_importance(imp: ImportanceMap, path) -> None:
    torch.save(
        {
            "names": list(imp.names),
            "values": list(imp.values),
            "method": imp.method,
            "task_id": imp.task_id,
            "n_samples": imp.n_samples,
            "weight": imp.weight,
        },
        path,
    )


def load_importance(path) -> ImportanceMap:
    d = torch.load(path, weights_only=False)
    return ImportanceMap(
        names=tuple(d["names"]),
        values=tuple(d["values"]),
        method=d["method"],
        task_id=d["task_id"],
        n_samples=d["n_samples"],
        weight=d["weight"],
    )
