"""Fixed-capacity episodic memory with even per-task sharing.

The buffer holds full-resolution samples with their task of origin. After
each task the capacity is re-divided evenly across observed tasks (remainder
slots go to the earliest tasks) and training batches mix equal halves of new
and replayed data.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from contseg.errors import EmptyBufferWarning
from contseg.taskbench.samples import LabeledSample
from contseg.taskbench.splits import TaskSpec


@dataclass(frozen=True)
class ReplayBuffer:
    capacity: int
    slots: tuple[tuple[LabeledSample, int], ...] = ()
    observed_tasks: tuple[int, ...] = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"capacity must be positive, got {self.capacity}")
        if len(self.slots) > self.capacity:
            raise ValueError(
                f"{len(self.slots)} slots exceed capacity {self.capacity}"
            )

    def __len__(self) -> int:
        return len(self.slots)

    def task_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {t: 0 for t in self.observed_tasks}
        for _, t in self.slots:
            counts[t] = counts.get(t, 0) + 1
        return counts

    def manifest(self) -> list[tuple[str, int]]:
        return [(s.source_id, t) for s, t in self.slots]


def _quotas(capacity: int, tasks: tuple[int, ...]) -> dict[int, int]:
    # even share; remainder slots favor the earliest observed tasks
    base, rem = divmod(capacity, len(tasks))
    return {t: base + (1 if i < rem else 0) for i, t in enumerate(tasks)}


def update_buffer(
    buffer: ReplayBuffer, task: TaskSpec, rng: np.random.Generator
) -> ReplayBuffer:
    """Admit a finished task; rebalance existing tasks down to their quotas.

    Selection in and out is a seeded uniform draw without replacement. A task
    smaller than its quota contributes everything and leaves slack.
    """
    if task.task_id in buffer.observed_tasks:
        raise ValueError(f"task {task.task_id} already represented in buffer")
    tasks = buffer.observed_tasks + (task.task_id,)
    quotas = _quotas(buffer.capacity, tasks)

    new_slots: list[tuple[LabeledSample, int]] = []
    for t in buffer.observed_tasks:
        kept = [(s, tid) for s, tid in buffer.slots if tid == t]
        q = quotas[t]
        if len(kept) > q:
            picks = sorted(rng.choice(len(kept), size=q, replace=False))
            kept = [kept[int(i)] for i in picks]
        new_slots.extend(kept)

    pool = list(task.samples)
    q = quotas[task.task_id]
    if len(pool) <= q:
        chosen = pool
    else:
        picks = sorted(rng.choice(len(pool), size=q, replace=False))
        chosen = [pool[int(i)] for i in picks]
    new_slots.extend((s, task.task_id) for s in chosen)

    return ReplayBuffer(
        capacity=buffer.capacity, slots=tuple(new_slots), observed_tasks=tasks
    )


def compose_batch(
    new_samples,
    buffer: ReplayBuffer,
    batch_size: int,
    rng: np.random.Generator,
) -> list[LabeledSample]:
    """Mix ceil(b/2) new samples with floor(b/2) replayed ones, then shuffle.

    Replay draws uniformly with replacement across all slots so a small
    buffer can feed arbitrarily many batches. An empty buffer degrades to an
    all-new batch with a warning (first-task behavior).
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    new_samples = list(new_samples)
    if not new_samples:
        raise ValueError("need at least one new sample")
    if len(buffer) == 0:
        warnings.warn("compose_batch: replay buffer is empty", EmptyBufferWarning)
        batch = new_samples[:batch_size]
    else:
        n_new = math.ceil(batch_size / 2)
        n_replay = batch_size // 2
        picks = rng.integers(0, len(buffer), size=n_replay)
        batch = new_samples[:n_new] + [buffer.slots[int(i)][0] for i in picks]
    order = rng.permutation(len(batch))
    return [batch[int(i)] for i in order]
