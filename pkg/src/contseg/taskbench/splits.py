"""Builders for class- and domain-incremental task sequences.

Class-incremental: the label space is partitioned into ordered subsets; each
image is assigned to exactly one task and its labels are masked to that
task's classes. Classes marked exclusive must not occur at all (even
unlabeled) in images of other tasks, which makes them disappear from later
training data. Domain-incremental: one task per dataset, identical label
space, shifting input appearance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from contseg.errors import InfeasibleSplitError
from contseg.taskbench.samples import Dataset, LabeledSample, mask_labels

HOLDOUT_FRACTION = 0.1  # early-stopping holdout share per task


@dataclass(frozen=True)
class ClassPartition:
    """Ordered disjoint class subsets, with an optional exclusive group."""

    subsets: tuple[frozenset[int], ...]
    exclusive_classes: frozenset[int] = frozenset()

    def __post_init__(self):
        subsets = tuple(frozenset(int(c) for c in s) for s in self.subsets)
        exclusive = frozenset(int(c) for c in self.exclusive_classes)
        object.__setattr__(self, "subsets", subsets)
        object.__setattr__(self, "exclusive_classes", exclusive)
        seen: set[int] = set()
        for s in subsets:
            if seen & s:
                raise ValueError(f"subsets overlap on classes {sorted(seen & s)}")
            seen |= s
        if exclusive:
            homes = [i for i, s in enumerate(subsets) if exclusive <= s]
            if len(homes) != 1:
                raise ValueError(
                    "exclusive_classes must be contained in exactly one subset"
                )

    @property
    def all_classes(self) -> frozenset[int]:
        out: set[int] = set()
        for s in self.subsets:
            out |= s
        return frozenset(out)

    def home_subset(self) -> int | None:
        if not self.exclusive_classes:
            return None
        for i, s in enumerate(self.subsets):
            if self.exclusive_classes <= s:
                return i
        return None


@dataclass(frozen=True)
class TaskSpec:
    """One increment: train samples, labeled class set, holdout for early stop."""

    task_id: int
    samples: tuple[LabeledSample, ...]
    labeled_classes: frozenset[int]
    domain_tag: str = ""
    holdout: tuple[LabeledSample, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "holdout", tuple(self.holdout))
        object.__setattr__(
            self, "labeled_classes", frozenset(int(c) for c in self.labeled_classes)
        )
        for s in list(self.samples) + list(self.holdout):
            extra = s.present_classes() - self.labeled_classes
            if extra:
                raise ValueError(
                    f"sample {s.source_id!r} carries labels {sorted(extra)} outside "
                    f"task {self.task_id} classes"
                )
        train_ids = {s.source_id for s in self.samples}
        hold_ids = {s.source_id for s in self.holdout}
        if train_ids & hold_ids:
            raise ValueError(
                f"train/holdout overlap in task {self.task_id}: "
                f"{sorted(train_ids & hold_ids)}"
            )


@dataclass(frozen=True)
class TaskSequence:
    """Ordered increments plus the material needed for sequence-level eval.

    eval_pool keeps each holdout image with its raw (unmasked) label map for
    the final all-class evaluation; joint is the union of all train samples
    with raw labels, used by the non-incremental upper bound.
    """

    tasks: tuple[TaskSpec, ...]
    protocol: str  # "class_incremental" | "domain_incremental"
    num_classes: int
    ignore_id: int
    eval_pool: tuple[LabeledSample, ...]
    joint: TaskSpec

    def __len__(self) -> int:
        return len(self.tasks)


def _carve_holdout(indices: list[int], rng: np.random.Generator,
                   fraction: float) -> tuple[list[int], list[int]]:
    n = len(indices)
    if n < 2:
        return list(indices), []
    n_hold = min(n - 1, max(1, int(round(fraction * n))))
    picks = rng.choice(n, size=n_hold, replace=False)
    hold = {indices[int(i)] for i in picks}
    return [i for i in indices if i not in hold], sorted(hold)


def build_class_incremental_split(
    dataset: Dataset,
    partition: ClassPartition,
    rng_seed: int,
    holdout_fraction: float = HOLDOUT_FRACTION,
) -> TaskSequence:
    """Split one dataset into class-incremental tasks honoring exclusivity.

    Images containing an exclusive class are forced into that class's home
    task; the rest are spread by a seeded draw to equalize task sizes. Labels
    (train and holdout alike) are masked to each task's subset. Raises
    InfeasibleSplitError when the forced images leave another task empty.
    """
    present = dataset.present_classes()
    uncovered = present - partition.all_classes
    if uncovered:
        raise ValueError(
            f"partition does not cover dataset classes {sorted(uncovered)}"
        )
    n_tasks = len(partition.subsets)
    n = len(dataset.samples)
    rng = np.random.default_rng(rng_seed)

    home = partition.home_subset()
    exclusive = partition.exclusive_classes
    forced: list[int] = []
    free: list[int] = []
    for i, s in enumerate(dataset.samples):
        if exclusive and (s.present_classes() & exclusive):
            forced.append(i)
        else:
            free.append(i)

    # Balanced target sizes; the home task keeps all forced images even when
    # that overshoots its share.
    base, rem = divmod(n, n_tasks)
    targets = [base + (1 if t < rem else 0) for t in range(n_tasks)]
    if home is not None and len(forced) > targets[home]:
        others = n - len(forced)
        base2, rem2 = divmod(others, n_tasks - 1) if n_tasks > 1 else (0, 0)
        j = 0
        for t in range(n_tasks):
            if t == home:
                targets[t] = len(forced)
            else:
                targets[t] = base2 + (1 if j < rem2 else 0)
                j += 1
    if min(targets) == 0:
        if exclusive:
            raise InfeasibleSplitError(
                f"exclusive classes {sorted(exclusive)} occupy {len(forced)} of "
                f"{n} images; remaining {len(free)} cannot fill the other "
                f"{n_tasks - 1} tasks",
                class_ids=exclusive,
            )
        raise InfeasibleSplitError(
            f"{n} images cannot populate {n_tasks} tasks"
        )

    assignment: list[list[int]] = [[] for _ in range(n_tasks)]
    if home is not None:
        assignment[home] = list(forced)
    order = [free[int(i)] for i in rng.permutation(len(free))]
    pos = 0
    for t in range(n_tasks):
        deficit = targets[t] - len(assignment[t])
        if deficit > 0:
            assignment[t].extend(order[pos : pos + deficit])
            pos += deficit
    # rounding slack goes to the last task
    if pos < len(order):
        assignment[-1].extend(order[pos:])

    for t, idxs in enumerate(assignment):
        if not idxs:
            raise InfeasibleSplitError(
                f"task {t} received no images", class_ids=exclusive
            )

    tasks: list[TaskSpec] = []
    eval_pool: list[LabeledSample] = []
    joint_train: list[LabeledSample] = []
    full = partition.all_classes
    for t, idxs in enumerate(assignment):
        idxs = sorted(idxs)
        train_idx, hold_idx = _carve_holdout(idxs, rng, holdout_fraction)
        allowed = partition.subsets[t]

        def _masked(i: int) -> LabeledSample:
            s = dataset.samples[i]
            if s.present_classes() <= allowed:
                return s.with_task_id(t)  # degenerate partition: keep bytes
            return s.with_label(
                mask_labels(s.label, allowed, dataset.ignore_id)
            ).with_task_id(t)

        tasks.append(
            TaskSpec(
                task_id=t,
                samples=tuple(_masked(i) for i in train_idx),
                labeled_classes=allowed,
                domain_tag=dataset.domain_tag,
                holdout=tuple(_masked(i) for i in hold_idx),
            )
        )
        eval_pool.extend(dataset.samples[i].with_task_id(t) for i in hold_idx)
        joint_train.extend(dataset.samples[i].with_task_id(t) for i in train_idx)

    joint = TaskSpec(
        task_id=-1,
        samples=tuple(joint_train),
        labeled_classes=full,
        domain_tag=dataset.domain_tag,
        holdout=tuple(eval_pool),
    )
    return TaskSequence(
        tasks=tuple(tasks),
        protocol="class_incremental",
        num_classes=dataset.num_classes,
        ignore_id=dataset.ignore_id,
        eval_pool=tuple(eval_pool),
        joint=joint,
    )


def build_domain_incremental_sequence(
    datasets: list[Dataset],
    shared_classes,
    rng_seed: int = 0,
    holdout_fraction: float = HOLDOUT_FRACTION,
) -> TaskSequence:
    """One task per dataset, same labeled classes throughout, in given order."""
    if not datasets:
        raise ValueError("need at least one dataset")
    shared = frozenset(int(c) for c in shared_classes)
    tags = [d.domain_tag for d in datasets]
    if len(set(tags)) != len(tags):
        raise ValueError(f"domain tags must be distinct, got {tags}")
    for d in datasets:
        extra = d.present_classes() - shared
        if extra:
            raise ValueError(
                f"dataset {d.domain_tag!r} labels classes {sorted(extra)} outside "
                f"the shared set"
            )

    rng = np.random.default_rng(rng_seed)
    tasks: list[TaskSpec] = []
    eval_pool: list[LabeledSample] = []
    joint_train: list[LabeledSample] = []
    for t, d in enumerate(datasets):
        idxs = list(range(len(d.samples)))
        train_idx, hold_idx = _carve_holdout(idxs, rng, holdout_fraction)
        train = tuple(d.samples[i].with_task_id(t) for i in train_idx)
        hold = tuple(d.samples[i].with_task_id(t) for i in hold_idx)
        tasks.append(
            TaskSpec(
                task_id=t,
                samples=train,
                labeled_classes=shared,
                domain_tag=d.domain_tag,
                holdout=hold,
            )
        )
        eval_pool.extend(hold)
        joint_train.extend(train)

    joint = TaskSpec(
        task_id=-1,
        samples=tuple(joint_train),
        labeled_classes=shared,
        domain_tag="+".join(tags),
        holdout=tuple(eval_pool),
    )
    return TaskSequence(
        tasks=tuple(tasks),
        protocol="domain_incremental",
        num_classes=max(d.num_classes for d in datasets),
        ignore_id=datasets[0].ignore_id,
        eval_pool=tuple(eval_pool),
        joint=joint,
    )
