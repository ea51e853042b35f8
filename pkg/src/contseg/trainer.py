"""Per-task training for the whole method catalog, and sequence orchestration.

One call to train_task runs a single increment: optimizer + polynomial LR
schedule, method-specific loss assembly, early stopping on the task holdout,
and the post-task bookkeeping (teacher snapshot, importance accumulation,
replay-buffer refresh). run_sequence drives a full task sequence and fills
the increment-by-task mIoU grid.

The first task is identical for every method under the same seed; the
continual machinery (freezing, lowered LR, distillation, penalties, replay)
engages from the second task onward.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from contseg.errors import ConfigError, TrainingDivergedError, UndefinedMetricError
from contseg.evaluation import ResultsMatrix, accumulate_confusion, miou_detail
from contseg.importance import (
    ImportanceMap,
    accumulate,
    estimate_ewc,
    estimate_mas,
    uniform_importance,
)
from contseg.losses import (
    LossConfig,
    cil_loss,
    cross_entropy,
    inverse_log_frequency_weights,
    lwf_loss,
    reg_penalty,
)
from contseg.model import (
    ModelCapacity,
    SegModel,
    TeacherSnapshot,
    predict_mask,
    save_checkpoint,
    snapshot,
)
from contseg.replay import ReplayBuffer, compose_batch, update_buffer
from contseg.taskbench.samples import AugmentPolicy, augment
from contseg.taskbench.splits import TaskSequence, TaskSpec

METHODS = ("FT", "FE", "L2", "EWC", "MAS", "LwF", "CIL", "Replay", "CIL+R")
NON_INCREMENTAL = "Non-Incremental"
_REG_METHODS = ("L2", "EWC", "MAS")
_DISTILL_METHODS = ("LwF", "CIL", "CIL+R")
_REPLAY_METHODS = ("Replay", "CIL+R")

DEFAULT_LAMBDA = {"LwF": 1.0, "CIL": 1.0, "CIL+R": 1.0,
                  "L2": 100.0, "EWC": 100.0, "MAS": 100.0}


def poly_lr(step: int, total_steps: int, base_lr: float, power: float = 0.9) -> float:
    """base_lr * (1 - step/total_steps) ** power."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps) ** power


@dataclass
class OptimizerConfig:
    lr: float = 4e-4
    momentum: float = 0.9  # Adam beta1
    beta2: float = 0.999
    weight_decay: float = 3e-4


@dataclass
class ScheduleConfig:
    power: float = 0.9
    max_epochs: int = 250


@dataclass
class EarlyStopConfig:
    patience: int = 20


@dataclass
class PostFirstTask:
    """Adjustments applied to FT and the prior-regularization methods after
    the first task: lowered learning rate and frozen norm layers."""

    lowered_lr: float | None = 1e-5
    freeze_norm: bool = True


@dataclass
class MethodConfig:
    method: str = "FT"
    lam: float | None = None  # None: method default
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    post_first_task: PostFirstTask = field(default_factory=PostFirstTask)
    batch_size: int = 6
    buffer_capacity: int = 32
    n_importance_samples: int | None = None
    importance_mode: str = "mean"
    augment_policy: AugmentPolicy | None = None
    cil_weight_floor: float = 0.5
    cil_weight_ceil: float = 10.0
    eval_batch: int = 8

    def __post_init__(self):
        if self.method not in METHODS and self.method != NON_INCREMENTAL:
            raise ConfigError(
                f"unknown method {self.method!r}; expected one of "
                f"{METHODS + (NON_INCREMENTAL,)}"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.method in _REPLAY_METHODS and self.buffer_capacity < 1:
            raise ConfigError(f"{self.method} requires a positive buffer_capacity")

    def resolved_lam(self) -> float:
        if self.lam is not None:
            return self.lam
        return DEFAULT_LAMBDA.get(self.method, 0.0)


@dataclass
class ContinualState:
    """Everything a method may carry between increments."""

    task_index: int = 0
    teacher: TeacherSnapshot | None = None
    importance: ImportanceMap | None = None
    old_params: dict[str, torch.Tensor] | None = None
    buffer: ReplayBuffer | None = None


@dataclass
class TrainLog:
    method: str
    task_id: int
    epochs: list[dict] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = -1
    best_holdout_miou: float | None = None
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# batching / evaluation helpers


def to_batch(samples, lookup=None):
    """Stack samples into (images in [0,1], int64 labels); optional id remap."""
    x = np.stack([s.image for s in samples]).astype(np.float32) / 255.0
    y = np.stack([s.label for s in samples]).astype(np.int64)
    if lookup is not None:
        y = lookup[y]
    return (
        torch.from_numpy(x).permute(0, 3, 1, 2).contiguous(),
        torch.from_numpy(y),
    )


def _same_shape_batches(samples, max_batch):
    i = 0
    while i < len(samples):
        shape = samples[i].image.shape
        j = i + 1
        while j < len(samples) and j - i < max_batch and samples[j].image.shape == shape:
            j += 1
        yield samples[i:j]
        i = j


def evaluate_miou(
    model: SegModel,
    samples,
    classes,
    num_classes: int,
    ignore_id: int,
    restrict: bool = True,
    eval_batch: int = 8,
):
    """mIoU of `model` on `samples` over `classes`.

    With restrict=True the argmax only considers the channels of `classes`
    (per-subset scoring); otherwise the full channel space competes. Returns
    (None, None) when the model has no channel for any requested class.
    """
    classes = sorted(int(c) for c in classes)
    known = [c for c in classes if c in model.class_ids]
    if not known:
        return None, None
    channels = [model.channel_of(c) for c in known] if restrict else None

    was_training = model.training
    model.eval()
    class_ids = np.asarray(model.class_ids, dtype=np.int64)
    conf = None
    with torch.no_grad():
        for batch in _same_shape_batches(list(samples), eval_batch):
            x, y = to_batch(batch)
            posteriors = model(x)
            pred_channels = predict_mask(posteriors, channels)
            preds = class_ids[pred_channels]
            part = accumulate_confusion(preds, y.numpy(), num_classes, ignore_id)
            conf = part if conf is None else conf.merge(part)
    if was_training:
        model.train()
    if conf is None:
        return None, None
    try:
        value, per_class, _ = miou_detail(conf, known)
    except UndefinedMetricError:
        return None, None
    return value, per_class


# --------------------------------------------------------------------------
# single-increment training


def _cil_channel_weights(model: SegModel, task: TaskSpec, num_classes: int,
                         ignore_id: int, floor: float, ceil: float) -> torch.Tensor:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in task.samples:
        lab = s.label[s.label != ignore_id]
        counts += np.bincount(lab.astype(np.int64), minlength=num_classes)
    per_class = inverse_log_frequency_weights(counts, floor=floor, ceil=ceil)
    return per_class[torch.as_tensor(model.class_ids, dtype=torch.long)]


def _check_state(method: str, state: ContinualState) -> None:
    if method in _DISTILL_METHODS and state.teacher is None:
        raise ConfigError(f"{method} needs a teacher snapshot after the first task")
    if method in _REG_METHODS and (state.importance is None or state.old_params is None):
        raise ConfigError(f"{method} needs importance and previous parameters")
    if method in _REPLAY_METHODS and state.buffer is None:
        raise ConfigError(f"{method} needs a replay buffer after the first task")


def train_task(
    model: SegModel,
    task: TaskSpec,
    state: ContinualState,
    config: MethodConfig,
    protocol: str,
    rng: np.random.Generator,
    num_classes: int,
    ignore_id: int,
):
    """Run one increment; returns (model, new state, TrainLog)."""
    t0 = time.perf_counter()
    method = config.method if config.method != NON_INCREMENTAL else "FT"
    later = state.task_index > 0
    if later:
        _check_state(method, state)

    if protocol == "class_incremental":
        new_classes = sorted(set(task.labeled_classes) - set(model.class_ids))
        if new_classes:
            model.add_decoder_head(new_classes)

    if later and method == "FE" and not model.encoder_frozen:
        model.freeze_encoder()
    if (
        later
        and method in ("FT",) + _REG_METHODS
        and config.post_first_task.freeze_norm
        and not model.norm_frozen
    ):
        model.freeze_norm_layers()

    base_lr = config.optimizer.lr
    if (
        later
        and method in ("FT",) + _REG_METHODS
        and config.post_first_task.lowered_lr is not None
    ):
        base_lr = config.post_first_task.lowered_lr

    lam = config.resolved_lam()
    lookup = model.label_lookup(num_classes, ignore_id)
    replay_active = (
        later and method in _REPLAY_METHODS
        and state.buffer is not None and len(state.buffer) > 0
    )
    distill_active = later and method in _DISTILL_METHODS and lam > 0
    reg_active = later and method in _REG_METHODS and lam > 0

    loss_cfg = LossConfig(lam=lam)
    if distill_active:
        loss_cfg.distill_channels = tuple(range(state.teacher.num_channels))
    if method in ("CIL", "CIL+R"):
        loss_cfg.pixel_weights = _cil_channel_weights(
            model, task, num_classes, ignore_id,
            config.cil_weight_floor, config.cil_weight_ceil,
        )

    reg_triples: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = []
    if reg_active:
        imp = state.importance.as_dict()
        for name, p in model.named_parameters():
            if p.requires_grad and name in state.old_params:
                reg_triples.append((p, state.old_params[name], imp[name]))

    params = model.trainable_parameters()
    optimizer = torch.optim.Adam(
        params,
        lr=base_lr,
        betas=(config.optimizer.momentum, config.optimizer.beta2),
        weight_decay=config.optimizer.weight_decay,
    )

    n_train = len(task.samples)
    if n_train == 0:
        raise ConfigError(f"task {task.task_id} has no training samples")
    chunk = math.ceil(config.batch_size / 2) if replay_active else config.batch_size
    steps_per_epoch = math.ceil(n_train / chunk)
    total_steps = config.schedule.max_epochs * steps_per_epoch

    log = TrainLog(method=config.method, task_id=task.task_id)
    best_val = -math.inf
    best_state = None
    best_epoch = -1
    bad_epochs = 0
    global_step = 0

    for epoch in range(config.schedule.max_epochs):
        model.train()
        order = rng.permutation(n_train)
        ep_total = ep_ce = ep_aux = 0.0
        n_steps = 0
        for start in range(0, n_train, chunk):
            batch = [task.samples[int(i)] for i in order[start : start + chunk]]
            if replay_active:
                batch = compose_batch(batch, state.buffer, config.batch_size, rng)
            if config.augment_policy is not None:
                batch = [augment(s, config.augment_policy, rng) for s in batch]
            x, y = to_batch(batch, lookup)

            lr_t = poly_lr(global_step, total_steps, base_lr, config.schedule.power)
            for group in optimizer.param_groups:
                group["lr"] = lr_t
            log.lr_trace.append(lr_t)

            posteriors = model(x)
            if distill_active and method == "LwF":
                teacher_p = state.teacher.posteriors(x)
                bd = lwf_loss(posteriors, y, teacher_p, loss_cfg, ignore_id)
                total, ce_v, aux_v = bd.total, bd.ce, bd.aux
            elif distill_active and method in ("CIL", "CIL+R"):
                teacher_p = state.teacher.posteriors(x)
                bd = cil_loss(posteriors, y, teacher_p, loss_cfg, ignore_id)
                total, ce_v, aux_v = bd.total, bd.ce, bd.aux
            elif reg_active:
                ce = cross_entropy(posteriors, y, ignore_id)
                pen = reg_penalty(*(list(z) for z in zip(*reg_triples)))
                total = ce + lam * pen
                ce_v, aux_v = float(ce.detach()), float(pen.detach())
            else:
                ce = cross_entropy(posteriors, y, ignore_id)
                total, ce_v, aux_v = ce, float(ce.detach()), 0.0

            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss {float(total.detach())} "
                    f"(task {task.task_id}, epoch {epoch}, step {global_step})",
                    task_id=task.task_id, epoch=epoch, step=global_step,
                )
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()

            ep_total += float(total.detach())
            ep_ce += ce_v
            ep_aux += aux_v
            n_steps += 1
            global_step += 1

        holdout_val = None
        if task.holdout:
            holdout_val, _ = evaluate_miou(
                model, task.holdout, task.labeled_classes, num_classes,
                ignore_id, restrict=True, eval_batch=config.eval_batch,
            )
        log.epochs.append({
            "epoch": epoch,
            "loss": ep_total / n_steps,
            "loss_ce": ep_ce / n_steps,
            "loss_aux": ep_aux / n_steps,
            "holdout_miou": holdout_val,
        })

        if holdout_val is not None:
            if holdout_val > best_val:
                best_val = holdout_val
                best_state = copy.deepcopy(model.state_dict())
                best_epoch = epoch
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.early_stop.patience:
                    break

    log.stop_epoch = len(log.epochs)
    if best_state is not None:
        model.load_state_dict(best_state)
        log.best_epoch = best_epoch
        log.best_holdout_miou = best_val

    # post-task bookkeeping on the checkpointed (best-holdout) model
    new_state = ContinualState(task_index=state.task_index + 1)
    new_state.teacher = snapshot(model)
    if method in _REG_METHODS:
        if method == "EWC":
            est = estimate_ewc(model, task.samples, config.n_importance_samples, rng)
        elif method == "MAS":
            est = estimate_mas(model, task.samples, config.n_importance_samples, rng)
        else:
            est = uniform_importance(model)
        est.task_id = task.task_id
        if state.importance is None:
            new_state.importance = est
        else:
            new_state.importance = accumulate(
                state.importance, est, mode=config.importance_mode, allow_growth=True
            )
        new_state.old_params = model.parameter_copy()
    if method in _REPLAY_METHODS:
        buffer = state.buffer or ReplayBuffer(capacity=config.buffer_capacity)
        new_state.buffer = update_buffer(buffer, task, rng)

    log.wall_time_s = time.perf_counter() - t0
    return model, new_state, log


# --------------------------------------------------------------------------
# full sequences


def config_fingerprint(config: MethodConfig, capacity: ModelCapacity, seed: int) -> str:
    blob = json.dumps(
        {
            "config": dataclasses.asdict(config),
            "capacity": dataclasses.asdict(capacity),
            "seed": seed,
        },
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunResult:
    matrix: ResultsMatrix
    logs: list[TrainLog]
    model: SegModel
    state: ContinualState


def run_sequence(
    sequence: TaskSequence,
    config: MethodConfig,
    capacity: ModelCapacity = ModelCapacity(),
    seed: int = 0,
    out_dir=None,
) -> RunResult:
    """Train the sequence under `config`, evaluating every task after each
    increment; Non-Incremental trains once on the union of all tasks."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    non_incremental = config.method == NON_INCREMENTAL
    train_tasks = [sequence.joint] if non_incremental else list(sequence.tasks)

    if sequence.protocol == "class_incremental":
        task_names = [f"S{t.task_id + 1}" for t in sequence.tasks]
    else:
        task_names = [t.domain_tag or f"D{t.task_id + 1}" for t in sequence.tasks]

    model = SegModel(train_tasks[0].labeled_classes, capacity=capacity, seed=seed)
    state = ContinualState()
    logs: list[TrainLog] = []
    grid: list[list[float | None]] = []
    per_class_grid: list[list[dict[int, float] | None]] = []

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)

    for task in train_tasks:
        model, state, log = train_task(
            model, task, state, config, sequence.protocol, rng,
            sequence.num_classes, sequence.ignore_id,
        )
        logs.append(log)
        row: list[float | None] = []
        row_pc: list[dict[int, float] | None] = []
        for t in sequence.tasks:
            val, pc = evaluate_miou(
                model, t.holdout, t.labeled_classes, sequence.num_classes,
                sequence.ignore_id, restrict=True, eval_batch=config.eval_batch,
            )
            row.append(val)
            row_pc.append(pc)
        grid.append(row)
        per_class_grid.append(row_pc)
        if out_dir is not None:
            tag = "joint" if non_incremental else f"task_{task.task_id}"
            save_checkpoint(
                model, out_dir / "checkpoints" / f"{tag}.pt",
                extra={"seed": seed, "method": config.method},
            )
            (out_dir / "logs" / f"{tag}.json").write_text(
                json.dumps(log.to_dict(), indent=1)
            )
            if state.buffer is not None:
                lines = [f"{sid}\t{tid}" for sid, tid in state.buffer.manifest()]
                (out_dir / "logs" / f"buffer_after_{tag}.txt").write_text(
                    "\n".join(lines) + "\n"
                )

    all_classes = sorted(set().union(*[t.labeled_classes for t in sequence.tasks]))
    final_all, final_pc = evaluate_miou(
        model, sequence.eval_pool, all_classes, sequence.num_classes,
        sequence.ignore_id, restrict=False, eval_batch=config.eval_batch,
    )

    matrix = ResultsMatrix(
        method=config.method,
        protocol=sequence.protocol,
        seed=seed,
        task_names=tuple(task_names),
        task_classes=tuple(tuple(sorted(t.labeled_classes)) for t in sequence.tasks),
        miou_grid=tuple(tuple(row) for row in grid),
        per_class=tuple(tuple(row) for row in per_class_grid),
        final_all_class=final_all,
        final_per_class=final_pc or {},
        config_fingerprint=config_fingerprint(config, capacity, seed),
    )
    if out_dir is not None:
        matrix.save(out_dir / "results.json")
    return RunResult(matrix=matrix, logs=logs, model=model, state=state)
