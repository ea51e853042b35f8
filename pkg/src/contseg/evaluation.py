"""Confusion accumulation, subset-restricted mIoU, and report generation.

IoU arithmetic deliberately sticks to plain Python floats over int64 counts
(sequential sum, ascending class order) so results are bit-reproducible and
match a naive per-pixel recomputation exactly. Reports render the
increment-by-task mIoU grid, per-task forgetting, the cross-task average and
the final all-class score as aligned text, CSV, and matplotlib figures.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from contseg.errors import ReportError, ShapeMismatchError, UndefinedMetricError

SCHEMA_VERSION = 1


@dataclass
class ConfusionMatrix:
    """Rows ground truth, columns prediction; ignore pixels never counted."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeMismatchError(f"confusion must be KxK, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")
        self.counts = counts

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ShapeMismatchError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate_confusion(
    preds, labels, num_classes: int, ignore_id: int = 255
) -> ConfusionMatrix:
    """Count (gt, pred) pairs over non-ignored pixels via one bincount pass."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeMismatchError(
            f"preds {preds.shape} and labels {labels.shape} differ"
        )
    valid = labels != ignore_id
    g = labels[valid].astype(np.int64)
    p = preds[valid].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise ValueError(f"ground-truth ids outside [0, {num_classes})")
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise ValueError(f"prediction ids outside [0, {num_classes})")
    flat = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(flat.reshape(num_classes, num_classes))


def iou_per_class(conf: ConfusionMatrix) -> dict[int, float | None]:
    """TP/(TP+FP+FN) per class; None marks zero-denominator classes."""
    counts = conf.counts
    out: dict[int, float | None] = {}
    for c in range(conf.num_classes):
        tp = int(counts[c, c])
        denom = int(counts[c, :].sum()) + int(counts[:, c].sum()) - tp
        out[c] = None if denom == 0 else float(tp) / float(denom)
    return out


def miou_detail(conf: ConfusionMatrix, class_subset=None):
    """Mean IoU over the subset plus the per-class values and exclusions."""
    if class_subset is None:
        class_subset = range(conf.num_classes)
    subset = sorted(int(c) for c in class_subset)
    if not subset:
        raise ValueError("class subset must be nonempty")
    if subset[0] < 0 or subset[-1] >= conf.num_classes:
        raise ValueError(f"subset {subset} outside [0, {conf.num_classes})")
    per_class = iou_per_class(conf)
    scored = [(c, per_class[c]) for c in subset if per_class[c] is not None]
    excluded = tuple(c for c in subset if per_class[c] is None)
    if not scored:
        raise UndefinedMetricError(
            f"every class in {subset} is degenerate (no pixels predicted or labeled)"
        )
    mean = sum(v for _, v in scored) / len(scored)
    return mean, {c: v for c, v in scored}, excluded


def miou(conf: ConfusionMatrix, class_subset=None) -> float:
    return miou_detail(conf, class_subset)[0]


# --------------------------------------------------------------------------
# results container


@dataclass
class ResultsMatrix:
    """Increment-by-task mIoU grid plus the sequence-final all-class score.

    Cells are None when a task's classes are not represented in the model at
    that increment (class-incremental upper triangle). Values live in [0, 1];
    reports format them as percent.
    """

    method: str
    protocol: str
    seed: int
    task_names: tuple[str, ...]
    task_classes: tuple[tuple[int, ...], ...]
    miou_grid: tuple[tuple[float | None, ...], ...]
    per_class: tuple[tuple[dict[int, float] | None, ...], ...] = ()
    final_all_class: float | None = None
    final_per_class: dict[int, float] = field(default_factory=dict)
    config_fingerprint: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.task_names = tuple(self.task_names)
        self.task_classes = tuple(tuple(ids) for ids in self.task_classes)
        self.miou_grid = tuple(tuple(row) for row in self.miou_grid)
        self.per_class = tuple(tuple(row) for row in self.per_class)
        for row in self.miou_grid:
            if len(row) != len(self.task_names):
                raise ValueError("grid rows must cover every task")
            for v in row:
                if v is not None and not 0.0 <= v <= 1.0:
                    raise ValueError(f"mIoU {v} outside [0, 1]")
        if self.final_all_class is not None and not 0.0 <= self.final_all_class <= 1.0:
            raise ValueError(f"all-class mIoU {self.final_all_class} outside [0, 1]")

    @property
    def num_increments(self) -> int:
        return len(self.miou_grid)

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)

    def final_row(self) -> tuple[float | None, ...]:
        return self.miou_grid[-1]

    def value_after_learning(self, task: int) -> float | None:
        """mIoU of `task` right after the increment that trained it."""
        row = min(task, self.num_increments - 1)
        return self.miou_grid[row][task]

    def forgetting(self) -> tuple[float | None, ...]:
        out = []
        for t in range(self.num_tasks):
            just_learned = self.value_after_learning(t)
            final = self.final_row()[t]
            if just_learned is None or final is None:
                out.append(None)
            else:
                out.append(just_learned - final)
        return tuple(out)

    def average_final(self) -> float | None:
        vals = [v for v in self.final_row() if v is not None]
        if not vals:
            return None
        return sum(vals) / len(vals)

    # -- stable serialization ------------------------------------------------

    def to_json(self) -> str:
        def enc_pc(d):
            return None if d is None else {str(k): d[k] for k in sorted(d)}

        payload = {
            "schema_version": self.schema_version,
            "method": self.method,
            "protocol": self.protocol,
            "seed": self.seed,
            "task_names": list(self.task_names),
            "task_classes": [list(ids) for ids in self.task_classes],
            "miou_grid": [list(row) for row in self.miou_grid],
            "per_class": [[enc_pc(d) for d in row] for row in self.per_class],
            "final_all_class": self.final_all_class,
            "final_per_class": enc_pc(self.final_per_class) or {},
            "config_fingerprint": self.config_fingerprint,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ResultsMatrix":
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported results schema {d.get('schema_version')}")

        def dec_pc(m):
            return None if m is None else {int(k): v for k, v in m.items()}

        return cls(
            method=d["method"],
            protocol=d["protocol"],
            seed=d["seed"],
            task_names=tuple(d["task_names"]),
            task_classes=tuple(tuple(ids) for ids in d["task_classes"]),
            miou_grid=tuple(tuple(row) for row in d["miou_grid"]),
            per_class=tuple(tuple(dec_pc(m) for m in row) for row in d["per_class"]),
            final_all_class=d["final_all_class"],
            final_per_class=dec_pc(d["final_per_class"]) or {},
            config_fingerprint=d.get("config_fingerprint", ""),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ResultsMatrix":
        return cls.from_json(Path(path).read_text())


# --------------------------------------------------------------------------
# report rendering


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100.0 * v:.1f}"


def _grid_lines(matrix: ResultsMatrix) -> list[str]:
    header = ["after task"] + [f"mIoU_{n}" for n in matrix.task_names]
    rows = [header]
    for k, row in enumerate(matrix.miou_grid):
        rows.append([str(k + 1)] + [_pct(v) for v in row])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]


def build_report(matrix: ResultsMatrix, out_dir=None, figures: bool = True) -> str:
    """Render one run's report; optionally write text + CSV + figure files."""
    lines = [
        f"method: {matrix.method}",
        f"protocol: {matrix.protocol}",
        f"seed: {matrix.seed}",
        "",
        "mIoU (%) per evaluation task after each increment",
    ]
    lines.extend(_grid_lines(matrix))
    lines.append("")
    forg = matrix.forgetting()
    lines.append("forgetting (post-learning mIoU minus final mIoU, % points)")
    for name, f in zip(matrix.task_names, forg):
        lines.append(f"  {name}: {_pct(f)}")
    lines.append("")
    lines.append(f"mIoU_average (final row): {_pct(matrix.average_final())}")
    lines.append(f"mIoU_all_classes (final model): {_pct(matrix.final_all_class)}")
    if matrix.final_per_class:
        universe: set[int] = set()
        for ids in matrix.task_classes:
            universe |= set(ids)
        per = ", ".join(
            f"{c}:{_pct(v)}" for c, v in sorted(matrix.final_per_class.items())
        )
        lines.append(f"final per-class IoU (%): {per}")
        excluded = sorted(universe - set(matrix.final_per_class))
        if excluded:
            lines.append(f"classes excluded as degenerate: {excluded}")
    text = "\n".join(lines) + "\n"

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(text)
        _write_csv(matrix, out_dir / "results.csv")
        if figures:
            render_figures(matrix, out_dir)
    return text


def _write_csv(matrix: ResultsMatrix, path: Path) -> None:
    rows = [["after_task"] + [f"miou_{n}" for n in matrix.task_names]
            + ["miou_average", "miou_all_classes"]]
    for k, row in enumerate(matrix.miou_grid):
        avg = [v for v in row if v is not None]
        rows.append(
            [str(k + 1)]
            + [("" if v is None else f"{100 * v:.4f}") for v in row]
            + [f"{100 * sum(avg) / len(avg):.4f}" if avg else ""]
            + [
                f"{100 * matrix.final_all_class:.4f}"
                if (k == matrix.num_increments - 1 and matrix.final_all_class is not None)
                else ""
            ]
        )
    rows.append([])
    rows.append(["task", "forgetting"])
    for name, f in zip(matrix.task_names, matrix.forgetting()):
        rows.append([name, "" if f is None else f"{100 * f:.4f}"])
    path.write_text("\n".join(",".join(r) for r in rows) + "\n")


def render_figures(matrix: ResultsMatrix, out_dir) -> list[Path]:
    """Forgetting curves and the mIoU grid as static PNGs next to the tables."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = list(range(1, matrix.num_increments + 1))
    for t, name in enumerate(matrix.task_names):
        ys = [
            None if matrix.miou_grid[k][t] is None else 100 * matrix.miou_grid[k][t]
            for k in range(matrix.num_increments)
        ]
        ax.plot(xs, ys, marker="o", label=f"eval on {name}")
    ax.set_xlabel("trained increments")
    ax.set_ylabel("mIoU (%)")
    ax.set_xticks(xs)
    ax.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    ax.legend()
    ax.set_title(f"{matrix.method}: per-task mIoU across increments")
    fig.tight_layout()
    p = out_dir / "forgetting_curves.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)

    fig, ax = plt.subplots(figsize=(5, 4))
    grid = np.array(
        [[np.nan if v is None else 100 * v for v in row] for row in matrix.miou_grid]
    )
    im = ax.imshow(grid, cmap="viridis", vmin=0, vmax=100)
    ax.set_xticks(range(matrix.num_tasks), matrix.task_names)
    ax.set_yticks(range(matrix.num_increments),
                  [f"after {k + 1}" for k in range(matrix.num_increments)])
    for (i, j), v in np.ndenumerate(grid):
        if not math.isnan(v):
            ax.text(j, i, f"{v:.1f}", ha="center", va="center",
                    color="white" if v < 60 else "black", fontsize=9)
    fig.colorbar(im, ax=ax, label="mIoU (%)")
    ax.set_title(f"{matrix.method}: evaluation grid")
    fig.tight_layout()
    p = out_dir / "miou_matrix.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)
    return written


def render_comparison_figure(matrices: list["ResultsMatrix"], out_dir) -> Path:
    """Grouped bars of final per-task mIoU, average, and all-class score."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = matrices[0].task_names
    cols = [f"mIoU_{n}" for n in names] + ["average", "all classes"]
    fig, ax = plt.subplots(figsize=(1.8 + 1.3 * len(cols), 4))
    width = 0.8 / len(matrices)
    xs = np.arange(len(cols))
    for i, m in enumerate(matrices):
        vals = list(m.final_row()) + [m.average_final(), m.final_all_class]
        ys = [0.0 if v is None else 100 * v for v in vals]
        ax.bar(xs + i * width, ys, width, label=f"{m.method} (seed {m.seed})")
    ax.set_xticks(xs + 0.4 - width / 2, cols, rotation=20)
    ax.set_ylabel("mIoU (%)")
    ax.set_ylim(0, 100)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title("final-increment comparison")
    fig.tight_layout()
    p = out_dir / "comparison.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    return p


def comparison_report(matrices: list[ResultsMatrix], out_dir=None) -> str:
    """Side-by-side final scores for several runs; flags best and runner-up.

    All runs must share protocol and task layout.
    """
    if not matrices:
        raise ReportError("no results to compare")
    proto = matrices[0].protocol
    names = matrices[0].task_names
    for m in matrices[1:]:
        if m.protocol != proto or m.task_names != names:
            raise ReportError(
                f"incompatible runs: {m.method} is {m.protocol}/{m.task_names}, "
                f"expected {proto}/{names}"
            )

    cols = [f"mIoU_{n}" for n in names] + ["mIoU_average", "mIoU_all"]
    table: list[list[float | None]] = []
    for m in matrices:
        table.append(list(m.final_row()) + [m.average_final(), m.final_all_class])

    def rank_flags(col: int) -> dict[int, str]:
        scored = sorted(
            ((v[col], i) for i, v in enumerate(table) if v[col] is not None),
            reverse=True,
        )
        flags = {}
        if scored:
            flags[scored[0][1]] = "*"
        if len(scored) > 1:
            flags[scored[1][1]] = "+"
        return flags

    flags_per_col = [rank_flags(c) for c in range(len(cols))]
    rows = [["method"] + cols]
    for i, m in enumerate(matrices):
        cells = [f"{m.method} (seed {m.seed})"]
        for c, v in enumerate(table[i]):
            cells.append(_pct(v) + flags_per_col[c].get(i, ""))
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(cols) + 1)]
    lines = [
        f"comparison ({proto}); final-increment scores, * best, + second best",
        "",
    ]
    lines.extend(
        "  ".join(cell.ljust(w) if j == 0 else cell.rjust(w)
                  for j, (cell, w) in enumerate(zip(r, widths)))
        for r in rows
    )
    text = "\n".join(lines) + "\n"
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "comparison.txt").write_text(text)
        csv_rows = [rows[0]]
        for i, m in enumerate(matrices):
            csv_rows.append(
                [rows[i + 1][0]]
                + ["" if v is None else f"{100 * v:.4f}" for v in table[i]]
            )
        (out_dir / "comparison.csv").write_text(
            "\n".join(",".join(r) for r in csv_rows) + "\n"
        )
    return text
