"""Task construction: samples, synthetic data, incremental splits, disk layout."""

from contseg.taskbench.samples import (
    IGNORE_ID,
    AugmentPolicy,
    Dataset,
    LabeledSample,
    augment,
    mask_labels,
)
from contseg.taskbench.shapeworld import (
    DomainParams,
    ShapeWorldConfig,
    generate_shapeworld,
)
from contseg.taskbench.splits import (
    ClassPartition,
    TaskSequence,
    TaskSpec,
    build_class_incremental_split,
    build_domain_incremental_sequence,
)
from contseg.taskbench.io import (
    load_dataset,
    read_manifest,
    save_dataset,
    write_manifest,
)

__all__ = [
    "IGNORE_ID",
    "AugmentPolicy",
    "ClassPartition",
    "Dataset",
    "DomainParams",
    "LabeledSample",
    "ShapeWorldConfig",
    "TaskSequence",
    "TaskSpec",
    "augment",
    "build_class_incremental_split",
    "build_domain_incremental_sequence",
    "generate_shapeworld",
    "load_dataset",
    "mask_labels",
    "read_manifest",
    "save_dataset",
    "write_manifest",
]
