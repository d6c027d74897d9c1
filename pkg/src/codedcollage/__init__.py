"""Grid-collage coded redundancy for distributed image classification.

A batch of N = K*K images goes to N workers; one extra worker
classifies a single K-by-K collage of the whole batch. When a worker is
slow, the collage's decoded per-cell prediction stands in for it, so
the batch rarely waits for stragglers, at 1/N extra compute.

The package provides the collage codec (layout, compositing, decoding,
recovery), calibrated latency oracles, a deterministic strategy
simulator with recovery accounting, summary metrics, a line-protocol
gateway for driving live stub workers, and a CLI.
"""

from .geometry import Box, jaccard, assign_cell
from .codec import (
    DEFAULT_DETECTION_THRESHOLD,
    CollageLayout,
    Detection,
    CellPredictions,
    build_layout,
    compose_collage,
    decode,
    recover,
)
from .backend import (
    CollageModel,
    CostModel,
    LatencyModel,
    WorkerModel,
    calibrate_lognormal,
)
from .engine import RunConfig, Strategy, build_config, default_config, run_experiment
from .metrics import RecoveryLedger, recovery_accuracy, redundancy_overhead, summarize

__version__ = "0.1.0"

__all__ = [
    "Box",
    "jaccard",
    "assign_cell",
    "DEFAULT_DETECTION_THRESHOLD",
    "CollageLayout",
    "Detection",
    "CellPredictions",
    "build_layout",
    "compose_collage",
    "decode",
    "recover",
    "CollageModel",
    "CostModel",
    "LatencyModel",
    "WorkerModel",
    "calibrate_lognormal",
    "RunConfig",
    "Strategy",
    "build_config",
    "default_config",
    "run_experiment",
    "RecoveryLedger",
    "recovery_accuracy",
    "redundancy_overhead",
    "summarize",
    "__version__",
]
