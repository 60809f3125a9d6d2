"""Sharded training-state layouts, minimal-movement reconfiguration plans and their execution."""
from .errors import ReshardError
from .executor import ExecutionReport, SimCluster, apply_plan, recover
from .planner import ReconfigPlan, generate_plan, plan_cost
from .ptc import (
    PTC,
    ClusterSpec,
    DataTensor,
    DeviceId,
    JobConfig,
    ModelTensor,
    TensorId,
    build_strategy,
    hosted_subtensors,
    parse_parallel_config,
    serialize_parallel_config,
    validate,
)
from .store import TensorStore
from .tensor import Dtype, Range, SplitGrid, Tensor, grid_cells, grid_refine, merge, slice_tensor

__all__ = [
    "ReshardError", "ExecutionReport", "SimCluster", "apply_plan", "recover", "ReconfigPlan", "generate_plan",
    "plan_cost", "PTC", "ClusterSpec", "DataTensor", "DeviceId", "JobConfig", "ModelTensor", "TensorId",
    "build_strategy", "hosted_subtensors", "parse_parallel_config", "serialize_parallel_config", "validate",
    "TensorStore", "Dtype", "Range", "SplitGrid", "Tensor", "grid_cells", "grid_refine", "merge", "slice_tensor",
]

__version__ = "0.1.0"
