"""Edge-server inference pipeline scheduling and simulation."""
from .domain import (
    Cluster,
    DeviceSpec,
    GpuSpec,
    InstanceConfig,
    ModelProfile,
    PipelinePlan,
    PipelineSpec,
    validate_plan,
)
from .policies import POLICIES, get_policy
from .scenario import Scenario, load_scenario
from .simengine import SimReport, run

__all__ = [
    "Cluster",
    "DeviceSpec",
    "GpuSpec",
    "InstanceConfig",
    "ModelProfile",
    "PipelinePlan",
    "PipelineSpec",
    "POLICIES",
    "Scenario",
    "SimReport",
    "get_policy",
    "load_scenario",
    "run",
    "validate_plan",
]

__version__ = "0.1.0"
