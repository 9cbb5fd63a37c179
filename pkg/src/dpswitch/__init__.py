"""Online DP/TP parallelism switching: mechanisms and a discrete-event simulator."""

from .core import (DP, LLAMA_70B, LLAMA_70B_FP8, LONGCTX_8B, MOE_120B, ConfigError,
                   DeploymentConfig, Mode, ModelSpec, Priority, Request, RequestState,
                   get_preset, validate_deployment)
from .costmodel import CostModel, Decode, Prefill, step_time
from .kvcache import KVCacheAdaptor, RemapPolicy, adapt_block_size, max_context
from .metrics import MetricsSummary, summarize
from .scheduler import (LoadAdaptive, ModeFromRequest, NoFeasibleDegree, Scheduler, StaticMode,
                        Strategy, assign_mode)
from .simulator import RunConfig, SimConfig, compare_configs, run_simulation
from .workload import WorkloadSpec, generate_trace

__all__ = [
    "DP", "LLAMA_70B", "LLAMA_70B_FP8", "LONGCTX_8B", "MOE_120B", "ConfigError",
    "DeploymentConfig", "Mode", "ModelSpec", "Priority", "Request", "RequestState",
    "get_preset", "validate_deployment", "CostModel", "Decode", "Prefill", "step_time",
    "KVCacheAdaptor", "RemapPolicy", "adapt_block_size", "max_context", "MetricsSummary",
    "summarize", "LoadAdaptive", "ModeFromRequest", "NoFeasibleDegree", "Scheduler",
    "StaticMode", "Strategy", "assign_mode", "RunConfig", "SimConfig", "compare_configs",
    "run_simulation", "WorkloadSpec", "generate_trace",
]
