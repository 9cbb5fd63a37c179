"""Shared domain types: model geometry, requests, engine state, deployment config."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

US_PER_MS = 1000


def ms_to_us(ms: float) -> int:
    """Convert simulated milliseconds to the integer microsecond clock."""
    return int(round(ms * US_PER_MS))


def us_to_ms(us: int) -> float:
    return us / US_PER_MS


class ConfigError(ValueError):
    """Raised when a deployment fails validation.

    ``violations`` holds the names of every violated invariant, e.g.
    ``["IndivisibleTPDegree", "ZeroMemory"]``.
    """

    def __init__(self, violations: list[str], details: list[str] | None = None):
        self.violations = list(violations)
        self.details = list(details or [])
        msg = "; ".join(self.details) if self.details else ", ".join(self.violations)
        super().__init__(msg)


@dataclass(frozen=True)
class ModelSpec:
    """Geometry of a served model.

    ``num_q_heads`` only matters for the toy verification path, where
    ``hidden_dim == num_q_heads * head_dim``.
    """

    name: str
    num_layers: int
    hidden_dim: int
    num_kv_heads: int
    head_dim: int
    elem_bytes: int
    weight_bytes: int
    max_model_len: int
    num_q_heads: int | None = None

    def __post_init__(self) -> None:
        for name in ("num_layers", "hidden_dim", "num_kv_heads", "head_dim",
                     "elem_bytes", "weight_bytes", "max_model_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelSpec.{name} must be > 0")
        if self.num_q_heads is not None and self.num_q_heads * self.head_dim != self.hidden_dim:
            raise ValueError("hidden_dim must equal num_q_heads * head_dim")

    @property
    def kv_width(self) -> int:
        """Per-token KV element count for the whole model (K and V, all layers)."""
        return 2 * self.num_layers * self.num_kv_heads * self.head_dim


def kv_bytes_per_token(spec: ModelSpec) -> int:
    """Total KV bytes per token summed over the whole model (group-wide)."""
    return spec.kv_width * spec.elem_bytes


# Presets. LLAMA_70B carries fp16 weights and is used for context-capacity
# math; LLAMA_70B_FP8 halves the weight footprint so a full replica fits on
# one 141 GB device, which the DP serving simulation needs.
LLAMA_70B = ModelSpec("llama-70b", num_layers=80, hidden_dim=8192, num_kv_heads=8,
                      head_dim=128, elem_bytes=2, weight_bytes=140_000_000_000,
                      max_model_len=131_072, num_q_heads=64)
LLAMA_70B_FP8 = ModelSpec("llama-70b-fp8", num_layers=80, hidden_dim=8192, num_kv_heads=8,
                          head_dim=128, elem_bytes=2, weight_bytes=70_000_000_000,
                          max_model_len=131_072, num_q_heads=64)
MOE_120B = ModelSpec("moe-120b", num_layers=36, hidden_dim=2880, num_kv_heads=8,
                     head_dim=64, elem_bytes=2, weight_bytes=65_000_000_000,
                     max_model_len=131_072)
LONGCTX_8B = ModelSpec("longctx-8b", num_layers=32, hidden_dim=4096, num_kv_heads=8,
                       head_dim=128, elem_bytes=2, weight_bytes=16_000_000_000,
                       max_model_len=4_194_304, num_q_heads=32)

PRESETS: dict[str, ModelSpec] = {
    m.name: m for m in (LLAMA_70B, LLAMA_70B_FP8, MOE_120B, LONGCTX_8B)
}


def get_preset(name: str) -> ModelSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None


class Priority(enum.Enum):
    NORMAL = "normal"
    HIGH = "high"


@dataclass(frozen=True)
class Mode:
    """Execution mode of a request: ``degree == 1`` is DP, otherwise TP(degree)."""

    degree: int = 1

    @property
    def is_tp(self) -> bool:
        return self.degree > 1

    def __str__(self) -> str:
        return "dp" if self.degree == 1 else f"tp{self.degree}"

    @classmethod
    def parse(cls, text: str) -> Mode | None:
        """Parse ``dp``/``tp4``; ``auto`` (or empty) means no hint."""
        text = text.strip().lower()
        if text in ("", "auto"):
            return None
        if text == "dp":
            return cls(1)
        if text.startswith("tp") and text[2:].isdigit():
            return cls(int(text[2:]))
        raise ValueError(f"bad mode hint {text!r}")


DP = Mode(1)


class RequestState(enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    PAUSED = "paused"
    SPECULATIVE_DP = "speculative_dp"
    FINISHED = "finished"


ALLOWED_TRANSITIONS: frozenset[tuple[RequestState, RequestState]] = frozenset({
    (RequestState.QUEUED, RequestState.RUNNING),
    (RequestState.RUNNING, RequestState.FINISHED),
    (RequestState.RUNNING, RequestState.PAUSED),
    (RequestState.PAUSED, RequestState.RUNNING),
    (RequestState.QUEUED, RequestState.SPECULATIVE_DP),
    (RequestState.SPECULATIVE_DP, RequestState.RUNNING),
})


class IllegalTransition(RuntimeError):
    pass


@dataclass(eq=False)
class Request:
    """A serving request plus its mutable runtime state.

    Times are integer microseconds. ``mode`` is the caller-supplied hint
    (None lets the scheduler policy decide).
    """

    id: int
    arrival_us: int
    prompt_tokens: int
    output_tokens: int
    priority: Priority = Priority.NORMAL
    mode: Mode | None = None
    state: RequestState = RequestState.QUEUED

    # runtime, owned by the scheduler
    assigned: Mode | None = None
    prefill_left: int = 0
    emitted: int = 0
    admitted_us: int | None = None
    finished_us: int | None = None
    target_group: tuple[int, ...] | None = None
    ingest_epoch: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise ValueError("prompt_tokens and output_tokens must be >= 1")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.output_tokens

    def transition(self, new: RequestState) -> None:
        if (self.state, new) not in ALLOWED_TRANSITIONS:
            raise IllegalTransition(f"request {self.id}: {self.state.value} -> {new.value}")
        self.state = new


@dataclass
class DeploymentConfig:
    num_engines: int = 8
    gpus_per_engine: int = 1
    supported_tp_degrees: tuple[int, ...] = (2, 4, 8)
    gpu_mem_bytes: int = 141_000_000_000
    mem_utilization: float = 0.9
    B_base: int = 16
    switch_latency_ms: float = 15.0
    reconfig_reserve_bytes: int = 12_000_000_000

    def __post_init__(self) -> None:
        self.supported_tp_degrees = tuple(sorted(set(int(p) for p in self.supported_tp_degrees)))

    @property
    def degrees(self) -> tuple[int, ...]:
        """Supported TP degrees with the implicit DP degree 1."""
        return tuple(sorted({1, *self.supported_tp_degrees}))


def validate_deployment(spec: ModelSpec, cfg: DeploymentConfig) -> DeploymentConfig:
    """Return ``cfg`` if every deployment invariant holds, else raise ConfigError
    listing all violations."""
    violations: list[str] = []
    details: list[str] = []

    def bad(name: str, detail: str) -> None:
        if name not in violations:
            violations.append(name)
        details.append(f"{name}: {detail}")

    if cfg.num_engines <= 0:
        bad("ZeroEngines", f"num_engines={cfg.num_engines}")
    if cfg.gpus_per_engine != 1:
        bad("UnsupportedGpusPerEngine", f"gpus_per_engine={cfg.gpus_per_engine} (must be 1)")
    if not cfg.supported_tp_degrees:
        bad("EmptyDegreeSet", "supported_tp_degrees is empty")
    for p in cfg.supported_tp_degrees:
        if p < 1:
            bad("IndivisibleTPDegree", f"degree {p} < 1")
            continue
        if cfg.num_engines > 0 and cfg.num_engines % p:
            bad("IndivisibleTPDegree", f"{p} does not divide num_engines={cfg.num_engines}")
        if spec.num_kv_heads % p:
            bad("IndivisibleTPDegree", f"{p} does not divide num_kv_heads={spec.num_kv_heads}")
    if cfg.gpu_mem_bytes <= 0:
        bad("ZeroMemory", f"gpu_mem_bytes={cfg.gpu_mem_bytes}")
    if not 0 < cfg.mem_utilization <= 1:
        bad("BadMemUtilization", f"mem_utilization={cfg.mem_utilization}")
    if cfg.B_base < 1:
        bad("BadBlockSize", f"B_base={cfg.B_base}")
    if cfg.switch_latency_ms < 0:
        bad("NegativeSwitchLatency", f"switch_latency_ms={cfg.switch_latency_ms}")
    if cfg.reconfig_reserve_bytes < 0:
        bad("NegativeReserve", f"reconfig_reserve_bytes={cfg.reconfig_reserve_bytes}")
    if violations:
        raise ConfigError(violations, details)
    return cfg


def load_config(path: str | Path) -> DeploymentConfig:
    """Read a flat JSON object whose keys are DeploymentConfig field names."""
    data = json.loads(Path(path).read_text())
    return config_from_dict(data)


def config_from_dict(data: dict[str, Any]) -> DeploymentConfig:
    if not isinstance(data, dict):
        raise ConfigError(["MalformedConfig"], ["config must be a flat key-value object"])
    known = {f.name for f in fields(DeploymentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(["UnknownConfigKey"], [f"UnknownConfigKey: {k}" for k in unknown])
    for k, v in data.items():
        if isinstance(v, (dict,)) or (isinstance(v, list) and k != "supported_tp_degrees"):
            raise ConfigError(["MalformedConfig"], [f"MalformedConfig: {k} is not a scalar"])
    return DeploymentConfig(**data)


def dump_config(cfg: DeploymentConfig) -> str:
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    d["supported_tp_degrees"] = list(cfg.supported_tp_degrees)
    return json.dumps(d, indent=2, sort_keys=True)


@dataclass
class EngineState:
    """Mode of one engine. ``group`` is None in DP mode."""

    engine_id: int
    group: tuple[int, ...] | None = None
    active_requests: set[int] = field(default_factory=set)
    busy_until: int = 0

    @property
    def is_tp(self) -> bool:
        return self.group is not None

    @property
    def rank_in_group(self) -> int | None:
        return None if self.group is None else self.group.index(self.engine_id)

    def set_tp(self, group: tuple[int, ...]) -> None:
        if self.engine_id not in group:
            raise ValueError(f"engine {self.engine_id} not in group {group}")
        self.group = tuple(group)

    def reset(self) -> None:
        self.group = None
