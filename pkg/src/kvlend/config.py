"""Cluster configuration and its JSON file format.

Files carry ``"schema_version": 1``. Parsing then serialising a config gives
back the same document.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError, ContractError
from .perfmodel import ModelShape, PerfCurve, PerfModel, constant_curve, saturating_curve
from .scheduler import SchedulerConfig

SCHEMA_VERSION = 1

POLICIES = ("infinite", "strawman", "static")


@dataclass(frozen=True)
class ControlPlaneConfig:
    heartbeat_period: float = 0.2  # seconds; ~10 decode steps under the default curves
    reservation_timeout: float | None = None  # None -> 2 heartbeat periods
    link_latency: float = 1e-6  # one way, RDMA-class
    link_bandwidth: float = 12.5e9  # bytes/s
    query_bytes: int = 8192  # query out + partial back, per request, per layer
    staleness_limit: float | None = None  # None -> 3 heartbeat periods
    failover_at: float | None = None

    @property
    def effective_reservation_timeout(self) -> float:
        if self.reservation_timeout is not None:
            return self.reservation_timeout
        return 2 * self.heartbeat_period

    @property
    def effective_staleness_limit(self) -> float:
        if self.staleness_limit is not None:
            return self.staleness_limit
        return 3 * self.heartbeat_period


@dataclass(frozen=True)
class MigrationConfig:
    cap_tokens: int = 16  # per-step volume that overlaps fully with decode
    tokens_per_step: int = 16
    overflow_penalty: float = 0.086  # step inflation per cap-worth of excess tokens
    charge_transfer: bool = True


@dataclass(frozen=True)
class SimConfig:
    prefill_time_per_token: float = 0.0
    max_batch: int = 256
    sample_period: float = 1.0
    attention_check_every: int = 0  # scheduler rounds between spot checks; 0 disables
    check_invariants: bool = True
    max_time: float = math.inf


@dataclass(frozen=True)
class ClusterConfig:
    capacity_blocks: tuple[int, ...] = (2048, 2048, 2048, 2048)
    shape: ModelShape = field(default_factory=ModelShape)
    f: PerfCurve = field(default_factory=lambda: saturating_curve(1.5e14, 32.0))
    g: PerfCurve = field(default_factory=lambda: constant_curve(1.5e12))
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    controlplane: ControlPlaneConfig = field(default_factory=ControlPlaneConfig)
    migration: MigrationConfig = field(default_factory=MigrationConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "capacity_blocks", tuple(int(c) for c in self.capacity_blocks))
        if not self.capacity_blocks:
            raise ConfigError("at least one instance is required")
        if any(c < 1 for c in self.capacity_blocks):
            raise ConfigError("every instance needs capacity of at least one block")
        if self.migration.cap_tokens < 1 or self.migration.tokens_per_step < 0:
            raise ConfigError("migration cap must be positive and tokens_per_step nonnegative")
        if self.controlplane.heartbeat_period <= 0:
            raise ConfigError("heartbeat_period must be positive")
        if self.sim.sample_period <= 0 or self.sim.max_batch < 1:
            raise ConfigError("sample_period and max_batch must be positive")

    @property
    def num_instances(self) -> int:
        return len(self.capacity_blocks)

    @property
    def model(self) -> PerfModel:
        return PerfModel(self.shape, self.f, self.g)

    def with_(self, **changes: Any) -> "ClusterConfig":
        return replace(self, **changes)

    # --- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "capacity_blocks": list(self.capacity_blocks),
            "shape": asdict(self.shape),
            "f": self.f.to_list(),
            "g": self.g.to_list(),
            "scheduler": asdict(self.scheduler),
            "controlplane": asdict(self.controlplane),
            "migration": asdict(self.migration),
            "sim": asdict(self.sim),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ClusterConfig":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        try:
            return cls(
                capacity_blocks=tuple(d["capacity_blocks"]),
                shape=_build(ModelShape, d.get("shape", {}), "shape"),
                f=PerfCurve(tuple(map(tuple, d["f"]))) if "f" in d else saturating_curve(1.5e14, 32.0),
                g=PerfCurve(tuple(map(tuple, d["g"]))) if "g" in d else constant_curve(1.5e12),
                scheduler=_build(SchedulerConfig, d.get("scheduler", {}), "scheduler"),
                controlplane=_build(ControlPlaneConfig, d.get("controlplane", {}), "controlplane"),
                migration=_build(MigrationConfig, d.get("migration", {}), "migration"),
                sim=_build(SimConfig, d.get("sim", {}), "sim"),
                seed=int(d.get("seed", 0)),
            )
        except KeyError as exc:
            raise ConfigError(f"missing required field {exc}") from None
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ClusterConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "ClusterConfig":
        try:
            return cls.loads(Path(path).read_text())
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def _json_default(o: Any) -> Any:
    if o == math.inf:
        return "inf"
    raise TypeError(f"cannot serialise {o!r}")


def _build(cls, data: Mapping[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    clean = {k: (math.inf if v == "inf" else v) for k, v in data.items()}
    try:
        return cls(**clean)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
