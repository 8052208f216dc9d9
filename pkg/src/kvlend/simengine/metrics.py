"""Simulation measurements and their JSON summary."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .trace import Request


@dataclass(frozen=True)
class StepRecord:
    instance: int
    step_no: int
    start: float
    duration: float
    compute: float  # before any migration inflation
    batch: int
    moved_tokens: int
    factor: float


@dataclass
class Metrics:
    num_instances: int
    sample_period: float
    policy: str = ""
    steps: list[StepRecord] = field(default_factory=list)
    # (time, instance, tokens) for every step that produced output
    token_events: list[tuple[float, int, int]] = field(default_factory=list)
    samples: list[tuple[float, tuple[float, ...], tuple[int, ...]]] = field(default_factory=list)
    preemptions: int = 0
    moved_blocks: int = 0
    directives: int = 0
    failovers: int = 0
    move_outcomes: Counter = field(default_factory=Counter)
    attention_checks: int = 0
    attention_max_err: float = 0.0
    makespan: float = 0.0
    latencies: dict[int, float] = field(default_factory=dict)
    completed: int = 0
    rejected: int = 0
    stalled: int = 0
    generated_tokens: int = 0
    completed_tokens: int = 0
    final_utilisation: tuple[float, ...] = ()

    def record_step(self, rec: StepRecord) -> None:
        self.steps.append(rec)

    def record_tokens(self, inst: int, t: float, n: int) -> None:
        if n:
            self.token_events.append((t, inst, n))

    def sample(self, t: float, util: Iterable[float], batches: Iterable[int]) -> None:
        self.samples.append((t, tuple(util), tuple(batches)))

    def finalize(self, end: float, requests: Iterable[Request], util: Iterable[float]) -> None:
        self.makespan = end
        self.final_utilisation = tuple(util)
        for r in requests:
            self.generated_tokens += r.generated_tokens
            if r.state == "completed":
                self.completed += 1
                self.completed_tokens += r.generated_tokens
                self.latencies[r.req_id] = r.completed_at - r.arrival_time
            elif r.state == "rejected":
                self.rejected += 1
            if r.stalled and r.state != "completed":
                self.stalled += 1

    # derived views ---------------------------------------------------------

    def windowed_tokens(self, window: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Integer token counts per window: ``(cluster[w], per_instance[inst, w])``."""
        window = window or self.sample_period
        nwin = max(1, int(np.ceil(self.makespan / window))) if self.makespan > 0 else 1
        per = np.zeros((self.num_instances, nwin), dtype=np.int64)
        for t, inst, n in self.token_events:
            w = min(int(t // window), nwin - 1)
            per[inst, w] += n
        return per.sum(axis=0), per

    @property
    def throughput(self) -> float:
        """Output tokens of completed requests per second of makespan."""
        return self.completed_tokens / self.makespan if self.makespan > 0 else 0.0

    def summary(self) -> dict:
        lat = np.array(sorted(self.latencies.values())) if self.latencies else np.zeros(0)

        def pct(p: float) -> float | None:
            return float(np.percentile(lat, p)) if lat.size else None

        return {
            "policy": self.policy,
            "makespan": self.makespan,
            "completed": self.completed,
            "rejected": self.rejected,
            "stalled": self.stalled,
            "generated_tokens": self.generated_tokens,
            "completed_tokens": self.completed_tokens,
            "throughput": self.throughput,
            "latency_mean": float(lat.mean()) if lat.size else None,
            "latency_p50": pct(50),
            "latency_p99": pct(99),
            "preemptions": self.preemptions,
            "moved_blocks": self.moved_blocks,
            "directives": self.directives,
            "failovers": self.failovers,
            "move_outcomes": dict(sorted(self.move_outcomes.items())),
            "steps": len(self.steps),
            "attention_checks": self.attention_checks,
            "attention_max_err": self.attention_max_err,
            "final_utilisation": list(self.final_utilisation),
        }

    def to_dict(self) -> dict:
        cluster, per = self.windowed_tokens()
        return {
            "schema_version": 1,
            "summary": self.summary(),
            "window": self.sample_period,
            "tokens_per_window": cluster.tolist(),
            "tokens_per_window_by_instance": per.tolist(),
            "samples": [
                {"time": t, "mem_util": list(u), "batch": list(b)} for t, u, b in self.samples
            ],
            "latencies": {str(k): v for k, v in sorted(self.latencies.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def step_rows(self) -> list[dict]:
        return [asdict(s) for s in self.steps]
