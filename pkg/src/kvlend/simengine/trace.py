"""Synthetic request traces: heavy-tailed context lengths, Poisson arrivals.

Context lengths come from a lognormal clipped to ``length_range``. The
lognormal's parameters are solved so that the *clipped* distribution has the
requested mean and standard deviation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize, stats

from ..errors import ConfigError

__all__ = [
    "Request",
    "TraceSpec",
    "LENGTH_PRESETS",
    "fit_clipped_lognormal",
    "clipped_lognormal_moments",
    "sample_lengths",
    "generate_trace",
    "write_trace",
    "read_trace",
    "format_trace",
]

TRACE_HEADER = "# req_id arrival_time_ms prompt_tokens output_tokens"


@dataclass
class Request:
    req_id: int
    arrival_time: float  # seconds
    prompt_tokens: int
    target_output_tokens: int
    state: str = "queued"  # queued | running | completed | rejected
    generated_tokens: int = 0
    home: int | None = None
    completed_at: float | None = None
    stalled: bool = False
    preemptions: int = 0

    @property
    def ctx_tokens(self) -> int:
        return self.prompt_tokens + self.generated_tokens

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.target_output_tokens


@dataclass(frozen=True)
class TraceSpec:
    length_range: tuple[int, int]
    target_mean: float
    target_sd: float
    request_rate: float = 1.0
    count: int = 1000
    seed: int = 0
    output_fraction: float = 0.25
    max_output_tokens: int | None = None

    def __post_init__(self) -> None:
        lo, hi = self.length_range
        object.__setattr__(self, "length_range", (int(lo), int(hi)))
        if not 1 <= lo <= self.target_mean <= hi:
            raise ConfigError(f"need 1 <= min <= mean <= max, got {lo}, {self.target_mean}, {hi}")
        if self.target_sd < 0:
            raise ConfigError("target_sd must be nonnegative")
        if self.count < 0 or self.request_rate <= 0:
            raise ConfigError("count must be >= 0 and request_rate > 0")
        if not 0 < self.output_fraction < 1:
            raise ConfigError("output_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TraceSpec":
        d = dict(d)
        d.pop("schema_version", None)
        preset = d.pop("preset", None)
        if preset is not None:
            if preset not in LENGTH_PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(LENGTH_PRESETS)}")
            base = LENGTH_PRESETS[preset]
            d = {"length_range": base[0], "target_mean": base[1], "target_sd": base[2], **d}
        try:
            d["length_range"] = tuple(d["length_range"])
            return cls(**d)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"bad trace spec: {exc}") from None


# Context-length statistics of the evaluation traces: (range, mean, sd).
LENGTH_PRESETS: dict[int, tuple[tuple[int, int], float, float]] = {
    0: ((1, 60_000), 1233, 7785.68),
    1: ((1, 60_000), 712, 5531.4),
    2: ((1, 60_000), 469, 3506.36),
    3: ((1, 200_000), 56362, 28787.78),
    4: ((1, 280_000), 75650, 39479.42),
    5: ((1, 600_000), 160239, 87906.67),
    6: ((1, 480_000), 128804, 70647.93),
    7: ((1, 1_200_000), 293945, 172169.14),
    8: ((1, 2_000_000), 498609, 261817.24),
}


def clipped_lognormal_moments(mu: float, sigma: float, lo: float, hi: float) -> tuple[float, float]:
    """Mean and SD of ``clip(LogNormal(mu, sigma), lo, hi)``."""
    llo, lhi = math.log(lo), math.log(hi)

    def partial(k: int, c: float) -> float:  # E[X^k ; X <= c], never above e^(k c)
        z = (c - mu - k * sigma * sigma) / sigma
        return math.exp(k * mu + 0.5 * k * k * sigma * sigma + float(stats.norm.logcdf(z)))

    p_lo = stats.norm.cdf((llo - mu) / sigma)
    p_hi = stats.norm.sf((lhi - mu) / sigma)
    m1 = lo * p_lo + hi * p_hi + partial(1, lhi) - partial(1, llo)
    m2 = lo * lo * p_lo + hi * hi * p_hi + partial(2, lhi) - partial(2, llo)
    return m1, math.sqrt(max(m2 - m1 * m1, 0.0))


@lru_cache(maxsize=64)
def fit_clipped_lognormal(lo: int, hi: int, mean: float, sd: float) -> tuple[float, float]:
    """``(mu, sigma)`` whose clipped lognormal hits ``mean`` and ``sd``."""
    if sd == 0:
        return math.log(mean), 0.0
    s2 = math.log1p((sd / mean) ** 2)
    x0 = [math.log(mean) - s2 / 2, 0.5 * math.log(s2)]

    def resid(x):
        m, s = clipped_lognormal_moments(x[0], math.exp(x[1]), lo, hi)
        return [m / mean - 1, s / sd - 1]

    sol = optimize.least_squares(resid, x0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
    err_mean, err_sd = resid(sol.x)
    if abs(err_mean) > 1e-6 or abs(err_sd) > 1e-6:
        worst = "mean" if abs(err_mean) >= abs(err_sd) else "sd"
        m, s = clipped_lognormal_moments(sol.x[0], math.exp(sol.x[1]), lo, hi)
        raise ConfigError(
            f"cannot match the {worst} within range [{lo}, {hi}]: "
            f"target mean={mean} sd={sd}, best fit mean={m:.2f} sd={s:.2f}"
        )
    return float(sol.x[0]), float(math.exp(sol.x[1]))


def sample_lengths(spec: TraceSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.length_range
    if spec.target_sd == 0:
        return np.full(spec.count, int(round(min(max(spec.target_mean, lo), hi))), dtype=np.int64)
    mu, sigma = fit_clipped_lognormal(lo, hi, float(spec.target_mean), float(spec.target_sd))
    raw = rng.lognormal(mu, sigma, spec.count)
    return np.clip(np.rint(raw), lo, hi).astype(np.int64)


def _split(length: int, spec: TraceSpec) -> tuple[int, int]:
    out = max(1, int(round(spec.output_fraction * length)))
    if spec.max_output_tokens is not None:
        out = min(out, spec.max_output_tokens)
    return max(1, length - out), out


def generate_trace(spec: TraceSpec) -> list[Request]:
    rng = np.random.default_rng(spec.seed)
    lengths = sample_lengths(spec, rng)
    arrivals = np.cumsum(rng.exponential(1.0 / spec.request_rate, spec.count))
    out = []
    for i, (length, t) in enumerate(zip(lengths, arrivals)):
        prompt, output = _split(int(length), spec)
        # millisecond resolution keeps the text file an exact round trip
        out.append(Request(i, round(float(t) * 1000.0, 3) / 1000.0, prompt, output))
    return out


def format_trace(requests: Iterable[Request]) -> str:
    lines = [TRACE_HEADER]
    for r in requests:
        lines.append(f"{r.req_id} {r.arrival_time * 1000.0:.3f} {r.prompt_tokens} {r.target_output_tokens}")
    return "\n".join(lines) + "\n"


def write_trace(requests: Iterable[Request], path: str | Path) -> None:
    Path(path).write_text(format_trace(requests))


def read_trace(path: str | Path) -> list[Request]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if len(parts) != 4:
                raise ValueError(f"expected 4 fields, got {len(parts)}")
            req_id, t_ms, prompt, output = int(parts[0]), float(parts[1]), int(parts[2]), int(parts[3])
            if prompt < 1 or output < 1 or t_ms < 0:
                raise ValueError("prompt/output must be >= 1 and arrival >= 0")
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        out.append(Request(req_id, t_ms / 1000.0, prompt, output))
    ids = [r.req_id for r in out]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: duplicate req_id")
    return out


def load_trace_spec(path: str | Path) -> TraceSpec:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    return TraceSpec.from_dict(data)


def trace_spec_to_dict(spec: TraceSpec) -> dict:
    d = asdict(spec)
    d["length_range"] = list(spec.length_range)
    return {"schema_version": 1, **d}
