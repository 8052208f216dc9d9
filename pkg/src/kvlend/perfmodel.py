"""Analytical decode-throughput model for one instance and for the cluster.

A transformer layer costs ``W(beta)/f(beta)`` for the batched non-attention
GEMMs plus ``sum_r S_r * a / g`` for attention, where ``a`` is the attention
work per context token. Lending KV blocks moves attention work from a debtor
to a creditor; throughput is ``beta / (n_layers * layer_time)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "PerfCurve",
    "ModelShape",
    "InstanceLoad",
    "Role",
    "PerfModel",
    "saturating_curve",
    "constant_curve",
    "default_perf_model",
    "non_attention_time",
    "attention_time",
    "layer_time",
    "debtor_layer_time",
    "creditor_layer_time",
    "instance_tps",
    "cluster_tps",
    "search_space_size",
    "search_space_direct",
    "exact_placement_count",
    "kv_memory_bytes",
]


class Role(str, Enum):
    NONE = "none"
    DEBTOR = "debtor"
    CREDITOR = "creditor"


@dataclass(frozen=True)
class PerfCurve:
    """Sampled effective rate (work units / s) versus batch size or context length.

    Piecewise-linear between samples, clamped outside them.
    """

    samples: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        samples = tuple((float(x), float(y)) for x, y in self.samples)
        if len(samples) < 2:
            raise ContractError("a PerfCurve needs at least 2 samples")
        xs = [x for x, _ in samples]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ContractError("PerfCurve sample points must be strictly increasing")
        if xs[0] <= 0:
            raise ContractError("PerfCurve sample points must be positive")
        if any(not (math.isfinite(y) and y > 0) for _, y in samples):
            raise ContractError("PerfCurve rates must be positive and finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "_xs", np.array(xs))
        object.__setattr__(self, "_ys", np.array([y for _, y in samples]))

    def __call__(self, x: float) -> float:
        return float(np.interp(x, self._xs, self._ys))

    @property
    def is_nondecreasing(self) -> bool:
        return bool(np.all(np.diff(self._ys) >= 0))

    def scaled(self, factor: float) -> "PerfCurve":
        return PerfCurve(tuple((x, y * factor) for x, y in self.samples))

    def to_list(self) -> list[list[float]]:
        return [[x, y] for x, y in self.samples]


def saturating_curve(r_max: float, beta_half: float, max_batch: int = 4096) -> PerfCurve:
    """``rate = r_max * b / (b + beta_half)`` sampled at 1, 2, 4, ... up to ``max_batch``."""
    points = []
    b = 1
    while b < max_batch:
        points.append(b)
        b *= 2
    points.append(max_batch)
    return PerfCurve(tuple((b, r_max * b / (b + beta_half)) for b in points))


def constant_curve(rate: float, upper: float = 1e9) -> PerfCurve:
    return PerfCurve(((1.0, rate), (upper, rate)))


@dataclass(frozen=True)
class ModelShape:
    n_layers: int = 32
    workload_per_token: float = 4.0e8  # non-attention work per batched token per layer
    attn_work_per_ctx_token: float = 1.6384e4  # attention work per context token per layer
    kv_bytes_per_token: int = 524288
    block_size_tokens: int = 16

    def __post_init__(self) -> None:
        for name in ("n_layers", "workload_per_token", "attn_work_per_ctx_token",
                     "kv_bytes_per_token", "block_size_tokens"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ContractError(f"ModelShape.{name} must be positive, got {v}")

    def blocks_for(self, tokens: int) -> int:
        return -(-int(tokens) // self.block_size_tokens)


@dataclass(frozen=True)
class InstanceLoad:
    batch: int
    ctx_lengths: tuple[int, ...]
    offloaded_tokens: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "ctx_lengths", tuple(self.ctx_lengths))
        if self.batch < 0 or len(self.ctx_lengths) != self.batch:
            raise ContractError(
                f"batch={self.batch} but {len(self.ctx_lengths)} context lengths given"
            )
        if any(s < 0 for s in self.ctx_lengths) or self.offloaded_tokens < 0:
            raise ContractError("context lengths and offloaded tokens are nonnegative")

    @property
    def total_ctx(self) -> int:
        return sum(self.ctx_lengths)


def non_attention_time(batch: int, shape: ModelShape, f: PerfCurve) -> float:
    return shape.workload_per_token * batch / f(batch)


def attention_time(tokens: float, total_ctx: float, shape: ModelShape, g: PerfCurve) -> float:
    """Attention time of ``tokens`` context tokens; ``g`` is read at ``total_ctx``."""
    if tokens == 0:
        return 0.0
    return tokens * shape.attn_work_per_ctx_token / g(max(total_ctx, 1))


def layer_time(load: InstanceLoad, shape: ModelShape, f: PerfCurve, g: PerfCurve) -> float:
    if load.batch < 1:
        raise ContractError("layer_time is undefined for an empty batch")
    return non_attention_time(load.batch, shape, f) + attention_time(
        load.total_ctx, load.total_ctx, shape, g
    )


def debtor_layer_time(load: InstanceLoad, shape: ModelShape, f: PerfCurve, g: PerfCurve) -> float:
    if load.offloaded_tokens > load.total_ctx:
        raise ContractError(
            f"debtor offloads {load.offloaded_tokens} tokens but holds only {load.total_ctx}"
        )
    base = layer_time(load, shape, f, g)
    return base - attention_time(load.offloaded_tokens, load.total_ctx, shape, g)


def creditor_layer_time(load: InstanceLoad, shape: ModelShape, f: PerfCurve, g: PerfCurve) -> float:
    base = layer_time(load, shape, f, g)
    return base + attention_time(load.offloaded_tokens, load.total_ctx, shape, g)


def _role_layer_time(load, shape, f, g, role: Role) -> float:
    role = Role(role)
    if role is Role.DEBTOR:
        return debtor_layer_time(load, shape, f, g)
    if role is Role.CREDITOR:
        return creditor_layer_time(load, shape, f, g)
    if load.offloaded_tokens:
        raise ContractError("an instance with offloaded tokens must be a debtor or creditor")
    return layer_time(load, shape, f, g)


def instance_tps(load: InstanceLoad, shape: ModelShape, f: PerfCurve, g: PerfCurve,
                 role: Role | str = Role.NONE) -> float:
    return load.batch / (shape.n_layers * _role_layer_time(load, shape, f, g, role))


def cluster_tps(loads: Iterable[tuple[InstanceLoad, Role | str]], shape: ModelShape,
                f: PerfCurve, g: PerfCurve) -> float:
    """Sum of instance throughputs; idle instances (batch 0) contribute nothing."""
    return sum(
        instance_tps(load, shape, f, g, role) for load, role in loads if load.batch > 0
    )


@dataclass(frozen=True)
class PerfModel:
    """Bundles the shape and the two measured curves."""

    shape: ModelShape
    f: PerfCurve
    g: PerfCurve

    def layer_time(self, load: InstanceLoad, role: Role | str = Role.NONE) -> float:
        return _role_layer_time(load, self.shape, self.f, self.g, role)

    def instance_tps(self, load: InstanceLoad, role: Role | str = Role.NONE) -> float:
        return instance_tps(load, self.shape, self.f, self.g, role)

    def cluster_tps(self, loads: Iterable[tuple[InstanceLoad, Role | str]]) -> float:
        return cluster_tps(loads, self.shape, self.f, self.g)

    def saturation_batch(self, fraction: float = 0.5) -> int:
        """Smallest batch at which ``f`` reaches ``fraction`` of its maximum sampled rate."""
        target = fraction * max(y for _, y in self.f.samples)
        lo, hi = 1, int(self.f.samples[-1][0])
        while lo < hi:
            mid = (lo + hi) // 2
            if self.f(mid) >= target:
                hi = mid
            else:
                lo = mid + 1
        return lo


def default_perf_model(shape: ModelShape | None = None) -> PerfModel:
    """Synthetic hardware surrogate: saturating GEMM rate, constant attention rate."""
    return PerfModel(
        shape=shape or ModelShape(),
        f=saturating_curve(r_max=1.5e14, beta_half=32.0),
        g=constant_curve(1.5e12),
    )


# --- placement search space -------------------------------------------------


def search_space_size(n_debtors: int, creditor_blocks: Sequence[int]) -> tuple[float, float]:
    """``(N+1)^sum(Y) / prod(Y_i!)`` as ``(value, natural log)``.

    ``value`` is ``inf`` when it does not fit a float. Small cases are
    evaluated exactly so that e.g. ``(1, [1])`` gives exactly 2.0.
    """
    if n_debtors < 0 or any(y < 0 for y in creditor_blocks):
        raise ContractError("counts must be nonnegative")
    log_value = sum(creditor_blocks) * math.log(n_debtors + 1) - sum(
        math.lgamma(y + 1) for y in creditor_blocks
    )
    if log_value > 709.0:
        return math.inf, log_value
    if sum(creditor_blocks) <= 4096:
        return float(search_space_direct(n_debtors, creditor_blocks)), log_value
    return math.exp(log_value), log_value


def search_space_direct(n_debtors: int, creditor_blocks: Sequence[int]) -> Fraction:
    """Same formula in exact rational arithmetic."""
    denom = math.prod(math.factorial(y) for y in creditor_blocks)
    return Fraction((n_debtors + 1) ** sum(creditor_blocks), denom)


def exact_placement_count(n_debtors: int, creditor_blocks: Sequence[int]) -> int:
    """Distinct plans when a creditor's blocks are interchangeable.

    Each creditor splits its ``Y_i`` identical blocks over ``N + 1`` options,
    which is a multiset choice: ``C(Y_i + N, N)`` ways.
    """
    return math.prod(math.comb(y + n_debtors, n_debtors) for y in creditor_blocks)


def kv_memory_bytes(tokens: int, shape: ModelShape) -> tuple[int, int]:
    """``(bytes, blocks)`` needed to hold ``tokens`` tokens of KV cache."""
    if tokens < 0:
        raise ContractError("token count must be nonnegative")
    return tokens * shape.kv_bytes_per_token, shape.blocks_for(tokens)
