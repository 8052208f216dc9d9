"""Blockwise single-query attention.

A KV sequence can be split into contiguous segments; each segment is reduced to
an :class:`AttentionPartial` ``(m, e, ma)`` where ``m`` is the segment's max
scaled logit, ``e`` the max-shifted exponential sum and ``ma`` the unnormalised
weighted value sum. Partials merge losslessly, so the aggregate of any
partition equals ordinary softmax attention over the whole sequence.

Only the decode case (one query token) is handled. Multi-head layouts are
treated head by head: query head ``h`` reads KV head ``gqa_kv_head(h, cfg)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, RejectedInputError

__all__ = [
    "AttentionConfig",
    "KVSegment",
    "AttentionPartial",
    "naive_attention",
    "compute_micro_attention",
    "combine_partials",
    "aggregate_partials",
    "empty_partial",
    "gqa_kv_head",
    "split_segment",
    "multihead_naive",
    "multihead_partials",
    "multihead_aggregate",
]


@dataclass(frozen=True)
class AttentionConfig:
    head_dim: int
    num_q_heads: int = 1
    num_kv_heads: int = 1
    scale: float | None = None  # None -> 1/sqrt(head_dim)

    def __post_init__(self) -> None:
        if self.head_dim < 1 or self.num_q_heads < 1 or self.num_kv_heads < 1:
            raise ContractError("head_dim, num_q_heads and num_kv_heads must be positive")
        if self.num_q_heads % self.num_kv_heads:
            raise ContractError(
                f"num_kv_heads={self.num_kv_heads} does not divide num_q_heads={self.num_q_heads}"
            )
        if self.scale is None:
            object.__setattr__(self, "scale", 1.0 / math.sqrt(self.head_dim))
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ContractError(f"scale must be positive and finite, got {self.scale}")

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads


@dataclass(frozen=True)
class KVSegment:
    """Keys and values of one contiguous run of tokens for a single KV head."""

    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        keys = np.asarray(self.keys, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if keys.ndim != 2 or values.ndim != 2:
            raise ContractError("keys and values must be 2-D (seq_p, head_dim)")
        if keys.shape != values.shape:
            raise ContractError(f"keys {keys.shape} and values {values.shape} differ in shape")
        if keys.shape[0] < 1:
            raise ContractError("a segment holds at least one token")
        if not (np.isfinite(keys).all() and np.isfinite(values).all()):
            raise RejectedInputError("segment contains non-finite entries")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)

    @property
    def seq_p(self) -> int:
        return self.keys.shape[0]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[1]


# Wire layout of a partial: m, e, then head_dim entries of ma, all float64.
# seq_p is bookkeeping known to the requesting side and is not shipped.
_WIRE_DTYPE = "<f8"


@dataclass(frozen=True)
class AttentionPartial:
    m: float
    e: float
    ma: np.ndarray = field(repr=False)
    seq_p: int = 0

    @property
    def is_empty(self) -> bool:
        return self.seq_p == 0

    def to_bytes(self) -> bytes:
        """Serialise the payload a remote instance returns: ``m``, ``e`` and ``ma``."""
        head = struct.pack("<dd", self.m, self.e)
        return head + np.ascontiguousarray(self.ma, dtype=_WIRE_DTYPE).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, seq_p: int) -> "AttentionPartial":
        m, e = struct.unpack_from("<dd", data)
        ma = np.frombuffer(data, dtype=_WIRE_DTYPE, offset=16).astype(np.float64)
        return cls(m=m, e=e, ma=ma, seq_p=seq_p)


def empty_partial(head_dim: int) -> AttentionPartial:
    """Identity element of :func:`combine_partials`."""
    return AttentionPartial(m=-math.inf, e=0.0, ma=np.zeros(head_dim), seq_p=0)


def _check_query(q: np.ndarray, head_dim: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (head_dim,):
        raise ContractError(f"query shape {q.shape} does not match head_dim={head_dim}")
    if not np.isfinite(q).all():
        raise RejectedInputError("query contains non-finite entries")
    return q


def _logits(q: np.ndarray, segment: KVSegment, cfg: AttentionConfig) -> np.ndarray:
    if segment.head_dim != cfg.head_dim:
        raise ContractError(f"segment head_dim={segment.head_dim} but cfg.head_dim={cfg.head_dim}")
    q = _check_query(q, cfg.head_dim)
    return cfg.scale * (segment.keys @ q)


def naive_attention(q: np.ndarray, segment: KVSegment, cfg: AttentionConfig) -> np.ndarray:
    """Softmax attention of one query over a whole segment (global max shift)."""
    s = _logits(q, segment, cfg)
    w = np.exp(s - s.max())
    return (w @ segment.values) / w.sum()


def compute_micro_attention(
    q: np.ndarray, segment: KVSegment, cfg: AttentionConfig
) -> AttentionPartial:
    s = _logits(q, segment, cfg)
    m = float(s.max())
    w = np.exp(s - m)
    return AttentionPartial(m=m, e=float(w.sum()), ma=w @ segment.values, seq_p=segment.seq_p)


def combine_partials(a: AttentionPartial, b: AttentionPartial) -> AttentionPartial:
    """Merge two partials as if their segments had been concatenated."""
    if a.is_empty:
        return b
    if b.is_empty:
        return a
    if a.ma.shape != b.ma.shape:
        raise ContractError("partials come from different head dims")
    m = max(a.m, b.m)
    ca = math.exp(a.m - m)
    cb = math.exp(b.m - m)
    return AttentionPartial(
        m=m,
        e=a.e * ca + b.e * cb,
        ma=a.ma * ca + b.ma * cb,
        seq_p=a.seq_p + b.seq_p,
    )


def aggregate_partials(partials: Sequence[AttentionPartial]) -> np.ndarray:
    """Final attention output from the partials of a partitioned sequence.

    All rescaling happens against the global max in one pass, so the result
    does not depend on the order of ``partials``.
    """
    live = [p for p in partials if not p.is_empty]
    if not live:
        raise ContractError("aggregate_partials needs at least one non-empty partial")
    m_g = max(p.m for p in live)
    scales = np.array([math.exp(p.m - m_g) for p in live])
    es = np.array([p.e for p in live])
    mas = np.stack([p.ma for p in live])
    # canonical term order makes the float sums permutation independent
    order = np.lexsort(np.vstack([mas.T[::-1], es, scales]))
    e_g = float(np.sum((es * scales)[order]))
    return np.sum((mas * scales[:, None])[order], axis=0) / e_g


def gqa_kv_head(q_head: int, cfg: AttentionConfig) -> int:
    if not 0 <= q_head < cfg.num_q_heads:
        raise ContractError(f"query head {q_head} out of range [0, {cfg.num_q_heads})")
    return q_head // cfg.group_size


def split_segment(segment: KVSegment, cuts: Iterable[int]) -> list[KVSegment]:
    """Split at the given interior token offsets (sorted, unique, in 1..seq_p-1)."""
    bounds = [0, *cuts, segment.seq_p]
    out = []
    for lo, hi in zip(bounds, bounds[1:]):
        if hi <= lo:
            raise ContractError(f"invalid cut sequence {bounds}")
        out.append(KVSegment(segment.keys[lo:hi], segment.values[lo:hi]))
    return out


# --- multi-head helpers -----------------------------------------------------
# keys/values: (seq, num_kv_heads, head_dim); queries: (num_q_heads, head_dim)


def _check_multihead(q: np.ndarray, keys: np.ndarray, values: np.ndarray, cfg: AttentionConfig):
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if q.shape != (cfg.num_q_heads, cfg.head_dim):
        raise ContractError(f"queries {q.shape} do not match cfg")
    want = (keys.shape[0], cfg.num_kv_heads, cfg.head_dim)
    if keys.shape != want or values.shape != want or keys.shape[0] < 1:
        raise ContractError(f"keys {keys.shape} / values {values.shape} do not match {want}")
    if not (np.isfinite(q).all() and np.isfinite(keys).all() and np.isfinite(values).all()):
        raise RejectedInputError("non-finite attention input")
    return q, keys, values


def _grouped_weights(q, k, cfg: AttentionConfig):
    """Logit-shifted softmax weights, grouped by kv head: shapes (kv, group, s)."""
    qg = q.reshape(cfg.num_kv_heads, cfg.group_size, cfg.head_dim)
    s = cfg.scale * (qg @ k.transpose(1, 2, 0))
    m = s.max(axis=2, keepdims=True)
    return np.exp(s - m), m


def multihead_partials(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray, cfg: AttentionConfig
) -> list[AttentionPartial]:
    """One partial per query head for a single segment, computed in one batch."""
    q, k, v = _check_multihead(q, keys, values, cfg)
    w, m = _grouped_weights(q, k, cfg)
    e = w.sum(axis=2).reshape(-1)
    ma = (w @ v.transpose(1, 0, 2)).reshape(cfg.num_q_heads, cfg.head_dim)
    m = m.reshape(-1)
    seq_p = keys.shape[0]
    return [
        AttentionPartial(m=float(m[h]), e=float(e[h]), ma=ma[h], seq_p=seq_p)
        for h in range(cfg.num_q_heads)
    ]


def multihead_aggregate(per_segment: Sequence[Sequence[AttentionPartial]]) -> np.ndarray:
    """Aggregate ``per_segment[j][h]`` over segments j for every head h."""
    num_heads = len(per_segment[0])
    return np.stack([aggregate_partials([seg[h] for seg in per_segment]) for h in range(num_heads)])


def multihead_naive(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray, cfg: AttentionConfig
) -> np.ndarray:
    q, k, v = _check_multihead(q, keys, values, cfg)
    w, _ = _grouped_weights(q, k, cfg)
    out = (w @ v.transpose(1, 0, 2)) / w.sum(axis=2, keepdims=True)
    return out.reshape(cfg.num_q_heads, cfg.head_dim)
