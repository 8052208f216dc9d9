"""Randomised check that partitioned attention equals the unpartitioned result.

Each trial draws a sequence length, head size, head layout (MHA, GQA or MQA)
and a random partition of the sequence. The per-segment partials are
aggregated and compared against a naive softmax evaluated in extended
precision.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .distattention import AttentionConfig, multihead_aggregate, multihead_partials

LAYOUTS = {"mha": (4, 4), "gqa": (4, 2), "mqa": (4, 1)}
HEAD_DIMS = (32, 64, 128)


@dataclass
class VerifyReport:
    trials: int = 0
    failures: int = 0
    max_rel_err: float = 0.0
    tolerance: float = 1e-6
    worst: dict = field(default_factory=dict)
    layouts: Counter = field(default_factory=Counter)
    head_dims: Counter = field(default_factory=Counter)
    max_partitions_seen: int = 0

    @property
    def ok(self) -> bool:
        return self.failures == 0

    def lines(self) -> list[str]:
        return [
            f"trials: {self.trials}",
            f"failures: {self.failures}",
            f"max_rel_err: {self.max_rel_err:.3e}",
            f"tolerance: {self.tolerance:.1e}",
            "result: " + ("PASS" if self.ok else "FAIL"),
        ]


def extended_naive(q: np.ndarray, keys: np.ndarray, values: np.ndarray,
                   cfg: AttentionConfig) -> np.ndarray:
    """Naive multi-head attention in ``np.longdouble``."""
    ld = np.longdouble
    # query heads grouped by the kv head they read: (num_kv, group, d)
    qg = q.astype(ld).reshape(cfg.num_kv_heads, cfg.group_size, cfg.head_dim)
    # (kv, s, d) layout keeps the einsum loops contiguous; matmul has no
    # fast path for longdouble
    k = np.ascontiguousarray(keys.transpose(1, 0, 2), dtype=ld)
    v = np.ascontiguousarray(values.transpose(1, 0, 2), dtype=ld)
    s = ld(cfg.scale) * np.einsum("kgd,ksd->kgs", qg, k)
    w = np.exp(s - s.max(axis=2, keepdims=True))
    out = np.einsum("kgs,ksd->kgd", w, v) / w.sum(axis=2, keepdims=True)
    return out.reshape(cfg.num_q_heads, cfg.head_dim)


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Largest absolute deviation relative to the largest reference magnitude."""
    want = np.asarray(want, dtype=np.longdouble)
    denom = max(float(np.max(np.abs(want))), np.finfo(np.float64).tiny)
    return float(np.max(np.abs(np.asarray(got, dtype=np.longdouble) - want))) / denom


def random_cuts(rng: np.random.Generator, seq: int, max_partitions: int) -> list[int]:
    parts = int(rng.integers(1, min(max_partitions, seq) + 1))
    if parts == 1:
        return []
    return sorted(int(c) for c in rng.choice(np.arange(1, seq), parts - 1, replace=False))


def partitioned(q, keys, values, cfg, cuts) -> np.ndarray:
    bounds = [0, *cuts, keys.shape[0]]
    per_segment = [multihead_partials(q, keys[a:b], values[a:b], cfg)
                   for a, b in zip(bounds, bounds[1:])]
    return multihead_aggregate(per_segment)


def verify_attention(trials: int = 1000, max_seq: int = 2048, max_partitions: int = 64,
                     seed: int = 0, tolerance: float = 1e-6,
                     logit_scale: float = 3.0) -> VerifyReport:
    """Run ``trials`` randomised partition-invariance checks.

    ``logit_scale`` widens the spread of query values so softmax weights span
    many orders of magnitude, which is where shift handling matters.
    """
    rng = np.random.default_rng(seed)
    report = VerifyReport(tolerance=tolerance)
    layouts = sorted(LAYOUTS)
    for t in range(trials):
        seq = int(rng.integers(1, max_seq + 1))
        head_dim = int(rng.choice(HEAD_DIMS))
        layout = layouts[int(rng.integers(len(layouts)))]
        hq, hkv = LAYOUTS[layout]
        cfg = AttentionConfig(head_dim, hq, hkv)
        q = rng.normal(scale=logit_scale, size=(hq, head_dim))
        # uniform draws are several times cheaper than normals at this size
        keys = rng.random((seq, hkv, head_dim)) * 2.0 - 1.0
        values = rng.random((seq, hkv, head_dim)) * 2.0 - 1.0
        cuts = random_cuts(rng, seq, max_partitions)
        err = rel_err(partitioned(q, keys, values, cfg, cuts), extended_naive(q, keys, values, cfg))
        report.trials += 1
        report.layouts[layout] += 1
        report.head_dims[head_dim] += 1
        report.max_partitions_seen = max(report.max_partitions_seen, len(cuts) + 1)
        if err > report.max_rel_err:
            report.max_rel_err = err
            report.worst = {"trial": t, "seq": seq, "head_dim": head_dim, "layout": layout,
                            "partitions": len(cuts) + 1}
        if not err < tolerance:
            report.failures += 1
    return report
