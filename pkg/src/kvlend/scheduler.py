"""Greedy cluster-level KV placement planner.

Instances with small batches become debtors and lend out KV blocks of their
longest request; instances with low memory utilisation become creditors and
host them. For each debtor/creditor pair the planner sweeps every feasible
block count through the performance model and keeps the best one.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ConfigError, ContractError
from .perfmodel import InstanceLoad, PerfModel, attention_time, layer_time, Role

__all__ = [
    "RequestSnapshot",
    "InstanceSnapshot",
    "SchedulerConfig",
    "MoveDirective",
    "Plan",
    "classify_roles",
    "movable_blocks",
    "derive_feasible_batch",
    "estimate_pair_gain",
    "pair_objective",
    "plan_moves",
    "make_plan",
    "modeled_cluster_tps",
    "plan_reclaims",
]


@dataclass(frozen=True)
class RequestSnapshot:
    request_id: int
    local_blocks: int
    remote_blocks: int
    total_ctx_tokens: int

    @property
    def total_blocks(self) -> int:
        return self.local_blocks + self.remote_blocks


@dataclass(frozen=True)
class InstanceSnapshot:
    instance_id: int
    batch: int
    mem_capacity_blocks: int
    mem_used_blocks: int
    requests: tuple[RequestSnapshot, ...] = ()
    role_lock: Role = Role.NONE
    queue_len: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "requests", tuple(self.requests))
        object.__setattr__(self, "role_lock", Role(self.role_lock))

    @property
    def mem_util(self) -> float:
        return self.mem_used_blocks / self.mem_capacity_blocks

    @property
    def free_blocks(self) -> int:
        return self.mem_capacity_blocks - self.mem_used_blocks

    @property
    def local_blocks(self) -> int:
        return sum(r.local_blocks for r in self.requests)

    @property
    def hosted_blocks(self) -> int:
        """Blocks held here on behalf of requests homed elsewhere."""
        return self.mem_used_blocks - self.local_blocks

    def validate(self) -> None:
        def fail(what: str) -> None:
            raise ConfigError(f"instance {self.instance_id}: {what}")

        if self.mem_capacity_blocks < 1:
            fail("mem_capacity_blocks must be positive")
        if self.batch < 0 or self.queue_len < 0:
            fail("batch and queue_len must be nonnegative")
        if not 0 <= self.mem_used_blocks <= self.mem_capacity_blocks:
            fail(
                f"mem_used_blocks ({self.mem_used_blocks}) <= mem_capacity_blocks "
                f"({self.mem_capacity_blocks}) violated"
            )
        if self.local_blocks > self.mem_used_blocks:
            fail(
                f"sum of request local_blocks ({self.local_blocks}) <= mem_used_blocks "
                f"({self.mem_used_blocks}) violated"
            )
        if len(self.requests) != self.batch:
            fail(f"batch ({self.batch}) must equal the number of listed requests ({len(self.requests)})")
        ids = [r.request_id for r in self.requests]
        if len(set(ids)) != len(ids):
            fail("duplicate request_id")
        for r in self.requests:
            if min(r.local_blocks, r.remote_blocks, r.total_ctx_tokens) < 0:
                fail(f"request {r.request_id} has negative counts")


@dataclass(frozen=True)
class SchedulerConfig:
    batch_threshold: int = 32
    mem_util_threshold: float = 0.8
    planning_period: float = 0.5
    retain_fraction: float = 0.5  # share of a request's blocks kept on its home instance
    expected_request_tokens: float = 512.0

    def __post_init__(self) -> None:
        if not 0 < self.mem_util_threshold <= 1:
            raise ConfigError("mem_util_threshold must lie in (0, 1]")
        if self.batch_threshold < 1:
            raise ConfigError("batch_threshold must be >= 1")
        if not self.planning_period > 0:
            raise ConfigError("planning_period must be positive")
        if not 0 <= self.retain_fraction <= 1:
            raise ConfigError("retain_fraction must lie in [0, 1]")
        if not self.expected_request_tokens > 0:
            raise ConfigError("expected_request_tokens must be positive")


@dataclass(frozen=True)
class MoveDirective:
    request_id: int
    src_instance: int
    dst_instance: int
    num_blocks: int
    est_gain: float = field(default=0.0, compare=False)

    def __post_init__(self) -> None:
        if self.src_instance == self.dst_instance:
            raise ContractError("a move needs distinct source and destination")
        if self.num_blocks < 1:
            raise ContractError("a move carries at least one block")


def classify_roles(
    snapshots: Iterable[InstanceSnapshot], cfg: SchedulerConfig
) -> tuple[list[InstanceSnapshot], list[InstanceSnapshot]]:
    """Debtors by ascending batch, creditors by ascending utilisation; ties by id.

    An instance that qualifies for both becomes a debtor only. An empty
    instance has nothing to offload, so it is never a debtor.
    """
    debtors, creditors = [], []
    for s in snapshots:
        if 1 <= s.batch <= cfg.batch_threshold and s.role_lock is not Role.CREDITOR:
            debtors.append(s)
        elif s.mem_util <= cfg.mem_util_threshold and s.role_lock is not Role.DEBTOR:
            creditors.append(s)
    debtors.sort(key=lambda s: (s.batch, s.instance_id))
    creditors.sort(key=lambda s: (s.mem_util, s.instance_id))
    return debtors, creditors


def movable_blocks(req: RequestSnapshot, retain_fraction: float) -> int:
    """Local blocks of ``req`` that may leave while ``retain_fraction`` of it stays home."""
    keep = max(1, math.ceil(retain_fraction * req.total_blocks))
    return max(0, req.local_blocks - keep)


def derive_feasible_batch(
    debtor: InstanceSnapshot,
    freed_blocks: int,
    queue_len: int,
    *,
    block_size: int,
    expected_request_tokens: float,
) -> int:
    if freed_blocks < 0:
        raise ContractError("freed_blocks must be nonnegative")
    admit = math.floor(freed_blocks * block_size / expected_request_tokens)
    return debtor.batch + max(0, min(queue_len, admit))


# --- planning state -----------------------------------------------------------


@dataclass
class _Side:
    """Model-level view of one instance while a plan is being built."""

    instance_id: int
    batch: int
    ctx: list[int]
    offloaded: int  # tokens of own requests living elsewhere
    hosted: int  # tokens hosted for others
    capacity: int
    used: int
    queue_len: int
    local_tokens: dict[int, int]  # request_id -> tokens still at home
    local_blocks: dict[int, int]
    total_blocks: dict[int, int]

    @classmethod
    def from_snapshot(cls, s: InstanceSnapshot, block_size: int) -> "_Side":
        local_tokens, offloaded = {}, 0
        for r in s.requests:
            remote_tok = min(r.remote_blocks * block_size, r.total_ctx_tokens)
            offloaded += remote_tok
            local_tokens[r.request_id] = r.total_ctx_tokens - remote_tok
        return cls(
            instance_id=s.instance_id,
            batch=s.batch,
            ctx=[r.total_ctx_tokens for r in s.requests],
            offloaded=offloaded,
            hosted=s.hosted_blocks * block_size,
            capacity=s.mem_capacity_blocks,
            used=s.mem_used_blocks,
            queue_len=s.queue_len,
            local_tokens=local_tokens,
            local_blocks={r.request_id: r.local_blocks for r in s.requests},
            total_blocks={r.request_id: r.total_blocks for r in s.requests},
        )

    @property
    def free(self) -> int:
        return self.capacity - self.used

    def copy(self) -> "_Side":
        return dataclasses.replace(
            self,
            ctx=list(self.ctx),
            local_tokens=dict(self.local_tokens),
            local_blocks=dict(self.local_blocks),
            total_blocks=dict(self.total_blocks),
        )


def _side_tps(side: _Side, model: PerfModel) -> float:
    if side.batch == 0:
        return 0.0
    shape = model.shape
    load = InstanceLoad(side.batch, tuple(side.ctx))
    total = load.total_ctx
    t = (
        layer_time(load, shape, model.f, model.g)
        - attention_time(side.offloaded, total, shape, model.g)
        + attention_time(side.hosted, total, shape, model.g)
    )
    return side.batch / (shape.n_layers * t)


def _apply_move(debtor: _Side, creditor: _Side, request_id: int, k: int,
                model: PerfModel, cfg: SchedulerConfig) -> tuple[_Side, _Side]:
    """New (debtor, creditor) states after ``k`` blocks of ``request_id`` move."""
    bs = model.shape.block_size_tokens
    d, c = debtor.copy(), creditor.copy()
    if k == 0:
        return d, c
    tokens = min(k * bs, d.local_tokens[request_id])
    d.local_tokens[request_id] -= tokens
    d.local_blocks[request_id] -= k
    d.offloaded += tokens
    d.used -= k
    admit = max(0, min(d.queue_len, math.floor(k * bs / cfg.expected_request_tokens)))
    if admit:
        # the new requests take over the freed blocks
        d.batch += admit
        d.queue_len -= admit
        d.ctx.extend([int(round(cfg.expected_request_tokens))] * admit)
        d.used += min(k, admit * model.shape.blocks_for(cfg.expected_request_tokens))
    c.hosted += tokens
    c.used += k
    return d, c


def _reclaim(home: _Side, host: _Side, k: int, block_size: int) -> tuple[_Side, _Side]:
    """States after ``k`` lent blocks come back from ``host`` to ``home``."""
    h, c = home.copy(), host.copy()
    tokens = min(k * block_size, h.offloaded, c.hosted)
    h.offloaded -= tokens
    h.used += k
    c.hosted -= tokens
    c.used -= k
    return h, c


def _pair_gain_curve(debtor: _Side, creditor: _Side, request_id: int, block_max: int,
                     model: PerfModel, cfg: SchedulerConfig) -> list[float]:
    base = _side_tps(debtor, model) + _side_tps(creditor, model)
    gains = []
    for k in range(block_max + 1):
        d, c = _apply_move(debtor, creditor, request_id, k, model, cfg)
        gains.append(_side_tps(d, model) + _side_tps(c, model) - base)
    gains[0] = 0.0
    return gains


def _longest_request(s: InstanceSnapshot) -> RequestSnapshot | None:
    if not s.requests:
        return None
    return min(s.requests, key=lambda r: (-r.total_ctx_tokens, r.request_id))


def _sweep_bound(req: RequestSnapshot, creditor_free: int, cfg: SchedulerConfig) -> int:
    return max(0, min(movable_blocks(req, cfg.retain_fraction), creditor_free))


def estimate_pair_gain(k: int, debtor: InstanceSnapshot, creditor: InstanceSnapshot,
                       model: PerfModel, cfg: SchedulerConfig,
                       request_id: int | None = None) -> float:
    """Modelled change in cluster TPS if ``k`` blocks of the debtor's request move.

    ``request_id`` defaults to the debtor's longest request.
    """
    req = (
        _longest_request(debtor)
        if request_id is None
        else next((r for r in debtor.requests if r.request_id == request_id), None)
    )
    if req is None:
        if k == 0:
            return 0.0
        raise ContractError(f"debtor {debtor.instance_id} has no such request")
    bound = _sweep_bound(req, creditor.free_blocks, cfg)
    if not 0 <= k <= bound:
        raise ContractError(f"k={k} outside feasible range [0, {bound}]")
    if k == 0:
        return 0.0
    bs = model.shape.block_size_tokens
    d = _Side.from_snapshot(debtor, bs)
    c = _Side.from_snapshot(creditor, bs)
    d2, c2 = _apply_move(d, c, req.request_id, k, model, cfg)
    return (_side_tps(d2, model) + _side_tps(c2, model)) - (_side_tps(d, model) + _side_tps(c, model))


def pair_objective(k: int, debtor: InstanceSnapshot, creditor: InstanceSnapshot,
                   model: PerfModel, cfg: SchedulerConfig) -> float:
    """Modelled aggregate TPS of the two instances after moving ``k`` blocks.

    Evaluated straight from the perfmodel role formulas, independently of the
    planner's internal bookkeeping.
    """
    bs = model.shape.block_size_tokens
    req = _longest_request(debtor)
    admit = 0
    d_ctx = [r.total_ctx_tokens for r in debtor.requests]
    d_off = sum(min(r.remote_blocks * bs, r.total_ctx_tokens) for r in debtor.requests)
    moved_tokens = 0
    if k:
        local_tok = req.total_ctx_tokens - min(req.remote_blocks * bs, req.total_ctx_tokens)
        moved_tokens = min(k * bs, local_tok)
        new_batch = derive_feasible_batch(
            debtor, k, debtor.queue_len,
            block_size=bs, expected_request_tokens=cfg.expected_request_tokens,
        )
        admit = new_batch - debtor.batch
    d_load = InstanceLoad(debtor.batch + admit,
                          tuple(d_ctx + [int(round(cfg.expected_request_tokens))] * admit),
                          d_off + moved_tokens)
    c_load = InstanceLoad(creditor.batch,
                          tuple(r.total_ctx_tokens for r in creditor.requests),
                          creditor.hosted_blocks * bs + moved_tokens)
    total = 0.0
    if d_load.batch:
        total += model.instance_tps(d_load, Role.DEBTOR)
    if c_load.batch:
        total += model.instance_tps(c_load, Role.CREDITOR)
    return total


@dataclass
class Plan:
    directives: list[MoveDirective]
    tps_before: float
    tps_after: float
    evaluations: int

    @property
    def total_gain(self) -> float:
        return sum(d.est_gain for d in self.directives)


def make_plan(snapshots: Sequence[InstanceSnapshot], cfg: SchedulerConfig,
              model: PerfModel) -> Plan:
    for s in snapshots:
        s.validate()
    bs = model.shape.block_size_tokens
    sides = {s.instance_id: _Side.from_snapshot(s, bs) for s in snapshots}
    tps_before = sum(_side_tps(s, model) for s in sides.values())
    debtors, creditors = classify_roles(snapshots, cfg)
    creditor_ids = [c.instance_id for c in creditors]
    directives: list[MoveDirective] = []
    evaluations = 0

    for debtor in debtors:
        req = _longest_request(debtor)
        if req is None:
            continue
        block_max = movable_blocks(req, cfg.retain_fraction)
        tried: set[int] = set()
        while block_max > 0:
            pool = [cid for cid in creditor_ids if cid not in tried and sides[cid].free > 0]
            if not pool:
                break
            # utilisation changes as blocks land, so re-sort before each pick
            cid = min(pool, key=lambda i: (sides[i].used / sides[i].capacity, i))
            tried.add(cid)
            d_side, c_side = sides[debtor.instance_id], sides[cid]
            bound = min(block_max, c_side.free)
            gains = _pair_gain_curve(d_side, c_side, req.request_id, bound, model, cfg)
            evaluations += len(gains)
            best = max(range(len(gains)), key=lambda k: (gains[k], -k))
            if best <= 0 or gains[best] <= 0:
                break
            sides[debtor.instance_id], sides[cid] = _apply_move(
                d_side, c_side, req.request_id, best, model, cfg
            )
            directives.append(MoveDirective(req.request_id, debtor.instance_id, cid, best,
                                            est_gain=gains[best]))
            block_max -= best
    tps_after = sum(_side_tps(s, model) for s in sides.values())
    return Plan(directives, tps_before, tps_after, evaluations)


def plan_moves(snapshots: Sequence[InstanceSnapshot], cfg: SchedulerConfig,
               model: PerfModel) -> list[MoveDirective]:
    return make_plan(snapshots, cfg, model).directives


def modeled_cluster_tps(snapshots: Sequence[InstanceSnapshot], model: PerfModel,
                        cfg: SchedulerConfig,
                        directives: Sequence[MoveDirective] = ()) -> float:
    """Cluster TPS of ``snapshots`` after replaying ``directives`` in order."""
    bs = model.shape.block_size_tokens
    sides = {s.instance_id: _Side.from_snapshot(s, bs) for s in snapshots}
    for d in directives:
        src, dst = sides[d.src_instance], sides[d.dst_instance]
        if src.local_blocks.get(d.request_id, 0) < d.num_blocks:
            raise ContractError(f"directive {d} moves more blocks than the source holds")
        if dst.free < d.num_blocks:
            raise ContractError(f"directive {d} overflows instance {d.dst_instance}")
        sides[d.src_instance], sides[d.dst_instance] = _apply_move(
            src, dst, d.request_id, d.num_blocks, model, cfg
        )
    return sum(_side_tps(s, model) for s in sides.values())


def plan_reclaims(
    snapshots: Sequence[InstanceSnapshot],
    placements: Mapping[int, Mapping[int, int]],
    homes: Mapping[int, int],
    cfg: SchedulerConfig,
    block_size: int,
    *,
    pending: int = 0,
    model: PerfModel | None = None,
) -> list[MoveDirective]:
    """Directives that pull lent blocks back (remote -> home).

    A debtor reclaims into its free space once nothing is waiting anywhere in
    the cluster, provided (when ``model`` is given) the modelled cluster TPS
    does not drop; otherwise lending to an idle host would be undone at the
    next round. A creditor with queued work and too little free space for a
    typical request hands hosted blocks back to homes that have room.
    """
    by_id = {s.instance_id: s for s in snapshots}
    sides = ({s.instance_id: _Side.from_snapshot(s, block_size) for s in snapshots}
             if model is not None else {})
    free = {s.instance_id: s.free_blocks for s in snapshots}
    request_blocks = math.ceil(cfg.expected_request_tokens / block_size)
    out: list[MoveDirective] = []

    if pending == 0:
        for s in sorted(snapshots, key=lambda s: s.instance_id):
            for r in sorted(s.requests, key=lambda r: r.request_id):
                if r.remote_blocks == 0 or homes.get(r.request_id) != s.instance_id:
                    continue
                hosts = sorted(
                    ((n, inst) for inst, n in placements.get(r.request_id, {}).items()
                     if inst != s.instance_id and n > 0 and inst in by_id),
                    key=lambda t: (-t[0], t[1]),
                )
                for n, host in hosts:
                    k = min(n, free[s.instance_id])
                    if k <= 0:
                        break
                    if model is not None:
                        home_side, host_side = _reclaim(sides[s.instance_id], sides[host], k, block_size)
                        before = _side_tps(sides[s.instance_id], model) + _side_tps(sides[host], model)
                        if _side_tps(home_side, model) + _side_tps(host_side, model) < before:
                            continue
                        sides[s.instance_id], sides[host] = home_side, host_side
                    out.append(MoveDirective(r.request_id, host, s.instance_id, k))
                    free[s.instance_id] -= k
                    free[host] += k

    for s in sorted(snapshots, key=lambda s: s.instance_id):
        if s.queue_len == 0 or s.hosted_blocks == 0 or free[s.instance_id] >= request_blocks:
            continue
        need = request_blocks * s.queue_len
        for req_id in sorted(placements):
            home = homes.get(req_id)
            n = placements[req_id].get(s.instance_id, 0)
            if home is None or home == s.instance_id or n == 0 or home not in free:
                continue
            k = min(n, need, free[home])
            if k <= 0:
                continue
            out.append(MoveDirective(req_id, s.instance_id, home, k))
            free[home] -= k
            need -= k
            if need <= 0:
                break
    return out
