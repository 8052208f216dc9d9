"""gManager / rManager coordination.

Each instance runs an :class:`RManager` that owns the truth about which KV
blocks it holds. It reports changes to the :class:`GManager` with heartbeats,
executes ``move_kvcache`` instructions, and arbitrates incoming
``try_move_kvcache`` reservations first-come-first-serve. The gManager keeps a
possibly stale :class:`PlacementMap` and plans from it; safety never depends on
that map being current because every reservation is decided at the
destination.

Message field names follow the wire API: ``req_id``, ``inst_id``,
``num_blocks``, ``local``, ``dst_inst``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .errors import ContractError, RejectedInputError
from .perfmodel import PerfModel, Role
from .scheduler import (
    InstanceSnapshot,
    MoveDirective,
    Plan,
    RequestSnapshot,
    SchedulerConfig,
    make_plan,
    plan_reclaims,
)

__all__ = [
    "RequestPlacementEntry",
    "InstanceStatus",
    "Heartbeat",
    "MoveKvCache",
    "TryMove",
    "TryMoveResp",
    "DataTransfer",
    "SyncRequest",
    "message_to_dict",
    "message_from_dict",
    "MoveOutcome",
    "Reservation",
    "Transfer",
    "RManager",
    "PlacementMap",
    "GManager",
    "rmanager_heartbeat",
    "gmanager_apply_heartbeat",
    "gmanager_epoch_recover",
    "execute_move",
    "deliver_blocks",
]


# --- wire messages --------------------------------------------------------------


@dataclass(frozen=True)
class RequestPlacementEntry:
    req_id: int
    inst_id: int
    num_blocks: int
    local: bool


@dataclass(frozen=True)
class InstanceStatus:
    """Load summary piggybacked on every heartbeat."""

    capacity: int
    used: int
    reserved: int = 0
    batch: int = 0
    queue_len: int = 0
    queued_blocks: int = 0  # blocks the queue will claim on admission


@dataclass(frozen=True)
class Heartbeat:
    inst_id: int
    epoch: int
    entries: tuple[RequestPlacementEntry, ...]
    full: bool = False
    status: InstanceStatus | None = None


@dataclass(frozen=True)
class MoveKvCache:
    req_id: int
    num_blocks: int
    dst_inst: int
    epoch: int = 0


@dataclass(frozen=True)
class TryMove:
    req_id: int
    num_blocks: int
    src_inst: int
    move_id: int


@dataclass(frozen=True)
class TryMoveResp:
    move_id: int
    accepted: bool
    dst_inst: int
    reservation_id: int | None = None


@dataclass(frozen=True)
class DataTransfer:
    req_id: int
    num_blocks: int
    src_inst: int
    dst_inst: int
    reservation_id: int


@dataclass(frozen=True)
class SyncRequest:
    """Sent by a new gManager: asks the rManager for a full heartbeat."""

    epoch: int


_MESSAGE_TYPES = {
    "heartbeat": Heartbeat,
    "move_kvcache": MoveKvCache,
    "try_move_kvcache": TryMove,
    "try_move_kvcache_resp": TryMoveResp,
    "data_transfer": DataTransfer,
    "sync_request": SyncRequest,
}
_TYPE_NAMES = {cls: name for name, cls in _MESSAGE_TYPES.items()}


def message_to_dict(msg) -> dict:
    d = asdict(msg)
    d["type"] = _TYPE_NAMES[type(msg)]
    return d


def message_from_dict(d: Mapping) -> object:
    d = dict(d)
    cls = _MESSAGE_TYPES[d.pop("type")]
    if cls is Heartbeat:
        d["entries"] = tuple(RequestPlacementEntry(**e) for e in d["entries"])
        d["status"] = InstanceStatus(**d["status"]) if d.get("status") else None
    return cls(**d)


def message_to_line(msg) -> str:
    return json.dumps(message_to_dict(msg), sort_keys=True, separators=(",", ":"))


# --- rManager -----------------------------------------------------------------------


class MoveOutcome(str, Enum):
    COMPLETED = "completed"
    REJECTED = "rejected"  # the source could not even attempt it
    DEFERRED = "deferred"  # the destination said no; wait for the next plan
    ABORTED = "aborted"  # started, then the request vanished or the reservation expired


@dataclass
class Reservation:
    reservation_id: int
    src_inst: int
    req_id: int
    num_blocks: int
    expiry: float


@dataclass
class Transfer:
    """An outgoing move tracked on the source side."""

    move_id: int
    req_id: int
    dst_inst: int
    num_blocks: int
    reservation_id: int | None = None
    carry_tokens: int = 0
    moved_blocks: int = 0
    started: bool = False


class RManager:
    """Per-instance agent: local block table, reservations, outgoing moves."""

    def __init__(self, inst_id: int, capacity: int, *, reservation_timeout: float = 1.0) -> None:
        if capacity < 1:
            raise ContractError("capacity must be at least one block")
        self.inst_id = inst_id
        self.capacity = capacity
        self.reservation_timeout = reservation_timeout
        self.blocks: dict[int, int] = {}
        self.homed: set[int] = set()
        self.reservations: dict[int, Reservation] = {}
        self.transfers: dict[int, Transfer] = {}
        self.known_epoch = 0
        self.force_full = True
        self._last_sent: dict[int, tuple[int, bool]] = {}
        self.outcomes: list[tuple[int, MoveOutcome]] = []
        # ids only need to be unique per instance: move ids come back to this
        # source, reservation ids are only ever resolved here
        self._ids = itertools.count(1)

    # local accounting -------------------------------------------------------

    @property
    def used(self) -> int:
        return sum(self.blocks.values())

    @property
    def reserved(self) -> int:
        return sum(r.num_blocks for r in self.reservations.values())

    @property
    def free(self) -> int:
        return self.capacity - self.used - self.reserved

    def entries(self) -> list[RequestPlacementEntry]:
        return [
            RequestPlacementEntry(req, self.inst_id, n, req in self.homed)
            for req, n in sorted(self.blocks.items())
        ]

    def add_request(self, req_id: int, num_blocks: int) -> None:
        """Home a new request here with its initial blocks."""
        if req_id in self.blocks:
            raise ContractError(f"request {req_id} already on instance {self.inst_id}")
        if num_blocks > self.free:
            raise ContractError(f"instance {self.inst_id} lacks {num_blocks} free blocks")
        self.blocks[req_id] = num_blocks
        self.homed.add(req_id)

    def allocate(self, req_id: int, n: int = 1) -> None:
        """Grow ``req_id`` by ``n`` blocks here (home growth or overflow hosting)."""
        if n > self.free:
            raise ContractError(f"instance {self.inst_id} lacks {n} free blocks")
        self.blocks[req_id] = self.blocks.get(req_id, 0) + n

    def drop_request(self, req_id: int) -> int:
        """Forget ``req_id`` entirely; returns freed blocks. Cancels its moves."""
        freed = self.blocks.pop(req_id, 0)
        self.homed.discard(req_id)
        for rid in [r for r, res in self.reservations.items() if res.req_id == req_id]:
            del self.reservations[rid]
        for mid in [m for m, t in self.transfers.items() if t.req_id == req_id]:
            del self.transfers[mid]
            self.outcomes.append((mid, MoveOutcome.ABORTED))
        return freed

    def expire(self, now: float) -> list[Reservation]:
        gone = [r for r in self.reservations.values() if r.expiry < now]
        for r in gone:
            del self.reservations[r.reservation_id]
        return gone

    def check(self) -> None:
        if self.used + self.reserved > self.capacity:
            raise AssertionError(
                f"instance {self.inst_id}: used {self.used} + reserved {self.reserved} "
                f"> capacity {self.capacity}"
            )
        if any(n < 0 for n in self.blocks.values()):
            raise AssertionError(f"instance {self.inst_id}: negative block count")

    # protocol ---------------------------------------------------------------

    def heartbeat(self, status: InstanceStatus | None = None) -> Heartbeat:
        current = {req: (n, req in self.homed) for req, n in self.blocks.items()}
        full = self.force_full
        if full:
            changed = [RequestPlacementEntry(r, self.inst_id, n, loc)
                       for r, (n, loc) in sorted(current.items())]
        else:
            changed = []
            for req in sorted(set(current) | set(self._last_sent)):
                now_val = current.get(req)
                if now_val == self._last_sent.get(req):
                    continue
                if now_val is None:
                    _, loc = self._last_sent[req]
                    changed.append(RequestPlacementEntry(req, self.inst_id, 0, loc))
                else:
                    changed.append(RequestPlacementEntry(req, self.inst_id, *now_val))
        self._last_sent = current
        self.force_full = False
        if status is None:
            status = InstanceStatus(self.capacity, self.used, self.reserved, len(self.homed))
        return Heartbeat(self.inst_id, self.known_epoch, tuple(changed), full, status)

    def observe_epoch(self, epoch: int) -> None:
        if epoch > self.known_epoch:
            self.known_epoch = epoch
            self.force_full = True

    def on_sync_request(self, msg: SyncRequest) -> None:
        self.observe_epoch(msg.epoch)
        self.force_full = True

    def on_move_kvcache(self, msg: MoveKvCache, now: float) -> TryMove | None:
        """Start a move: returns the reservation request, or None if impossible here."""
        self.observe_epoch(msg.epoch)
        move_id = next(self._ids)
        have = self.blocks.get(msg.req_id, 0)
        pending = sum(t.num_blocks for t in self.transfers.values() if t.req_id == msg.req_id)
        keep = 1 if msg.req_id in self.homed else 0
        if msg.dst_inst == self.inst_id or msg.num_blocks < 1 or have - pending - keep < msg.num_blocks:
            self.outcomes.append((move_id, MoveOutcome.REJECTED))
            return None
        self.transfers[move_id] = Transfer(move_id, msg.req_id, msg.dst_inst, msg.num_blocks)
        return TryMove(msg.req_id, msg.num_blocks, self.inst_id, move_id)

    def on_try_move(self, msg: TryMove, now: float) -> TryMoveResp:
        """Destination side: first-come-first-serve reservation."""
        self.expire(now)
        if msg.num_blocks <= self.free:
            rid = next(self._ids)
            self.reservations[rid] = Reservation(
                rid, msg.src_inst, msg.req_id, msg.num_blocks, now + self.reservation_timeout
            )
            return TryMoveResp(msg.move_id, True, self.inst_id, rid)
        return TryMoveResp(msg.move_id, False, self.inst_id)

    def on_try_move_resp(self, msg: TryMoveResp) -> None:
        t = self.transfers.get(msg.move_id)
        if t is None:
            return
        if not msg.accepted:
            # no retry: wait for the gManager's next round
            del self.transfers[msg.move_id]
            self.outcomes.append((msg.move_id, MoveOutcome.DEFERRED))
            return
        t.reservation_id = msg.reservation_id
        t.started = True

    def active_transfers(self) -> list[Transfer]:
        return [t for _, t in sorted(self.transfers.items()) if t.started]


def deliver_blocks(src: RManager, dst: RManager, transfer: Transfer, n: int, now: float) -> int:
    """Move ``n`` blocks of an accepted transfer from ``src`` to ``dst`` atomically.

    Returns how many actually moved (fewer if the reservation lapsed or the
    source ran short). Finishes or aborts the transfer as appropriate.
    """
    dst.expire(now)
    res = dst.reservations.get(transfer.reservation_id)
    have = src.blocks.get(transfer.req_id, 0) - (1 if transfer.req_id in src.homed else 0)
    if res is None or have <= 0:
        src.transfers.pop(transfer.move_id, None)
        if res is not None:
            del dst.reservations[res.reservation_id]
        src.outcomes.append((transfer.move_id, MoveOutcome.ABORTED))
        return 0
    k = min(n, transfer.num_blocks - transfer.moved_blocks, res.num_blocks, have)
    src.blocks[transfer.req_id] -= k
    if src.blocks[transfer.req_id] == 0 and transfer.req_id not in src.homed:
        del src.blocks[transfer.req_id]
    res.num_blocks -= k
    res.expiry = now + dst.reservation_timeout
    dst.blocks[transfer.req_id] = dst.blocks.get(transfer.req_id, 0) + k
    transfer.moved_blocks += k
    if transfer.moved_blocks >= transfer.num_blocks:
        src.transfers.pop(transfer.move_id, None)
        dst.reservations.pop(res.reservation_id, None)
        src.outcomes.append((transfer.move_id, MoveOutcome.COMPLETED))
    elif res.num_blocks == 0:
        dst.reservations.pop(res.reservation_id, None)
    return k


def execute_move(src: RManager, dst: RManager, directive: MoveDirective, now: float = 0.0,
                 blocks_per_step: int = 1) -> tuple[MoveOutcome, int]:
    """Run one directive end to end without a network; returns (outcome, steps used)."""
    try_msg = src.on_move_kvcache(
        MoveKvCache(directive.request_id, directive.num_blocks, directive.dst_instance), now
    )
    if try_msg is None:
        return MoveOutcome.REJECTED, 0
    resp = dst.on_try_move(try_msg, now)
    src.on_try_move_resp(resp)
    if not resp.accepted:
        return MoveOutcome.DEFERRED, 0
    t = src.transfers[try_msg.move_id]
    steps = 0
    while try_msg.move_id in src.transfers:
        deliver_blocks(src, dst, t, blocks_per_step, now)
        steps += 1
    return src.outcomes[-1][1], steps


def rmanager_heartbeat(rm: RManager, status: InstanceStatus | None = None) -> Heartbeat:
    return rm.heartbeat(status)


# --- gManager -------------------------------------------------------------------


class PlacementMap:
    """The gManager's view: entries keyed by ``(req_id, inst_id)``."""

    def __init__(self) -> None:
        self.entries: dict[tuple[int, int], RequestPlacementEntry] = {}
        self.status: dict[int, InstanceStatus] = {}
        self.stamp: dict[int, float] = {}
        self.synced: set[int] = set()
        self.needs_resync: set[int] = set()

    def apply_heartbeat(self, hb: Heartbeat, now: float) -> bool:
        """Fold a heartbeat in. Returns False when it was rejected."""
        inst = hb.inst_id
        if any(e.num_blocks < 0 or e.inst_id != inst for e in hb.entries):
            self.needs_resync.add(inst)
            self.synced.discard(inst)
            return False
        if not hb.full and inst not in self.synced:
            # a delta against a baseline this map never saw
            self.needs_resync.add(inst)
            return False
        if hb.full:
            for key in [k for k in self.entries if k[1] == inst]:
                del self.entries[key]
            self.synced.add(inst)
            self.needs_resync.discard(inst)
        for e in hb.entries:
            if e.num_blocks == 0:
                self.entries.pop((e.req_id, inst), None)
            else:
                self.entries[(e.req_id, inst)] = e
        if hb.status is not None:
            self.status[inst] = hb.status
        self.stamp[inst] = now
        return True

    def instance_blocks(self, inst: int) -> int:
        return sum(e.num_blocks for (_, i), e in self.entries.items() if i == inst)

    def placements(self) -> dict[int, dict[int, int]]:
        out: dict[int, dict[int, int]] = {}
        for (req, inst), e in sorted(self.entries.items()):
            out.setdefault(req, {})[inst] = e.num_blocks
        return out

    def homes(self) -> dict[int, int]:
        return {req: inst for (req, inst), e in sorted(self.entries.items()) if e.local}

    def as_set(self) -> set[RequestPlacementEntry]:
        return set(self.entries.values())

    def problems(self) -> list[str]:
        out = []
        local_count: dict[int, int] = {}
        for e in self.entries.values():
            if e.local:
                local_count[e.req_id] = local_count.get(e.req_id, 0) + 1
        out += [f"request {r} has {n} local entries" for r, n in local_count.items() if n > 1]
        for inst, st in self.status.items():
            known = self.instance_blocks(inst)
            if not known <= st.used <= st.capacity:
                out.append(f"instance {inst}: entries {known}, used {st.used}, cap {st.capacity}")
        return out


def gmanager_apply_heartbeat(pmap: PlacementMap, hb: Heartbeat, now: float = 0.0) -> PlacementMap:
    pmap.apply_heartbeat(hb, now)
    return pmap


class GManager:
    """Global planner. One instance per epoch; a failover builds a fresh one."""

    def __init__(self, epoch: int, sched_cfg: SchedulerConfig, model: PerfModel,
                 *, staleness_limit: float = float("inf")) -> None:
        self.epoch = epoch
        self.sched_cfg = sched_cfg
        self.model = model
        self.staleness_limit = staleness_limit
        self.map = PlacementMap()
        self.last_plan: Plan | None = None

    def start(self, inst_ids: Iterable[int]) -> list[tuple[int, SyncRequest]]:
        return [(i, SyncRequest(self.epoch)) for i in sorted(inst_ids)]

    def on_heartbeat(self, hb: Heartbeat, now: float) -> list[tuple[int, object]]:
        ok = self.map.apply_heartbeat(hb, now)
        if not ok:
            return [(hb.inst_id, SyncRequest(self.epoch))]
        return []

    def fresh_instances(self, now: float) -> list[int]:
        return sorted(
            i for i in self.map.synced
            if i in self.map.status and now - self.map.stamp.get(i, -float("inf")) <= self.staleness_limit
        )

    def snapshots(self, now: float) -> list[InstanceSnapshot]:
        bs = self.model.shape.block_size_tokens
        fresh = set(self.fresh_instances(now))
        placements = self.map.placements()
        homes = self.map.homes()
        out = []
        for inst in sorted(fresh):
            st = self.map.status[inst]
            reqs, hosting = [], False
            for (req, i), e in sorted(self.map.entries.items()):
                if i != inst:
                    continue
                if e.local:
                    remote = sum(n for j, n in placements[req].items() if j != inst)
                    reqs.append(RequestSnapshot(req, e.num_blocks, remote,
                                                (e.num_blocks + remote) * bs))
                elif homes.get(req) != inst:
                    hosting = True
            borrowing = any(r.remote_blocks for r in reqs)
            role = Role.DEBTOR if borrowing else (Role.CREDITOR if hosting else Role.NONE)
            # memory promised to the local queue is not available for lending
            used = max(st.used + st.reserved + st.queued_blocks, sum(r.local_blocks for r in reqs))
            out.append(InstanceSnapshot(inst, len(reqs), st.capacity, min(used, st.capacity),
                                        tuple(reqs), role, st.queue_len))
        return out

    def plan_round(self, now: float, *, pending: int | None = None) -> list[tuple[int, MoveKvCache]]:
        """Reclaims first, then new lending among instances not touched by a reclaim."""
        snaps = self.snapshots(now)
        if pending is None:
            pending = sum(s.queue_len for s in snaps)
        bs = self.model.shape.block_size_tokens
        cfg = self.sched_cfg
        fresh = [self.map.status[s.instance_id] for s in snaps]
        queued = sum(st.queue_len for st in fresh)
        if queued and any(st.queued_blocks for st in fresh):
            # size new admissions after what is actually waiting
            mean_tokens = sum(st.queued_blocks for st in fresh) * bs / queued
            cfg = replace(cfg, expected_request_tokens=mean_tokens)
        reclaims = plan_reclaims(snaps, self.map.placements(), self.map.homes(),
                                 cfg, bs, pending=pending, model=self.model)
        busy = {d.src_instance for d in reclaims} | {d.dst_instance for d in reclaims}
        # queued work anywhere can flow to freed memory via dispatch
        lend_view = [
            InstanceSnapshot(s.instance_id, s.batch, s.mem_capacity_blocks, s.mem_used_blocks,
                             s.requests, s.role_lock, pending)
            for s in snaps if s.instance_id not in busy
        ]
        plan = make_plan(lend_view, cfg, self.model)
        self.last_plan = plan
        directives = list(reclaims) + plan.directives
        return [
            (d.src_instance, MoveKvCache(d.request_id, d.num_blocks, d.dst_instance, self.epoch))
            for d in directives
        ]


def gmanager_epoch_recover(rmanagers: Sequence[RManager], epoch: int = 1, now: float = 0.0,
                           unresponsive: Iterable[int] = ()) -> PlacementMap:
    """Build a map from scratch by soliciting full heartbeats.

    Unresponsive instances contribute nothing and are flagged for resync.
    """
    skip = set(unresponsive)
    pmap = PlacementMap()
    for rm in rmanagers:
        if rm.inst_id in skip:
            pmap.needs_resync.add(rm.inst_id)
            continue
        rm.on_sync_request(SyncRequest(epoch))
        pmap.apply_heartbeat(rm.heartbeat(), now)
    return pmap
