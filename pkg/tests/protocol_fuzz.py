"""Randomised message-schedule harness for the rManager/gManager protocol.

A schedule draws a small cluster, a stream of local events (new requests,
growth, completions, heartbeats, chunked block delivery) and a stream of
possibly conflicting move instructions, all carried over per-channel FIFO
links with random delays. Part way through, the gManager is replaced by a
new epoch. Safety is checked after every event; at the end the network is
drained, one heartbeat round is run and the gManager's map is compared with
a map rebuilt by replaying the harness's own log of block operations.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field

from kvlend.controlplane import (
    Heartbeat,
    MoveKvCache,
    PlacementMap,
    RequestPlacementEntry,
    RManager,
    SyncRequest,
    TryMove,
    TryMoveResp,
    deliver_blocks,
)

G = "g"


class ReplayOracle:
    """Block placement rebuilt from the operation log, sharing no code with RManager."""

    def __init__(self) -> None:
        self.blocks: dict[tuple[int, int], int] = {}
        self.home: dict[int, int] = {}

    def apply(self, op: tuple) -> None:
        kind = op[0]
        if kind == "add":
            _, inst, req, n = op
            self.home[req] = inst
            self.blocks[(req, inst)] = n
        elif kind == "alloc":
            _, inst, req, n = op
            self.blocks[(req, inst)] = self.blocks.get((req, inst), 0) + n
        elif kind == "drop":
            _, req = op
            self.home.pop(req, None)
            for key in [k for k in self.blocks if k[0] == req]:
                del self.blocks[key]
        elif kind == "move":
            _, src, dst, req, n = op
            self.blocks[(req, src)] -= n
            if self.blocks[(req, src)] == 0 and self.home.get(req) != src:
                del self.blocks[(req, src)]
            self.blocks[(req, dst)] = self.blocks.get((req, dst), 0) + n
        else:
            raise ValueError(kind)

    def entries(self) -> set[RequestPlacementEntry]:
        return {RequestPlacementEntry(req, inst, n, self.home.get(req) == inst)
                for (req, inst), n in self.blocks.items()}


@dataclass
class FuzzResult:
    seed: int
    violations: list[str] = field(default_factory=list)
    converged: bool = False
    messages: int = 0
    accepted: int = 0
    deferred: int = 0
    moved_blocks: int = 0

    @property
    def ok(self) -> bool:
        return self.converged and not self.violations


class Schedule:
    def __init__(self, seed: int, *, actions: int = 60) -> None:
        self.rng = random.Random(seed)
        self.result = FuzzResult(seed)
        rng = self.rng
        self.n = rng.randint(2, 4)
        self.rms = [RManager(i, rng.randint(6, 40), reservation_timeout=rng.choice([0.05, 0.3, 5.0]))
                    for i in range(self.n)]
        self.epoch = 1
        self.gmap = PlacementMap()
        self.oracle = ReplayOracle()
        self.events: list = []
        self._seq = 0
        self._chan_clock: dict[tuple, float] = {}
        self.now = 0.0
        self.next_req = 0
        self.actions = actions
        self.failover_at = rng.uniform(0.2, 0.8)

    # plumbing -----------------------------------------------------------------

    def push(self, t: float, kind: str, data=None) -> None:
        self._seq += 1
        heapq.heappush(self.events, (t, self._seq, kind, data))

    def send(self, src, dst, msg) -> None:
        # FIFO per (src, dst) channel: never overtake an earlier message
        t = max(self.now + self.rng.uniform(0.0, 0.05), self._chan_clock.get((src, dst), 0.0))
        self._chan_clock[(src, dst)] = t
        self.result.messages += 1
        self.push(t, "deliver", (src, dst, msg))

    def log(self, op: tuple) -> None:
        self.oracle.apply(op)

    # checks -----------------------------------------------------------------------

    def check(self, where: str) -> None:
        bad = self.result.violations
        homes: dict[int, int] = {}
        for rm in self.rms:
            used = sum(rm.blocks.values())
            reserved = sum(r.num_blocks for r in rm.reservations.values())
            if used + reserved > rm.capacity:
                bad.append(f"{where}: instance {rm.inst_id} used {used} + reserved {reserved} > {rm.capacity}")
            for req in rm.homed:
                homes[req] = homes.get(req, 0) + 1
        bad += [f"{where}: request {r} homed {c} times" for r, c in homes.items() if c > 1]
        local: dict[int, int] = {}
        for e in self.gmap.entries.values():
            if e.local:
                local[e.req_id] = local.get(e.req_id, 0) + 1
        bad += [f"{where}: map has {c} local entries for request {r}" for r, c in local.items() if c > 1]

    # local actions --------------------------------------------------------------

    def act(self) -> None:
        rng, rms = self.rng, self.rms
        rm = rng.choice(rms)
        roll = rng.random()
        live = sorted(self.oracle.home)
        if roll < 0.18 and rm.free >= 1:
            n = rng.randint(1, max(1, min(rm.free, 8)))
            req = self.next_req
            self.next_req += 1
            rm.add_request(req, n)
            self.log(("add", rm.inst_id, req, n))
        elif roll < 0.30 and live and rm.free >= 1:
            req = rng.choice(live)
            rm.allocate(req, 1)
            self.log(("alloc", rm.inst_id, req, 1))
        elif roll < 0.38 and live:
            req = rng.choice(live)
            for r in rms:
                r.drop_request(req)
            self.log(("drop", req))
        elif roll < 0.58:
            self.send(rm.inst_id, G, rm.heartbeat())
        elif roll < 0.80 and live:
            self.instruct(rng.choice(live))
        else:
            self.step(rm)

    def instruct(self, req: int) -> None:
        """gManager-style move instruction, possibly stale or conflicting."""
        rng = self.rng
        src = self.oracle.home[req] if rng.random() < 0.8 else rng.randrange(self.n)
        dst = rng.choice([i for i in range(self.n) if i != src])
        n = rng.randint(1, 6)
        self.send(G, src, MoveKvCache(req, n, dst, self.epoch))
        if rng.random() < 0.4:
            # a concurrent move from another source into the same destination
            others = sorted(r for r, h in self.oracle.home.items() if h not in (dst,))
            if others:
                r2 = rng.choice(others)
                self.send(G, self.oracle.home[r2], MoveKvCache(r2, rng.randint(1, 6), dst, self.epoch))

    def step(self, rm: RManager) -> None:
        """One decode step's worth of block delivery for every active transfer."""
        for t in rm.active_transfers():
            dst = self.rms[t.dst_inst]
            k = deliver_blocks(rm, dst, t, self.rng.randint(1, 3), self.now)
            if k:
                self.result.moved_blocks += k
                self.log(("move", rm.inst_id, t.dst_inst, t.req_id, k))

    # message handling --------------------------------------------------------------

    def deliver(self, src, dst, msg) -> None:
        if dst == G:
            ok = self.gmap.apply_heartbeat(msg, self.now)
            if not ok:
                self.send(G, msg.inst_id, SyncRequest(self.epoch))
            return
        rm = self.rms[dst]
        if isinstance(msg, SyncRequest):
            rm.on_sync_request(msg)
            self.send(dst, G, rm.heartbeat())
        elif isinstance(msg, MoveKvCache):
            try_msg = rm.on_move_kvcache(msg, self.now)
            if try_msg is not None:
                self.send(dst, msg.dst_inst, try_msg)
        elif isinstance(msg, TryMove):
            resp = rm.on_try_move(msg, self.now)
            self.send(dst, msg.src_inst, resp)
        elif isinstance(msg, TryMoveResp):
            before = {k: dict(r.blocks) for k, r in enumerate(self.rms)}
            rm.on_try_move_resp(msg)
            if msg.accepted:
                self.result.accepted += 1
            else:
                self.result.deferred += 1
                if before != {k: dict(r.blocks) for k, r in enumerate(self.rms)}:
                    self.result.violations.append("deferred move changed block counts")
        else:
            raise TypeError(msg)

    def failover(self) -> None:
        self.epoch += 1
        self.gmap = PlacementMap()
        for i in range(self.n):
            self.send(G, i, SyncRequest(self.epoch))

    # driver ---------------------------------------------------------------------------

    def run(self) -> FuzzResult:
        rng = self.rng
        for _ in range(self.actions):
            self.push(rng.uniform(0.0, 1.0), "act")
        self.push(self.failover_at, "failover")
        for i in range(self.n):
            self.push(0.0, "deliver", (G, i, SyncRequest(self.epoch)))
        self.drain()

        # quiescence: finish or abandon moves in flight, then a heartbeat round
        for _ in range(1000):
            if not any(rm.transfers for rm in self.rms):
                break
            for rm in self.rms:
                self.step(rm)
                for t in [t for t in rm.transfers.values() if not t.started]:
                    # only possible if its response was lost, which this network never does
                    self.result.violations.append(f"move {t.move_id} never answered")
                    del rm.transfers[t.move_id]
            self.check("quiesce")
        for rm in self.rms:
            rm.expire(float("inf"))  # nothing is in flight any more
            self.send(rm.inst_id, G, rm.heartbeat())
        self.drain()
        self.check("final")

        truth = self.oracle.entries()
        union = {e for rm in self.rms for e in rm.entries()}
        got = self.gmap.as_set()
        if union != truth:
            self.result.violations.append(f"instances disagree with replay: {sorted(union ^ truth, key=str)[:4]}")
        live = set(self.oracle.home)
        homes = {e.req_id for e in got if e.local}
        if homes != live:
            self.result.violations.append(f"live requests without a home entry: {sorted(live ^ homes)[:4]}")
        self.result.converged = got == truth
        return self.result

    def drain(self) -> None:
        while self.events:
            t, _, kind, data = heapq.heappop(self.events)
            self.now = t
            if kind == "act":
                self.act()
            elif kind == "failover":
                self.failover()
            else:
                self.deliver(*data)
            self.check(kind)


def run_schedule(seed: int, *, actions: int = 60) -> FuzzResult:
    return Schedule(seed, actions=actions).run()


# --- FCFS arbitration -------------------------------------------------------------


def fcfs_oracle(free: int, requests: list[int]) -> list[bool]:
    """Sequential first-come-first-serve: accept while the request still fits."""
    out = []
    for n in requests:
        ok = n <= free
        out.append(ok)
        if ok:
            free -= n
    return out


def concurrent_reservations(seed: int) -> tuple[list[bool], list[bool]]:
    """Many sources race TryMoves to one destination over random-delay links.

    Returns (protocol decisions, oracle decisions), both in arrival order.
    """
    rng = random.Random(seed)
    cap = rng.randint(1, 60)
    dst = RManager(0, cap, reservation_timeout=1e9)
    used = rng.randint(0, cap)
    if used:
        dst.add_request(10_000, used)
    arrivals = []
    for i in range(rng.randint(1, 12)):
        n = rng.randint(1, max(1, cap // 2))
        arrivals.append((rng.uniform(0, 1), i, TryMove(i, n, i + 1, i)))
    arrivals.sort(key=lambda a: (a[0], a[1]))
    got = [dst.on_try_move(msg, t).accepted for t, _, msg in arrivals]
    want = fcfs_oracle(cap - used, [msg.num_blocks for _, _, msg in arrivals])
    if dst.used + dst.reserved > dst.capacity:
        got.append(None)  # surfaces as a mismatch
    return got, want
