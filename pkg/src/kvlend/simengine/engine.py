"""Deterministic discrete-event simulation of a multi-instance serving cluster.

Every instance runs continuous batching: at each decode step it admits queued
requests that fit, grows every running request by one token and retires the
finished ones. Step durations come from the performance model. Under the
``infinite`` policy a gManager plans KV block moves from heartbeat reports and
rManagers carry them out over a simulated network.

Policies:

``static``
    Requests that can never fit on one instance are rejected at dispatch.
    When memory runs out the youngest other request is preempted.
``strawman``
    When a request outgrows its instance, the new blocks go to the instance
    with the most free space. Nothing is planned ahead.
``infinite``
    Same overflow fallback as ``strawman``, plus periodic greedy planning
    that lends debtor blocks to creditors before memory runs out.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..distattention import (
    AttentionConfig,
    KVSegment,
    aggregate_partials,
    compute_micro_attention,
    naive_attention,
)
from ..config import POLICIES, ClusterConfig
from ..controlplane import (
    DataTransfer,
    GManager,
    Heartbeat,
    InstanceStatus,
    MoveKvCache,
    RManager,
    SyncRequest,
    TryMove,
    TryMoveResp,
    deliver_blocks,
    message_to_line,
)
from ..errors import ConfigError
from ..events import EventQueue, Network
from ..perfmodel import InstanceLoad, attention_time, layer_time
from .metrics import Metrics, StepRecord
from .trace import Request

__all__ = ["Simulation", "run_simulation", "dispatch_request", "remote_attention_exchange",
           "migration_penalty", "move_steps"]

GMANAGER = "g"


def dispatch_request(free_blocks: Sequence[int]) -> int:
    """Index of the instance with the most free blocks; ties go to the lowest index."""
    if not free_blocks:
        raise ConfigError("no instances to dispatch to")
    return max(range(len(free_blocks)), key=lambda i: (free_blocks[i], -i))


def migration_penalty(moved_tokens: int, cap_tokens: int, overflow_penalty: float) -> float:
    """Multiplicative step-time factor for moving ``moved_tokens`` in one step."""
    excess = max(0, moved_tokens - cap_tokens)
    return 1.0 + overflow_penalty * excess / cap_tokens


def move_steps(tokens: int, tokens_per_step: int) -> int:
    return -(-tokens // tokens_per_step)


def remote_attention_exchange(local_attn: float, remote_attn: Sequence[float], rtt: Sequence[float]) -> float:
    """Per-layer time the debtor waits beyond its own attention work.

    Each remote instance computes its MicroAttention while the query travels
    there and the partial travels back; the wait is hidden when that finishes
    within the local attention time.
    """
    need = max((r + 2 * t for r, t in zip(remote_attn, rtt)), default=0.0)
    return max(0.0, need - local_attn)


@dataclass
class _Instance:
    idx: int
    rm: RManager
    queue: deque = field(default_factory=deque)
    running: list = field(default_factory=list)  # request ids in admission order
    busy: bool = False
    step_no: int = 0
    # per-step working state
    step_start: float = 0.0
    stepping: list = field(default_factory=list)
    step_moves: list = field(default_factory=list)  # (transfer, blocks) this step


class Simulation:
    def __init__(self, config: ClusterConfig, trace: Sequence[Request], policy: str,
                 *, event_log: Callable[[str], None] | None = None) -> None:
        if policy not in POLICIES:
            raise ConfigError(f"unknown policy {policy!r}; choose from {POLICIES}")
        if not trace:
            raise ConfigError("trace is empty")
        self.cfg = config
        self.policy = policy
        self.model = config.model
        self.bs = config.shape.block_size_tokens
        self.q = EventQueue()
        self.net = Network(self.q, config.controlplane.link_latency)
        cp = config.controlplane
        self.instances = [
            _Instance(i, RManager(i, cap, reservation_timeout=cp.effective_reservation_timeout))
            for i, cap in enumerate(config.capacity_blocks)
        ]
        self.requests: dict[int, Request] = {}
        for r in sorted(trace, key=lambda r: (r.arrival_time, r.req_id)):
            self.requests[r.req_id] = Request(r.req_id, r.arrival_time, r.prompt_tokens,
                                              r.target_output_tokens)
        self.metrics = Metrics(config.num_instances, config.sim.sample_period, policy)
        self._event_log = event_log
        self._unfinished = len(self.requests)
        self._arrivals_pending = 0
        self._rng = np.random.default_rng(config.seed)
        self._epoch = 0
        self.gm: GManager | None = None
        self._rounds = 0
        self._admitted: dict[int, int] = {}
        self._admit_seq = itertools.count()

    # --- bookkeeping helpers --------------------------------------------------

    def _log(self, src, dst, msg) -> None:
        if self._event_log is not None:
            self._event_log(f"{self.q.now:.9f}\t{src}\t{dst}\t{message_to_line(msg)}")

    def _send(self, src, dst, msg) -> None:
        self._log(src, dst, msg)
        self.net.send(src, dst, msg)

    def _blocks_of(self, req_id: int) -> dict[int, int]:
        return {inst.idx: inst.rm.blocks[req_id] for inst in self.instances if req_id in inst.rm.blocks}

    def _free(self) -> list[int]:
        return [inst.rm.free for inst in self.instances]

    def _uncommitted(self) -> list[int]:
        """Free blocks minus what queued requests will claim on admission."""
        out = []
        for inst in self.instances:
            queued = sum(-(-self.requests[r].ctx_tokens // self.bs) for r in inst.queue)
            out.append(inst.rm.free - queued)
        return out

    def _check_instances(self) -> None:
        for inst in self.instances:
            inst.rm.check()

    def _check_request_blocks(self, req: Request) -> None:
        total = sum(self._blocks_of(req.req_id).values())
        want = -(-req.ctx_tokens // self.bs)
        if total != want:
            raise AssertionError(
                f"request {req.req_id}: {total} blocks placed but context needs {want}"
            )

    # --- event loop -------------------------------------------------------------

    def run(self) -> Metrics:
        for r in self.requests.values():
            self.q.push(r.arrival_time, "arrival", r.req_id)
            self._arrivals_pending += 1
        if self.policy == "infinite":
            self.gm = GManager(0, self.cfg.scheduler, self.model,
                               staleness_limit=self.cfg.controlplane.effective_staleness_limit)
            n = self.cfg.num_instances
            period = self.cfg.controlplane.heartbeat_period
            for inst in self.instances:
                # stagger heartbeats deterministically
                self.q.push(period * (inst.idx + 1) / n, "heartbeat", inst.idx)
            self.q.push(self.cfg.scheduler.planning_period, "schedule")
            if self.cfg.controlplane.failover_at is not None:
                self.q.push(self.cfg.controlplane.failover_at, "failover")
        self.q.push(self.cfg.sim.sample_period, "sample")

        handlers = {
            "arrival": self._on_arrival,
            "step_end": self._on_step_end,
            "heartbeat": self._on_heartbeat,
            "schedule": self._on_schedule,
            "deliver": self._on_deliver,
            "failover": self._on_failover,
            "sample": self._on_sample,
            "wake": self._on_wake,
        }
        while self.q:
            ev = self.q.pop()
            if ev.time > self.cfg.sim.max_time:
                break
            handlers[ev.kind](ev.payload)
            if self._unfinished == 0 or self._deadlocked():
                break
        self._finish()
        return self.metrics

    def _deadlocked(self) -> bool:
        return (
            self._arrivals_pending == 0
            and not any(inst.busy for inst in self.instances)
            and not any(ev.kind in ("deliver", "wake") for ev in self.q._heap)
        )

    def _finish(self) -> None:
        end = self.q.now
        for r in self.requests.values():
            if r.state in ("queued", "running"):
                r.stalled = True
        for inst in self.instances:
            self.metrics.move_outcomes.update(o.value for _, o in inst.rm.outcomes)
        self.metrics.finalize(end, self.requests.values(), self._utilisation())

    def _utilisation(self) -> list[float]:
        return [inst.rm.used / inst.rm.capacity for inst in self.instances]

    # --- arrivals and admission -----------------------------------------------

    def _on_arrival(self, req_id: int) -> None:
        self._arrivals_pending -= 1
        req = self.requests[req_id]
        need = -(-req.total_tokens // self.bs)
        if self.policy == "static" and need > max(self.cfg.capacity_blocks):
            req.state = "rejected"
            self._unfinished -= 1
            return
        target = dispatch_request(self._uncommitted())
        req.home = target
        inst = self.instances[target]
        inst.queue.append(req_id)
        if not inst.busy:
            self._start_step(inst)

    def _place_overflow(self, req_id: int, n: int, exclude: int) -> int:
        """Put ``n`` blocks of ``req_id`` wherever there is most room. Returns blocks placed."""
        placed = 0
        while placed < n:
            free = self._free()
            free[exclude] = -1
            host = dispatch_request(free)
            if free[host] <= 0:
                break
            k = min(n - placed, free[host])
            self.instances[host].rm.allocate(req_id, k)
            placed += k
        return placed

    def _admit(self, inst: _Instance) -> float:
        """Admit queued requests in FIFO order; returns prefill time spent."""
        prefill = 0.0
        while inst.queue and len(inst.running) < self.cfg.sim.max_batch:
            req = self.requests[inst.queue[0]]
            need = -(-req.ctx_tokens // self.bs)
            rm = inst.rm
            if need <= rm.free:
                rm.add_request(req.req_id, need)
            elif (self.policy != "static" and not inst.running and rm.free >= 1
                  and sum(self._free()) >= need):
                # an oversized request starts on an idle instance and spills over
                local = rm.free
                rm.add_request(req.req_id, local)
                self._place_overflow(req.req_id, need - local, inst.idx)
            else:
                break
            inst.queue.popleft()
            self._admitted[req.req_id] = next(self._admit_seq)
            req.state = "running"
            req.home = inst.idx
            inst.running.append(req.req_id)
            prefill += req.ctx_tokens * self.cfg.sim.prefill_time_per_token
        return prefill

    def _preempt_one(self, inst: _Instance, keep: int) -> bool:
        """Evict the youngest running request other than ``keep`` back to its queue.

        Local requests go first. Policies that spill over may then evict from
        anywhere in the cluster, since any freed block is usable.
        """
        victim = next((r for r in reversed(inst.running) if r != keep), None)
        owner = inst
        if victim is None and self.policy != "static":
            cands = [(self._admitted[r], r, other) for other in self.instances
                     for r in other.running if r != keep]
            if cands:
                _, victim, owner = max(cands, key=lambda c: c[0])
        if victim is None:
            return False
        self._release(victim)
        owner.running.remove(victim)
        req = self.requests[victim]
        req.state = "queued"
        req.preemptions += 1
        owner.queue.appendleft(victim)
        self.metrics.preemptions += 1
        if owner is not inst and not owner.busy:
            self.q.push(self.q.now, "wake", owner.idx)
        return True

    def _grow(self, inst: _Instance, req: Request) -> bool:
        """Make room for one more token of ``req``; False means it stalls this step."""
        have = sum(self._blocks_of(req.req_id).values())
        if have * self.bs > req.ctx_tokens:
            return True
        while True:
            if inst.rm.free >= 1:
                inst.rm.allocate(req.req_id, 1)
                return True
            if self.policy != "static" and self._place_overflow(req.req_id, 1, inst.idx):
                return True
            if not self._preempt_one(inst, req.req_id):
                return False

    # --- decode steps -------------------------------------------------------------

    def _start_step(self, inst: _Instance) -> None:
        now = self.q.now
        prefill = self._admit(inst)
        stepping = []
        for rid in list(inst.running):
            if rid not in inst.running:  # preempted while growing another request
                continue
            req = self.requests[rid]
            if self._grow(inst, req):
                stepping.append(rid)
                req.stalled = False
            else:
                req.stalled = True
        # a preemption may have evicted a request we already grew
        stepping = [rid for rid in stepping if rid in inst.running]
        moves = self._plan_chunk(inst)
        if not stepping and not moves:
            inst.busy = False
            return
        compute = self._step_compute_time(inst, stepping)
        moved_tokens = sum(tokens for _, _, tokens in moves)
        m = self.cfg.migration
        factor = migration_penalty(moved_tokens, m.cap_tokens, m.overflow_penalty) if m.charge_transfer else 1.0
        duration = compute * factor + prefill
        inst.busy = True
        inst.step_start = now
        inst.stepping = stepping
        inst.step_moves = moves
        inst.step_no += 1
        self.metrics.record_step(StepRecord(
            inst.idx, inst.step_no, now, duration, compute, len(stepping), moved_tokens, factor
        ))
        self.q.push(now + duration, "step_end", inst.idx)

    def _plan_chunk(self, inst: _Instance) -> list:
        """Assign this step's migration budget to active outgoing transfers, FIFO."""
        budget = self.cfg.migration.tokens_per_step
        out = []
        for t in inst.rm.active_transfers():
            if budget <= 0:
                break
            remaining_tokens = (t.num_blocks - t.moved_blocks) * self.bs - t.carry_tokens
            tokens = min(budget, remaining_tokens)
            budget -= tokens
            blocks = (t.carry_tokens + tokens) // self.bs
            out.append((t, blocks, tokens))
        return out

    def _step_compute_time(self, inst: _Instance, stepping: list[int]) -> float:
        shape, f, g = self.model.shape, self.model.f, self.model.g
        bs = self.bs
        ctx, home_tokens = [], 0
        remote_by_host: dict[int, list[int]] = {}
        for rid in stepping:
            req = self.requests[rid]
            c = req.ctx_tokens + 1  # the token being generated attends to itself too
            ctx.append(c)
            remote = 0
            for host, n in self._blocks_of(rid).items():
                if host != inst.idx:
                    tok = min(n * bs, c - remote)
                    remote += tok
                    remote_by_host.setdefault(host, []).append(tok)
            home_tokens += c - remote
        hosted = sum(n for rid, n in inst.rm.blocks.items() if rid not in inst.rm.homed) * bs
        if not ctx:
            # only migrating: pay for the hosted attention work alone
            return shape.n_layers * attention_time(hosted, hosted, shape, g) or 1e-6
        load = InstanceLoad(len(ctx), tuple(ctx))
        total = load.total_ctx
        local_attn = attention_time(home_tokens + hosted, total, shape, g)
        t_layer = layer_time(load, shape, f, g) - attention_time(total, total, shape, g) + local_attn
        if remote_by_host:
            cp = self.cfg.controlplane
            hosts = sorted(remote_by_host)
            remote_attn = [attention_time(sum(remote_by_host[h]), total, shape, g) for h in hosts]
            rtt = [cp.link_latency + cp.query_bytes * len(remote_by_host[h]) / cp.link_bandwidth
                   for h in hosts]
            t_layer += remote_attention_exchange(local_attn, remote_attn, rtt)
        return shape.n_layers * t_layer

    def _on_step_end(self, idx: int) -> None:
        inst = self.instances[idx]
        now = self.q.now
        for transfer, blocks, tokens in inst.step_moves:
            if transfer.move_id not in inst.rm.transfers:
                continue  # cancelled mid-step (request finished)
            dst = self.instances[transfer.dst_inst].rm
            transfer.carry_tokens += tokens - blocks * self.bs
            if blocks:
                moved = deliver_blocks(inst.rm, dst, transfer, blocks, now)
                self.metrics.moved_blocks += moved
                self._log(idx, transfer.dst_inst, DataTransfer(
                    transfer.req_id, moved, idx, transfer.dst_inst, transfer.reservation_id or 0))
        generated = 0
        for rid in inst.stepping:
            if rid not in inst.running:
                continue
            req = self.requests[rid]
            req.generated_tokens += 1
            generated += 1
            if req.generated_tokens >= req.target_output_tokens:
                self._complete(inst, req, now)
            elif self.cfg.sim.check_invariants:
                self._check_request_blocks(req)
        self.metrics.record_tokens(idx, now, generated)
        if self.cfg.sim.check_invariants:
            self._check_instances()
        inst.busy = False
        self._start_step(inst)

    def _on_wake(self, idx: int) -> None:
        inst = self.instances[idx]
        if not inst.busy:
            self._start_step(inst)

    def _release(self, req_id: int) -> None:
        for other in self.instances:
            if req_id in other.rm.blocks or any(t.req_id == req_id for t in other.rm.transfers.values()):
                other.rm.drop_request(req_id)
            for rid in [r for r, res in other.rm.reservations.items() if res.req_id == req_id]:
                del other.rm.reservations[rid]

    def _complete(self, inst: _Instance, req: Request, now: float) -> None:
        self._release(req.req_id)
        inst.running.remove(req.req_id)
        req.state = "completed"
        req.completed_at = now
        self._unfinished -= 1
        self._wake_idle()

    def _wake_idle(self) -> None:
        for other in self.instances:
            if not other.busy and (other.queue or other.running):
                self._start_step(other)

    # --- control plane ------------------------------------------------------------

    def _status(self, inst: _Instance) -> InstanceStatus:
        rm = inst.rm
        queued = sum(-(-self.requests[r].ctx_tokens // self.bs) for r in inst.queue)
        return InstanceStatus(rm.capacity, rm.used, rm.reserved, len(inst.running), len(inst.queue), queued)

    def _on_heartbeat(self, idx: int) -> None:
        inst = self.instances[idx]
        self._send(idx, GMANAGER, inst.rm.heartbeat(self._status(inst)))
        if self._unfinished:
            self.q.push(self.q.now + self.cfg.controlplane.heartbeat_period, "heartbeat", idx)

    def _on_schedule(self, _=None) -> None:
        now = self.q.now
        pending = sum(len(i.queue) for i in self.instances)
        for src, msg in self.gm.plan_round(now, pending=pending):
            self._send(GMANAGER, src, msg)
            self.metrics.directives += 1
        self._rounds += 1
        every = self.cfg.sim.attention_check_every
        if every and self._rounds % every == 0:
            self._attention_spot_check()
        if self._unfinished:
            self.q.push(now + self.cfg.scheduler.planning_period, "schedule")

    def _on_failover(self, _=None) -> None:
        self._epoch += 1
        self.gm = GManager(self._epoch, self.cfg.scheduler, self.model,
                           staleness_limit=self.cfg.controlplane.effective_staleness_limit)
        self.metrics.failovers += 1
        for idx, msg in self.gm.start(range(self.cfg.num_instances)):
            self._send(GMANAGER, idx, msg)

    def _on_deliver(self, payload) -> None:
        src, dst, msg = payload
        now = self.q.now
        if dst == GMANAGER:
            if isinstance(msg, Heartbeat) and self.gm is not None:
                for idx, reply in self.gm.on_heartbeat(msg, now):
                    self._send(GMANAGER, idx, reply)
            return
        inst = self.instances[dst]
        rm = inst.rm
        if isinstance(msg, SyncRequest):
            rm.on_sync_request(msg)
            self._send(dst, GMANAGER, rm.heartbeat(self._status(inst)))
        elif isinstance(msg, MoveKvCache):
            try_msg = rm.on_move_kvcache(msg, now)
            if try_msg is not None:
                self._send(dst, msg.dst_inst, try_msg)
        elif isinstance(msg, TryMove):
            self._send(dst, msg.src_inst, rm.on_try_move(msg, now))
        elif isinstance(msg, TryMoveResp):
            rm.on_try_move_resp(msg)
            if msg.accepted and not inst.busy and (inst.running or inst.queue or rm.active_transfers()):
                self._start_step(inst)
        if self.cfg.sim.check_invariants:
            self._check_instances()

    # --- sampling and checks -------------------------------------------------

    def _on_sample(self, _=None) -> None:
        self.metrics.sample(self.q.now, self._utilisation(), [len(i.running) for i in self.instances])
        if self._unfinished:
            self.q.push(self.q.now + self.cfg.sim.sample_period, "sample")

    def _attention_spot_check(self) -> None:
        """Run real blockwise attention laid out like one live request and compare."""
        live = sorted(rid for inst in self.instances for rid in inst.running)
        if not live:
            return
        rid = live[int(self._rng.integers(len(live)))]
        placement = self._blocks_of(rid)
        home = self.requests[rid].home
        order = [home] + sorted(h for h in placement if h != home)
        counts = [placement.get(h, 0) for h in order]
        counts = [c for c in counts if c > 0]
        # scale to a small tensor while keeping every segment non-empty
        seq = sum(counts)
        scale = min(1.0, 256 / seq)
        lens = [max(1, int(round(c * scale))) for c in counts]
        head_dim = 16
        cfg = AttentionConfig(head_dim)
        keys = self._rng.normal(size=(sum(lens), head_dim))
        values = self._rng.normal(size=(sum(lens), head_dim))
        q = self._rng.normal(size=head_dim)
        bounds = np.cumsum([0] + lens)
        parts = [compute_micro_attention(q, KVSegment(keys[a:b], values[a:b]), cfg)
                 for a, b in zip(bounds, bounds[1:])]
        got = aggregate_partials(parts)
        want = naive_attention(q, KVSegment(keys, values), cfg)
        err = float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-300))
        self.metrics.attention_checks += 1
        self.metrics.attention_max_err = max(self.metrics.attention_max_err, err)
        if err >= 1e-6:
            raise AssertionError(f"blockwise attention mismatch {err} for request {rid}")


def run_simulation(config: ClusterConfig, trace: Sequence[Request], policy: str,
                   *, event_log: Callable[[str], None] | None = None) -> Metrics:
    return Simulation(config, trace, policy, event_log=event_log).run()
