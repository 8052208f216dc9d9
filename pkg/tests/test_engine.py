from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, Phase, given, settings
from hypothesis import strategies as st

from kvlend.config import ClusterConfig, ControlPlaneConfig, MigrationConfig, SimConfig
from kvlend.controlplane import MoveKvCache
from kvlend.errors import ConfigError
from kvlend.scheduler import SchedulerConfig
from kvlend.simengine.engine import (
    Simulation,
    dispatch_request,
    migration_penalty,
    move_steps,
    remote_attention_exchange,
    run_simulation,
)
from kvlend.simengine.trace import Request

POLICIES = ("infinite", "strawman", "static")


def small_cfg(caps=(400, 400), **sections):
    cfg = ClusterConfig(capacity_blocks=caps)
    return cfg.with_(**{k: replace(getattr(cfg, k), **v) for k, v in sections.items()})


def stress_scenario(seed):
    """Random trace with at least one request larger than half an instance."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    cap = int(rng.integers(100, 400))
    reqs = []
    nlong = int(rng.integers(1, 3))
    for i in range(nlong):
        total = int(rng.integers(cap * 16 // 2 + 16, int(cap * 16 * 1.3)))
        out = int(rng.integers(50, 400))
        reqs.append(Request(i, float(rng.uniform(0, 0.05)), total - out, out))
    t = 0.0
    for j in range(int(rng.integers(20, 120))):
        t += float(rng.exponential(1 / float(rng.choice([50, 200, 800]))))
        reqs.append(Request(nlong + j, round(t, 3), int(rng.integers(20, 400)), int(rng.integers(5, 100))))
    cfg = small_cfg((cap,) * n, sim={"max_batch": 64}).with_(seed=seed)
    return cfg, reqs


# --- pure helpers -------------------------------------------------------------


def test_dispatch_examples():
    assert dispatch_request([10, 50]) == 1
    assert dispatch_request([10, 10]) == 0
    assert dispatch_request([-3, -3, -1]) == 2
    with pytest.raises(ConfigError):
        dispatch_request([])


def test_migration_penalty_and_move_steps():
    assert migration_penalty(0, 16, 0.086) == 1.0
    assert migration_penalty(16, 16, 0.086) == 1.0
    assert migration_penalty(32, 16, 0.086) == pytest.approx(1.086, abs=1e-15)
    assert move_steps(64, 16) == 4
    assert move_steps(65, 16) == 5


def test_remote_exchange_cases():
    assert remote_attention_exchange(1e-3, [], []) == 0.0
    assert remote_attention_exchange(1e-3, [4e-4], [1e-5]) == 0.0
    local = 1e-4
    assert remote_attention_exchange(local, [2 * local, 0.5 * local], [1e-6, 1e-6]) == pytest.approx(
        2 * local + 2e-6 - local, rel=1e-15)


@pytest.mark.parametrize("remote_share", [0.1, 0.25, 0.4, 0.45])
@pytest.mark.parametrize("ctx", [4096, 9600, 60_000])
def test_retained_majority_hides_remote_attention(remote_share, ctx):
    # what the engine charges for one request split between home and one host
    cfg = ClusterConfig()
    shape, g, cp = cfg.shape, cfg.g, cfg.controlplane
    remote = int(ctx * remote_share)
    a = shape.attn_work_per_ctx_token
    local_attn = (ctx - remote) * a / g(ctx)
    remote_attn = remote * a / g(ctx)
    rtt = cp.link_latency + cp.query_bytes / cp.link_bandwidth
    assert remote_attention_exchange(local_attn, [remote_attn], [rtt]) == 0.0


# --- whole runs -------------------------------------------------------------------


@pytest.mark.parametrize("policy", POLICIES)
def test_single_request_closed_form(policy):
    cfg = small_cfg((64,))
    prompt, out = 100, 40
    m = run_simulation(cfg, [Request(0, 0.25, prompt, out)], policy)
    assert len(m.steps) == out and m.completed == 1
    shape, f, g = cfg.shape, cfg.f, cfg.g
    for j, s in enumerate(m.steps):
        c = prompt + j + 1
        want = shape.n_layers * (shape.workload_per_token / f(1) + c * shape.attn_work_per_ctx_token / g(c))
        assert s.duration == pytest.approx(want, rel=1e-12)
    assert m.latencies[0] == pytest.approx(sum(s.duration for s in m.steps), rel=1e-12)
    assert m.completed_tokens == out


def test_static_rejects_only_the_oversized_request():
    cfg = small_cfg((50, 50))
    trace = [Request(0, 0.0, 100, 10), Request(1, 0.001, 1200, 10), Request(2, 0.002, 100, 10)]
    m = run_simulation(cfg, trace, "static")
    assert m.rejected == 1 and m.completed == 2 and 1 not in m.latencies
    spill = run_simulation(cfg, trace, "strawman")
    assert spill.rejected == 0 and spill.completed == 3


def test_request_beyond_cluster_memory_stalls_and_is_flagged():
    cfg = small_cfg((50, 50))
    trace = [Request(0, 0.0, 100, 10), Request(1, 0.001, 2000, 10)]
    m = run_simulation(cfg, trace, "strawman")
    assert m.completed == 1 and m.stalled == 1 and m.rejected == 0


def test_dispatch_matches_free_block_replay():
    rng = np.random.default_rng(4)
    caps = (50, 80, 65, 90)
    trace = []
    for i in range(100):
        # prompts leave room in their last block, so no block grows during dispatch
        prompt = 16 * int(rng.integers(0, 3)) + int(rng.integers(1, 10))
        trace.append(Request(i, round(i * 1e-5, 5), prompt, 20))
    sim = Simulation(small_cfg(caps), trace, "static")
    sim.run()
    free = list(caps)
    for r in trace:
        pick = 0
        for i in range(1, len(free)):
            if free[i] > free[pick]:
                pick = i
        assert sim.requests[r.req_id].home == pick, r.req_id
        free[pick] -= -(-r.prompt_tokens // 16)


def injected_move(tokens_per_step, blocks=4):
    cfg = small_cfg(
        (200, 200),
        scheduler={"planning_period": 1e6},
        migration={"tokens_per_step": tokens_per_step},
    )
    sim = Simulation(cfg, [Request(0, 0.0, 1000, 200)], "infinite")
    sim.q.push(0.01, "deliver", ("g", 0, MoveKvCache(0, blocks, 1, 0)))
    m = sim.run()
    return sim, m


def test_64_token_move_takes_4_steps_at_cap():
    sim, m = injected_move(16)
    moving = [s for s in m.steps if s.moved_tokens]
    assert [s.moved_tokens for s in moving] == [16] * 4
    assert [s.step_no for s in moving] == list(range(moving[0].step_no, moving[0].step_no + 4))
    assert m.moved_blocks == 4 and m.move_outcomes["completed"] == 1
    assert all(s.duration == s.compute for s in m.steps)


def test_double_rate_move_halves_steps_and_pays_penalty():
    _, m = injected_move(32)
    moving = [s for s in m.steps if s.moved_tokens]
    assert [s.moved_tokens for s in moving] == [32, 32]
    for s in moving:
        assert s.duration == s.compute * (1 + 0.086)
    assert all(s.duration == s.compute for s in m.steps if not s.moved_tokens)


def test_failover_and_spot_checks_run_clean():
    from kvlend.scenarios import four_instance_scenario

    cfg, trace = four_instance_scenario(short_count=300, long_output=600, headroom_output=300)
    cfg = cfg.with_(controlplane=replace(cfg.controlplane, failover_at=0.7),
                    sim=replace(cfg.sim, attention_check_every=1))
    m = run_simulation(cfg, trace, "infinite")
    assert m.failovers == 1 and m.completed == len(trace)
    assert m.attention_checks > 0 and m.attention_max_err < 1e-6


@settings(max_examples=8, deadline=None, suppress_health_check=list(HealthCheck))
@given(st.integers(0, 10**6), st.sampled_from(POLICIES))
def test_random_runs_keep_accounting(seed, policy):
    cfg, trace = stress_scenario(seed)
    # invariants (capacity, per-request block totals) are asserted inside the run
    m = run_simulation(cfg, trace, policy)
    assert m.completed + m.rejected + m.stalled == len(trace)
    if policy != "static":
        assert m.rejected == 0
    cluster, per = m.windowed_tokens()
    assert np.array_equal(cluster, per.sum(axis=0))
    assert cluster.sum() == m.generated_tokens


def test_determinism_in_process():
    cfg, trace = stress_scenario(7)
    logs = [[], []]
    a = run_simulation(cfg, trace, "infinite", event_log=logs[0].append)
    b = run_simulation(cfg, trace, "infinite", event_log=logs[1].append)
    assert a.dumps() == b.dumps() and a.step_rows() == b.step_rows() and logs[0] == logs[1]


def test_bad_inputs():
    with pytest.raises(ConfigError):
        Simulation(ClusterConfig(), [], "static")
    with pytest.raises(ConfigError):
        Simulation(ClusterConfig(), [Request(0, 0, 1, 1)], "greedy")
    with pytest.raises(ConfigError):
        ClusterConfig(capacity_blocks=(0,))


def test_spilling_policies_never_reject_and_finish_what_static_finishes():
    for seed in range(6):
        cfg, trace = stress_scenario(seed)
        runs = {p: run_simulation(cfg, trace, p) for p in POLICIES}
        assert runs["infinite"].completed_tokens >= runs["static"].completed_tokens
        assert runs["infinite"].completed == runs["strawman"].completed == len(trace)


@pytest.mark.xfail(strict=True, reason="static gains throughput by rejecting the long requests, "
                                       "which shortens its makespan; see the decisions ledger")
@settings(max_examples=20, deadline=None, derandomize=True, phases=[Phase.generate],
          suppress_health_check=list(HealthCheck))
@given(st.integers(0, 10**6))
def test_policy_dominance_on_any_stress_trace(seed):
    cfg, trace = stress_scenario(seed)
    th = {p: run_simulation(cfg, trace, p).throughput for p in POLICIES}
    assert th["infinite"] >= th["strawman"] >= th["static"]
