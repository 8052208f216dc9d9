"""``kvlend`` command line.

Exit status: 0 on success, 1 when a verification finds a failure, 2 on bad
input (unreadable or invalid files, bad arguments).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import POLICIES, ClusterConfig, _build
from .errors import KvlendError
from .perfmodel import ModelShape, PerfCurve, PerfModel, Role, default_perf_model
from .scheduler import InstanceSnapshot, RequestSnapshot, SchedulerConfig, make_plan
from .simengine.engine import run_simulation
from .simengine.metrics import Metrics
from .simengine.trace import generate_trace, load_trace_spec, read_trace, write_trace
from .verify import verify_attention

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
SNAPSHOT_SCHEMA = 1


class InputError(KvlendError):
    pass


# --- snapshot files -----------------------------------------------------------


def load_snapshot(path: str | Path) -> tuple[list[InstanceSnapshot], SchedulerConfig, PerfModel]:
    """Parse a planning snapshot file (JSON, ``schema_version`` 1)."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    if data.get("schema_version") != SNAPSHOT_SCHEMA:
        raise InputError(f"{path}: unsupported schema_version {data.get('schema_version')!r}")
    try:
        cfg = _build(SchedulerConfig, data.get("scheduler", {}), "scheduler")
        shape = _build(ModelShape, data.get("shape", {}), "shape")
        base = default_perf_model(shape)
        model = PerfModel(
            shape,
            PerfCurve(tuple(map(tuple, data["f"]))) if "f" in data else base.f,
            PerfCurve(tuple(map(tuple, data["g"]))) if "g" in data else base.g,
        )
        snaps = []
        for i, inst in enumerate(data["instances"]):
            inst = dict(inst)
            reqs = tuple(RequestSnapshot(**r) for r in inst.pop("requests", ()))
            inst["role_lock"] = Role(inst.get("role_lock", "none"))
            snaps.append(InstanceSnapshot(requests=reqs, **inst))
    except KvlendError as exc:
        raise InputError(f"{path}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: bad snapshot: {exc}") from None
    for s in snaps:
        try:
            s.validate()
        except KvlendError as exc:
            raise InputError(f"{path}: {exc}") from None
    return snaps, cfg, model


def snapshot_to_dict(snaps: Sequence[InstanceSnapshot]) -> dict:
    return {
        "schema_version": SNAPSHOT_SCHEMA,
        "instances": [
            {
                "instance_id": s.instance_id,
                "batch": s.batch,
                "mem_capacity_blocks": s.mem_capacity_blocks,
                "mem_used_blocks": s.mem_used_blocks,
                "role_lock": s.role_lock.value,
                "queue_len": s.queue_len,
                "requests": [
                    {"request_id": r.request_id, "local_blocks": r.local_blocks,
                     "remote_blocks": r.remote_blocks, "total_ctx_tokens": r.total_ctx_tokens}
                    for r in s.requests
                ],
            }
            for s in snaps
        ],
    }


# --- metrics files --------------------------------------------------------------


def format_timeseries(m: Metrics) -> str:
    cluster, per = m.windowed_tokens()
    n = m.num_instances
    head = ["time_s", "cluster_tokens"]
    head += [f"inst{i}_tokens" for i in range(n)]
    head += [f"inst{i}_mem_util" for i in range(n)]
    head += [f"inst{i}_batch" for i in range(n)]
    rows = ["\t".join(head)]
    samples = m.samples
    for w in range(len(cluster)):
        t = (w + 1) * m.sample_period
        if w < len(samples):
            util, batch = samples[w][1], samples[w][2]
        else:
            util, batch = m.final_utilisation, (0,) * n
        row = [f"{t:.6f}", str(int(cluster[w]))]
        row += [str(int(x)) for x in per[:, w]]
        row += [f"{u:.6f}" for u in util]
        row += [str(b) for b in batch]
        rows.append("\t".join(row))
    return "\n".join(rows) + "\n"


def format_summary(m: Metrics) -> str:
    out = []
    for k, v in m.summary().items():
        if isinstance(v, float):
            v = f"{v:.9g}"
        elif isinstance(v, (list, dict)):
            v = json.dumps(v, sort_keys=True)
        elif v is None:
            v = "-"
        out.append(f"{k}: {v}")
    return "\n".join(out) + "\n"


def format_requests(m: Metrics) -> str:
    rows = ["req_id\tlatency_s"]
    rows += [f"{k}\t{v:.9f}" for k, v in sorted(m.latencies.items())]
    return "\n".join(rows) + "\n"


def format_steps(m: Metrics) -> str:
    rows = ["instance\tstep\tstart_s\tduration_s\tcompute_s\tbatch\tmoved_tokens\tfactor"]
    for s in m.steps:
        rows.append(f"{s.instance}\t{s.step_no}\t{s.start:.9f}\t{s.duration:.12g}\t{s.compute:.12g}"
                    f"\t{s.batch}\t{s.moved_tokens}\t{s.factor:.12g}")
    return "\n".join(rows) + "\n"


# --- subcommands -----------------------------------------------------------------


def cmd_verify_attention(args) -> int:
    report = verify_attention(args.trials, args.max_seq, args.max_partitions, args.seed)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_gen_trace(args) -> int:
    spec = load_trace_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    reqs = generate_trace(spec)
    write_trace(reqs, args.out)
    print(f"wrote {len(reqs)} requests to {args.out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    snaps, cfg, model = load_snapshot(args.snapshot)
    plan = make_plan(snaps, cfg, model)
    print("request_id\tsrc\tdst\tnum_blocks\test_gain_tps")
    for d in plan.directives:
        print(f"{d.request_id}\t{d.src_instance}\t{d.dst_instance}\t{d.num_blocks}\t{d.est_gain:.6f}")
    print(f"cluster_tps_before: {plan.tps_before:.6f}")
    print(f"cluster_tps_after: {plan.tps_after:.6f}")
    print(f"total_gain: {plan.total_gain:.6f}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = ClusterConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    trace = read_trace(args.trace)
    log_lines: list[str] | None = [] if args.event_log else None
    metrics = run_simulation(cfg, trace, args.policy,
                             event_log=log_lines.append if log_lines is not None else None)
    prefix = Path(args.out)
    if prefix.parent != Path(""):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    files = {
        "timeseries.tsv": format_timeseries(metrics),
        "summary.txt": format_summary(metrics),
        "requests.tsv": format_requests(metrics),
        "steps.tsv": format_steps(metrics),
    }
    for suffix, text in files.items():
        Path(f"{prefix}.{suffix}").write_text(text)
    if log_lines is not None:
        Path(args.event_log).write_text("".join(line + "\n" for line in log_lines))
    sys.stdout.write(format_summary(metrics))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvlend", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify-attention", help="randomised partitioned-attention check")
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--max-seq", type=int, default=2048)
    v.add_argument("--max-partitions", type=int, default=64)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify_attention)

    g = sub.add_parser("gen-trace", help="write a synthetic request trace")
    g.add_argument("spec", help="trace spec JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    g.set_defaults(func=cmd_gen_trace)

    pl = sub.add_parser("plan", help="plan block moves for a cluster snapshot")
    pl.add_argument("snapshot")
    pl.set_defaults(func=cmd_plan)

    r = sub.add_parser("run", help="simulate a trace on a cluster")
    r.add_argument("config")
    r.add_argument("trace")
    r.add_argument("--policy", choices=POLICIES, default="infinite")
    r.add_argument("--out", required=True, help="output path prefix")
    r.add_argument("--event-log", default=None, help="write protocol messages here")
    r.add_argument("--seed", type=int, default=None, help="override the config's seed")
    r.set_defaults(func=cmd_run)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    for name in ("trials", "max_seq", "max_partitions"):
        if getattr(args, name, 1) < 1:
            print(f"kvlend: --{name.replace('_', '-')} must be at least 1", file=sys.stderr)
            return EXIT_INPUT
    try:
        return args.func(args)
    except KvlendError as exc:
        print(f"kvlend: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"kvlend: error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
