"""Ready-made cluster scenarios used by the CLI, tests and examples."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import ClusterConfig, SimConfig
from .simengine.trace import Request


def four_instance_scenario(
    *,
    capacity_blocks: int = 2048,
    long_prompt: int = 30_000,
    long_output: int = 2_500,
    headroom_prompt: int = 12_000,
    headroom_output: int = 1_200,
    short_count: int = 2000,
    short_rate: float = 400.0,
    short_prompt: tuple[int, int] = (100, 400),
    short_output: tuple[int, int] = (20, 100),
    max_batch: int = 64,
    seed: int = 0,
) -> tuple[ClusterConfig, list[Request]]:
    """Four instances: one saturated by a long request, two taking short
    traffic, one holding a long request with room to spare.

    The two long requests arrive first so dispatch places them on instances 0
    and 1; the short stream then lands wherever memory is freest.
    """
    rng = np.random.default_rng(seed)
    reqs = [
        Request(0, 0.0, long_prompt, long_output),
        Request(1, 0.001, headroom_prompt, headroom_output),
    ]
    gaps = rng.exponential(1.0 / short_rate, short_count)
    t = 0.002 + np.cumsum(gaps)
    prompts = rng.integers(short_prompt[0], short_prompt[1] + 1, short_count)
    outputs = rng.integers(short_output[0], short_output[1] + 1, short_count)
    for i in range(short_count):
        reqs.append(Request(i + 2, round(float(t[i]) * 1000.0, 3) / 1000.0,
                            int(prompts[i]), int(outputs[i])))
    cfg = ClusterConfig(capacity_blocks=(capacity_blocks,) * 4, seed=seed)
    cfg = cfg.with_(sim=replace(SimConfig(), max_batch=max_batch))
    return cfg, reqs
