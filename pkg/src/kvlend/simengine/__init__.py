from .engine import Simulation, dispatch_request, run_simulation
from .metrics import Metrics, StepRecord
from .trace import LENGTH_PRESETS, Request, TraceSpec, generate_trace, read_trace, write_trace

__all__ = [
    "Simulation", "dispatch_request", "run_simulation", "Metrics", "StepRecord",
    "LENGTH_PRESETS", "Request", "TraceSpec", "generate_trace", "read_trace", "write_trace",
]
