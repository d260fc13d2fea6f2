"""Per-round client budgets from configuration: uniform ranges, binary
{min,max} pairs, or timestamped trace replay on a simulated wall clock.

Trace files are UTF-8 text: optional ``#`` header lines (``# units: Mb/s``),
then ``time_s,value`` rows with strictly increasing timestamps.  Lookup is a
step function holding the last sample at or before the query time.  Memory
values are gigabytes, bandwidth values megabits per second.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costs import Budget, CostParams, feasible
from .subnets import SearchSpace, SubnetSpec

BYTES_PER_GB = 1e9
BITS_PER_MBPS = 1e6

RESOURCES = ("memory", "bandwidth")


@dataclass(frozen=True)
class RangeLimit:
    """Uniform draw in [min, max], or equiprobable {min, max} when binary."""

    min: float
    max: float
    binary: bool = False

    def __post_init__(self):
        if self.min < 0 or self.max < self.min:
            raise ValueError("need 0 <= min <= max")


@dataclass(frozen=True)
class TraceLimit:
    """Replay from one or more log files (comma separated, assigned to
    clients round-robin).  phase_offset_s shifts client i by i*offset."""

    log_path: str
    phase_offset_s: float = 0.0


@dataclass(frozen=True)
class LimitSpec:
    memory: RangeLimit | TraceLimit
    bandwidth: RangeLimit | TraceLimit


@dataclass(frozen=True, eq=False)
class BandwidthTrace:
    times: np.ndarray
    values: np.ndarray
    units: str | None = None


def load_trace(path: str) -> BandwidthTrace:
    """Parse one trace file, validating monotone timestamps line by line."""
    times: list[float] = []
    values: list[float] = []
    units = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                _, _, tail = line.partition("units:")
                if tail:
                    units = tail.strip()
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'time_s,value'")
            try:
                t, v = float(parts[0]), float(parts[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
            if not (np.isfinite(t) and np.isfinite(v)) or v < 0:
                raise ValueError(f"{path}:{lineno}: values must be finite and nonnegative")
            if times and t <= times[-1]:
                raise ValueError(f"{path}:{lineno}: timestamps must be strictly increasing")
            times.append(t)
            values.append(v)
    if not times:
        raise ValueError(f"{path}: trace file has no samples")
    return BandwidthTrace(np.asarray(times), np.asarray(values), units)


def value_at(trace: BandwidthTrace, t: float) -> float:
    """Step-function lookup: last sample with time <= t, first value before
    the trace starts."""
    idx = int(np.searchsorted(trace.times, t, side="right")) - 1
    return float(trace.values[max(idx, 0)])


def load_limit_traces(limits: LimitSpec) -> dict[str, list[BandwidthTrace]]:
    """Preload every trace file referenced by the limit spec."""
    table: dict[str, list[BandwidthTrace]] = {}
    for name in RESOURCES:
        limit = getattr(limits, name)
        if isinstance(limit, TraceLimit):
            table[name] = [load_trace(p.strip()) for p in limit.log_path.split(",")]
    return table


def _trace_value(
    limit: TraceLimit, traces: list[BandwidthTrace] | None, client_id: int, t: float
) -> float:
    if not traces:
        raise ValueError(f"no traces loaded for {limit.log_path}")
    trace = traces[client_id % len(traces)]
    return value_at(trace, t + limit.phase_offset_s * client_id)


def _sample_limit(
    limit: RangeLimit | TraceLimit,
    traces: list[BandwidthTrace] | None,
    client_id: int,
    t: float,
    rng: np.random.Generator,
) -> float:
    if isinstance(limit, RangeLimit):
        if limit.binary:
            return limit.min if rng.random() < 0.5 else limit.max
        return float(rng.uniform(limit.min, limit.max))
    return _trace_value(limit, traces, client_id, t)


def budget_at(
    limits: LimitSpec,
    traces: dict[str, list[BandwidthTrace]],
    client_id: int,
    t: float,
    rng: np.random.Generator,
) -> Budget:
    """Sample one client's budget for the round starting at simulated time t.
    Memory is drawn first, then bandwidth (fixed order for replayability)."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    mem_gb = _sample_limit(limits.memory, traces.get("memory"), client_id, t, rng)
    bw_mbps = _sample_limit(limits.bandwidth, traces.get("bandwidth"), client_id, t, rng)
    return Budget(mem_gb * BYTES_PER_GB, bw_mbps * BITS_PER_MBPS)


def reread_traces(
    limits: LimitSpec,
    traces: dict[str, list[BandwidthTrace]],
    client_id: int,
    t: float,
    assigned: Budget,
) -> Budget:
    """Budget at round completion: trace-backed resources are re-read at the
    completion time, range-backed ones keep their assignment-time draw."""
    mem = assigned.memory_bytes
    bw = assigned.bandwidth_bits_per_s
    if isinstance(limits.memory, TraceLimit):
        mem = _trace_value(limits.memory, traces.get("memory"), client_id, t) * BYTES_PER_GB
    if isinstance(limits.bandwidth, TraceLimit):
        bw = _trace_value(limits.bandwidth, traces.get("bandwidth"), client_id, t) * BITS_PER_MBPS
    return Budget(mem, bw)


def check_failure(
    budget_at_assignment: Budget,
    budget_at_completion: Budget,
    space: SearchSpace,
    spec: SubnetSpec,
    batch: int,
    cost: CostParams,
) -> bool:
    """A client round fails when its actual usage exceeds the budget that
    held by completion time: memory cost above the completion-time memory,
    or transfer under the completion-time bandwidth missing the deadline.
    The assignment-time budget is accepted for the record only; feasibility
    then was the search's responsibility.
    """
    del budget_at_assignment
    return not feasible(space, spec, batch, cost, budget_at_completion)


@dataclass
class SimClock:
    """Simulated wall clock; only advances."""

    now_s: float = 0.0

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("clock can only move forward")
        self.now_s += dt
