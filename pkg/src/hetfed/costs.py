"""Analytic resource costs of training a subnet and feasibility against a
per-round (memory, bandwidth) budget.

Memory is affine in parameter count and activation footprint; communication
counts a 32-bit-per-parameter payload both directions.  Feasibility is
boundary inclusive on both axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .subnets import SearchSpace, SubnetSpec, slice_map

PAYLOAD_BITS_PER_PARAM = 32.0


@dataclass(frozen=True)
class CostParams:
    bytes_per_param: float = 8.0
    train_overhead_factor: float = 3.0
    bytes_per_activation: float = 8.0
    comm_deadline_s: float = 1.0
    protocol_overhead_factor: float = 1.0
    # simulated-clock proxy: seconds per parameter per training step
    train_step_s_per_param: float = 1e-8

    def __post_init__(self):
        for name in (
            "bytes_per_param",
            "train_overhead_factor",
            "bytes_per_activation",
            "comm_deadline_s",
            "train_step_s_per_param",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.protocol_overhead_factor < 1.0:
            raise ValueError("protocol_overhead_factor must be >= 1")


@dataclass(frozen=True)
class Budget:
    """One client's sampled constraints for one round."""

    memory_bytes: float
    bandwidth_bits_per_s: float

    def __post_init__(self):
        for name in ("memory_bytes", "bandwidth_bits_per_s"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative")


def payload_bits(space: SearchSpace, spec: SubnetSpec) -> float:
    """One-way transfer size of the subnet's parameters."""
    plan = slice_map(space, spec)
    return PAYLOAD_BITS_PER_PARAM * sum(e.rows * e.cols + e.cols for e in plan)


def memory_cost(space: SearchSpace, spec: SubnetSpec, batch: int, cost: CostParams) -> float:
    """Estimated peak training memory in bytes.

    Parameters are counted with the train overhead factor (weights, grads,
    optimizer moments); activations cover one batch over the input plus
    every kept layer's output.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    plan = slice_map(space, spec)
    params = sum(e.rows * e.cols + e.cols for e in plan)
    act_units = space.in_dim + sum(e.cols for e in plan)
    return (
        cost.train_overhead_factor * cost.bytes_per_param * params
        + cost.bytes_per_activation * batch * act_units
    )


def comm_time(space: SearchSpace, spec: SubnetSpec, cost: CostParams, budget: Budget) -> float:
    """Round-trip (download + upload) transfer seconds; infinite when the
    budget has no bandwidth."""
    if budget.bandwidth_bits_per_s <= 0.0:
        return math.inf
    bits = 2.0 * cost.protocol_overhead_factor * payload_bits(space, spec)
    return bits / budget.bandwidth_bits_per_s


def feasible(
    space: SearchSpace, spec: SubnetSpec, batch: int, cost: CostParams, budget: Budget
) -> bool:
    return (
        memory_cost(space, spec, batch, cost) <= budget.memory_bytes
        and comm_time(space, spec, cost, budget) <= cost.comm_deadline_s
    )
