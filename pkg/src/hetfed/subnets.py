"""Architecture space over a shared-trunk MLP and the subnets cut from it.

The global model has ``hidden_depth`` hidden layers of ``hidden_width`` units
plus an output layer.  A subnet spec assigns each hidden layer a width ratio
from the discrete ratio set; ratio 0 removes the layer entirely, anything
else keeps the first ``round(ratio * hidden_width)`` units.  Because every
slice is a prefix starting at index 0, any two subnets agree on which global
positions they share, which is what makes element-wise aggregation of
different architectures well defined.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import DenseLayer, MlpModel, init_dense


@dataclass(frozen=True)
class SearchSpace:
    in_dim: int
    hidden_width: int
    hidden_depth: int
    classes: int
    ratios: tuple[float, ...]

    def __post_init__(self):
        for name in ("in_dim", "hidden_width", "hidden_depth", "classes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        r = self.ratios
        if not r or r[-1] != 1.0:
            raise ValueError("ratio set must be nonempty and end with 1")
        if any(not 0.0 <= v <= 1.0 for v in r):
            raise ValueError("ratios must lie in [0, 1]")
        if any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError("ratios must be strictly increasing")
        if r[0] == 0.0 and self.in_dim > self.hidden_width:
            raise ValueError(
                "layer skipping (ratio 0) requires in_dim <= hidden_width "
                "so prefix slices stay in range"
            )

    def layer_dims(self) -> list[tuple[int, int]]:
        """Full (rows, cols) of every global layer, output layer last."""
        dims = [(self.in_dim, self.hidden_width)]
        dims += [(self.hidden_width, self.hidden_width)] * (self.hidden_depth - 1)
        dims.append((self.hidden_width, self.classes))
        return dims


@dataclass(frozen=True)
class SubnetSpec:
    """Per-hidden-layer width ratios; the output layer is always kept full."""

    ratios: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(v) for v in self.ratios))

    def __str__(self) -> str:
        return "[" + ",".join(f"{v:g}" for v in self.ratios) + "]"


@dataclass(frozen=True)
class LayerSlice:
    """Prefix slice of one global layer: the first `rows` input rows and
    first `cols` output columns."""

    layer: int
    rows: int
    cols: int


LayerSliceMap = tuple[LayerSlice, ...]


def validate_spec(space: SearchSpace, spec: SubnetSpec) -> None:
    if len(spec.ratios) != space.hidden_depth:
        raise ValueError(
            f"spec has {len(spec.ratios)} ratios but the space has "
            f"{space.hidden_depth} hidden layers"
        )
    allowed = set(space.ratios)
    for v in spec.ratios:
        if v not in allowed:
            raise ValueError(f"ratio {v} is not in the space's ratio set")


def full_spec(space: SearchSpace) -> SubnetSpec:
    return SubnetSpec((1.0,) * space.hidden_depth)


def smallest_spec(space: SearchSpace) -> SubnetSpec:
    return SubnetSpec((space.ratios[0],) * space.hidden_depth)


def uniform_spec(space: SearchSpace, ratio: float) -> SubnetSpec:
    """Same ratio on every hidden layer (the classic uniform-prune family)."""
    spec = SubnetSpec((float(ratio),) * space.hidden_depth)
    validate_spec(space, spec)
    return spec


def random_spec(space: SearchSpace, rng: np.random.Generator) -> SubnetSpec:
    """Each layer ratio drawn independently and uniformly from the ratio set."""
    idx = rng.integers(0, len(space.ratios), size=space.hidden_depth)
    return SubnetSpec(tuple(space.ratios[int(j)] for j in idx))


def hidden_width(space: SearchSpace, ratio: float) -> int:
    """Materialized width for one ratio: 0 skips, otherwise at least 1 unit.
    Rounding is half-up so widths are platform independent."""
    if ratio == 0.0:
        return 0
    return max(1, int(ratio * space.hidden_width + 0.5))


def slice_map(space: SearchSpace, spec: SubnetSpec) -> LayerSliceMap:
    """Which prefix of each kept global layer the spec addresses.

    Kept layers chain: each one's input rows equal the previous kept layer's
    output columns (the raw input width for the first kept layer).  The
    output layer is always kept with all class columns.
    """
    validate_spec(space, spec)
    entries: list[LayerSlice] = []
    prev = space.in_dim
    for i, v in enumerate(spec.ratios):
        if v == 0.0:
            continue
        width = hidden_width(space, v)
        entries.append(LayerSlice(i, prev, width))
        prev = width
    entries.append(LayerSlice(space.hidden_depth, prev, space.classes))
    return tuple(entries)


def param_count(space: SearchSpace, spec: SubnetSpec) -> int:
    """Total scalar parameters the spec would materialize."""
    return sum(e.rows * e.cols + e.cols for e in slice_map(space, spec))


@dataclass
class ParamStore:
    """The global model's parameters at full dimensions: the single source
    of truth every subnet is sliced from and aggregated back into."""

    layers: list[DenseLayer]


def init_store(space: SearchSpace, rng: np.random.Generator) -> ParamStore:
    return ParamStore([init_dense(rows, cols, rng) for rows, cols in space.layer_dims()])


def validate_store(store: ParamStore, space: SearchSpace) -> None:
    dims = space.layer_dims()
    if len(store.layers) != len(dims):
        raise ValueError("store layer count does not match the space")
    for layer, (rows, cols) in zip(store.layers, dims):
        if layer.weights.shape != (rows, cols):
            raise ValueError(
                f"store layer shape {layer.weights.shape} does not match "
                f"the space's {(rows, cols)}"
            )


def materialize(
    space: SearchSpace, spec: SubnetSpec, store: ParamStore
) -> tuple[MlpModel, LayerSliceMap]:
    """Cut the spec's subnet out of the store as an independent model.

    Weights are copies, never views, so client training cannot touch the
    store.  The returned slice map aligns one-to-one with the model layers
    and is what aggregation uses to scatter trained values back.
    """
    validate_store(store, space)
    plan = slice_map(space, spec)
    layers = [
        DenseLayer(
            store.layers[e.layer].weights[: e.rows, : e.cols].copy(),
            store.layers[e.layer].bias[: e.cols].copy(),
        )
        for e in plan
    ]
    return MlpModel(layers), plan
