"""Element-wise aggregation of heterogeneous client subnets into the global
parameter store.

Every client's slice map addresses a prefix block of each kept global layer,
so "the same position" is well defined across architectures: a position is
simply averaged over the clients whose subnet includes it, weighted by their
(renormalized) data shares.  Positions no client covered keep their previous
store values.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .nn import DenseLayer, MlpModel, flatten_layers
from .subnets import LayerSliceMap, ParamStore, SearchSpace, SubnetSpec, validate_store

_CHECKPOINT_MAGIC = "hetfed-store v1"


@dataclass
class ClientUpdate:
    """One client's trained subnet plus where it lives in the global store."""

    client_id: int
    spec: SubnetSpec
    slice_map: LayerSliceMap
    params: MlpModel
    weight: float

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("update weight must be positive")


@dataclass
class LayerCoverage:
    weights: np.ndarray
    bias: np.ndarray


def _check_update_shapes(update: ClientUpdate, space: SearchSpace) -> None:
    n_global = space.hidden_depth + 1
    if len(update.params.layers) != len(update.slice_map):
        raise ValueError("update params do not align with its slice map")
    dims = space.layer_dims()
    for entry, layer in zip(update.slice_map, update.params.layers):
        if not 0 <= entry.layer < n_global:
            raise ValueError(f"slice refers to global layer {entry.layer} out of range")
        rows, cols = dims[entry.layer]
        if entry.rows > rows or entry.cols > cols:
            raise ValueError("slice exceeds the global layer's dimensions")
        if layer.weights.shape != (entry.rows, entry.cols):
            raise ValueError(
                f"client layer shape {layer.weights.shape} does not match its "
                f"declared slice {(entry.rows, entry.cols)}"
            )


def _accumulate(
    updates: list[ClientUpdate], space: SearchSpace, weighted: bool
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Per global layer: weighted sums and total weights for weights/bias."""
    acc = [
        (np.zeros((r, c)), np.zeros((r, c)), np.zeros(c), np.zeros(c))
        for r, c in space.layer_dims()
    ]
    for update in updates:
        _check_update_shapes(update, space)
        p = update.weight if weighted else 1.0
        for entry, layer in zip(update.slice_map, update.params.layers):
            num_w, den_w, num_b, den_b = acc[entry.layer]
            num_w[: entry.rows, : entry.cols] += p * layer.weights
            den_w[: entry.rows, : entry.cols] += p
            num_b[: entry.cols] += p * layer.bias
            den_b[: entry.cols] += p
    return acc


def scatter_count(updates: list[ClientUpdate], space: SearchSpace) -> list[LayerCoverage]:
    """Total client weight covering each global position."""
    acc = _accumulate(updates, space, weighted=True)
    return [LayerCoverage(den_w, den_b) for _, den_w, _, den_b in acc]


def aggregate(
    store: ParamStore,
    updates: list[ClientUpdate],
    space: SearchSpace,
    weighted: bool = True,
) -> ParamStore:
    """Fold client updates into the store, in place.

    Each covered position becomes the weight-normalized mean of the client
    values there; uncovered positions are left untouched.  With
    ``weighted=False`` every client counts equally regardless of data share.
    """
    validate_store(store, space)
    if not updates:
        raise ValueError("aggregate needs at least one update")
    for (num_w, den_w, num_b, den_b), layer in zip(
        _accumulate(updates, space, weighted), store.layers
    ):
        covered = den_w > 0.0
        layer.weights[covered] = num_w[covered] / den_w[covered]
        covered_b = den_b > 0.0
        layer.bias[covered_b] = num_b[covered_b] / den_b[covered_b]
    return store


def failure_filter(
    updates: list[ClientUpdate], failures: set[int]
) -> list[ClientUpdate]:
    """Drop failed clients and renormalize the survivors' weights to sum 1.
    Returns an empty list when everyone failed (the round is then skipped)."""
    kept = [u for u in updates if u.client_id not in failures]
    if not kept:
        return []
    total = sum(u.weight for u in kept)
    return [dataclasses.replace(u, weight=u.weight / total) for u in kept]


def save_checkpoint(store: ParamStore, space: SearchSpace, path: str) -> None:
    """Write the store as a one-line text header plus little-endian float64."""
    validate_store(store, space)
    header = (
        f"{_CHECKPOINT_MAGIC} in_dim={space.in_dim} hidden={space.hidden_width} "
        f"depth={space.hidden_depth} classes={space.classes}\n"
    )
    flat = flatten_layers(store.layers)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ParamStore, dict[str, int]]:
    """Read a checkpoint back; returns the store and its header dimensions."""
    with open(path, "rb") as fh:
        blob = fh.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = blob[:newline].decode("ascii", errors="replace")
    tokens = header.split()
    if tokens[:2] != _CHECKPOINT_MAGIC.split():
        raise ValueError(f"{path}: not a hetfed checkpoint (header {header!r})")
    dims: dict[str, int] = {}
    for token in tokens[2:]:
        key, _, value = token.partition("=")
        dims[key] = int(value)
    for key in ("in_dim", "hidden", "depth", "classes"):
        if key not in dims:
            raise ValueError(f"{path}: checkpoint header lacks {key}")

    shapes = [(dims["in_dim"], dims["hidden"])]
    shapes += [(dims["hidden"], dims["hidden"])] * (dims["depth"] - 1)
    shapes.append((dims["hidden"], dims["classes"]))
    expected = sum(r * c + c for r, c in shapes)
    flat = np.frombuffer(blob[newline + 1 :], dtype="<f8")
    if flat.size != expected:
        raise ValueError(
            f"{path}: checkpoint holds {flat.size} values, expected {expected}"
        )

    layers = []
    offset = 0
    for rows, cols in shapes:
        w = flat[offset : offset + rows * cols].reshape(rows, cols).copy()
        offset += rows * cols
        b = flat[offset : offset + cols].copy()
        offset += cols
        layers.append(DenseLayer(w, b))
    return ParamStore(layers), dims
