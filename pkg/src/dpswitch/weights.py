"""Model weights manager: load once, expose rank-parameterized zero-copy views.

The fused QKV projection is laid out head-major: for every head the columns
are ``[q_h | k_h | v_h]`` (``3 * head_dim`` wide). A contiguous column slice
covering heads ``[r*H/m, (r+1)*H/m)`` therefore hands rank ``r`` its own Q, K
and V sub-blocks for any ``m`` dividing the head count, so no degree needs a
different physical layout.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ModelSpec

TENSORS = ("qkv", "o", "up", "down")
MAX_TOY_AXIS = 256
_MAGIC = b"DPSWTOY1"
_HEADER = struct.Struct("<8s6I")  # 32 bytes


class ToyDimsTooLarge(ValueError):
    pass


class RankOutOfRange(ValueError):
    pass


class IndivisibleExtent(ValueError):
    pass


class UnsupportedDegree(ValueError):
    pass


class GroupSizeMismatch(ValueError):
    pass


class ShardDim(enum.Enum):
    COLUMN = "column"
    ROW = "row"


_SHARD_DIM = {"qkv": ShardDim.COLUMN, "up": ShardDim.COLUMN,
              "o": ShardDim.ROW, "down": ShardDim.ROW}


@dataclass(frozen=True)
class ToyDims:
    hidden_dim: int
    num_heads: int
    head_dim: int
    ffn_dim: int | None = None
    num_layers: int = 1

    def __post_init__(self) -> None:
        if self.num_heads * self.head_dim != self.hidden_dim:
            raise ValueError("toy dims need hidden_dim == num_heads * head_dim")

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 2 * self.hidden_dim


@dataclass
class WeightStore:
    """Per-layer parameter tensors, allocated once.

    In synthetic mode ``tensors`` is empty and only shapes and byte counts
    are tracked, so capacity math can run at 70B scale.
    """

    spec: ModelSpec
    shapes: dict[str, tuple[int, int]]
    num_layers: int
    num_heads: int
    head_dim: int
    tensors: list[dict[str, np.ndarray]] = field(default_factory=list)
    alloc_bytes_total: int = 0
    generation: int = 0
    supported_degrees: tuple[int, ...] | None = None

    @property
    def is_toy(self) -> bool:
        return bool(self.tensors)

    def _record_alloc(self, nbytes: int) -> None:
        self.alloc_bytes_total += nbytes
        self.generation += 1


@dataclass(frozen=True)
class ShardView:
    """Rank ``rank`` of ``degree`` over one tensor; ``offset``/``extent`` are
    along the sharded axis (columns for Column, rows for Row)."""

    layer: int
    tensor: str
    shard_dim: ShardDim
    rank: int
    degree: int
    offset: int
    extent: int
    source: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def array(self) -> np.ndarray | None:
        if self.source is None:
            return None
        sl = slice(self.offset, self.offset + self.extent)
        return self.source[:, sl] if self.shard_dim is ShardDim.COLUMN else self.source[sl, :]


def load_weights(spec: ModelSpec, seed: int = 0, scale: ToyDims | str = "synthetic") -> WeightStore:
    """Allocate a store once. ``scale`` is a :class:`ToyDims` for seeded
    numeric tensors, or ``"synthetic"`` for byte accounting only."""
    if isinstance(scale, ToyDims):
        return _load_toy(spec, seed, scale)
    if scale != "synthetic":
        raise ValueError(f"unknown scale {scale!r}")
    heads = spec.num_kv_heads
    group_cols = ((spec.num_q_heads or spec.num_kv_heads) // heads + 2) * spec.head_dim
    d_proj = (spec.num_q_heads or spec.num_kv_heads) * spec.head_dim
    shapes = {
        "qkv": (spec.hidden_dim, heads * group_cols),
        "o": (d_proj, spec.hidden_dim),
        "up": (spec.hidden_dim, 4 * spec.hidden_dim),
        "down": (4 * spec.hidden_dim, spec.hidden_dim),
    }
    store = WeightStore(spec, shapes, spec.num_layers, heads, spec.head_dim)
    store._record_alloc(spec.weight_bytes)
    return store


def _load_toy(spec: ModelSpec, seed: int, dims: ToyDims) -> WeightStore:
    d, hd, h, f = dims.hidden_dim, dims.head_dim, dims.num_heads, dims.ffn
    shapes = {"qkv": (d, 3 * h * hd), "o": (h * hd, d), "up": (d, f), "down": (f, d)}
    if max(max(s) for s in shapes.values()) > MAX_TOY_AXIS:
        raise ToyDimsTooLarge(f"toy axes must be <= {MAX_TOY_AXIS}: {shapes}")
    rng = np.random.default_rng(seed)
    store = WeightStore(spec, shapes, dims.num_layers, h, hd)
    for _ in range(dims.num_layers):
        layer = {}
        for name in TENSORS:
            rows, cols = shapes[name]
            layer[name] = rng.standard_normal((rows, cols)) / np.sqrt(rows)
        store.tensors.append(layer)
    nbytes = sum(a.nbytes for layer in store.tensors for a in layer.values())
    store._record_alloc(nbytes)
    return store


def make_shard_view(store: WeightStore, layer: int, tensor: str, rank: int, degree: int) -> ShardView:
    if tensor not in _SHARD_DIM:
        raise KeyError(tensor)
    if not 0 <= layer < store.num_layers:
        raise IndexError(f"layer {layer} out of range")
    if degree < 1 or not 0 <= rank < degree:
        raise RankOutOfRange(f"rank {rank} not in [0, {degree})")
    dim = _SHARD_DIM[tensor]
    rows, cols = store.shapes[tensor]
    full = cols if dim is ShardDim.COLUMN else rows
    if full % degree:
        raise IndivisibleExtent(f"{tensor}: extent {full} not divisible by {degree}")
    if tensor == "qkv" and store.num_heads % degree:
        # each rank must receive whole heads
        raise IndivisibleExtent(f"qkv: {store.num_heads} heads not divisible by {degree}")
    extent = full // degree
    src = store.tensors[layer][tensor] if store.is_toy else None
    return ShardView(layer, tensor, dim, rank, degree, rank * extent, extent, src)


def switch_weight_mode(store: WeightStore, new_degree: int, rank: int,
                       supported: tuple[int, ...] | None = None) -> dict[tuple[int, str], ShardView]:
    """Return the active views of every layer for ``rank`` at ``new_degree``.

    Only view metadata is produced; the store is never reallocated.
    """
    allowed = supported if supported is not None else store.supported_degrees
    if new_degree != 1 and allowed is not None and new_degree not in allowed:
        raise UnsupportedDegree(f"degree {new_degree} not in {sorted(allowed)}")
    if new_degree == 1 and rank != 0:
        raise RankOutOfRange("DP mode has a single rank 0")
    return {(layer, t): make_shard_view(store, layer, t, rank, new_degree)
            for layer in range(store.num_layers) for t in TENSORS}


def _local_values(qkv: np.ndarray, head_dim: int) -> np.ndarray:
    """Attention-free passthrough: each local head emits its V slice."""
    n_heads = qkv.shape[1] // (3 * head_dim)
    parts = [qkv[:, (3 * h + 2) * head_dim:(3 * h + 3) * head_dim] for h in range(n_heads)]
    return np.concatenate(parts, axis=1)


def tp_forward_toy(stores: list[WeightStore], group: tuple[int, ...] | list[int], x: np.ndarray,
                   handle=None) -> np.ndarray:
    """Run the toy layer stack sharded over ``group`` (one store per rank).

    Column-parallel QKV/up, row-parallel O/down, one all-reduce per pair of
    linear layers. Returns the (replicated) output seen by rank 0.
    """
    from . import comms

    m = len(group)
    if len(stores) != m:
        raise GroupSizeMismatch(f"{len(stores)} stores for a group of {m}")
    if handle is None:
        handle = comms.GroupHandle(tuple(group))
    elif len(handle.members) != m:
        raise GroupSizeMismatch("handle membership differs from group")
    hd = stores[0].head_dim
    h = [np.asarray(x, dtype=np.float64) for _ in range(m)]
    for layer in range(stores[0].num_layers):
        attn_out = None
        for r in range(m):
            qkv = h[r] @ make_shard_view(stores[r], layer, "qkv", r, m).array
            partial = _local_values(qkv, hd) @ make_shard_view(stores[r], layer, "o", r, m).array
            attn_out = comms.all_reduce(handle, group[r], partial)
        h = [h[r] + attn_out for r in range(m)]
        ffn_out = None
        for r in range(m):
            up = h[r] @ make_shard_view(stores[r], layer, "up", r, m).array
            partial = up @ make_shard_view(stores[r], layer, "down", r, m).array
            ffn_out = comms.all_reduce(handle, group[r], partial)
        h = [h[r] + ffn_out for r in range(m)]
    return h[0]


def dense_forward_toy(store: WeightStore, x: np.ndarray) -> np.ndarray:
    """Single-device reference for :func:`tp_forward_toy`."""
    hd, nh = store.head_dim, store.num_heads
    h = np.asarray(x, dtype=np.float64)
    for w in store.tensors:
        qkv = h @ w["qkv"]
        v = qkv.reshape(len(h), nh, 3, hd)[:, :, 2, :].reshape(len(h), nh * hd)
        h = h + v @ w["o"]
        h = h + (h @ w["up"]) @ w["down"]
    return h


def dump_toy(store: WeightStore, path: str | Path) -> None:
    """Write a toy store as a 32-byte header plus little-endian float64 tensors."""
    if not store.is_toy:
        raise ValueError("only toy stores carry element data")
    d = store.shapes["qkv"][0]
    header = _HEADER.pack(_MAGIC, store.num_layers, d, store.num_heads, store.head_dim,
                          store.shapes["up"][1], 0)
    with open(path, "wb") as fh:
        fh.write(header)
        for layer in store.tensors:
            for name in TENSORS:
                fh.write(np.ascontiguousarray(layer[name], dtype="<f8").tobytes())


def load_toy(path: str | Path, spec: ModelSpec) -> WeightStore:
    raw = Path(path).read_bytes()
    magic, layers, d, heads, hd, ffn, _ = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError("not a toy weight dump")
    dims = ToyDims(d, heads, hd, ffn, layers)
    shapes = {"qkv": (d, 3 * heads * hd), "o": (heads * hd, d), "up": (d, ffn), "down": (ffn, d)}
    store = WeightStore(spec, shapes, layers, heads, hd)
    pos = _HEADER.size
    for _ in range(dims.num_layers):
        layer = {}
        for name in TENSORS:
            rows, cols = shapes[name]
            n = rows * cols
            layer[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(rows, cols).copy()
            pos += 8 * n
        store.tensors.append(layer)
    store._record_alloc(sum(a.nbytes for layer in store.tensors for a in layer.values()))
    return store
