"""Batched sparse tensors on integer voxel coordinates and their kernel maps.

Coordinates are (batch, x, y, z) int64 rows kept in canonical lexicographic
order, so every iteration and accumulation order is reproducible regardless
of how the rows were produced.  Kernel maps are built with a packed-key
searchsorted lookup: 16 bits per spatial axis relative to the tensor's
bounding box, batch in the high bits, which keeps neighbour queries fully
vectorised and cross-batch matches impossible.

Kernel offsets enumerate lexicographically over (dz, dy, dx) in {-1, 0, 1},
i.e. offset k = (dz+1)*9 + (dy+1)*3 + (dx+1); weight layouts depend on it.
"""

from __future__ import annotations

import numpy as np

from .tape import Node, Parameter, Tape, accumulate

_BITS = 16
_SPAN = 1 << _BITS


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """(K^3, 3) array of (dx, dy, dz) offsets in canonical order."""
    if kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd")
    if kernel_size == 1:
        return np.zeros((1, 3), dtype=np.int64)
    r = kernel_size // 2
    rng = range(-r, r + 1)
    return np.array([(dx, dy, dz) for dz in rng for dy in rng for dx in rng], dtype=np.int64)


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Permutation sorting (batch, x, y, z) rows lexicographically."""
    return np.lexsort((coords[:, 3], coords[:, 2], coords[:, 1], coords[:, 0]))


_lexsort_rows = canonical_order


class CoordSet:
    """Immutable canonical coordinate block shared between tensors.

    Sharing one CoordSet across the tensors of a residual stack means the
    kernel-map cache is built once per (kernel, stride) pair and batch.
    """

    def __init__(self, coords: np.ndarray, stride: int = 1, _canonical: bool = False):
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 4:
            raise ValueError("coords must have shape (M, 4): (batch, x, y, z)")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        if np.any(coords[:, 1:] % stride):
            raise ValueError(f"spatial coords must be divisible by stride {stride}")
        if not _canonical:
            coords = coords[_lexsort_rows(coords)]
            if len(coords) > 1 and np.any(np.all(coords[1:] == coords[:-1], axis=1)):
                raise ValueError("coords must be unique")
        self.coords = coords
        self.coords.setflags(write=False)
        self.stride = stride
        self._mins = coords.min(axis=0) if len(coords) else np.zeros(4, dtype=np.int64)
        self._keys = self._pack(coords)
        self._kmap_cache: dict = {}

    def __len__(self):
        return len(self.coords)

    def _pack(self, coords: np.ndarray) -> np.ndarray:
        rel = coords - self._mins
        if rel[:, 1:].max(initial=0) >= _SPAN - 2:
            raise ValueError("coordinate span exceeds the packed 16-bit budget")
        return (((rel[:, 0] * _SPAN + rel[:, 1]) * _SPAN + rel[:, 2]) * _SPAN + rel[:, 3])

    def lookup(self, query: np.ndarray) -> np.ndarray:
        """Row index of each query coord, or -1 when absent."""
        rel = query - self._mins
        in_range = np.all((rel >= 0) & (rel < _SPAN), axis=1)
        keys = (((rel[:, 0] * _SPAN + rel[:, 1]) * _SPAN + rel[:, 2]) * _SPAN + rel[:, 3])
        pos = np.searchsorted(self._keys, keys)
        pos_c = np.minimum(pos, len(self._keys) - 1)
        hit = in_range & (self._keys[pos_c] == keys)
        rows = np.where(hit, pos_c, -1)
        return rows


class SparseTensor:
    """Coordinate block plus a differentiable feature matrix."""

    def __init__(self, coord_set: CoordSet, feats: Node):
        if feats.value.ndim != 2 or len(feats.value) != len(coord_set):
            raise ValueError(
                f"features must be (M, C) with M={len(coord_set)}, got {feats.value.shape}")
        self.coord_set = coord_set
        self.feats = feats

    @classmethod
    def from_arrays(cls, coords: np.ndarray, features: np.ndarray,
                    stride: int = 1) -> "SparseTensor":
        """Build with canonical row order; features are reordered to match."""
        coords = np.asarray(coords, dtype=np.int64)
        features = np.asarray(features)
        if features.ndim != 2 or len(features) != len(coords):
            raise ValueError("features must be (M, C) aligned with coords")
        if not np.isfinite(features).all():
            raise ValueError("features must be finite")
        order = _lexsort_rows(coords)
        coords = coords[order]
        if len(coords) > 1 and np.any(np.all(coords[1:] == coords[:-1], axis=1)):
            raise ValueError("coords must be unique")
        cs = CoordSet(coords, stride=stride, _canonical=True)
        return cls(cs, Node(features[order]))

    @property
    def coords(self) -> np.ndarray:
        return self.coord_set.coords

    @property
    def features(self) -> np.ndarray:
        return self.feats.value

    @property
    def stride(self) -> int:
        return self.coord_set.stride

    def __len__(self):
        return len(self.coord_set)


class KernelMap:
    """Per kernel offset: aligned (input_row, output_row) index arrays."""

    def __init__(self, pairs: list[tuple[np.ndarray, np.ndarray]],
                 kernel_size: int, stride: int, n_in: int, n_out: int):
        self.pairs = pairs
        self.kernel_size = kernel_size
        self.stride = stride
        self.n_in = n_in
        self.n_out = n_out

    @property
    def num_offsets(self) -> int:
        return len(self.pairs)

    def pair_count(self) -> int:
        return sum(len(i) for i, _ in self.pairs)


def _downsampled_coord_set(cs: CoordSet) -> CoordSet:
    step = 2 * cs.stride
    down = cs.coords.copy()
    down[:, 1:] = (down[:, 1:] // step) * step
    uniq = np.unique(down, axis=0)  # sorted lexicographically
    return CoordSet(uniq, stride=step, _canonical=True)


def build_kernel_map(tensor_or_cs, kernel_size: int, stride: int):
    """Pair input rows with output rows for every kernel offset.

    stride 1 keeps the coordinate set (submanifold); stride 2 emits the
    deduplicated floor-halved lattice.  Pair (i, o) is included iff
    coord(i) = coord(o) + offset_k * input_stride.  Returns
    (KernelMap, output CoordSet); results are cached on the CoordSet.
    """
    cs: CoordSet = tensor_or_cs.coord_set if isinstance(tensor_or_cs, SparseTensor) else tensor_or_cs
    if kernel_size not in (1, 3):
        raise ValueError("kernel_size must be 1 or 3")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    cache_key = (kernel_size, stride)
    hit = cs._kmap_cache.get(cache_key)
    if hit is not None:
        return hit

    out_cs = cs if stride == 1 else _downsampled_coord_set(cs)
    su = cs.stride
    offsets = kernel_offsets(kernel_size)
    out_rows_all = np.arange(len(out_cs), dtype=np.int64)

    pairs: list[tuple[np.ndarray, np.ndarray]] = []
    for off in offsets:
        if stride == 1 and not off.any():
            pairs.append((out_rows_all, out_rows_all))  # submanifold identity offset
            continue
        query = out_cs.coords.copy()
        query[:, 1:] += off * su
        rows = cs.lookup(query)
        hit_mask = rows >= 0
        pairs.append((rows[hit_mask], out_rows_all[hit_mask]))

    kmap = KernelMap(pairs, kernel_size, stride, n_in=len(cs), n_out=len(out_cs))
    cs._kmap_cache[cache_key] = (kmap, out_cs)
    return kmap, out_cs


def sparse_conv(tape: Tape, x: SparseTensor, weight: Parameter,
                kmap: KernelMap, out_cs: CoordSet) -> SparseTensor:
    """out[o] = sum_k sum_{(i,o) in map[k]} x[i] @ W[k].

    Weight shape is (num_offsets, C_in, C_out); accumulation visits offsets
    in canonical order and each offset's pairs in sorted output order, so
    results are bit-reproducible.
    """
    w = weight.value
    if w.ndim != 3 or w.shape[0] != kmap.num_offsets or w.shape[1] != x.features.shape[1]:
        raise ValueError(
            f"weight shape {w.shape} incompatible with map "
            f"({kmap.num_offsets} offsets, C_in={x.features.shape[1]})")
    if kmap.n_in != len(x):
        raise ValueError("kernel map was built for a different tensor")

    xv = x.feats.value
    out = np.zeros((kmap.n_out, w.shape[2]), dtype=xv.dtype)
    for k, (in_rows, out_rows) in enumerate(kmap.pairs):
        if len(in_rows) == 0:
            continue
        out[out_rows] += xv[in_rows] @ w[k]
    out_node = Node(out)

    def grad_fn():
        g = out_node.grad
        if g is None:
            return
        dx = np.zeros_like(xv)
        dw = np.zeros_like(w)
        for k, (in_rows, out_rows) in enumerate(kmap.pairs):
            if len(in_rows) == 0:
                continue
            g_rows = g[out_rows]
            dx[in_rows] += g_rows @ w[k].T
            dw[k] = xv[in_rows].T @ g_rows
        accumulate(x.feats, dx)
        accumulate(weight, dw)

    tape.record(grad_fn)
    return SparseTensor(out_cs, out_node)


def sparse_conv_transposed(tape: Tape, x: SparseTensor, weight: Parameter,
                           kmap: KernelMap, target_cs: CoordSet) -> SparseTensor:
    """Adjoint of the stride-2 convolution described by ``kmap``.

    ``kmap`` must be the downsampling map built on the target CoordSet; its
    (fine_row, coarse_row) pairs are replayed with roles swapped, scattering
    the coarse tensor back onto exactly the cached fine coordinates.
    """
    w = weight.value
    if kmap.n_out != len(x):
        raise ValueError("transposed conv input does not match the map's coarse side")
    if kmap.n_in != len(target_cs):
        raise ValueError("target coords do not match the map's fine side")
    if w.ndim != 3 or w.shape[0] != kmap.num_offsets or w.shape[1] != x.features.shape[1]:
        raise ValueError(f"weight shape {w.shape} incompatible with transposed map")

    xv = x.feats.value
    out = np.zeros((kmap.n_in, w.shape[2]), dtype=xv.dtype)
    for k, (fine_rows, coarse_rows) in enumerate(kmap.pairs):
        if len(fine_rows) == 0:
            continue
        out[fine_rows] += xv[coarse_rows] @ w[k]
    out_node = Node(out)

    def grad_fn():
        g = out_node.grad
        if g is None:
            return
        dx = np.zeros_like(xv)
        dw = np.zeros_like(w)
        for k, (fine_rows, coarse_rows) in enumerate(kmap.pairs):
            if len(fine_rows) == 0:
                continue
            g_rows = g[fine_rows]
            dx[coarse_rows] += g_rows @ w[k].T
            dw[k] = xv[coarse_rows].T @ g_rows
        accumulate(x.feats, dx)
        accumulate(weight, dw)

    tape.record(grad_fn)
    return SparseTensor(target_cs, out_node)
