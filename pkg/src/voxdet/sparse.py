"""Batched sparse voxel tensors and the convolution geometry built on them.

A sparse tensor stores only the occupied cells of a regular 3D grid:
a coordinate list plus a feature matrix. Coordinates are kept in raw grid
units, so at stride ``s`` every coordinate is a multiple of ``s``; the
canonical row order is lexicographic over (batch, i, j, k). All operations
here are pure functions with a fixed accumulation order, so repeated runs
over the same input are bit-identical regardless of the caller's thread
count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

COORD_DTYPE = np.int64

# Packed coordinate keys use 16 bits per field; indoor grids stay far below
# this but the bound is checked so a violation fails loudly.
_PACK_BITS = 16
_PACK_OFF = 1 << (_PACK_BITS - 1)
_PACK_MAX = (1 << _PACK_BITS) - 1


class SparseShapeError(ValueError):
    """Raised on inconsistent coordinate/feature/weight shapes."""


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack (N, 4) integer coordinates into sortable int64 keys.

    The packing is order-preserving: sorting keys equals lexicographic
    (batch, i, j, k) order.
    """
    coords = np.asarray(coords, dtype=COORD_DTYPE)
    if coords.ndim != 2 or coords.shape[1] != 4:
        raise SparseShapeError(f"coords must be (N, 4), got {coords.shape}")
    b = coords[:, 0]
    ijk = coords[:, 1:] + _PACK_OFF
    if coords.size and (
        b.min(initial=0) < 0
        or b.max(initial=0) > _PACK_MAX
        or ijk.min(initial=0) < 0
        or ijk.max(initial=0) > _PACK_MAX
    ):
        raise SparseShapeError("coordinate outside packable 16-bit range")
    keys = b
    for axis in range(3):
        keys = (keys << _PACK_BITS) | ijk[:, axis]
    return keys


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """Offset grid for a cubic kernel, lexicographically ordered.

    Odd kernels are centered (-r..r); even kernels span 0..K-1, the
    convention used by the stride-2 downsampling and generative
    transposed convolutions.
    """
    if kernel_size < 1:
        raise SparseShapeError(f"kernel_size must be >= 1, got {kernel_size}")
    if kernel_size % 2 == 1:
        r = (kernel_size - 1) // 2
        rng = np.arange(-r, r + 1, dtype=COORD_DTYPE)
    else:
        rng = np.arange(kernel_size, dtype=COORD_DTYPE)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1)
    return grid.reshape(-1, 3)


@dataclass(frozen=True)
class SparseTensor3D:
    """Batched sparse voxel grid: unique coordinates + per-voxel features.

    coords: (N, 4) int64 rows (batch, i, j, k), i/j/k multiples of stride.
    feats:  (N, C) feature matrix, rows parallel to coords.
    stride: grid steps per voxel at this pyramid level (>= 1).
    voxel_size: meters per unit grid step at stride 1.
    """

    coords: np.ndarray
    feats: np.ndarray
    stride: int = 1
    voxel_size: float = 1.0

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=COORD_DTYPE)
        feats = np.asarray(self.feats)
        if feats.ndim != 2:
            raise SparseShapeError(f"feats must be (N, C), got {feats.shape}")
        if coords.ndim != 2 or coords.shape[1] != 4:
            raise SparseShapeError(f"coords must be (N, 4), got {coords.shape}")
        if len(coords) != len(feats):
            raise SparseShapeError(
                f"coords rows ({len(coords)}) != feats rows ({len(feats)})"
            )
        if self.stride < 1:
            raise SparseShapeError(f"stride must be >= 1, got {self.stride}")
        if not self.voxel_size > 0:
            raise SparseShapeError(f"voxel_size must be > 0, got {self.voxel_size}")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "feats", feats)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def num_channels(self) -> int:
        return self.feats.shape[1]

    def keys(self) -> np.ndarray:
        return pack_coords(self.coords)

    def validate(self) -> None:
        """Check the full invariant set (uniqueness, divisibility, order)."""
        keys = self.keys()
        if len(np.unique(keys)) != len(keys):
            raise SparseShapeError("duplicate coordinates")
        if np.any(self.coords[:, 1:] % self.stride != 0):
            raise SparseShapeError("coordinates not divisible by stride")

    def is_canonical(self) -> bool:
        keys = self.keys()
        return bool(np.all(keys[:-1] < keys[1:]))

    def canonicalized(self) -> "SparseTensor3D":
        """Rows sorted lexicographically by (batch, i, j, k)."""
        order = np.argsort(self.keys(), kind="stable")
        return replace(self, coords=self.coords[order], feats=self.feats[order])

    def positions(self) -> np.ndarray:
        """World-space voxel centers, (N, 3) float64 meters."""
        return (self.coords[:, 1:].astype(np.float64) + 0.5 * self.stride) * self.voxel_size

    def with_feats(self, feats: np.ndarray) -> "SparseTensor3D":
        return replace(self, feats=feats)


def empty_tensor(channels: int, stride: int = 1, voxel_size: float = 1.0,
                 dtype=np.float32) -> SparseTensor3D:
    return SparseTensor3D(
        coords=np.zeros((0, 4), dtype=COORD_DTYPE),
        feats=np.zeros((0, channels), dtype=dtype),
        stride=stride,
        voxel_size=voxel_size,
    )


def voxelize(points: np.ndarray, features: np.ndarray, voxel_size: float,
             batch: int = 0) -> SparseTensor3D:
    """Quantize points into occupied voxels, averaging colliding features.

    points:   (N, 3) world coordinates in meters.
    features: (N, C) per-point feature vectors.
    """
    if not voxel_size > 0:
        raise ValueError(f"voxel_size must be > 0, got {voxel_size}")
    points = np.asarray(points, dtype=np.float64)
    features = np.asarray(features)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {points.shape}")
    if features.ndim != 2 or len(features) != len(points):
        raise ValueError("features must be (N, C) parallel to points")
    if len(points) == 0:
        return empty_tensor(features.shape[1], voxel_size=voxel_size,
                            dtype=features.dtype)
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite point coordinates")

    ijk = np.floor(points / voxel_size).astype(COORD_DTYPE)
    coords = np.concatenate(
        [np.full((len(ijk), 1), batch, dtype=COORD_DTYPE), ijk], axis=1)
    keys = pack_coords(coords)
    # np.unique sorts keys, and key order == canonical coordinate order.
    uniq, first, inverse, counts = np.unique(
        keys, return_index=True, return_inverse=True, return_counts=True)
    acc = np.zeros((len(uniq), features.shape[1]), dtype=np.float64)
    np.add.at(acc, inverse, features.astype(np.float64))
    feats = (acc / counts[:, None]).astype(features.dtype)
    return SparseTensor3D(coords[first], feats, stride=1, voxel_size=voxel_size)


@dataclass
class KernelMap:
    """Gather/scatter pair lists, one per kernel offset.

    pairs[m] = (in_rows, out_rows): row b of the output receives the
    contribution of input row a through offset offsets[m] iff (a, b)
    appears in pairs[m]. Within one offset every input row and every
    output row appears at most once, so scatter via fancy indexing is
    exact and the accumulation order is the fixed offset order.
    """

    offsets: np.ndarray
    pairs: list
    n_in: int
    n_out: int

    def num_pairs(self) -> int:
        return int(sum(len(p[0]) for p in self.pairs))

    def transposed(self) -> "KernelMap":
        """Swap gather/scatter roles (used by convolution backward)."""
        return KernelMap(
            offsets=self.offsets,
            pairs=[(outr, inr) for inr, outr in self.pairs],
            n_in=self.n_out,
            n_out=self.n_in,
        )


def _match_pairs(in_keys_sorted: np.ndarray, in_order: np.ndarray,
                 candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows of the sorted-key table matching candidate keys.

    Returns (input_rows, candidate_rows) for the hits, candidate order.
    """
    pos = np.searchsorted(in_keys_sorted, candidates)
    pos = np.minimum(pos, len(in_keys_sorted) - 1) if len(in_keys_sorted) else pos
    if len(in_keys_sorted) == 0:
        return (np.zeros(0, dtype=np.int64),) * 2
    hit = in_keys_sorted[pos] == candidates
    return in_order[pos[hit]], np.nonzero(hit)[0]


def pair_map(in_coords: np.ndarray, out_coords: np.ndarray,
             offsets: np.ndarray, offset_scale: int) -> KernelMap:
    """Pair lists for the rule in_coord == out_coord + offset * offset_scale."""
    in_coords = np.asarray(in_coords, dtype=COORD_DTYPE)
    out_coords = np.asarray(out_coords, dtype=COORD_DTYPE)
    in_keys = pack_coords(in_coords)
    order = np.argsort(in_keys, kind="stable")
    in_keys_sorted = in_keys[order]
    pairs = []
    cand = np.array(out_coords, dtype=COORD_DTYPE, copy=True)
    for off in offsets:
        cand[:, 1:] = out_coords[:, 1:] + off * offset_scale
        in_rows, out_rows = _match_pairs(in_keys_sorted, order, pack_coords(cand))
        pairs.append((in_rows, out_rows))
    return KernelMap(offsets=offsets, pairs=pairs,
                     n_in=len(in_coords), n_out=len(out_coords))


def build_kernel_map(x: SparseTensor3D, out_coords: np.ndarray,
                     kernel_size: int, stride_ratio: int) -> KernelMap:
    """Kernel map for output coordinates at stride x.stride * stride_ratio.

    Contains exactly the (input, output) pairs with
    in_local == out_local * stride_ratio + offset per axis, which in raw
    grid units is in_coord == out_coord + offset * x.stride.
    """
    if kernel_size not in (1, 3, 5):
        raise SparseShapeError(f"kernel_size must be one of 1, 3, 5, got {kernel_size}")
    if stride_ratio < 1:
        raise SparseShapeError(f"stride_ratio must be >= 1, got {stride_ratio}")
    out_coords = np.asarray(out_coords, dtype=COORD_DTYPE)
    return pair_map(x.coords, out_coords, kernel_offsets(kernel_size), x.stride)


def _weights_kernel(weights: np.ndarray, in_channels: int) -> int:
    if weights.ndim != 3:
        raise SparseShapeError(f"weights must be (K^3, C_in, C_out), got {weights.shape}")
    if weights.shape[1] != in_channels:
        raise SparseShapeError(
            f"weight C_in {weights.shape[1]} != input channels {in_channels}")
    k = round(weights.shape[0] ** (1.0 / 3.0))
    if k * k * k != weights.shape[0]:
        raise SparseShapeError(f"weights first dim {weights.shape[0]} is not a cube")
    return k


def apply_kernel_map(kmap: KernelMap, feats: np.ndarray, weights: np.ndarray,
                     bias: np.ndarray | None, n_out: int) -> np.ndarray:
    """out[b] = sum over offsets of feats[a] @ weights[o] + bias.

    The per-offset pair uniqueness makes `out[rows] += vals` exact; the
    offset loop order fixes the reduction order.
    """
    out = np.zeros((n_out, weights.shape[2]), dtype=feats.dtype)
    for m, (in_rows, out_rows) in enumerate(kmap.pairs):
        if len(in_rows):
            out[out_rows] += feats[in_rows] @ weights[m].astype(feats.dtype)
    if bias is not None:
        out += bias.astype(feats.dtype)
    return out


def strided_coords(coords: np.ndarray, out_stride: int) -> np.ndarray:
    """Unique floor-division of raw coordinates onto an out_stride grid."""
    coords = np.asarray(coords, dtype=COORD_DTYPE)
    coarse = np.array(coords, copy=True)
    coarse[:, 1:] = np.floor_divide(coords[:, 1:], out_stride) * out_stride
    _, first = np.unique(pack_coords(coarse), return_index=True)
    return coarse[first]


def strided_out_coords(x: SparseTensor3D, s: int) -> np.ndarray:
    """Unique floor-division of input coordinates by s, canonical order."""
    return strided_coords(x.coords, x.stride * s)


def generated_coords(coords: np.ndarray, kernel_size: int, fine: int) -> np.ndarray:
    """All raw coordinates reachable via kernel offsets scaled by fine."""
    coords = np.asarray(coords, dtype=COORD_DTYPE)
    offsets = kernel_offsets(kernel_size)
    cand = (coords[:, None, :].repeat(len(offsets), axis=1)).reshape(-1, 4)
    cand[:, 1:] += np.tile(offsets * fine, (len(coords), 1))
    _, first = np.unique(pack_coords(cand), return_index=True)
    return cand[first]


def sparse_conv(x: SparseTensor3D, weights: np.ndarray,
                bias: np.ndarray | None = None, stride: int = 1) -> SparseTensor3D:
    """Sparse 3D convolution.

    stride == 1: submanifold mode, output coordinates equal input
    coordinates. stride == s > 1: output coordinates are the unique floor
    divisions of the input coordinates by s and the output stride grows
    by s. Even kernel sizes use the 0..K-1 offset convention.
    """
    k = _weights_kernel(np.asarray(weights), x.num_channels)
    offsets = kernel_offsets(k)
    if stride == 1:
        out_coords = x.coords
        out_stride = x.stride
        kmap = pair_map(x.coords, out_coords, offsets, x.stride)
    elif stride > 1:
        out_coords = strided_out_coords(x, stride)
        out_stride = x.stride * stride
        # raw-unit rule for ratio s: in == out + offset * in_stride
        kmap = pair_map(x.coords, out_coords, offsets, x.stride)
    else:
        raise SparseShapeError(f"stride must be >= 1, got {stride}")
    feats = apply_kernel_map(kmap, x.feats, np.asarray(weights),
                             None if bias is None else np.asarray(bias),
                             len(out_coords))
    return SparseTensor3D(out_coords, feats, stride=out_stride,
                          voxel_size=x.voxel_size)


def generated_out_coords(x: SparseTensor3D, kernel_size: int, s: int) -> np.ndarray:
    """All coordinates reachable from the input through any kernel offset
    at the finer stride x.stride // s, canonical order."""
    fine = x.stride // s
    offsets = kernel_offsets(kernel_size)
    cand = (x.coords[:, None, :].repeat(len(offsets), axis=1)).reshape(-1, 4)
    cand[:, 1:] += np.tile(offsets * fine, (len(x.coords), 1))
    _, first = np.unique(pack_coords(cand), return_index=True)
    return cand[first]


def transposed_kernel_map(x: SparseTensor3D, out_coords: np.ndarray,
                          kernel_size: int, s: int) -> KernelMap:
    """Pairs for the generative rule out_coord == in_coord + offset * fine."""
    fine = x.stride // s
    out_coords = np.asarray(out_coords, dtype=COORD_DTYPE)
    # roles swapped relative to pair_map: gather from x, scatter to out
    fwd = pair_map(out_coords, x.coords, kernel_offsets(kernel_size), fine)
    # fwd pairs are (out_row, in_row); swap to (in_row, out_row)
    return fwd.transposed()


def generative_transposed_conv(x: SparseTensor3D, weights: np.ndarray,
                               upsample: int,
                               bias: np.ndarray | None = None) -> SparseTensor3D:
    """Coordinate-generating transposed convolution (upsampling).

    Output coordinates are every position reachable from an input voxel
    through a kernel offset at the finer stride; features accumulate
    through the transposed kernel map.
    """
    if upsample < 1 or x.stride % upsample != 0:
        raise SparseShapeError(
            f"stride {x.stride} not divisible by upsample {upsample}")
    weights = np.asarray(weights)
    k = _weights_kernel(weights, x.num_channels)
    out_coords = generated_out_coords(x, k, upsample)
    kmap = transposed_kernel_map(x, out_coords, k, upsample)
    feats = apply_kernel_map(kmap, x.feats, weights,
                             None if bias is None else np.asarray(bias),
                             len(out_coords))
    return SparseTensor3D(out_coords, feats, stride=x.stride // upsample,
                          voxel_size=x.voxel_size)


def prune(x: SparseTensor3D, keep_scores: np.ndarray,
          threshold: float) -> SparseTensor3D:
    """Retain exactly the voxels whose score exceeds the threshold."""
    keep_scores = np.asarray(keep_scores).reshape(-1)
    if len(keep_scores) != len(x):
        raise ValueError(
            f"keep_scores length {len(keep_scores)} != voxel count {len(x)}")
    mask = keep_scores > threshold
    return replace(x, coords=x.coords[mask], feats=x.feats[mask])


def restrict_rows(x: SparseTensor3D, target_coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Match target coordinates against x: (row_in_x or -1, found mask)."""
    target_coords = np.asarray(target_coords, dtype=COORD_DTYPE)
    keys = pack_coords(x.coords)
    order = np.argsort(keys, kind="stable")
    rows = np.full(len(target_coords), -1, dtype=np.int64)
    in_rows, t_rows = _match_pairs(keys[order], order, pack_coords(target_coords))
    rows[t_rows] = in_rows
    return rows, rows >= 0
