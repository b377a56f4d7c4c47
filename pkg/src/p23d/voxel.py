"""Binary occupancy grids over the fixed cube [-0.5, 0.5]^3.

Arrays are indexed ``occ[i, j, k]`` with i along x, j along y, k along z;
flattened (and bit-packed) order is x-major: ``(i * N + j) * N + k``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud

MAGIC = b"VOXG"
VERSION = 1


class VoxelError(ValueError):
    pass


@dataclass
class OccupancyGrid:
    occ: np.ndarray
    bbox: np.ndarray = field(default_factory=lambda: np.array([-0.5, -0.5, -0.5, 0.5, 0.5, 0.5]))
    clamped: int = 0

    def __post_init__(self):
        self.occ = np.asarray(self.occ, dtype=bool)
        N = self.occ.shape[0]
        if self.occ.shape != (N, N, N):
            raise VoxelError(f"grid must be cubic, got {self.occ.shape}")
        if N < 2:
            raise VoxelError("grid resolution must be >= 2")
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(6)

    @property
    def N(self) -> int:
        return self.occ.shape[0]

    def count(self) -> int:
        return int(self.occ.sum())

    def __eq__(self, other):
        return isinstance(other, OccupancyGrid) and np.array_equal(self.occ, other.occ)

    @classmethod
    def empty(cls, N: int) -> "OccupancyGrid":
        return cls(np.zeros((N, N, N), dtype=bool))


def voxel_index(points: np.ndarray, N: int) -> tuple[np.ndarray, int]:
    idx = np.floor((np.asarray(points, dtype=np.float64) + 0.5) * N).astype(np.int64)
    out = (idx < 0) | (idx > N - 1)
    return np.clip(idx, 0, N - 1), int(out.any(axis=1).sum())


def voxelize(cloud: PointCloud, N: int) -> OccupancyGrid:
    """Occupied iff at least one point falls in the voxel.

    Points outside the cube are clamped into boundary voxels; how many were
    clamped is kept on ``grid.clamped``.
    """
    if len(cloud) == 0:
        raise VoxelError("cannot voxelize an empty cloud")
    idx, clamped = voxel_index(cloud.points, N)
    occ = np.zeros((N, N, N), dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    pts = cloud.points
    bbox = np.concatenate([pts.min(axis=0), pts.max(axis=0)])
    return OccupancyGrid(occ, bbox=bbox, clamped=clamped)


def downsample_mask(grid: OccupancyGrid, r: int) -> np.ndarray:
    """``(r, r, r)`` boolean mask; a cell is set iff any voxel of its block is."""
    N = grid.N
    if r < 1 or N % r:
        raise VoxelError(f"grid resolution {N} is not divisible by {r}")
    f = N // r
    return grid.occ.reshape(r, f, r, f, r, f).any(axis=(1, 3, 5))


def upsample_mask(mask: np.ndarray, N: int) -> np.ndarray:
    r = mask.shape[0]
    if N % r:
        raise VoxelError(f"{N} is not divisible by {r}")
    f = N // r
    return np.repeat(np.repeat(np.repeat(mask, f, 0), f, 1), f, 2)


def sparse_coords(grid: OccupancyGrid) -> np.ndarray:
    """Occupied ``(i, j, k)`` triples, lexicographically sorted."""
    return np.argwhere(grid.occ).astype(np.int64)


def voxel_centers(grid: OccupancyGrid) -> PointCloud:
    ijk = sparse_coords(grid)
    if len(ijk) == 0:
        raise VoxelError("grid has no occupied voxels")
    return PointCloud((ijk + 0.5) / grid.N - 0.5)


def grid_iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    if a.N != b.N:
        raise VoxelError(f"resolution mismatch: {a.N} vs {b.N}")
    union = np.logical_or(a.occ, b.occ).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.occ, b.occ).sum() / union)


# ------------------------------------------------------------------ file format

def dumps(grid: OccupancyGrid) -> bytes:
    bits = np.packbits(grid.occ.reshape(-1), bitorder="little")
    return (MAGIC + struct.pack("<II", VERSION, grid.N) + bits.tobytes()
            + grid.bbox.astype("<f4").tobytes())


def loads(buf: bytes) -> OccupancyGrid:
    if buf[:4] != MAGIC:
        raise VoxelError("not a VOXG file (bad magic)")
    version, N = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VoxelError(f"unsupported VOXG version {version}")
    nbytes = (N ** 3 + 7) // 8
    expected = 12 + nbytes + 24
    if len(buf) != expected:
        raise VoxelError(f"VOXG size {len(buf)} != expected {expected} for N={N}")
    bits = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=12)
    occ = np.unpackbits(bits, bitorder="little", count=N ** 3).astype(bool).reshape(N, N, N)
    bbox = np.frombuffer(buf, dtype="<f4", count=6, offset=12 + nbytes).astype(np.float64)
    return OccupancyGrid(occ, bbox=bbox)


def save_grid(grid: OccupancyGrid, path) -> None:
    Path(path).write_bytes(dumps(grid))


def load_grid(path) -> OccupancyGrid:
    return loads(Path(path).read_bytes())
