"""Parametric watertight meshes for the synthetic training corpus."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import TriangleMesh, normalize_unit_cube
from .numcore import Rng

FAMILIES = ("boxes", "spheres", "unions", "l-shapes")
COND_DIM = 16

# outward-facing quads of the unit cube, vertex order (x, y, z) bits
_BOX_QUADS = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]


@dataclass
class Shape:
    mesh: TriangleMesh
    family: str
    params: np.ndarray
    cond: np.ndarray


def box_mesh(size, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    size = np.asarray(size, dtype=np.float64)
    bits = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=np.float64)
    verts = (bits - 0.5) * size + np.asarray(center)
    tris = []
    for a, b, c, d in _BOX_QUADS:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, np.array(tris))


def uv_sphere(radius: float = 0.5, n_lat: int = 8, n_lon: int = 16) -> TriangleMesh:
    """Poles on z; ``n_lon`` a multiple of 4 puts vertices on the +-x, +-y extremes."""
    verts = [(0.0, 0.0, radius)]
    for i in range(1, n_lat):
        th = math.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * math.pi * j / n_lon
            verts.append((radius * math.sin(th) * math.cos(ph), radius * math.sin(th) * math.sin(ph),
                          radius * math.cos(th)))
    verts.append((0.0, 0.0, -radius))
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    tris = []
    for j in range(n_lon):
        tris.append((0, ring(1, j), ring(1, j + 1)))
        tris.append((south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j)
            tris += [(a, d, c), (a, c, b)]
    return TriangleMesh(np.array(verts), np.array(tris))


def l_prism(width: float, height: float, notch_w: float, notch_h: float, depth: float) -> TriangleMesh:
    """An L-shaped polygon in the xy-plane extruded along z."""
    poly = np.array([(0, 0), (width, 0), (width, height - notch_h), (width - notch_w, height - notch_h),
                     (width - notch_w, height), (0, height), (0, height - notch_h)], dtype=np.float64)
    poly -= poly.mean(axis=0)
    n = len(poly)
    verts = np.concatenate([np.c_[poly, np.full(n, -depth / 2)], np.c_[poly, np.full(n, depth / 2)]])
    # lower slab (0, 1, 2, 3, 6) plus upper arm (6, 3, 4, 5)
    cap = [(0, 1, 2), (0, 2, 3), (0, 3, 6), (6, 3, 4), (6, 4, 5)]
    tris = [(a, c, b) for a, b, c in cap] + [(a + n, b + n, c + n) for a, b, c in cap]
    for i in range(n):
        j = (i + 1) % n
        tris += [(i, j, j + n), (i, j + n, i + n)]
    return TriangleMesh(verts, np.array(tris))


def merge(*meshes: TriangleMesh) -> TriangleMesh:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def random_rotation(rng: Rng) -> np.ndarray:
    q = rng.normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _rotated(mesh: TriangleMesh, R: np.ndarray) -> TriangleMesh:
    return TriangleMesh(mesh.vertices @ R.T, mesh.triangles)


def _make(family: str, rng: Rng) -> tuple[TriangleMesh, np.ndarray]:
    if family == "boxes":
        dims = rng.uniform(3, 0.3, 1.0)
        return _rotated(box_mesh(dims), random_rotation(rng)), np.sort(dims / dims.max())
    if family == "spheres":
        return uv_sphere(0.5), np.zeros(0)
    if family == "unions":
        a = rng.uniform(3, 0.25, 0.8)
        b = rng.uniform(3, 0.25, 0.8)
        # side by side along x with a slight overlap, random lateral shift
        lateral = (rng.uniform(2) - 0.5) * 0.5 * (a[1:] + b[1:])
        offset = np.array([0.45 * (a[0] + b[0]), lateral[0], lateral[1]])
        mesh = merge(box_mesh(a), box_mesh(b, center=offset))
        return _rotated(mesh, random_rotation(rng)), np.concatenate([a, b, offset])
    if family == "l-shapes":
        w, h = rng.uniform(2, 0.5, 1.0)
        nw, nh = rng.uniform(2, 0.3, 0.7) * np.array([w, h])
        d = float(rng.uniform((), 0.2, 0.6))
        params = np.array([w, h, nw, nh, d])
        return _rotated(l_prism(w, h, nw, nh, d), random_rotation(rng)), params
    raise ValueError(f"unknown shape family {family!r}")


def condition_vector(family: str, params: np.ndarray) -> np.ndarray:
    """Family one-hot followed by the intrinsic parameters (pose excluded)."""
    cond = np.zeros(COND_DIM)
    cond[FAMILIES.index(family)] = 1.0
    cond[len(FAMILIES):len(FAMILIES) + len(params)] = params
    return cond


def gen_synthetic_shapes(count: int, family: str = "mixed", rng: Rng | None = None) -> list[Shape]:
    """``count`` normalized shapes; ``mixed`` cycles through every family."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = rng or Rng(0)
    out = []
    for i in range(count):
        fam = FAMILIES[i % len(FAMILIES)] if family == "mixed" else family
        mesh, params = _make(fam, rng)
        mesh, _ = normalize_unit_cube(mesh)
        out.append(Shape(mesh=mesh, family=fam, params=params, cond=condition_vector(fam, params)))
    return out
