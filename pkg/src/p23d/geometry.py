"""Geometry containers, file I/O, normalization, surface sampling, cameras.

Conventions: right-handed world frame with +z up. Camera coordinates follow
the pinhole/OpenCV layout: x right, y down, z forward, so a point in front of
the camera has positive depth ``w``. ``Camera.R`` maps world offsets into that
frame (rows are the camera axes expressed in world coordinates) and
``Camera.t`` is the camera centre in world coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .numcore import Rng


class GeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise GeometryError("triangle index out of range")

    def corners(self) -> np.ndarray:
        """``(T, 3, 3)`` array of triangle corner positions."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


@dataclass
class Camera:
    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    H: int
    W: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9):
            raise GeometryError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.H < 1 or self.W < 1:
            raise GeometryError("image size must be at least 1x1")

    @property
    def forward(self) -> np.ndarray:
        return self.R[2]


def default_intrinsics(H: int, W: int) -> dict:
    """fx = fy = W with the principal point at the image centre."""
    return {"fx": float(W), "fy": float(W), "cx": W / 2.0, "cy": H / 2.0}


# ------------------------------------------------------------------------ I/O

def _floats(parts, lineno, path, n=3):
    try:
        vals = [float(x) for x in parts[:n]]
    except ValueError:
        raise GeometryError(f"{path}:{lineno}: cannot parse numbers from {' '.join(parts)!r}") from None
    if len(vals) < n:
        raise GeometryError(f"{path}:{lineno}: expected {n} values")
    return vals


def _load_obj(path: Path):
    verts, faces = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append(_floats(parts[1:], lineno, path))
        elif parts[0] == "f":
            try:
                idx = [int(p.split("/")[0]) for p in parts[1:]]
            except ValueError:
                raise GeometryError(f"{path}:{lineno}: bad face record") from None
            if len(idx) < 3:
                raise GeometryError(f"{path}:{lineno}: face needs at least 3 vertices")
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts:
        raise GeometryError(f"{path}: no vertices")
    if not faces:
        return PointCloud(np.array(verts))
    try:
        return TriangleMesh(np.array(verts), np.array(faces))
    except GeometryError as exc:
        raise GeometryError(f"{path}: {exc}") from None


def _load_ply(path: Path):
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise GeometryError(f"{path}:1: missing 'ply' magic")
    n_vert = n_face = 0
    props: list[str] = []
    element = None
    end = None
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise GeometryError(f"{path}:{lineno}: only ASCII PLY is supported")
        if parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vert = int(parts[2])
            elif element == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            props.append(parts[-1])
        elif parts[0] == "end_header":
            end = lineno
            break
    if end is None:
        raise GeometryError(f"{path}: missing end_header")
    try:
        ix, iy, iz = props.index("x"), props.index("y"), props.index("z")
    except ValueError:
        raise GeometryError(f"{path}: vertex element lacks x/y/z properties") from None
    body = [(n, l) for n, l in enumerate(lines[end:], end + 1) if l.strip()]
    if len(body) < n_vert + n_face:
        lineno = body[-1][0] + 1 if body else end + 1
        raise GeometryError(
            f"{path}:{lineno}: header declares {n_vert} vertices and {n_face} faces "
            f"but only {len(body)} data lines follow")
    verts = []
    for lineno, line in body[:n_vert]:
        parts = line.split()
        if len(parts) < len(props):
            raise GeometryError(f"{path}:{lineno}: vertex line has {len(parts)} of {len(props)} values")
        v = _floats(parts, lineno, path, n=len(props))
        verts.append((v[ix], v[iy], v[iz]))
    faces = []
    for lineno, line in body[n_vert:n_vert + n_face]:
        parts = line.split()
        try:
            k = int(parts[0])
            idx = [int(x) for x in parts[1:1 + k]]
        except (ValueError, IndexError):
            raise GeometryError(f"{path}:{lineno}: bad face record") from None
        for j in range(1, k - 1):
            faces.append((idx[0], idx[j], idx[j + 1]))
    if len(body) > n_vert + n_face:
        raise GeometryError(
            f"{path}:{body[n_vert + n_face][0]}: data beyond the {n_vert} vertices / "
            f"{n_face} faces declared in the header")
    if not verts:
        raise GeometryError(f"{path}: no vertices")
    if faces:
        return TriangleMesh(np.array(verts), np.array(faces))
    return PointCloud(np.array(verts))


def _load_xyz(path: Path):
    pts = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        pts.append(_floats(parts, lineno, path))
    if not pts:
        raise GeometryError(f"{path}: no points")
    return PointCloud(np.array(pts))


def load_geometry(path, format: str | None = None):
    """Read OBJ (v/f), ASCII PLY (x y z, optional faces) or XYZ text."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    loaders = {"obj": _load_obj, "ply": _load_ply, "xyz": _load_xyz}
    if fmt not in loaders:
        raise GeometryError(f"unknown geometry format {fmt!r}")
    if not path.exists():
        raise GeometryError(f"{path}: no such file")
    return loaders[fmt](path)


def write_ply(cloud: PointCloud, path) -> None:
    pts = cloud.points
    lines = ["ply", "format ascii 1.0", f"comment generated by p23d {__version__}",
             f"element vertex {len(pts)}", "property float x", "property float y",
             "property float z", "end_header"]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts]
    Path(path).write_text("\n".join(lines) + "\n")


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def write_xyz(cloud: PointCloud, path) -> None:
    Path(path).write_text("".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in cloud.points))


# -------------------------------------------------------------- normalization

@dataclass(frozen=True)
class Similarity:
    """``p_norm = (p - center) * scale``."""

    center: np.ndarray
    scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.center) * self.scale

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) / self.scale + self.center


def _points_of(geom) -> np.ndarray:
    return geom.vertices if isinstance(geom, TriangleMesh) else geom.points


def normalize_unit_cube(geom):
    """Centre the bounding box at the origin and scale its longest side to 1."""
    pts = _points_of(geom)
    if len(pts) == 0:
        raise GeometryError("cannot normalize empty geometry")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise GeometryError("geometry has zero extent")
    tf = Similarity(center=(lo + hi) / 2.0, scale=1.0 / extent)
    if isinstance(geom, TriangleMesh):
        return TriangleMesh(tf.apply(geom.vertices), geom.triangles.copy()), tf
    return PointCloud(tf.apply(geom.points)), tf


# ------------------------------------------------------------------- sampling

def sample_surface(mesh: TriangleMesh, S: int, rng: Rng, return_faces: bool = False):
    """Area-weighted uniform surface samples (``S`` points)."""
    if S < 1:
        raise GeometryError("sample count must be >= 1")
    areas = mesh.areas()
    if areas.size == 0 or not areas.sum() > 0:
        raise GeometryError("mesh has no non-degenerate triangles")
    face = rng.choice_weighted(areas, S)
    u = rng.uniform((S, 2))
    flip = u.sum(axis=1) > 1.0
    u[flip] = 1.0 - u[flip]
    c = mesh.corners()[face]
    pts = c[:, 0] + u[:, :1] * (c[:, 1] - c[:, 0]) + u[:, 1:] * (c[:, 2] - c[:, 0])
    cloud = PointCloud(pts)
    return (cloud, face) if return_faces else cloud


# --------------------------------------------------------------------- camera

def world_to_camera(p, cam: Camera) -> np.ndarray:
    """``R (p - t)``; works on a single point or an ``(n, 3)`` array."""
    p = np.asarray(p, dtype=np.float64)
    return (p - cam.t) @ cam.R.T


@dataclass
class Projection:
    xy: np.ndarray
    depth: np.ndarray
    in_front: np.ndarray


def project(p_cam, cam: Camera) -> Projection:
    """Pinhole projection; points with ``w <= 0`` are flagged, not projected.

    Pixel centres sit at integer coordinates; column ``x``, row ``y``.
    """
    p = np.atleast_2d(np.asarray(p_cam, dtype=np.float64))
    w = p[:, 2]
    front = w > 0
    xy = np.full((len(p), 2), np.nan)
    safe = np.where(front, w, 1.0)
    xy[:, 0] = np.where(front, cam.fx * p[:, 0] / safe + cam.cx, np.nan)
    xy[:, 1] = np.where(front, cam.fy * p[:, 1] / safe + cam.cy, np.nan)
    return Projection(xy=xy, depth=w, in_front=front)


def look_at_camera(center, target, H: int, W: int, up=(0.0, 0.0, 1.0), intrinsics: dict | None = None) -> Camera:
    center = np.asarray(center, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(f)
    if norm == 0:
        raise GeometryError("camera centre coincides with its target")
    f = f / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(f, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f])
    return Camera(R=R, t=center, H=H, W=W, **(intrinsics or default_intrinsics(H, W)))


def make_view_ring(n_views: int = 8, pitch_deg: float = 30.0, radius: float = 1.8,
                   look_at=(0.0, 0.0, 0.0), H: int = 64, W: int = 64,
                   intrinsics: dict | None = None) -> list[Camera]:
    """Cameras at yaw ``k * 360 / n`` and fixed elevation, all aimed at ``look_at``."""
    if n_views < 1:
        raise GeometryError("n_views must be >= 1")
    if radius <= 0:
        raise GeometryError("radius must be positive")
    target = np.asarray(look_at, dtype=np.float64)
    pitch = math.radians(pitch_deg)
    cams = []
    for k in range(n_views):
        yaw = math.radians(360.0 * k / n_views)
        offset = radius * np.array([math.cos(pitch) * math.cos(yaw),
                                    math.cos(pitch) * math.sin(yaw),
                                    math.sin(pitch)])
        cams.append(look_at_camera(target + offset, target, H, W, intrinsics=intrinsics))
    return cams


def rotation_about(axis, angle: float) -> np.ndarray:
    """Active right-handed rotation matrix (Rodrigues)."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K
