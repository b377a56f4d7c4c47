"""Depth rendering and depth-consistency visibility.

A point is visible from a camera when it lands inside the image in front of
the camera and its depth agrees with the rendered depth at its pixel to
within ``tau`` (strictly). Pixel lookup is nearest-centre, no interpolation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Camera, PointCloud, TriangleMesh, project, world_to_camera

EMPTY = np.inf
NEAR = 1e-6


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W), EMPTY where nothing was drawn

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)


class EmptyViewWarning(UserWarning):
    pass


def _clip_near(tri: np.ndarray, near: float) -> list[np.ndarray]:
    """Clip a camera-space triangle against ``w >= near``; returns a fan."""
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        ina, inb = a[2] >= near, b[2] >= near
        if ina:
            poly.append(a)
        if ina != inb:
            s = (near - a[2]) / (b[2] - a[2])
            poly.append(a + s * (b - a))
    return [np.stack([poly[0], poly[k], poly[k + 1]]) for k in range(1, len(poly) - 1)]


def _camera_triangles(mesh: TriangleMesh, cam: Camera) -> np.ndarray:
    if len(mesh.triangles) == 0:
        return np.zeros((0, 3, 3))
    tri = world_to_camera(mesh.vertices, cam)[mesh.triangles]
    w = tri[:, :, 2]
    front = (w >= NEAR).all(axis=1)
    partial = ~front & (w >= NEAR).any(axis=1)
    extra = [t for tr in tri[partial] for t in _clip_near(tr, NEAR)]
    if extra:
        return np.concatenate([tri[front], np.stack(extra)])
    return tri[front]


def render_depth_mesh(mesh: TriangleMesh, cam: Camera, chunk: int = 64) -> DepthMap:
    """Z-buffered rasterization sampled at pixel centres, no culling.

    Depth is interpolated perspective-correctly (linear in 1/w over screen
    space), which reproduces the exact plane depth along each pixel ray.
    """
    H, W = cam.H, cam.W
    zbuf = np.full(H * W, EMPTY)
    tri = _camera_triangles(mesh, cam)
    if len(tri) == 0:
        return DepthMap(zbuf.reshape(H, W))
    inv_w = 1.0 / tri[:, :, 2]
    sx = cam.fx * tri[:, :, 0] * inv_w + cam.cx
    sy = cam.fy * tri[:, :, 1] * inv_w + cam.cy
    area = (sx[:, 1] - sx[:, 0]) * (sy[:, 2] - sy[:, 0]) - (sy[:, 1] - sy[:, 0]) * (sx[:, 2] - sx[:, 0])
    keep = area != 0
    # drop triangles whose screen bbox misses every pixel centre
    keep &= (sx.max(axis=1) >= 0) & (sx.min(axis=1) <= W - 1)
    keep &= (sy.max(axis=1) >= 0) & (sy.min(axis=1) <= H - 1)
    sx, sy, inv_w, area = sx[keep], sy[keep], inv_w[keep], area[keep]
    px = np.arange(W, dtype=np.float64)
    py = np.arange(H, dtype=np.float64)
    for lo in range(0, len(sx), chunk):
        cx_, cy_, iw, ar = sx[lo:lo + chunk], sy[lo:lo + chunk], inv_w[lo:lo + chunk], area[lo:lo + chunk]
        x0 = max(int(np.floor(cx_.min())), 0)
        x1 = min(int(np.ceil(cx_.max())), W - 1)
        y0 = max(int(np.floor(cy_.min())), 0)
        y1 = min(int(np.ceil(cy_.max())), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        X, Y = np.meshgrid(px[x0:x1 + 1], py[y0:y1 + 1])
        X = X.reshape(1, -1)
        Y = Y.reshape(1, -1)
        lam = []
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            e = (cx_[:, k:k + 1] - cx_[:, j:j + 1]) * (Y - cy_[:, j:j + 1]) - \
                (cy_[:, k:k + 1] - cy_[:, j:j + 1]) * (X - cx_[:, j:j + 1])
            lam.append(e / ar[:, None])
        lam = np.stack(lam)  # (3, T, P)
        inside = (lam >= 0).all(axis=0)
        inv_depth = (lam * iw.T[:, :, None]).sum(axis=0)
        depth = np.where(inside & (inv_depth > 0), 1.0 / np.where(inv_depth > 0, inv_depth, 1.0), EMPTY)
        best = depth.min(axis=0).reshape(y1 - y0 + 1, x1 - x0 + 1)
        view = zbuf.reshape(H, W)[y0:y1 + 1, x0:x1 + 1]
        np.minimum(view, best, out=view)
    return DepthMap(zbuf.reshape(H, W))


def pixel_index(xy: np.ndarray) -> np.ndarray:
    """Nearest pixel centre: ``floor(x + 0.5)``, ``floor(y + 0.5)``."""
    with np.errstate(invalid="ignore"):
        return np.floor(xy + 0.5)


def render_depth_points(cloud: PointCloud, cam: Camera, splat_px: int = 0) -> DepthMap:
    """Each point writes its depth into a ``(2s+1)^2`` pixel square; min wins."""
    if splat_px < 0:
        raise ValueError("splat_px must be >= 0")
    H, W = cam.H, cam.W
    zbuf = np.full((H, W), EMPTY)
    proj = project(world_to_camera(cloud.points, cam), cam)
    ok = proj.in_front
    pix = pixel_index(proj.xy[ok]).astype(np.int64)
    w = proj.depth[ok]
    for dy in range(-splat_px, splat_px + 1):
        for dx in range(-splat_px, splat_px + 1):
            x = pix[:, 0] + dx
            y = pix[:, 1] + dy
            inb = (x >= 0) & (x < W) & (y >= 0) & (y < H)
            np.minimum.at(zbuf, (y[inb], x[inb]), w[inb])
    return DepthMap(zbuf)


def compute_tau(depth: DepthMap, fraction: float = 0.05) -> float:
    """``fraction`` times the depth range (max - min) of the non-empty pixels."""
    vals = depth.depth[depth.valid]
    if vals.size == 0:
        raise ValueError("depth map has no non-empty pixels")
    return float(fraction) * float(vals.max() - vals.min())


def observation_mask(cloud: PointCloud, cam: Camera, depth: DepthMap, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValueError("tau must be >= 0")
    proj = project(world_to_camera(cloud.points, cam), cam)
    pix = pixel_index(proj.xy)
    x, y = pix[:, 0], pix[:, 1]
    inside = proj.in_front & (x >= 0) & (x < cam.W) & (y >= 0) & (y < cam.H)
    xi = np.where(inside, x, 0).astype(np.int64)
    yi = np.where(inside, y, 0).astype(np.int64)
    d = depth.depth[yi, xi]
    with np.errstate(invalid="ignore"):
        return inside & np.isfinite(d) & (np.abs(d - proj.depth) < tau)


def extract_visible(cloud: PointCloud, mask: np.ndarray) -> PointCloud:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(cloud),):
        raise ValueError(f"mask length {mask.shape} does not match {len(cloud)} points")
    out = PointCloud(cloud.points[mask])
    if len(out) == 0:
        warnings.warn("no visible points in this view", EmptyViewWarning, stacklevel=2)
    return out


def union_visible(views: list[PointCloud]) -> PointCloud:
    if not views:
        raise ValueError("need at least one view")
    pts = np.concatenate([v.points for v in views])
    if len(pts) == 0:
        raise ValueError("every view is empty")
    return PointCloud(pts)


def visible_points(mesh: TriangleMesh, cloud: PointCloud, cam: Camera,
                   tau_fraction: float = 0.05) -> tuple[PointCloud, np.ndarray]:
    """Render, pick tau from the depth range, mask and extract in one call."""
    depth = render_depth_mesh(mesh, cam)
    if not depth.valid.any():
        return PointCloud(np.zeros((0, 3))), np.zeros(len(cloud), dtype=bool)
    mask = observation_mask(cloud, cam, depth, compute_tau(depth, tau_fraction))
    return PointCloud(cloud.points[mask]), mask


def write_pfm(depth: DepthMap, path) -> None:
    """Greyscale PFM, little-endian, rows stored bottom-to-top."""
    H, W = depth.depth.shape
    body = np.flipud(depth.depth).astype("<f4").tobytes()
    Path(path).write_bytes(f"Pf\n{W} {H}\n-1.0\n".encode() + body)


def read_pfm(path) -> DepthMap:
    buf = Path(path).read_bytes()
    head, rest = buf.split(b"\n", 3)[:3], buf.split(b"\n", 3)[3]
    if head[0] != b"Pf":
        raise ValueError("not a greyscale PFM")
    W, H = (int(v) for v in head[1].split())
    dtype = "<f4" if float(head[2]) < 0 else ">f4"
    arr = np.frombuffer(rest, dtype=dtype, count=W * H).reshape(H, W)
    return DepthMap(np.flipud(arr).astype(np.float64))
