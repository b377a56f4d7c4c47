"""Training pairs from meshes, the on-disk corpus layout and its manifest.

A corpus directory holds one subdirectory per asset with the full-surface
grid (``full.voxg``) and one visible-point grid per view that saw anything
(``view_XX.voxg``). ``manifest.jsonl`` lists one record per (asset, view);
fields, in order: ``asset``, ``view``, ``files``, ``cond``, ``config_hash``.
``files`` maps roles (``full``, ``prior`` or ``pair``) to paths relative to
the manifest.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .geometry import Camera, TriangleMesh, make_view_ring, sample_surface
from .latent import OccupancyAutoencoder, encode_ss, mix_latent
from .numcore import Rng
from .shapes import Shape, gen_synthetic_shapes
from .visibility import EmptyViewWarning, visible_points
from .voxel import OccupancyGrid, downsample_mask, load_grid, save_grid, voxelize

MANIFEST = "manifest.jsonl"


class DatasetError(ValueError):
    pass


@dataclass
class TrainingPair:
    q_comb: np.ndarray
    m_s: np.ndarray
    cond: np.ndarray
    q_gt: np.ndarray
    q_vis: np.ndarray
    asset: str = ""
    view: int = -1


@dataclass
class AssetGrids:
    """Full-surface grid plus the per-view visible grids of one asset."""
    full: OccupancyGrid
    views: dict[int, OccupancyGrid]
    cond: np.ndarray = field(default_factory=lambda: np.zeros(0))


def grid_config_hash(N: int, r: int) -> str:
    blob = json.dumps({"N": N, "r": r}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def asset_grids(mesh: TriangleMesh, cameras: list[Camera], S: int, N: int, tau_fraction: float,
                rng: Rng) -> AssetGrids:
    """Sample the surface once, then voxelize the full set and each view's visible subset."""
    cloud = sample_surface(mesh, S, rng)
    views = {}
    for t, cam in enumerate(cameras):
        vis, _ = visible_points(mesh, cloud, cam, tau_fraction)
        if len(vis) == 0:
            warnings.warn(f"view {t} sees no points; skipped", EmptyViewWarning, stacklevel=2)
            continue
        views[t] = voxelize(vis, N)
    return AssetGrids(full=voxelize(cloud, N), views=views)


def make_pair(vae: OccupancyAutoencoder, prior: OccupancyGrid, q_gt: np.ndarray, cond, rng: Rng,
              asset: str = "", view: int = -1) -> TrainingPair:
    q_vis = encode_ss(prior, vae)
    m_s = downsample_mask(prior, vae.config.r).astype(np.float64)
    eps = rng.normal(q_vis.shape)
    return TrainingPair(q_comb=mix_latent(q_vis, m_s, eps), m_s=m_s, cond=np.asarray(cond, dtype=np.float64),
                        q_gt=q_gt, q_vis=q_vis, asset=asset, view=view)


def build_pairs(mesh: TriangleMesh, vae: OccupancyAutoencoder, cameras: list[Camera], S: int = 50_000,
                tau_fraction: float = 0.05, rng: Rng | None = None, cond=None,
                asset: str = "") -> list[TrainingPair]:
    """One pair per camera that sees at least one point; empty views are skipped with a warning."""
    rng = rng or Rng(0)
    cfg = vae.config
    grids = asset_grids(mesh, cameras, S, cfg.N, tau_fraction, rng)
    q_gt = encode_ss(grids.full, vae)
    cond = np.zeros(cfg.cond_dim) if cond is None else cond
    return [make_pair(vae, g, q_gt, cond, rng, asset, t) for t, g in grids.views.items()]


# ------------------------------------------------------------------- corpus

def _asset_name(i: int) -> str:
    return f"asset_{i:04d}"


def make_corpus(out_dir, count: int, views: int = 24, N: int = 16, r: int = 4, S: int = 50_000,
                tau_fraction: float = 0.05, pitch_deg: float = 30.0, radius: float = 1.8,
                image_size: int = 64, family: str = "mixed", seed: int = 0, threads: int = 1) -> Path:
    """Generate shapes, render their view rings and write grids plus manifest.

    Asset ``i`` draws from ``Rng(seed).spawn(i)``, so output is identical for
    any thread count.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shapes = gen_synthetic_shapes(count, family, Rng(seed))
    cams = make_view_ring(views, pitch_deg, radius, H=image_size, W=image_size)
    base = Rng(seed)

    def work(i: int) -> AssetGrids:
        g = asset_grids(shapes[i].mesh, cams, S, N, tau_fraction, base.spawn(i + 1))
        g.cond = shapes[i].cond
        return g

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(work, range(count)))
    records = []
    h = grid_config_hash(N, r)
    for i, g in enumerate(results):
        name = _asset_name(i)
        (out / name).mkdir(exist_ok=True)
        save_grid(g.full, out / name / "full.voxg")
        for t, grid in g.views.items():
            save_grid(grid, out / name / f"view_{t:02d}.voxg")
            records.append({"asset": name, "view": t,
                            "files": {"full": f"{name}/full.voxg", "prior": f"{name}/view_{t:02d}.voxg"},
                            "cond": [float(c) for c in g.cond], "config_hash": h})
    write_manifest(out / MANIFEST, records)
    return out / MANIFEST


def write_manifest(path, records: list[dict]) -> None:
    keys = ("asset", "view", "files", "cond", "config_hash")
    lines = [json.dumps({k: rec[k] for k in keys}) for rec in records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path, expected_hash: str | None = None) -> list[dict]:
    """Parse and validate: non-empty, files present, hashes matching ``expected_hash``."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            files = {role: path.parent / rel for role, rel in rec["files"].items()}
            rec = {"asset": rec["asset"], "view": int(rec["view"]), "files": files,
                   "cond": np.asarray(rec["cond"], dtype=np.float64), "config_hash": rec["config_hash"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if expected_hash is not None and rec["config_hash"] != expected_hash:
            raise DatasetError(f"{path}:{lineno}: config hash {rec['config_hash']} != expected {expected_hash}")
        for f in files.values():
            if not f.exists():
                raise DatasetError(f"{path}:{lineno}: missing file {f}")
        records.append(rec)
    if not records:
        raise DatasetError(f"manifest {path} has no records")
    return records


@dataclass
class Corpus:
    """Grids of a corpus directory, loaded once and grouped by asset."""
    assets: list[str]
    full: dict[str, OccupancyGrid]
    priors: dict[str, dict[int, OccupancyGrid]]
    cond: dict[str, np.ndarray]


def load_corpus(path, N: int, r: int) -> Corpus:
    records = read_manifest(path, grid_config_hash(N, r))
    assets, full, priors, cond = [], {}, {}, {}
    for rec in records:
        a = rec["asset"]
        if a not in full:
            assets.append(a)
            full[a] = load_grid(rec["files"]["full"])
            priors[a] = {}
            cond[a] = rec["cond"]
        priors[a][rec["view"]] = load_grid(rec["files"]["prior"])
    return Corpus(assets, full, priors, cond)


def save_pair(pair: TrainingPair, path, config_hash: str) -> None:
    tensors = {"q_comb": pair.q_comb, "m_s": pair.m_s, "cond": pair.cond, "q_gt": pair.q_gt, "q_vis": pair.q_vis}
    nc.save_checkpoint(path, tensors, {"kind": "pair", "asset": pair.asset, "view": pair.view,
                                       "config_hash": config_hash})


def load_pair(path, expected_hash: str | None = None) -> TrainingPair:
    t, header = nc.load_checkpoint(path)
    if header.get("kind") != "pair":
        raise DatasetError(f"{path}: not a training pair file")
    if expected_hash is not None and header.get("config_hash") != expected_hash:
        raise DatasetError(f"{path}: config hash {header.get('config_hash')} != expected {expected_hash}")
    return TrainingPair(q_comb=t["q_comb"], m_s=t["m_s"], cond=t["cond"], q_gt=t["q_gt"], q_vis=t["q_vis"],
                        asset=header.get("asset", ""), view=int(header.get("view", -1)))


__all__ = [
    "AssetGrids", "Corpus", "DatasetError", "MANIFEST", "Shape", "TrainingPair", "asset_grids", "build_pairs",
    "gen_synthetic_shapes", "grid_config_hash", "load_corpus", "load_pair", "make_corpus", "make_pair",
    "read_manifest", "save_pair", "write_manifest",
]
