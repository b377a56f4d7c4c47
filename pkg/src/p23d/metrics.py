"""Chamfer distance, F-score and visible-region evaluation on point sets.

Nearest neighbours are exact: a uniform grid narrows the candidates, and
every candidate distance is computed with :func:`pair_distance`, so results
are bit-identical to an exhaustive search using the same formula.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .geometry import PointCloud
from .voxel import OccupancyGrid, VoxelError, downsample_mask, grid_iou, upsample_mask


class MetricError(ValueError):
    pass


def pair_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distance between broadcastable ``(..., 3)`` arrays."""
    dx = p[..., 0] - q[..., 0]
    dy = p[..., 1] - q[..., 1]
    dz = p[..., 2] - q[..., 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def _pts(x) -> np.ndarray:
    arr = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(arr) == 0:
        raise MetricError("point set is empty")
    return arr


def _brute_min(P: np.ndarray, Q: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = np.empty(len(P))
    for lo in range(0, len(P), chunk):
        out[lo:lo + chunk] = pair_distance(P[lo:lo + chunk, None, :], Q[None, :, :]).min(axis=1)
    return out


def nearest_distances(P, Q, max_ring: int = 3) -> np.ndarray:
    """For each point of P, the distance to its nearest neighbour in Q."""
    P, Q = _pts(P), _pts(Q)
    lo = np.minimum(P.min(axis=0), Q.min(axis=0))
    extent = float((np.maximum(P.max(axis=0), Q.max(axis=0)) - lo).max())
    cells_per_axis = max(1, int(round((len(Q) / 2.0) ** (1.0 / 3.0))))
    h = extent / cells_per_axis if extent > 0 else 1.0
    ncell = cells_per_axis + 2 * (max_ring + 1) + 1
    base = max_ring + 1

    def keys(ijk):
        return (ijk[:, 0] * ncell + ijk[:, 1]) * ncell + ijk[:, 2]

    qc = np.minimum(np.floor((Q - lo) / h).astype(np.int64), cells_per_axis) + base
    order = np.argsort(keys(qc), kind="stable")
    Qs = Q[order]
    qkeys = keys(qc)[order]
    pc = np.minimum(np.floor((P - lo) / h).astype(np.int64), cells_per_axis) + base

    best = np.full(len(P), np.inf)
    todo = np.arange(len(P))
    for ring in range(0, max_ring + 1):
        if len(todo) == 0:
            break
        rng_ = range(-ring, ring + 1)
        offsets = [(a, b, c) for a in rng_ for b in rng_ for c in rng_
                   if max(abs(a), abs(b), abs(c)) == ring]
        for off in offsets:
            nk = keys(pc[todo] + np.array(off))
            start = np.searchsorted(qkeys, nk, side="left")
            stop = np.searchsorted(qkeys, nk, side="right")
            cnt = stop - start
            hit = cnt > 0
            if not hit.any():
                continue
            owners = np.repeat(np.flatnonzero(hit), cnt[hit])
            first = np.repeat(start[hit], cnt[hit])
            within = np.arange(len(owners)) - np.repeat(np.cumsum(cnt[hit]) - cnt[hit], cnt[hit])
            d = pair_distance(P[todo[owners]], Qs[first + within])
            seg = np.concatenate([[0], np.cumsum(cnt[hit])[:-1]])
            mins = np.minimum.reduceat(d, seg)
            tgt = todo[np.flatnonzero(hit)]
            best[tgt] = np.minimum(best[tgt], mins)
        # anything unsearched lies at least ring * h away
        todo = todo[~(best[todo] <= ring * h)]
    if len(todo):
        best[todo] = np.minimum(best[todo], _brute_min(P[todo], Q))
    return best


def chamfer(P, Q, mode: str = "mean", squared: bool = False) -> float:
    """Symmetric Chamfer distance from the two directed mean NN distances.

    ``mode="mean"`` averages the two directions, ``"sum"`` adds them.
    """
    if mode not in ("mean", "sum"):
        raise MetricError(f"unknown chamfer mode {mode!r}")
    d_pq = nearest_distances(P, Q)
    d_qp = nearest_distances(Q, P)
    if squared:
        d_pq, d_qp = d_pq * d_pq, d_qp * d_qp
    total = float(d_pq.mean()) + float(d_qp.mean())
    return total / 2.0 if mode == "mean" else total


def fscore(P, Q, threshold: float = 0.05) -> tuple[float, float, float]:
    """(precision, recall, F) with an inclusive ``<= threshold`` match."""
    if not threshold > 0:
        raise MetricError("threshold must be positive")
    precision = float(np.mean(nearest_distances(P, Q) <= threshold))
    recall = float(np.mean(nearest_distances(Q, P) <= threshold))
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)


# ------------------------------------------------------------------ grids

def _centers(occ: np.ndarray) -> np.ndarray:
    N = occ.shape[0]
    return (np.argwhere(occ) + 0.5) / N - 0.5


@dataclass
class EvalRecord:
    name: str
    cd: float
    fscore: float
    precision: float
    recall: float
    iou: float
    vis_cd: float
    vis_fscore: float
    n_gen: int
    n_gt: int
    seed: int = 0


def grid_scores(gen: np.ndarray, gt: np.ndarray, threshold: float,
                mode: str = "mean") -> tuple[float, float, float, float]:
    """(cd, precision, recall, F) between voxel-centre sets; empty sets score F=0."""
    if not gen.any() or not gt.any():
        return math.inf, 0.0, 0.0, 0.0
    a, b = _centers(gen), _centers(gt)
    p, r, f = fscore(a, b, threshold)
    return chamfer(a, b, mode), p, r, f


def visible_region_eval(gen: OccupancyGrid, gt: OccupancyGrid, prior: OccupancyGrid, r: int = 4,
                        threshold: float = 0.05, name: str = "", seed: int = 0, mode: str = "mean") -> EvalRecord:
    """Overall metrics plus metrics restricted to latent cells the prior covers."""
    if not (gen.N == gt.N == prior.N):
        raise VoxelError(f"resolution mismatch: {gen.N}, {gt.N}, {prior.N}")
    cells = downsample_mask(prior, r)
    if not cells.any():
        raise MetricError("prior covers no latent cell; visible region is empty")
    region = upsample_mask(cells, gen.N)
    cd, p, rc, f = grid_scores(gen.occ, gt.occ, threshold, mode)
    vcd, _, _, vf = grid_scores(gen.occ & region, gt.occ & region, threshold, mode)
    return EvalRecord(name=name, cd=cd, fscore=f, precision=p, recall=rc, iou=grid_iou(gen, gt),
                      vis_cd=vcd, vis_fscore=vf, n_gen=gen.count(), n_gt=gt.count(), seed=seed)


# ----------------------------------------------------------------- reports

def aggregate(records: list[EvalRecord]) -> EvalRecord:
    if not records:
        raise MetricError("no records to aggregate")
    vals = {}
    for f in fields(EvalRecord):
        if f.name == "name":
            vals[f.name] = "mean"
        elif f.name == "seed":
            vals[f.name] = records[0].seed
        else:
            vals[f.name] = float(np.mean([getattr(r, f.name) for r in records]))
    return EvalRecord(**vals)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_text(records: list[EvalRecord], format: str = "csv") -> str:
    rows = [asdict(r) for r in records] + [asdict(aggregate(records))]
    if format == "jsonl":
        return "".join(json.dumps(row, sort_keys=False) + "\n" for row in rows)
    if format != "csv":
        raise MetricError(f"unknown report format {format!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in fields(EvalRecord)])
    for row in rows:
        w.writerow([_fmt(v) for v in row.values()])
    return buf.getvalue()


def emit_report(records: list[EvalRecord], path, format: str = "csv") -> None:
    """Header, one row per record, aggregate (``name == "mean"``) last."""
    text = report_text(records, format)
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise MetricError(f"cannot write report to {path}: {exc}") from exc
