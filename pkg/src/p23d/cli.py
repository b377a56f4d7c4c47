"""Command-line entry point: ``p23d <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure. Every subcommand accepts every config key as a flag and prints the
resolved config (including the seed) to stderr before running.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import DEFAULTS, FIELD_TYPES, Config, ConfigError, format_config, parse_value, resolve
from .dataset import DatasetError, load_corpus, make_corpus
from .geometry import GeometryError, PointCloud, load_geometry, make_view_ring, normalize_unit_cube, \
    sample_surface, write_obj, write_ply, write_xyz
from .latent import InpaintNet, LatentError, OccupancyAutoencoder, decode_ss, encode_ss
from .metrics import MetricError, emit_report, report_text, visible_region_eval
from .numcore import FormatError, NumericError, Rng, ShapeError
from .pipeline import (
    EvalItem,
    encode_corpus,
    eval_items,
    evaluate_items,
    generate_items,
    reconstruction_iou,
    sweep_schedule,
    train_inpaint,
    train_vae,
)
from .sampler import Schedule, ScheduleError, repair_noisy_prior
from .visibility import render_depth_mesh, visible_points, write_pfm
from .voxel import VoxelError, load_grid, save_grid, voxel_centers, voxelize

FLAG_NAMES = {"N": "n", "t": "steps", "s": "inpaint-steps"}
DATA_ERRORS = (OSError, FormatError, GeometryError, VoxelError, DatasetError, LatentError, MetricError,
               ShapeError, ScheduleError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _flag(key: str) -> str:
    return "--" + FLAG_NAMES.get(key, key.replace("_", "-"))


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("config (override the config file)")
    g.add_argument("--config", default=None, help="key = value config file (default: $P23D_CONFIG)")
    for key in FIELD_TYPES:
        default = getattr(DEFAULTS, key)
        extra = {"nargs": "?", "const": True} if isinstance(default, bool) else {}
        g.add_argument(_flag(key), dest=f"cfg_{key}", metavar=type(default).__name__.upper(),
                       type=lambda raw, k=key: parse_value(k, raw), default=None,
                       help=f"(default: {default})", **extra)
    return p


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    ap = _Parser(prog="p23d", description="Point-prior structure completion on occupancy grids.")
    ap.add_argument("--version", action="version", version=f"p23d {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        return sub.add_parser(name, parents=[parent], help=help_, description=help_)

    p = cmd("sample-surface", "Sample points uniformly over a mesh surface.")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True, help="output .ply, .xyz or .obj")
    p.add_argument("--normalize", action="store_true", help="fit the mesh into [-0.5, 0.5]^3 first")

    p = cmd("visibility", "Keep the points of a cloud visible from one ring camera.")
    p.add_argument("--mesh", required=True)
    p.add_argument("--points", default=None, help="point file (default: sample the mesh)")
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--depth-out", default=None, help="also write the depth map as PFM")

    p = cmd("voxelize", "Voxelize a point file into an occupancy grid.")
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True)

    p = cmd("export-ply", "Write the voxel centres of a grid as a PLY point cloud.")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)

    p = cmd("make-dataset", "Generate synthetic shapes with full and per-view visible grids.")
    p.add_argument("--shapes", type=int, required=True)
    p.add_argument("--family", default="mixed", choices=["mixed", "boxes", "spheres", "unions", "l-shapes"])
    p.add_argument("--out", required=True)

    p = cmd("train-vae", "Train the occupancy autoencoder on a dataset's full grids.")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = cmd("train-inpaint", "Train the inpainting velocity network.")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--out", required=True)

    def model_args(p):
        p.add_argument("--checkpoint", required=True, help="inpainting network checkpoint")
        p.add_argument("--vae", default=None, help="autoencoder checkpoint (default: the one recorded at training)")

    p = cmd("generate", "Complete a visible-point prior grid.")
    model_args(p)
    p.add_argument("--prior", required=True)
    p.add_argument("--cond", default=None, help="comma-separated condition vector")
    p.add_argument("--baseline", action="store_true", help="ignore the prior (all-noise start, empty mask)")
    p.add_argument("--repair", action="store_true", help="repair the prior latent before sampling")
    p.add_argument("--out", required=True)

    p = cmd("repair-prior", "Diffuse-and-denoise a noisy prior; writes the decoded repaired grid.")
    model_args(p)
    p.add_argument("--prior", required=True)
    p.add_argument("--cond", default=None)
    p.add_argument("--out", required=True)

    p = cmd("eval", "Score generated grids (one triple, or a whole dataset with a model).")
    p.add_argument("--gen")
    p.add_argument("--gt")
    p.add_argument("--prior")
    p.add_argument("--data", help="dataset directory; evaluates one prior per asset")
    p.add_argument("--checkpoint")
    p.add_argument("--vae")
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--repair", action="store_true")
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    p.add_argument("--out", default=None, help="report path (default: stdout)")

    p = cmd("sweep-schedule", "Mean CD and F-score for several inpaint:refine step splits.")
    model_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default="50:0,40:10,30:20,25:25,20:30,10:40")
    p.add_argument("--out", default=None)
    return ap


def _config_from(args) -> Config:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return resolve(args.config, overrides)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _write_points(points: np.ndarray, path: str) -> None:
    ext = Path(path).suffix.lower()
    cloud = PointCloud(points)
    if ext == ".xyz":
        write_xyz(cloud, path)
    elif ext == ".ply":
        write_ply(cloud, path)
    else:
        raise UsageError(f"unsupported point output extension {ext!r} (use .ply or .xyz)")


def _read_points(path: str) -> PointCloud:
    geom = load_geometry(path)
    return geom if isinstance(geom, PointCloud) else PointCloud(geom.vertices)


def _parse_cond(raw, cfg: Config) -> np.ndarray:
    if raw is None:
        return np.zeros(cfg.cond_dim)
    vals = np.array([float(v) for v in raw.split(",")])
    if len(vals) != cfg.cond_dim:
        raise UsageError(f"--cond has {len(vals)} values, expected {cfg.cond_dim}")
    return vals


def _load_models(args):
    net = InpaintNet.load(args.checkpoint)
    vae_path = args.vae
    if vae_path is None:
        rel = net.header.get("vae")
        if rel is None:
            raise UsageError("--vae is required (checkpoint does not record one)")
        vae_path = Path(args.checkpoint).parent / rel
    vae = OccupancyAutoencoder.load(vae_path)
    if (vae.config.N, vae.config.r, vae.config.c_s) != (net.config.N, net.config.r, net.config.c_s):
        raise LatentError("autoencoder and inpainting network disagree on N, r or c_s")
    return net, vae


def _splits(raw: str) -> list[tuple[int, int]]:
    out = []
    for part in raw.split(","):
        try:
            a, b = part.split(":")
            out.append((int(a), int(b)))
        except ValueError:
            raise UsageError(f"bad split {part!r}; expected INPAINT:REFINE") from None
        if out[-1][0] < 0 or out[-1][1] < 0 or sum(out[-1]) < 1:
            raise UsageError(f"bad split {part!r}")
    return out


def run(args, cfg: Config) -> None:
    c = args.command
    if c == "sample-surface":
        mesh = load_geometry(args.mesh)
        if isinstance(mesh, PointCloud):
            raise GeometryError(f"{args.mesh} has no faces")
        if args.normalize:
            mesh, _ = normalize_unit_cube(mesh)
        pts = sample_surface(mesh, cfg.samples, Rng(cfg.seed))
        if Path(args.out).suffix.lower() == ".obj":
            write_obj(type(mesh)(pts.points, np.zeros((0, 3), dtype=np.int64)), args.out)
        else:
            _write_points(pts.points, args.out)
        _log(f"wrote {len(pts)} points to {args.out}")
    elif c == "visibility":
        mesh = load_geometry(args.mesh)
        cams = make_view_ring(cfg.views, cfg.pitch, cfg.radius, H=cfg.image_size, W=cfg.image_size)
        if not 0 <= args.view < len(cams):
            raise UsageError(f"--view must be in [0, {len(cams) - 1}]")
        cloud = _read_points(args.points) if args.points else sample_surface(mesh, cfg.samples, Rng(cfg.seed))
        vis, mask = visible_points(mesh, cloud, cams[args.view], cfg.tau_fraction)
        _write_points(vis.points, args.out)
        if args.depth_out:
            write_pfm(render_depth_mesh(mesh, cams[args.view]), args.depth_out)
        _log(f"{int(mask.sum())} of {len(cloud)} points visible from view {args.view}")
    elif c == "voxelize":
        grid = voxelize(_read_points(args.points), cfg.N)
        save_grid(grid, args.out)
        _log(f"{grid.count()} occupied voxels, {grid.clamped} points clamped")
    elif c == "export-ply":
        write_ply(voxel_centers(load_grid(args.grid)), args.out)
    elif c == "make-dataset":
        path = make_corpus(args.out, args.shapes, cfg.views, cfg.N, cfg.r, cfg.samples, cfg.tau_fraction,
                           cfg.pitch, cfg.radius, cfg.image_size, args.family, cfg.seed, cfg.threads)
        _log(f"wrote {path}")
    elif c == "train-vae":
        corpus = load_corpus(args.data, cfg.N, cfg.r)
        grids = np.stack([corpus.full[a].occ for a in corpus.assets])
        vae = train_vae(grids, cfg.model(), cfg.vae_iterations, cfg.batch, cfg.vae_lr, seed=cfg.seed, log=_log)
        iou = reconstruction_iou(vae, grids)
        vae.save(args.out, {"seed": cfg.seed, "train_iou_mean": float(iou.mean()), "train_iou_min": float(iou.min())})
        # report on the stored (float32) weights
        iou = reconstruction_iou(OccupancyAutoencoder.load(args.out), grids)
        print(f"train_iou_mean={iou.mean():.6f} train_iou_min={iou.min():.6f}")
    elif c == "train-inpaint":
        vae = OccupancyAutoencoder.load(args.vae)
        corpus = load_corpus(args.data, cfg.N, cfg.r)
        data = encode_corpus(vae, corpus)
        net = train_inpaint(data, cfg.model(), cfg.iterations, cfg.batch, cfg.lr, cfg.mask_dropout,
                            cfg.dropout_mode, seed=cfg.seed, log=_log)
        rel = os.path.relpath(Path(args.vae).resolve(), Path(args.out).resolve().parent)
        net.save(args.out, {"seed": cfg.seed, "vae": rel})
    elif c in ("generate", "repair-prior"):
        net, vae = _load_models(args)
        prior = load_grid(args.prior)
        item = [EvalItem(Path(args.prior).stem, prior, prior, _parse_cond(args.cond, cfg))]
        sched = Schedule(cfg.t, cfg.s)
        if c == "generate":
            repair = (cfg.repair_k, cfg.repair_strength) if args.repair else None
            grid = generate_items(net, vae, item, sched, cfg.seed, baseline=args.baseline,
                                  reanchor=cfg.reanchor, repair=repair, threshold=cfg.decode_threshold)[0]
        else:
            q = repair_noisy_prior(net, encode_ss(prior, vae), None, cfg.repair_k, cfg.repair_strength,
                                   item[0].cond, Rng(cfg.seed))
            grid = decode_ss(q, vae, cfg.decode_threshold)
        save_grid(grid, args.out)
        _log(f"{grid.count()} occupied voxels written to {args.out}")
    elif c == "eval":
        if args.data:
            if not args.checkpoint:
                raise UsageError("--data needs --checkpoint")
            net, vae = _load_models(args)
            items = eval_items(load_corpus(args.data, cfg.N, cfg.r))
            repair = (cfg.repair_k, cfg.repair_strength) if args.repair else None
            gens = generate_items(net, vae, items, Schedule(cfg.t, cfg.s), cfg.seed, baseline=args.baseline,
                                  reanchor=cfg.reanchor, repair=repair, threshold=cfg.decode_threshold)
            records = evaluate_items(gens, items, cfg.r, cfg.fscore_threshold, cfg.seed, cfg.chamfer_mode)
        else:
            if not (args.gen and args.gt and args.prior):
                raise UsageError("eval needs --gen, --gt and --prior, or --data with a model")
            records = [visible_region_eval(load_grid(args.gen), load_grid(args.gt), load_grid(args.prior), cfg.r,
                                           cfg.fscore_threshold, name=Path(args.gen).stem, seed=cfg.seed,
                                           mode=cfg.chamfer_mode)]
        if args.out:
            emit_report(records, args.out, args.format)
        else:
            sys.stdout.write(report_text(records, args.format))
    elif c == "sweep-schedule":
        splits = _splits(args.splits)
        net, vae = _load_models(args)
        items = eval_items(load_corpus(args.data, cfg.N, cfg.r))
        rows = sweep_schedule(net, vae, items, splits, cfg.fscore_threshold, cfg.seed, cfg.reanchor,
                              cfg.chamfer_mode, cfg.decode_threshold)
        out = open(args.out, "w", newline="") if args.out else sys.stdout
        try:
            w = csv.writer(out, lineterminator="\n")
            w.writerow(["inpaint", "refine", "cd", "fscore"])
            for row in rows:
                w.writerow([row["inpaint"], row["refine"], repr(row["cd"]), repr(row["fscore"])])
        finally:
            if args.out:
                out.close()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config_from(args)
    except UsageError as exc:
        print(f"p23d: error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"p23d: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _log(f"# p23d {__version__} {args.command}")
    for line in format_config(cfg).splitlines():
        _log(f"# {line}")
    try:
        run(args, cfg)
    except UsageError as exc:
        print(f"p23d: error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"p23d: numeric failure: {exc}", file=sys.stderr)
        return 3
    except DATA_ERRORS as exc:
        print(f"p23d: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
