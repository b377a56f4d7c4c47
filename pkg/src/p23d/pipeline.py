"""Training loops and batch evaluation built from the module operations."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numcore as nc
from .dataset import Corpus
from .latent import InpaintNet, ModelConfig, OccupancyAutoencoder, cfm_loss, encode_ss, mix_latent, vae_loss
from .metrics import EvalRecord, visible_region_eval
from .numcore import Rng
from .sampler import Schedule, generate_grid, repair_noisy_prior
from .voxel import OccupancyGrid, downsample_mask

DROP_MODES = ("gt", "hidden", "noise", "mixed")


def _lr_at(step: int, steps: int, lr: float, decay_frac: float) -> float:
    """Constant, then linear decay to zero over the last ``decay_frac`` of training."""
    if decay_frac <= 0:
        return lr
    return lr * min(1.0, (steps - step) / (decay_frac * steps))


def train_vae(grids: np.ndarray, config: ModelConfig, steps: int = 2000, batch: int = 16, lr: float = 2e-3,
              beta: float = 1e-4, decay_frac: float = 0.3, seed: int = 0,
              log: Callable[[str], None] | None = None, log_every: int = 250) -> OccupancyAutoencoder:
    """Fit the autoencoder to ``grids`` (``(n, N, N, N)`` booleans)."""
    grids = np.asarray(grids, dtype=bool)
    rng = Rng(seed)
    vae = OccupancyAutoencoder(config, rng.spawn(0))
    opt = nc.Adam(vae.parameters(), lr=lr)
    data_rng = rng.spawn(1)
    t0 = time.perf_counter()
    for step in range(steps):
        opt.state.lr = _lr_at(step, steps, lr, decay_frac)
        idx = data_rng.integers(len(grids), batch)
        loss = vae_loss(grids[idx], vae, beta, rng=data_rng)
        opt.zero_grad()
        nc.backward(loss, vae.parameters())
        opt.step()
        if log and (step % log_every == 0 or step == steps - 1):
            log(f"vae step {step} loss {loss.item():.5f} ({time.perf_counter() - t0:.0f}s)")
    return vae


def reconstruction_iou(vae: OccupancyAutoencoder, grids: np.ndarray, chunk: int = 50) -> np.ndarray:
    grids = np.asarray(grids, dtype=bool)
    out = []
    for lo in range(0, len(grids), chunk):
        g = grids[lo:lo + chunk]
        p = vae.decode_probs(encode_ss(g, vae)).data[..., 0] >= 0.5
        inter = (p & g).sum(axis=(1, 2, 3))
        union = (p | g).sum(axis=(1, 2, 3))
        out.append(np.where(union == 0, 1.0, inter / np.maximum(union, 1)))
    return np.concatenate(out)


def encode_batch(vae: OccupancyAutoencoder, grids: np.ndarray, chunk: int = 64) -> np.ndarray:
    grids = np.asarray(grids, dtype=bool)
    return np.concatenate([encode_ss(grids[lo:lo + chunk], vae) for lo in range(0, len(grids), chunk)])


@dataclass
class LatentSet:
    """Encoded corpus: one clean latent per asset, one visible latent per prior."""
    q_gt: np.ndarray      # (A, r, r, r, c)
    cond: np.ndarray      # (A, cond_dim)
    q_vis: np.ndarray     # (P, r, r, r, c)
    m_s: np.ndarray       # (P, r, r, r)
    owner: np.ndarray     # (P,) asset index of each prior


def encode_corpus(vae: OccupancyAutoencoder, corpus: Corpus) -> LatentSet:
    r = vae.config.r
    full = np.stack([corpus.full[a].occ for a in corpus.assets])
    priors, owner = [], []
    for i, a in enumerate(corpus.assets):
        for v in sorted(corpus.priors[a]):
            priors.append(corpus.priors[a][v].occ)
            owner.append(i)
    priors = np.stack(priors)
    m_s = np.stack([downsample_mask(OccupancyGrid(p), r) for p in priors]).astype(np.float64)
    return LatentSet(q_gt=encode_batch(vae, full), cond=np.stack([corpus.cond[a] for a in corpus.assets]),
                     q_vis=encode_batch(vae, priors), m_s=m_s, owner=np.asarray(owner))


def train_inpaint(data: LatentSet, config: ModelConfig, steps: int = 5000, batch: int = 16, lr: float = 1e-3,
                  mask_dropout: float = 0.1, dropout_mode: str = "mixed", decay_frac: float = 0.3, seed: int = 0,
                  log: Callable[[str], None] | None = None, log_every: int = 500) -> InpaintNet:
    """Flow-matching training on (q_comb, m_s) pairs with noise redrawn every step.

    With probability ``mask_dropout`` a sample is shown the all-ones mask.
    ``dropout_mode`` picks its bridge end: ``gt`` uses q_comb = q_gt,
    ``hidden`` keeps the regular q_comb, ``noise`` uses pure noise and
    ``mixed`` sends three quarters of the dropped samples to ``gt`` and the rest
    to ``noise``.
    """
    if dropout_mode not in DROP_MODES:
        raise ValueError(f"dropout_mode must be one of {DROP_MODES}")
    rng = Rng(seed)
    net = InpaintNet(config, rng.spawn(0))
    opt = nc.Adam(net.parameters(), lr=lr)
    data_rng = rng.spawn(1)
    t0 = time.perf_counter()
    for step in range(steps):
        opt.state.lr = _lr_at(step, steps, lr, decay_frac)
        idx = data_rng.integers(len(data.q_vis), batch)
        q_gt = data.q_gt[data.owner[idx]]
        cond = data.cond[data.owner[idx]]
        m = data.m_s[idx].copy()
        eps = data_rng.normal(q_gt.shape)
        q_comb = mix_latent(data.q_vis[idx], m, eps)
        drop = data_rng.uniform(batch) < mask_dropout
        if drop.any():
            m[drop] = 1.0
            if dropout_mode == "mixed":
                # mostly clean (zero velocity on clean input), a quarter plain denoising
                clean = drop & (data_rng.uniform(batch) < 0.75)
                q_comb[clean] = q_gt[clean]
                q_comb[drop & ~clean] = eps[drop & ~clean]
            elif dropout_mode == "gt":
                q_comb[drop] = q_gt[drop]
            elif dropout_mode == "noise":
                q_comb[drop] = eps[drop]
        sigma = data_rng.uniform(batch)
        loss = cfm_loss(net, q_gt, q_comb, m, cond, sigma)
        opt.zero_grad()
        nc.backward(loss, net.parameters())
        opt.step()
        if log and (step % log_every == 0 or step == steps - 1):
            log(f"inpaint step {step} loss {loss.item():.5f} ({time.perf_counter() - t0:.0f}s)")
    return net


@dataclass
class EvalItem:
    name: str
    prior: OccupancyGrid
    gt: OccupancyGrid
    cond: np.ndarray


def eval_items(corpus: Corpus, view_stride: int = 7) -> list[EvalItem]:
    """One single-view prior per asset, cycling the view index across assets."""
    items = []
    for i, a in enumerate(corpus.assets):
        views = sorted(corpus.priors[a])
        v = views[(i * view_stride) % len(views)]
        items.append(EvalItem(f"{a}/view_{v:02d}", corpus.priors[a][v], corpus.full[a], corpus.cond[a]))
    return items


def generate_items(net: InpaintNet, vae: OccupancyAutoencoder, items: list[EvalItem], sched: Schedule,
                   seed: int = 0, baseline: bool = False, reanchor: bool = True, repair: tuple | None = None,
                   threshold: float = 0.5, chunk: int = 32) -> list[OccupancyGrid]:
    """Batched generation; item ``i`` draws its noise from ``Rng(seed).spawn(i)``.

    ``baseline`` zeroes the mask so the start state is pure noise.
    ``repair=(k, strength)`` runs the prior repair pass first.
    """
    base = Rng(seed)
    r = vae.config.r
    out = []
    for lo in range(0, len(items), chunk):
        part = items[lo:lo + chunk]
        q_vis = encode_batch(vae, np.stack([it.prior.occ for it in part]))
        m_s = np.stack([downsample_mask(it.prior, r) for it in part]).astype(np.float64)
        cond = np.stack([it.cond for it in part])
        eps = np.stack([base.spawn(lo + j).normal(q_vis.shape[1:]) for j in range(len(part))])
        if baseline:
            m_s = np.zeros_like(m_s)
        if repair is not None:
            k, strength = repair
            noise = np.stack([base.spawn(10**6 + lo + j).normal(q_vis.shape[1:]) for j in range(len(part))])
            q_vis = repair_noisy_prior(net, q_vis, m_s, k, strength, cond, eps=noise)
        out += generate_grid(net, vae, q_vis, m_s, cond, sched, threshold, eps=eps, reanchor=reanchor)
    return out


def evaluate_items(gens: list[OccupancyGrid], items: list[EvalItem], r: int, threshold: float,
                   seed: int = 0, mode: str = "mean") -> list[EvalRecord]:
    return [visible_region_eval(g, it.gt, it.prior, r, threshold, name=it.name, seed=seed, mode=mode)
            for g, it in zip(gens, items)]


def sweep_schedule(net: InpaintNet, vae: OccupancyAutoencoder, items: list[EvalItem], splits: list[tuple[int, int]],
                   threshold: float, seed: int = 0, reanchor: bool = True, mode: str = "mean",
                   decode_threshold: float = 0.5) -> list[dict]:
    """Mean CD and F-score per (inpaint, refine) split, in the given order."""
    rows = []
    for s, ref in splits:
        gens = generate_items(net, vae, items, Schedule(s + ref, s), seed, reanchor=reanchor,
                              threshold=decode_threshold)
        recs = evaluate_items(gens, items, vae.config.r, threshold, seed, mode)
        rows.append({"inpaint": s, "refine": ref,
                     "cd": float(np.mean([x.cd for x in recs])),
                     "fscore": float(np.mean([x.fscore for x in recs]))})
    return rows
