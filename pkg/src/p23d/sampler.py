"""Staged Euler sampling of the inpainting velocity field.

Sampling runs sigma from 1 (mixed latent) down to 0 (clean latent). The
first ``s`` steps feed the visibility mask to the network; the remaining
``t - s`` steps feed an all-ones mask. The network output is carried forward
as is; the visible latent is only written back between steps when
``reanchor=True``. The command line turns re-anchoring on by default.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .latent import (
    LatentError,
    OccupancyAutoencoder,
    bridge_state,
    concat_mask,
    decode_probs,
    inpaint_forward,
    mix_latent,
)
from .numcore import Rng
from .voxel import OccupancyGrid


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    t: int = 50
    s: int = 25

    def __post_init__(self):
        if self.t < 1:
            raise ScheduleError(f"t must be >= 1, got {self.t}")
        if not 0 <= self.s <= self.t:
            raise ScheduleError(f"need 0 <= s <= t, got s={self.s}, t={self.t}")

    def sigmas(self) -> np.ndarray:
        """``t + 1`` levels ``1 - k / t``; the last is exactly 0."""
        return 1.0 - np.arange(self.t + 1) / self.t


@dataclass
class Step:
    sigma: float
    delta: float
    x: np.ndarray      # state before the step
    mask: np.ndarray   # mask channel fed to the network


def _full_mask(like: np.ndarray) -> np.ndarray:
    return np.ones(like.shape[:-1], dtype=np.float64)


def _mask_grid(m: np.ndarray, like: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == like.ndim:
        m = m[..., 0]
    if m.shape != like.shape[:-1]:
        # a single mask shared across a batch
        m = np.broadcast_to(m, like.shape[:-1])
    return m


def euler_step(net, x: np.ndarray, m: np.ndarray, sigma: float, delta: float, cond=None) -> np.ndarray:
    """``x - delta * v(concat(x, m), sigma)``."""
    if not 0.0 < sigma <= 1.0:
        raise ScheduleError(f"sigma must lie in (0, 1], got {sigma}")
    if not 0.0 < delta <= sigma:
        raise ScheduleError(f"need 0 < delta <= sigma, got delta={delta}, sigma={sigma}")
    v = inpaint_forward(net, concat_mask(x, m), sigma, cond)
    if v.shape != x.shape:
        raise LatentError(f"velocity shape {v.shape} != state shape {x.shape}")
    return x - delta * v


def staged_sample(net, q_vis: np.ndarray, m_s: np.ndarray, cond=None, sched: Schedule = Schedule(),
                  rng: Rng | None = None, eps: np.ndarray | None = None, reanchor: bool = False,
                  trajectory: list | None = None) -> np.ndarray:
    """Generate a clean latent from a visible latent and its mask.

    Works on one latent ``(r, r, r, c)`` or a batch. Noise is drawn from
    ``rng`` unless ``eps`` is given. When ``trajectory`` is a list, one
    :class:`Step` per Euler step is appended to it.
    """
    q_vis = np.asarray(q_vis, dtype=np.float64)
    m_s = _mask_grid(m_s, q_vis)
    if eps is None:
        if rng is None:
            raise ScheduleError("need an rng or explicit noise")
        eps = rng.normal(q_vis.shape)
    x = mix_latent(q_vis, m_s, eps)
    ones = _full_mask(q_vis)
    keep = m_s.astype(bool)[..., None]
    sig = sched.sigmas()
    for k in range(sched.t):
        mask = m_s if k < sched.s else ones
        delta = sig[k] - sig[k + 1]
        if trajectory is not None:
            trajectory.append(Step(float(sig[k]), float(delta), x.copy(), np.array(mask)))
        x = euler_step(net, x, mask, float(sig[k]), float(delta), cond)
        if reanchor and k < sched.s:
            # re-blend the visible latent at the next noise level
            target = bridge_state(q_vis, eps, float(sig[k + 1]))
            x = np.where(keep, target, x)
    return x


def repair_noisy_prior(net, q_vis: np.ndarray, m_s=None, k_steps: int = 5, strength: float = 0.3,
                       cond=None, rng: Rng | None = None, eps: np.ndarray | None = None) -> np.ndarray:
    """Diffuse ``q_vis`` to ``sigma = strength`` and integrate back to 0.

    The return value replaces ``q_vis`` for a subsequent :func:`staged_sample`.
    ``m_s`` is accepted for interface symmetry; the repair pass always uses
    the all-ones mask.
    """
    if not 0.0 < strength <= 1.0:
        raise ScheduleError(f"strength must lie in (0, 1], got {strength}")
    if k_steps < 1:
        raise ScheduleError("k_steps must be >= 1")
    q_vis = np.asarray(q_vis, dtype=np.float64)
    if eps is None:
        if rng is None:
            raise ScheduleError("need an rng or explicit noise")
        eps = rng.normal(q_vis.shape)
    x = bridge_state(q_vis, eps, strength)
    ones = _full_mask(q_vis)
    sig = strength * (1.0 - np.arange(k_steps + 1) / k_steps)
    for j in range(k_steps):
        x = euler_step(net, x, ones, float(sig[j]), float(sig[j] - sig[j + 1]), cond)
    return x


def generate_grid(net, vae: OccupancyAutoencoder, q_vis, m_s, cond=None, sched: Schedule = Schedule(),
                  threshold: float = 0.5, rng: Rng | None = None, **kw):
    """Sample and decode; a batch of latents yields a list of grids."""
    q = staged_sample(net, q_vis, m_s, cond, sched, rng, **kw)
    probs = decode_probs(q, vae) >= threshold
    if probs.ndim == 3:
        return OccupancyGrid(probs)
    return [OccupancyGrid(p) for p in probs]
