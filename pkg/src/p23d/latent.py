"""Structure latents: occupancy autoencoder, mask-aware velocity network, losses.

Latent arrays are channels-last numpy arrays, ``(r, r, r, c)`` for a single
sample or ``(B, r, r, r, c)`` for a batch. Masks are ``(..., r, r, r)`` or
``(..., r, r, r, 1)`` with entries in {0, 1}; a set cell marks latent content
backed by observed geometry.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numcore as nc
from .numcore import Rng, Tensor
from .voxel import OccupancyGrid, VoxelError


class LatentError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    N: int = 16
    r: int = 4
    c_s: int = 4
    c_m: int = 1
    vae_hidden: int = 32
    width: int = 32
    blocks: int = 4
    cond_dim: int = 16
    temb_dim: int = 32
    variational: bool = False

    def __post_init__(self):
        if self.N % self.r:
            raise LatentError(f"N={self.N} is not divisible by r={self.r}")
        f = self.N // self.r
        if f < 2 or f & (f - 1):
            raise LatentError("N / r must be a power of two >= 2")

    @property
    def stages(self) -> int:
        return int(math.log2(self.N // self.r))

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _init(rng: Rng, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    return Tensor(rng.normal(shape) * (gain / math.sqrt(fan_in)), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class _Model:
    kind = "model"

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        return nc.conv3d(x, self.params[name + ".w"], self.params[name + ".b"], stride=stride)

    def _add_conv(self, rng, name, k, cin, cout, gain=1.0):
        self.params[name + ".w"] = _init(rng, (k, k, k, cin, cout), k ** 3 * cin, gain)
        self.params[name + ".b"] = _zeros((cout,))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise LatentError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise LatentError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def save(self, path, extra: dict | None = None) -> None:
        header = {"kind": self.kind, "config": asdict(self.config), "config_hash": self.config.hash(),
                  "rng": nc.RNG_ALGORITHM, "channel_order": "latent,mask"}
        header.update(extra or {})
        nc.save_checkpoint(path, self.state_dict(), header)

    @classmethod
    def load(cls, path):
        state, header = nc.load_checkpoint(path)
        if header.get("kind") != cls.kind:
            raise LatentError(f"{path}: expected a {cls.kind} checkpoint, found {header.get('kind')!r}")
        model = cls(ModelConfig.from_dict(header["config"]), Rng(0))
        model.load_state_dict(state)
        model.header = header
        return model


# ------------------------------------------------------------------ autoencoder

class OccupancyAutoencoder(_Model):
    """Deterministic conv autoencoder ``{0,1}^(N^3) <-> R^(r^3 x c_s)``.

    Encoder: ``stages`` stride-2 3x3x3 convs, one 3x3x3 conv at latent
    resolution, 1x1x1 head. Decoder mirrors it: 3x3x3 in, (upsample, 3x3x3)
    per extra stage, and a sub-voxel 3x3x3 conv whose 8 output channels are
    shuffled into the final 2x upsampling before the sigmoid.
    """

    kind = "vae"

    def __init__(self, config: ModelConfig, rng: Rng):
        super().__init__(config)
        h, c = config.vae_hidden, config.c_s
        out_c = 2 * c if config.variational else c
        cin = 1
        for i in range(config.stages):
            self._add_conv(rng, f"enc.down{i}", 3, cin, h)
            cin = h
        self._add_conv(rng, "enc.mid", 3, h, h)
        self._add_conv(rng, "enc.out", 1, h, out_c)
        self._add_conv(rng, "dec.in", 3, c, h)
        for i in range(config.stages - 1):
            self._add_conv(rng, f"dec.up{i}", 3, h, h)
        self._add_conv(rng, "dec.out", 3, h, 8)

    def _encode_stats(self, occ: np.ndarray) -> Tensor:
        occ = np.asarray(occ, dtype=np.float64)
        if occ.ndim == 3:
            occ = occ[None]
        N = self.config.N
        if occ.shape[1:] != (N, N, N):
            raise LatentError(f"grid resolution {occ.shape[1:]} does not match model N={N}")
        h = Tensor(occ[..., None])
        for i in range(self.config.stages):
            h = nc.silu(self._conv(h, f"enc.down{i}", stride=2))
        h = nc.silu(self._conv(h, "enc.mid"))
        return self._conv(h, "enc.out")

    def encode(self, occ: np.ndarray, rng: Rng | None = None) -> tuple[Tensor, Tensor | None]:
        """Latent (and KL term when variational) for a batch of grids."""
        stats = self._encode_stats(occ)
        c = self.config.c_s
        if not self.config.variational:
            return stats, None
        sel_mu = np.zeros(stats.shape, dtype=bool)
        sel_mu[..., :c] = True
        mu = nc.reshape(nc.masked_select(stats, sel_mu), stats.shape[:-1] + (c,))
        logvar = nc.reshape(nc.masked_select(stats, ~sel_mu), stats.shape[:-1] + (c,))
        kl = nc.mean(nc.scale(nc.sub(nc.add(nc.square(mu), nc.exp(logvar)), nc.add(logvar, 1.0)), 0.5))
        if rng is None:
            return mu, kl
        noise = Tensor(rng.normal(mu.shape))
        z = nc.add(mu, nc.mul(nc.exp(nc.scale(logvar, 0.5)), noise))
        return z, kl

    def decode_logits(self, latent) -> Tensor:
        z = latent if isinstance(latent, Tensor) else Tensor(latent)
        if z.data.ndim == 4:
            z = nc.reshape(z, (1,) + z.shape)
        r, c = self.config.r, self.config.c_s
        if z.shape[1:] != (r, r, r, c):
            raise LatentError(f"latent shape {z.shape[1:]} does not match ({r},{r},{r},{c})")
        h = nc.silu(self._conv(z, "dec.in"))
        for i in range(self.config.stages - 1):
            h = nc.silu(self._conv(nc.upsample3d(h, 2), f"dec.up{i}"))
        return nc.depth_to_space(self._conv(h, "dec.out"), 2)

    def decode_probs(self, latent) -> Tensor:
        return nc.sigmoid(self.decode_logits(latent))


def _grid_array(grid) -> np.ndarray:
    return grid.occ if isinstance(grid, OccupancyGrid) else np.asarray(grid, dtype=bool)


def encode_ss(grid, vae: OccupancyAutoencoder) -> np.ndarray:
    """Latent ``(r, r, r, c_s)`` of one grid (or a batch for a 4-D array)."""
    occ = _grid_array(grid)
    if occ.shape[-1] != vae.config.N:
        raise VoxelError(f"grid resolution {occ.shape[-1]} != model N={vae.config.N}")
    q, _ = vae.encode(occ)
    return q.data[0] if occ.ndim == 3 else q.data


def decode_probs(latent: np.ndarray, vae: OccupancyAutoencoder) -> np.ndarray:
    p = vae.decode_probs(latent).data[..., 0]
    return p[0] if np.ndim(latent) == 4 else p


def decode_ss(latent: np.ndarray, vae: OccupancyAutoencoder, threshold: float = 0.5) -> OccupancyGrid:
    """Occupied where the decoded probability is >= ``threshold``."""
    return OccupancyGrid(decode_probs(np.asarray(latent), vae) >= threshold)


def vae_loss(grids, vae: OccupancyAutoencoder, beta: float = 1e-4, rng: Rng | None = None) -> Tensor:
    """Mean BCE plus ``beta`` times the mean squared latent entry (KL if variational)."""
    occ = np.asarray(grids, dtype=bool) if not isinstance(grids, OccupancyGrid) else grids.occ
    if occ.ndim == 3:
        occ = occ[None]
    q, kl = vae.encode(occ, rng=rng)
    logits = vae.decode_logits(q)
    loss = nc.bce_with_logits(logits, occ[..., None].astype(np.float64))
    reg = kl if kl is not None else nc.mean(nc.square(q))
    if beta:
        loss = nc.add(loss, nc.scale(reg, beta))
    return loss


# ----------------------------------------------------------- latent algebra

def _mask_channel(m: np.ndarray, like: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim == like.ndim - 1:
        m = m[..., None]
    if m.shape[:-1] != like.shape[:-1]:
        raise LatentError(f"mask spatial shape {m.shape[:-1]} != latent {like.shape[:-1]}")
    if not np.all((m == 0) | (m == 1)):
        raise LatentError("visibility mask must be binary")
    return m


def mix_latent(q_vis: np.ndarray, m_s: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Keep ``q_vis`` where the mask is set and ``eps`` elsewhere."""
    q_vis, eps = np.asarray(q_vis, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if q_vis.shape != eps.shape:
        raise LatentError(f"latent {q_vis.shape} and noise {eps.shape} differ")
    m = _mask_channel(m_s, q_vis)
    return np.where(m.astype(bool), q_vis, eps)


def concat_mask(q: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Channels ``[latent..., mask...]``."""
    q = np.asarray(q, dtype=np.float64)
    m = _mask_channel(m, q).astype(np.float64)
    return np.concatenate([q, m], axis=-1)


def bridge_state(q_gt: np.ndarray, q_comb: np.ndarray, sigma) -> np.ndarray:
    """``(1 - sigma) * q_gt + sigma * q_comb``; sigma scalar or per-sample."""
    q_gt, q_comb = np.asarray(q_gt, dtype=np.float64), np.asarray(q_comb, dtype=np.float64)
    if q_gt.shape != q_comb.shape:
        raise LatentError(f"bridge endpoints differ in shape: {q_gt.shape} vs {q_comb.shape}")
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s < 0) or np.any(s > 1):
        raise LatentError("sigma must lie in [0, 1]")
    if s.ndim == 0:
        if s == 0:
            return q_gt.copy()
        if s == 1:
            return q_comb.copy()
    else:
        s = s.reshape((-1,) + (1,) * (q_gt.ndim - 1))
    return (1.0 - s) * q_gt + s * q_comb


# -------------------------------------------------------------- velocity net

def time_embedding(sigma: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of ``1000 * sigma`` with log-spaced periods."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = 1000.0 * sigma[:, None] * freqs[None, :]
    return np.concatenate([np.cos(arg), np.sin(arg)], axis=1)


class InpaintNet(_Model):
    """Residual 3x3x3 conv stack predicting the velocity ``d x / d sigma``.

    The first layer is a 1x1x1 projection from ``c_s + c_m`` input channels.
    Time enters through a sinusoidal embedding and a two-layer MLP; the
    condition vector is added into the same embedding; each block adds its
    own linear map of it as a per-channel bias.
    """

    kind = "inpaint"

    def __init__(self, config: ModelConfig, rng: Rng):
        super().__init__(config)
        c = config
        self._add_conv(rng, "proj", 1, c.c_s + c.c_m, c.width)
        self.params["temb.w1"] = _init(rng, (c.temb_dim, c.width), c.temb_dim)
        self.params["temb.b1"] = _zeros((c.width,))
        self.params["temb.w2"] = _init(rng, (c.width, c.width), c.width)
        self.params["temb.b2"] = _zeros((c.width,))
        self.params["cond.w"] = _init(rng, (c.cond_dim, c.width), c.cond_dim)
        for k in range(c.blocks):
            self._add_conv(rng, f"blk{k}.c1", 3, c.width, c.width)
            self.params[f"blk{k}.emb.w"] = _init(rng, (c.width, c.width), c.width)
            self.params[f"blk{k}.emb.b"] = _zeros((c.width,))
            self._add_conv(rng, f"blk{k}.c2", 3, c.width, c.width, gain=0.5)
        self._add_conv(rng, "head", 1, c.width, c.c_s)

    def forward(self, x_inp: np.ndarray, sigma, cond=None) -> Tensor:
        cfg = self.config
        x = np.asarray(x_inp, dtype=np.float64)
        single = x.ndim == 4
        if single:
            x = x[None]
        r = cfg.r
        if x.shape[1:4] != (r, r, r):
            raise LatentError(f"input spatial shape {x.shape[1:4]} != ({r},{r},{r})")
        if x.shape[-1] != cfg.c_s + cfg.c_m:
            raise LatentError(f"expected {cfg.c_s + cfg.c_m} input channels, got {x.shape[-1]}")
        B = x.shape[0]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (B,))
        if cond is None:
            cond = np.zeros((B, cfg.cond_dim))
        cond = np.asarray(cond, dtype=np.float64).reshape(-1, cfg.cond_dim)
        cond = np.broadcast_to(cond, (B, cfg.cond_dim))
        p = self.params
        e = nc.silu(nc.add(nc.matmul(Tensor(time_embedding(sigma, cfg.temb_dim)), p["temb.w1"]), p["temb.b1"]))
        e = nc.add(nc.matmul(e, p["temb.w2"]), p["temb.b2"])
        e = nc.silu(nc.add(e, nc.matmul(Tensor(cond), p["cond.w"])))
        h = self._conv(Tensor(x), "proj")
        for k in range(cfg.blocks):
            a = self._conv(nc.silu(h), f"blk{k}.c1")
            bias = nc.add(nc.matmul(e, p[f"blk{k}.emb.w"]), p[f"blk{k}.emb.b"])
            a = nc.add(a, nc.reshape(bias, (B, 1, 1, 1, cfg.width)))
            h = nc.add(h, self._conv(nc.silu(a), f"blk{k}.c2"))
        out = self._conv(nc.silu(h), "head")
        return nc.reshape(out, out.shape[1:]) if single else out

    def __call__(self, x_inp, sigma, cond=None) -> np.ndarray:
        return self.forward(x_inp, sigma, cond).data


def inpaint_forward(net, x: np.ndarray, sigma, cond=None) -> np.ndarray:
    """Velocity prediction (no graph) from any velocity model or callable."""
    return np.asarray(net(x, sigma, cond), dtype=np.float64)


def cfm_loss(net: InpaintNet, q_gt, q_comb, m_s, cond=None, sigma=None, rng: Rng | None = None) -> Tensor:
    """Mean squared error between the predicted velocity and ``q_comb - q_gt``.

    Training states sit on the linear bridge at ``sigma`` (drawn uniformly
    per sample when not supplied).
    """
    q_gt, q_comb = np.asarray(q_gt, dtype=np.float64), np.asarray(q_comb, dtype=np.float64)
    if q_gt.shape != q_comb.shape:
        raise LatentError(f"q_gt {q_gt.shape} and q_comb {q_comb.shape} differ")
    batched = q_gt.ndim == 5
    B = q_gt.shape[0] if batched else 1
    if sigma is None:
        if rng is None:
            raise LatentError("need sigma or an rng to draw it")
        sigma = rng.uniform(B) if batched else float(rng.uniform())
    x = concat_mask(bridge_state(q_gt, q_comb, sigma), m_s)
    pred = net.forward(x, sigma, cond)
    return nc.mean(nc.square(nc.sub(pred, q_comb - q_gt)))
