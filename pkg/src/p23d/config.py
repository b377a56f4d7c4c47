"""Run configuration: typed defaults, ``key = value`` files and overrides.

Resolution order, later wins: built-in defaults, the config file (``--config``
or the file named by ``$P23D_CONFIG``), then command-line flags.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .latent import ModelConfig

ENV_VAR = "P23D_CONFIG"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass(frozen=True)
class Config:
    # resolutions and channels
    N: int = 16
    r: int = 4
    c_s: int = 4
    c_m: int = 1
    # networks
    vae_hidden: int = 32
    width: int = 32
    blocks: int = 4
    cond_dim: int = 16
    # training
    lr: float = 1e-3
    vae_lr: float = 2e-3
    batch: int = 16
    iterations: int = 5000
    vae_iterations: int = 2000
    mask_dropout: float = 0.1
    dropout_mode: str = "mixed"
    seed: int = 0
    # sampling
    t: int = 50
    s: int = 25
    reanchor: bool = True
    repair_k: int = 5
    repair_strength: float = 0.3
    decode_threshold: float = 0.5
    # data and visibility
    samples: int = 50_000
    tau_fraction: float = 0.05
    views: int = 24
    pitch: float = 30.0
    radius: float = 1.8
    image_size: int = 64
    # metrics
    fscore_threshold: float = 0.05
    chamfer_mode: str = "mean"
    # execution
    threads: int = 1

    def __post_init__(self):
        checks = [
            ("N", self.N >= 2, "must be >= 2"),
            ("r", self.r >= 1 and self.N % self.r == 0, f"N={self.N} must be divisible by r"),
            ("t", self.t >= 1, "must be >= 1"),
            ("s", 0 <= self.s <= self.t, f"must satisfy 0 <= s <= t={self.t}"),
            ("tau_fraction", self.tau_fraction >= 0, "must be >= 0"),
            ("fscore_threshold", self.fscore_threshold > 0, "must be > 0"),
            ("mask_dropout", 0 <= self.mask_dropout <= 1, "must lie in [0, 1]"),
            ("dropout_mode", self.dropout_mode in ("gt", "hidden", "noise", "mixed"),
             "must be gt, hidden, noise or mixed"),
            ("chamfer_mode", self.chamfer_mode in ("mean", "sum"), "must be mean or sum"),
            ("repair_strength", 0 < self.repair_strength <= 1, "must lie in (0, 1]"),
            ("repair_k", self.repair_k >= 1, "must be >= 1"),
            ("batch", self.batch >= 1, "must be >= 1"),
            ("views", self.views >= 1, "must be >= 1"),
            ("samples", self.samples >= 1, "must be >= 1"),
            ("threads", self.threads >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        f = self.N // self.r
        if f < 2 or f & (f - 1):
            raise ConfigError("r", f"N / r = {f} must be a power of two >= 2")

    def model(self) -> ModelConfig:
        return ModelConfig(N=self.N, r=self.r, c_s=self.c_s, c_m=self.c_m, vae_hidden=self.vae_hidden,
                           width=self.width, blocks=self.blocks, cond_dim=self.cond_dim)

    def items(self):
        return asdict(self).items()


FIELD_TYPES = {f.name: f.type for f in fields(Config)}
DEFAULTS = Config()


def parse_value(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(key, "unknown key")
    kind = type(getattr(DEFAULTS, key))
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"{path}:{lineno}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        out[key] = parse_value(key, val)
    return out


def resolve(path=None, overrides: dict | None = None) -> Config:
    values = {}
    path = path or os.environ.get(ENV_VAR)
    if path:
        values.update(read_config_file(path))
    for k, v in (overrides or {}).items():
        if k not in FIELD_TYPES:
            raise ConfigError(k, "unknown key")
        if v is not None:
            values[k] = v
    return replace(DEFAULTS, **values)


def format_config(cfg: Config) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.items())
