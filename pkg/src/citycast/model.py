"""The spatio-temporal forecasting network.

Pipeline per window: patch embedding with sinusoidal positions, calendar and
Laplacian context encodings, periodic cross-attention (future calendar queries
against history calendar keys, values from history patches), then L blocks of
dynamic self-attention -> graph propagation -> SwiGLU residual, and finally a
flatten + linear head producing F normalised values per region.

Parameter shapes depend only on :class:`ModelConfig`, never on the number of
regions, so one set of weights serves any city.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import MINUTES_PER_DAY, WindowBatch
from .errors import ConfigError, ContextIndexError, ShapeError
from .numerics import dropout, resolve_dtype, softmax_rows

TOD_BUCKETS = 24
DOW_BUCKETS = 7
RMS_EPS = 1e-8
ABLATION_FLAGS = ("periodic_attention", "dynamic_attention", "spatial_gcn", "context_encoding")


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    layers: int = 1
    P: int = 12
    S: int = 12
    H: int = 288
    F: int = 288
    k: int = 8
    alpha: float = 0.05
    dropout_attn: float = 0.3
    dropout_st: float = 0.1
    periodic_attention: bool = True
    dynamic_attention: bool = True
    spatial_gcn: bool = True
    context_encoding: bool = True
    preset: str = "custom"
    sample_rate_minutes: int = 5
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d <= 0 or self.d % 2:
            raise ConfigError(f"hidden width d must be a positive even number, got {self.d}")
        if self.heads <= 0 or self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.layers < 0:
            raise ConfigError("layers must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        for rate in (self.dropout_attn, self.dropout_st):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rates must lie in [0, 1), got {rate}")
        if self.k < 1:
            raise ConfigError("k must be positive")
        for name in ("H", "F"):
            t = getattr(self, name)
            if t < self.P or (t - self.P) % self.S:
                raise ConfigError(f"{name}={t} cannot be tiled by P={self.P}, S={self.S}")
        if not self.periodic_attention and self.n_hist != self.n_fut:
            raise ConfigError("disabling periodic attention needs N_h == N_f")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def d_h(self) -> int:
        return self.d // self.heads

    @property
    def n_hist(self) -> int:
        return (self.H - self.P) // self.S + 1

    @property
    def n_fut(self) -> int:
        return (self.F - self.P) // self.S + 1

    @property
    def torch_dtype(self) -> torch.dtype:
        return resolve_dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def geometry(self) -> dict:
        return {
            "sample_rate_minutes": self.sample_rate_minutes,
            "P": self.P,
            "S": self.S,
            "H": self.H,
            "F": self.F,
        }


# (d, heads, layers) per size; counts land near 2M / 5M / 26M at 5-minute geometry
PRESETS = {
    "mini": (192, 4, 2),
    "base": (256, 8, 6),
    "plus": (512, 8, 10),
}


def preset_config(name: str, sample_rate_minutes: int = 5, **overrides) -> ModelConfig:
    """Preset sizes with one-hour patches and one-day history/horizon."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if MINUTES_PER_DAY % sample_rate_minutes or 60 % sample_rate_minutes:
        raise ConfigError(f"sample rate {sample_rate_minutes} min does not divide an hour")
    d, heads, layers = PRESETS[name]
    p = 60 // sample_rate_minutes
    day = MINUTES_PER_DAY // sample_rate_minutes
    base = dict(
        d=d, heads=heads, layers=layers, P=p, S=p, H=day, F=day,
        preset=name, sample_rate_minutes=sample_rate_minutes,
    )
    base.update(overrides)
    return ModelConfig(**base)


def parameter_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form scalar parameter count per component."""
    d = cfg.d
    attn = 4 * d * d + d  # W_q, W_k, W_v, W_o + RMSNorm gain
    items = {
        "patch_embedding": cfg.P * d + d,
        "temporal_context": TOD_BUCKETS * (d // 2) + DOW_BUCKETS * (d // 2),
        "spatial_context": cfg.k * d,
        "periodic_attention": attn,
    }
    for layer in range(cfg.layers):
        items[f"layer{layer}.dynamic_attention"] = attn
        items[f"layer{layer}.gcn"] = d * d
        items[f"layer{layer}.swiglu"] = 3 * d * d + d
    items["head"] = cfg.n_fut * d * cfg.F + cfg.F
    return items


def count_parameters(cfg: ModelConfig) -> int:
    return sum(parameter_breakdown(cfg).values())


def sinusoidal_positions(n: int, d: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    two_i = torch.arange(0, d, 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=torch.float64), two_i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe.to(dtype)


def _weight(fan_in: int, *shape, dtype) -> nn.Parameter:
    p = nn.Parameter(torch.empty(*shape, dtype=dtype))
    p.fan_in = fan_in
    return p


class RMSNorm(nn.Module):
    def __init__(self, d: int, dtype=torch.float32, eps: float = RMS_EPS):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return self.gain * (x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps))


class PatchEmbedding(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dt = cfg.torch_dtype
        self.patch_len = cfg.P
        self.weight = _weight(cfg.P, cfg.P, cfg.d, dtype=dt)
        self.bias = _weight(cfg.P, cfg.d, dtype=dt)
        self.register_buffer("pe", sinusoidal_positions(max(cfg.n_hist, cfg.n_fut), cfg.d, dt))

    def forward(self, patches):
        if patches.shape[-1] != self.patch_len:
            raise ShapeError(
                f"patch length {patches.shape[-1]} does not match configured P={self.patch_len}"
            )
        n = patches.shape[-2]
        if n > self.pe.shape[0]:
            raise ShapeError(f"{n} tokens exceed the positional table ({self.pe.shape[0]})")
        return patches @ self.weight + self.bias + self.pe[:n]


class TemporalContextEncoder(nn.Module):
    """Time-of-day and day-of-week lookup tables, each d/2 wide, concatenated.

    A row lookup equals multiplying a one-hot calendar vector by the table."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dt = cfg.torch_dtype
        self.tod_table = _weight(TOD_BUCKETS, TOD_BUCKETS, cfg.d // 2, dtype=dt)
        self.dow_table = _weight(DOW_BUCKETS, DOW_BUCKETS, cfg.d // 2, dtype=dt)

    def forward(self, tod, dow):
        tod = torch.as_tensor(tod, dtype=torch.long)
        dow = torch.as_tensor(dow, dtype=torch.long)
        if tod.numel() and (tod.min() < 0 or tod.max() >= TOD_BUCKETS):
            raise ContextIndexError(f"time-of-day index outside [0, {TOD_BUCKETS})")
        if dow.numel() and (dow.min() < 0 or dow.max() >= DOW_BUCKETS):
            raise ContextIndexError(f"day-of-week index outside [0, {DOW_BUCKETS})")
        return torch.cat([self.tod_table[tod], self.dow_table[dow]], dim=-1)


class SpatialContextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.weight = _weight(cfg.k, cfg.k, cfg.d, dtype=cfg.torch_dtype)

    def forward(self, phi):
        if phi.shape[-1] != self.weight.shape[0]:
            raise ShapeError(
                f"region embeddings have width {phi.shape[-1]}, model expects k={self.weight.shape[0]}"
            )
        return phi @ self.weight


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with dropout on the raw logits, a learned
    output projection over the concatenated heads, and an RMSNorm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, dt = cfg.d, cfg.torch_dtype
        self.heads, self.d_h = cfg.heads, cfg.d_h
        self.rate = cfg.dropout_attn
        self.w_q = _weight(d, d, d, dtype=dt)
        self.w_k = _weight(d, d, d, dtype=dt)
        self.w_v = _weight(d, d, d, dtype=dt)
        self.w_o = _weight(d, d, d, dtype=dt)
        self.norm = RMSNorm(d, dt)
        self.last_weights = None

    def _split(self, x):
        return x.reshape(*x.shape[:-1], self.heads, self.d_h).transpose(-2, -3)

    def attend(self, q_in, k_in, v_in, training=False, generator=None):
        """Pre-norm attention output; weights kept on ``last_weights``."""
        q = self._split(q_in @ self.w_q)
        k = self._split(k_in @ self.w_k)
        v = self._split(v_in @ self.w_v)
        logits = q @ k.transpose(-1, -2)
        logits = dropout(logits, self.rate, training, generator) / math.sqrt(self.d_h)
        weights = softmax_rows(logits)
        self.last_weights = weights.detach()
        out = (weights @ v).transpose(-2, -3)
        return out.reshape(*out.shape[:-2], self.heads * self.d_h) @ self.w_o

    def forward(self, q_in, k_in, v_in, training=False, generator=None):
        return self.norm(self.attend(q_in, k_in, v_in, training, generator))


class GraphPropagation(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.alpha, self.rate = cfg.alpha, cfg.dropout_st
        self.weight = _weight(cfg.d, cfg.d, cfg.d, dtype=cfg.torch_dtype)

    def forward(self, h, a_norm, training=False, generator=None):
        """h: (..., R, N, d); every token mixes over regions independently."""
        r = h.shape[-3]
        if a_norm.shape != (r, r):
            raise ShapeError(f"normalized adjacency {tuple(a_norm.shape)} does not match R={r}")
        flat = h.reshape(*h.shape[:-3], r, -1)  # tokens and channels mix identically
        mixed = (a_norm @ flat).reshape(h.shape) @ self.weight
        return dropout(self.alpha * h + (1.0 - self.alpha) * mixed, self.rate, training, generator)


class SwiGLUBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, dt = cfg.d, cfg.torch_dtype
        self.w_a = _weight(d, d, d, dtype=dt)
        self.w_b = _weight(d, d, d, dtype=dt)
        self.w_c = _weight(d, d, d, dtype=dt)
        self.norm = RMSNorm(d, dt)

    def swiglu(self, x):
        return (F.silu(x @ self.w_a) * (x @ self.w_b)) @ self.w_c

    def forward(self, g, o_prev):
        if g.shape != o_prev.shape:
            raise ShapeError(f"SwiGLU inputs differ in shape: {tuple(g.shape)} vs {tuple(o_prev.shape)}")
        return self.swiglu(self.norm(g + o_prev)) + g


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.dynamic_attention = MultiHeadAttention(cfg)
        self.gcn = GraphPropagation(cfg)
        self.swiglu = SwiGLUBlock(cfg)


class CityForecaster(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dt = cfg.torch_dtype
        self.patch_embedding = PatchEmbedding(cfg)
        self.temporal_context = TemporalContextEncoder(cfg)
        self.spatial_context = SpatialContextEncoder(cfg)
        self.periodic_attention = MultiHeadAttention(cfg)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.head_weight = _weight(cfg.n_fut * cfg.d, cfg.n_fut * cfg.d, cfg.F, dtype=dt)
        self.head_bias = _weight(cfg.n_fut * cfg.d, cfg.F, dtype=dt)

    def head_parameters(self) -> list[str]:
        return ["head_weight", "head_bias"]

    def active_parameters(self) -> list[str]:
        """Names of parameters the forward pass reads under the current flags.

        Disabled blocks keep their tensors so checkpoints share one layout,
        but they receive no gradient and are left out of training.
        """
        cfg = self.cfg
        skip = []
        if not cfg.periodic_attention:
            skip.append("periodic_attention.")
        if not (cfg.periodic_attention and cfg.context_encoding):
            skip += ["temporal_context.", "spatial_context."]
        if not cfg.dynamic_attention:
            skip.append(".dynamic_attention.")
        if not cfg.spatial_gcn:
            skip.append(".gcn.")
        return [n for n, _ in self.named_parameters()
                if not any(n.startswith(s) or (s.startswith(".") and s in n) for s in skip)]

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("gain"):
                    p.fill_(1.0)
                    continue
                bound = 1.0 / math.sqrt(p.fan_in)
                u = torch.rand(p.shape, generator=gen, dtype=torch.float64)
                p.copy_(((2.0 * u - 1.0) * bound).to(p.dtype))

    # -- pipeline ---------------------------------------------------------

    def encode(self, hist_patches, tod_hist, dow_hist, tod_fut, dow_fut, phi, a_norm,
               training=False, generator=None):
        """Features before the head, shape (B, R, N_f, d)."""
        cfg = self.cfg
        if hist_patches.dim() != 4:
            raise ShapeError(f"history patches must be (B, R, N_h, P), got {tuple(hist_patches.shape)}")
        r = hist_patches.shape[1]
        if phi.shape[0] != r:
            raise ShapeError(f"region embeddings cover {phi.shape[0]} regions, window has {r}")
        if hist_patches.shape[2] != cfg.n_hist:
            raise ShapeError(f"window has {hist_patches.shape[2]} history tokens, model expects {cfg.n_hist}")

        e = self.patch_embedding(hist_patches)  # (B, R, N_h, d)
        if cfg.context_encoding:
            d_his = self.temporal_context(tod_hist, dow_hist)[:, None]  # (B, 1, N_h, d)
            d_pre = self.temporal_context(tod_fut, dow_fut)[:, None]
            c = self.spatial_context(phi)[None, :, None, :]  # (1, R, 1, d)
        else:
            zeros = e.new_zeros(e.shape[0], 1, 1, cfg.d)
            d_his = d_pre = zeros
            c = e.new_zeros(1, r, 1, cfg.d)

        if cfg.periodic_attention:
            q_in = (d_pre + c).expand(e.shape[0], r, cfg.n_fut, cfg.d)
            k_in = (d_his + c).expand(e.shape[0], r, cfg.n_hist, cfg.d)
            o = self.periodic_attention(q_in, k_in, e, training, generator)
        else:
            o = e

        for layer in self.layers:
            h = layer.dynamic_attention(o, o, o, training, generator) if cfg.dynamic_attention else o
            g = layer.gcn(h, a_norm, training, generator) if cfg.spatial_gcn else h
            o = layer.swiglu(g, o)
        return o

    def head(self, features):
        flat = features.reshape(*features.shape[:-2], -1)
        return flat @ self.head_weight + self.head_bias

    def forward(self, hist_patches, tod_hist, dow_hist, tod_fut, dow_fut, phi, a_norm,
                training=False, generator=None):
        feats = self.encode(hist_patches, tod_hist, dow_hist, tod_fut, dow_fut, phi, a_norm,
                            training, generator)
        return self.head(feats)

    # -- convenience --------------------------------------------------------

    def tensors(self, x):
        return torch.as_tensor(np.asarray(x), dtype=self.cfg.torch_dtype)

    def forward_batch(self, batch: WindowBatch, phi, a_norm, training=False, generator=None):
        """Normalised predictions (B, R, F) for a stacked batch of windows."""
        return self(
            self.tensors(batch.hist_patches),
            torch.as_tensor(batch.tod_hist), torch.as_tensor(batch.dow_hist),
            torch.as_tensor(batch.tod_fut), torch.as_tensor(batch.dow_fut),
            self.tensors(phi), self.tensors(a_norm), training, generator,
        )

    def forward_window(self, window, phi, a_norm, training=False, generator=None):
        """Normalised predictions (R, F) for one :class:`PatchedWindow`."""
        out = self(
            self.tensors(window.hist_patches)[None],
            torch.as_tensor(window.tod_hist)[None], torch.as_tensor(window.dow_hist)[None],
            torch.as_tensor(window.tod_fut)[None], torch.as_tensor(window.dow_fut)[None],
            self.tensors(phi), self.tensors(a_norm), training, generator,
        )
        return out[0]


def init_params(cfg: ModelConfig, seed: int = 0) -> CityForecaster:
    model = CityForecaster(cfg)
    model.reset_parameters(seed)
    return model


def with_flags(cfg: ModelConfig, **flags) -> ModelConfig:
    bad = set(flags) - set(ABLATION_FLAGS)
    if bad:
        raise ConfigError(f"unknown ablation flags {sorted(bad)}")
    return replace(cfg, **flags)
