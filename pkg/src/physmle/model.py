"""Convolutional backbone built from PhysMLE layers, with task routers and heads."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grad import ops
from .grad.nn import BatchNorm2d, Conv2d, Module, Parameter
from .grad.tensor import Tensor
from .mle import EfRouter, PhysMleLayer

TASKS = ("hr", "bvp", "spo2", "rr")
ROUTER_SOURCES = ("layer_input", "stem")


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64, 128)
    layers_per_block: int = 2
    stem_channels: int = 16
    experts: int = 3
    rank: int = 16
    alpha: float = 32.0
    gamma: float = 2.0
    router_hidden: int = 16
    task_router_hidden: int = 16
    router_source: str = "layer_input"
    full_finetune: bool = False
    rows: int = 64
    frames: int = 256
    decoder_channels: tuple = (64, 32, 32, 16)
    # scalar heads predict prior + scale * (w . f + b)
    head_priors: dict = field(default_factory=lambda: {"hr": 80.0, "spo2": 95.0, "rr": 15.0})
    head_scales: dict = field(default_factory=lambda: {"hr": 20.0, "spo2": 5.0, "rr": 5.0})
    head_bias: bool = True
    seed: int = 0

    def validate(self):
        if len(self.channels) < 1 or self.layers_per_block < 1:
            raise ValueError("need at least one block with at least one layer")
        if self.router_source not in ROUTER_SOURCES:
            raise ValueError(f"router_source must be one of {ROUTER_SOURCES}")
        if self.experts < 0 or self.rank < 1:
            raise ValueError("experts must be >= 0 and rank >= 1")
        if len(self.decoder_channels) != 4:
            raise ValueError("the BVP decoder has exactly four blocks")
        down = 2 ** (len(self.channels) + 1)
        if self.rows % down or self.frames % down:
            raise ValueError(f"rows and frames must be multiples of {down} for this channel plan")
        if (self.frames // (self.frames // down)) % 8:
            raise ValueError("temporal upsampling factor must be a multiple of 8")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _shortcut(x, c_out):
    """Parameter-free downsampling shortcut: 2x2 average pool, zero channel pad."""
    _, c, h, w = x.shape
    y = ops.adaptive_avg_pool2d(x, (h // 2, w // 2))
    if c_out > c:
        y = ops.pad(y, ((0, 0), (0, c_out - c), (0, 0), (0, 0)))
    return y


class Block(Module):
    def __init__(self, c_in, c_out, n_layers, cfg: ModelConfig, rng):
        router_in = cfg.stem_channels if cfg.router_source == "stem" else None
        self.layers = []
        self.norms = []
        for i in range(n_layers):
            self.layers.append(PhysMleLayer(
                c_in if i == 0 else c_out, c_out, kernel=3, stride=2 if i == 0 else 1,
                experts=cfg.experts, rank=cfg.rank, alpha=cfg.alpha, gamma=cfg.gamma,
                router_hidden=cfg.router_hidden, router_in=router_in,
                full_finetune=cfg.full_finetune, rng=rng,
            ))
            self.norms.append(BatchNorm2d(c_out))
        self.c_out = c_out

    def forward(self, x, s0=None):
        h = x
        last = len(self.layers) - 1
        for i, (layer, norm) in enumerate(zip(self.layers, self.norms)):
            route = None
            if layer.routed_externally:
                oh = (h.shape[2] + 1) // 2 if i == 0 else h.shape[2]
                ow = (h.shape[3] + 1) // 2 if i == 0 else h.shape[3]
                route = ops.adaptive_avg_pool2d(s0, (oh, ow))
            h = norm(layer(h, route=route))
            if i < last:
                h = ops.relu(h)
        return ops.relu(h + _shortcut(x, self.c_out))


class ScalarHead(Module):
    """``prior + scale * (f @ w + b)``; ``bias=False`` drops both prior and ``b``."""

    def __init__(self, c_in, prior, scale, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(rng.standard_normal((c_in, 1)) * (0.1 / np.sqrt(c_in)), category="head")
        self.bias = Parameter(np.zeros(1), category="head") if bias else None
        self.prior = float(prior) if bias else 0.0
        self.scale = float(scale)

    def forward(self, f):
        out = ops.matmul(f, self.weight)
        if self.bias is not None:
            out = out + self.bias
        out = out * self.scale
        if self.prior:
            out = out + self.prior
        return out.reshape(-1)


class BvpDecoder(Module):
    """Row-pooled gated map, four (upsample, 1x3 conv, BN, ReLU) blocks, 1-channel conv,
    per-sample standardization."""

    def __init__(self, c_in, channels, factors, rng):
        self.factors = tuple(factors)
        self.convs = []
        self.norms = []
        c = c_in
        for co in channels:
            self.convs.append(Conv2d(c, co, (1, 3), padding=(0, 1), rng=rng, category="head"))
            self.norms.append(BatchNorm2d(co, category="head"))
            c = co
        self.out = Conv2d(c, 1, (1, 3), padding=(0, 1), bias=True, rng=rng, category="head")

    def forward(self, s):
        n, c, h, w = s.shape
        x = ops.adaptive_avg_pool2d(s, (1, w))
        for f, conv, norm in zip(self.factors, self.convs, self.norms):
            x = ops.relu(norm(conv(ops.upsample_nearest(x, (1, f)))))
        y = self.out(x).reshape(n, -1)
        y = y - ops.mean(y, axis=1, keepdims=True)
        sd = ops.sqrt(ops.mean(y * y, axis=1, keepdims=True) + 1e-8)
        return y / sd


@dataclass
class Forward:
    predictions: dict
    s0: Tensor
    blocks: list
    s_prime: Tensor
    task_features: dict
    task_gates: dict


class PhysMleModel(Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        cfg = (cfg or ModelConfig()).validate()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.stem = Conv2d(3, cfg.stem_channels, 3, stride=2, padding=1, rng=rng,
                           trainable=cfg.full_finetune, category="base")
        self.stem_norm = BatchNorm2d(cfg.stem_channels)
        self.blocks = []
        c = cfg.stem_channels
        for co in cfg.channels:
            self.blocks.append(Block(c, co, cfg.layers_per_block, cfg, rng))
            c = co
        self.feature_channels = c
        self.task_routers = {t: EfRouter(c, c, cfg.task_router_hidden, rng=rng, category="task_router")
                             for t in TASKS}
        self.heads = {t: ScalarHead(c, cfg.head_priors[t], cfg.head_scales[t], cfg.head_bias, rng)
                      for t in ("hr", "spo2", "rr")}
        final_w = cfg.frames // 2 ** (len(cfg.channels) + 1)
        total = cfg.frames // final_w
        self.bvp_head = BvpDecoder(c, cfg.decoder_channels, (2, 2, 2, total // 8), rng)

    def prepare(self, x):
        """``(N, rows, frames, 3)`` maps in [0, 1] to an ``(N, 3, rows, frames)`` tensor."""
        arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
        cfg = self.config
        if arr.ndim != 4 or arr.shape[1:] != (cfg.rows, cfg.frames, 3):
            raise ops.DimensionError(
                f"expected input (N, {cfg.rows}, {cfg.frames}, 3), got {arr.shape}"
            )
        return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))

    def features(self, x):
        s0 = ops.relu(self.stem_norm(self.stem(self.prepare(x))))
        h = s0
        blocks = []
        for block in self.blocks:
            h = block(h, s0=s0)
            blocks.append(h)
        return s0, blocks

    def head_outputs(self, s_prime):
        gates = {t: r(s_prime) for t, r in self.task_routers.items()}
        feats = {t: g * s_prime for t, g in gates.items()}
        preds = {}
        for t, head in self.heads.items():
            preds[t] = head(pooled(feats[t]))
        preds["bvp"] = self.bvp_head(feats["bvp"])
        return preds, feats, gates

    def forward(self, x) -> Forward:
        s0, blocks = self.features(x)
        preds, feats, gates = self.head_outputs(blocks[-1])
        return Forward(preds, s0, blocks, blocks[-1], feats, gates)

    def mle_layers(self):
        return [layer for b in self.blocks for layer in b.layers]


def pooled(s):
    n, c, h, w = s.shape
    return ops.mean(s.reshape(n, c, h * w), axis=2)


# -- accounting ---------------------------------------------------------------


def flops_estimate(cfg: ModelConfig, rows: Optional[int] = None, frames: Optional[int] = None,
                   dense_experts: Optional[int] = None) -> dict:
    """Analytic multiply-accumulates per sample over convs, routers and heads.

    ``dense_experts=n`` prices the same backbone as a mixture of ``n``
    full-rank expert convolutions per layer (with the same routers) instead
    of the low-rank experts. Normalizations and element-wise ops are not
    counted.
    """
    rows = rows or cfg.rows
    frames = frames or cfg.frames
    model = PhysMleModel(cfg.replace(rows=rows, frames=frames, experts=cfg.experts if dense_experts is None else dense_experts))
    h, w = (rows + 1) // 2, (frames + 1) // 2
    parts = {"stem": 3 * cfg.stem_channels * 9 * h * w, "base": 0, "experts": 0, "routers": 0}
    for block in model.blocks:
        for layer in block.layers:
            m = layer.macs(h, w)
            parts["base"] += m["base"]
            parts["routers"] += m["routers"]
            if dense_experts is None:
                parts["experts"] += m["experts"]
            else:
                parts["experts"] += dense_experts * m["base"]
            h, w = m["output"]
    c = model.feature_channels
    parts["task_routers"] = sum(r.macs(h, w) for r in model.task_routers.values())
    parts["scalar_heads"] = 3 * c
    dec = 0
    width, c_prev = w, c
    for f, conv in zip(model.bvp_head.factors, model.bvp_head.convs):
        width *= f
        co = conv.weight.shape[0]
        dec += co * c_prev * 3 * width
        c_prev = co
    dec += c_prev * 3 * width
    parts["bvp_head"] = dec
    parts["total"] = sum(v for k, v in parts.items())
    return parts


def full_finetune_config(cfg: ModelConfig) -> ModelConfig:
    """Same backbone and heads, no experts, every weight trainable."""
    return cfg.replace(experts=0, full_finetune=True)
