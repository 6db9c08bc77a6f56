"""Frozen convolutions with gated low-rank experts, and the expert-orthogonality penalty."""
from __future__ import annotations

import itertools
from typing import NamedTuple, Optional

import numpy as np

from .grad import ops
from .grad.nn import Conv2d, InstanceNorm2d, Module, Parameter, he_normal

# keeps sigmoid outputs strictly inside (0, 1) in float32
GATE_LOGIT_LIMIT = 15.0
OEM_TARGETS = ("ones_offdiag", "zero")


class LowRankExpert(Module):
    """Trainable update ``B @ A`` in convolution form.

    ``A`` is ``(r, C_in, k, k)`` (zeros at init), ``B`` is ``(C_out, r)``.
    """

    def __init__(self, c_in, c_out, kernel, rank, rng, b_std=0.02):
        kh, kw = ops._pair(kernel)
        self.rank = rank
        self.A = Parameter(np.zeros((rank, c_in, kh, kw)), category="expert")
        self.B = Parameter(rng.standard_normal((c_out, rank)) * b_std, category="expert")

    def delta_weight(self):
        """Composed update flattened to ``(C_out, C_in*k*k)``."""
        return ops.matmul(self.B, self.A.reshape(self.rank, -1))

    def apply(self, z):
        """Map rank-space responses ``(N, r, H, W)`` to ``(N, C_out, H, W)``."""
        n, r, h, w = z.shape
        out = ops.matmul(self.B, z.reshape(n, r, h * w))
        return out.reshape(n, self.B.shape[0], h, w)


class EfRouter(Module):
    """Element-wise gate: 1x1 conv, instance norm, ReLU, 1x1 conv, sigmoid."""

    def __init__(self, c_in, c_out, hidden=16, stride=1, rng=None, category="router"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.inner = Conv2d(c_in, hidden, 1, stride=stride, rng=rng, category=category)
        self.norm = InstanceNorm2d(hidden, category=category)
        self.outer = Conv2d(hidden, c_out, 1, bias=True, rng=rng, category=category,
                            init_std=1.0 / np.sqrt(hidden))

    def forward(self, x):
        h = ops.relu(self.norm(self.inner(x)))
        logits = ops.clip(self.outer(h), -GATE_LOGIT_LIMIT, GATE_LOGIT_LIMIT)
        return ops.sigmoid(logits)

    def macs(self, h_out, w_out):
        c_in, hidden, c_out = self.inner.weight.shape[1], self.outer.weight.shape[1], self.outer.weight.shape[0]
        return (c_in * hidden + hidden * c_out) * h_out * w_out


class PhysMleLayer(Module):
    """``W * s + (alpha / r) * sum_i gamma * G_i(s) . (B_i A_i * s)``.

    ``W`` is frozen unless ``full_finetune``. Passing ``route`` feeds the
    routers a different tensor than the layer input; it must then already
    have the output's spatial size (routers run with stride 1).
    """

    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, experts=3, rank=16,
                 alpha=32.0, gamma=2.0, router_hidden=16, router_in=None, full_finetune=False,
                 rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = ops._pair(kernel)
        self.c_in, self.c_out = c_in, c_out
        self.kernel = (kh, kw)
        self.stride = stride
        self.padding = padding if padding is not None else (kh // 2, kw // 2)
        self.rank = rank
        self.alpha = float(alpha)
        self.gamma = float(gamma)
        self.full_finetune = full_finetune
        self.weight = Parameter(he_normal(rng, (c_out, c_in, kh, kw), c_in * kh * kw),
                                requires_grad=full_finetune, category="base")
        self.experts = [LowRankExpert(c_in, c_out, (kh, kw), rank, rng) for _ in range(experts)]
        routed_from = c_in if router_in is None else router_in
        router_stride = stride if router_in is None else 1
        self.routers = [EfRouter(routed_from, c_out, router_hidden, router_stride, rng)
                        for _ in range(experts)]
        self.routed_externally = router_in is not None
        # tests set this to a constant to bypass the routers
        self.gate_override: Optional[float] = None

    @property
    def num_experts(self):
        return len(self.experts)

    def delta_weights(self):
        return [e.delta_weight() for e in self.experts]

    def fused_weight(self, gate=1.0):
        """Single conv weight equal to the layer when every gate is ``gate``."""
        w = self.weight.data.astype(np.float64)
        scale = self.alpha / self.rank * self.gamma * gate
        for e in self.experts:
            w = w + scale * (e.B.data.astype(np.float64) @ e.A.data.reshape(self.rank, -1).astype(np.float64)).reshape(w.shape)
        return w

    def forward(self, s, route=None):
        if s.ndim != 4 or s.shape[1] != self.c_in:
            raise ops.DimensionError(f"layer expects (N, {self.c_in}, H, W) input, got {s.shape}")
        if not self.experts:
            return ops.conv2d(s, self.weight, self.stride, self.padding)
        weights = [self.weight] + [e.A for e in self.experts]
        out = ops.conv2d_multi(s, weights, self.stride, self.padding)
        base = out[:, : self.c_out]
        if self.routed_externally and route is None:
            raise ValueError("this layer's routers need an explicit route tensor")
        gate_in = s if route is None else route
        total = None
        for i, (expert, router) in enumerate(zip(self.experts, self.routers)):
            lo = self.c_out + i * self.rank
            e_out = expert.apply(out[:, lo : lo + self.rank])
            if self.gate_override is not None:
                term = e_out * (self.gamma * self.gate_override)
            else:
                g = router(gate_in)
                if g.shape != e_out.shape:
                    raise ops.DimensionError(f"gate {g.shape} does not match expert output {e_out.shape}")
                term = (g * self.gamma) * e_out
            total = term if total is None else total + term
        return base + total * (self.alpha / self.rank)

    def macs(self, h_in, w_in):
        """Multiply-accumulates for one sample, split by part."""
        kh, kw = self.kernel
        sh, sw = ops._pair(self.stride)
        ph, pw = ops._pair(self.padding)
        oh = ops.conv_output_size(h_in, kh, sh, ph)
        ow = ops.conv_output_size(w_in, kw, sw, pw)
        pos = oh * ow
        base = self.c_out * self.c_in * kh * kw * pos
        low_rank = (self.rank * self.c_in * kh * kw + self.c_out * self.rank) * pos
        router = self.routers[0].macs(oh, ow) if self.routers else 0
        k = self.num_experts
        return {"base": base, "experts": k * low_rank, "routers": k * router, "output": (oh, ow)}


def physmle_layers(model):
    return [m for m in model.modules() if isinstance(m, PhysMleLayer)]


def _pair_term(dwi, dwj, eps, target):
    m = ops.matmul(dwi, ops.transpose(dwj))
    if target == "ones_offdiag":
        n = m.shape[0]
        m = m - (np.ones((n, n), dtype=m.data.dtype) - np.eye(n, dtype=m.data.dtype))
    u = ops.matmul(m, eps)
    v = ops.matmul(m, u)
    return ops.norm(v) / (ops.norm(u) + 1e-12)


def oem_loss(layers, seed=0, target="ones_offdiag"):
    """Two-step power estimate of the spectral norm of each expert pair's
    cross product minus the target, averaged over pairs then layers.

    Layers with fewer than two experts contribute nothing; the result is 0
    when no layer qualifies.
    """
    if target not in OEM_TARGETS:
        raise ValueError(f"target must be one of {OEM_TARGETS}")
    rng = np.random.default_rng(seed)
    per_layer = []
    for layer in layers:
        dws = layer.delta_weights()
        if len(dws) < 2:
            continue
        terms = []
        for i, j in itertools.combinations(range(len(dws)), 2):
            eps = rng.standard_normal((dws[i].shape[0], 1))
            terms.append(_pair_term(dws[i], dws[j], eps, target))
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        per_layer.append(acc / len(terms))
    if not per_layer:
        return ops.as_tensor(np.float32(0.0))
    acc = per_layer[0]
    for t in per_layer[1:]:
        acc = acc + t
    return acc / len(per_layer)


class ParamCount(NamedTuple):
    trainable: int
    frozen: int
    by_category: dict


def trainable_param_count(model) -> ParamCount:
    """Exact trainable and frozen counts, also broken down by category."""
    trainable = frozen = 0
    by_cat = {}
    for p in model.parameters():
        n = int(p.data.size)
        t, f = by_cat.get(p.category, (0, 0))
        if p.requires_grad:
            trainable += n
            by_cat[p.category] = (t + n, f)
        else:
            frozen += n
            by_cat[p.category] = (t, f + n)
    return ParamCount(trainable, frozen, by_cat)
