"""Gradient-check suite: every autodiff primitive plus a composite case
(toy model with PhysMLE layers and all nine loss terms)."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .grad import Parameter, ops
from .grad.gradcheck import check_gradients

TOLERANCE = 1e-3
COMPOSITE_STEP = 1e-5


def _weighted(t, seed=0):
    w = np.random.default_rng(seed).standard_normal(t.shape)
    return (t * w).sum()


def primitive_cases(seed=1234) -> dict:
    """name -> zero-argument factory returning ``(f, params)``."""
    rng = np.random.default_rng(seed)

    def p(*shape, scale=1.0, offset=0.0):
        return Parameter(rng.standard_normal(shape) * scale + offset)

    def unary(fn, *shape, **kw):
        def make():
            x = p(*shape, **kw)
            return (lambda: _weighted(fn(x))), [x]
        return make

    def binary(fn, sa, sb, kb=None):
        def make():
            a, b = p(*sa), p(*sb, **(kb or {}))
            return (lambda: _weighted(fn(a, b))), [a, b]
        return make

    def bn(training):
        def make():
            x, g, b = p(3, 2, 3, 4), p(2, offset=1.0), p(2)
            if training:
                rm, rv = np.zeros(2, np.float32), np.ones(2, np.float32)
            else:
                rm, rv = rng.standard_normal(2).astype(np.float32), np.full(2, 2.0, np.float32)
            return (lambda: _weighted(ops.batch_norm(x, g, b, rm, rv, training=training))), [x, g, b]
        return make

    def inorm():
        x, g, b = p(2, 3, 3, 4), p(3, offset=1.0), p(3)
        return (lambda: _weighted(ops.instance_norm(x, g, b))), [x, g, b]

    def conv_multi():
        x, w1, w2 = p(2, 3, 6, 7), p(4, 3, 3, 3), p(2, 3, 3, 3)
        return (lambda: _weighted(ops.conv2d_multi(x, [w1, w2], 2, 1))), [x, w1, w2]

    def pad_concat():
        a, b = p(2, 3), p(1, 6)
        return (lambda: _weighted(ops.concat([ops.pad(a, ((0, 0), (1, 2))), b], axis=0))), [a, b]

    return {
        "matmul": binary(lambda a, b: a @ b, (3, 4), (4, 5)),
        "batched_matmul": binary(lambda a, b: a @ b, (4, 5), (2, 5, 3)),
        "conv2d": binary(lambda x, w: ops.conv2d(x, w, 2, 1), (2, 3, 6, 7), (4, 3, 3, 3)),
        "conv2d_multi": conv_multi,
        "conv2d_rect": binary(lambda x, w: ops.conv2d(x, w, 1, (0, 1)), (2, 3, 1, 9), (2, 3, 1, 3)),
        "relu": unary(ops.relu, 5, 6),
        "sigmoid": unary(ops.sigmoid, 5, 6, scale=3.0),
        "tanh": unary(ops.tanh, 4, 3),
        "batch_norm": bn(True),
        "batch_norm_eval": bn(False),
        "instance_norm": inorm,
        "mean": unary(lambda x: x.mean(axis=(0, 2)), 3, 4, 5),
        "sum": unary(lambda x: x.sum(axis=1, keepdims=True), 3, 4, 5),
        "mul": binary(lambda a, b: a * b, (3, 4), (4,)),
        "add": binary(lambda a, b: a + b, (3, 1), (1, 4)),
        "div": binary(lambda a, b: a / b, (3, 4), (4,), {"offset": 3.0}),
        "cosine": binary(ops.cosine_similarity, (3, 7), (3, 7)),
        "avg_pool": unary(lambda x: ops.adaptive_avg_pool2d(x, (1, 2)), 2, 3, 4, 6),
        "upsample": unary(lambda x: ops.upsample_nearest(x, (1, 2)), 2, 3, 1, 5),
        "norm": unary(ops.norm, 4, 3),
        "sqrt_abs": unary(lambda x: ops.sqrt(ops.abs_(x) + 0.5), 4, 3),
        "exp_log": unary(lambda x: ops.log(ops.exp(x) + 1.0), 4, 3),
        "getitem": unary(lambda x: x[np.array([0, 2, 2]), 1:3], 4, 5),
        "pad_concat": pad_concat,
        "transpose_reshape": unary(lambda x: x.transpose((2, 0, 1)).reshape(4, -1), 2, 3, 4),
    }


def composite_case(seed=0, delta=0.5):
    """Toy model on a 2-sample batch (plus its augmented pair), joint loss
    with every term at weight 1 and lambda = 1.

    ``delta`` is small so the deadbanded terms are active. The peak-derived
    HR is computed once and held fixed, matching its constant role in
    backward.
    """
    from . import losses as L
    from .model import ModelConfig, PhysMleModel
    from .stmap import GeneratorParams, generate_window, resize_rows_array
    from .train import TrainConfig, loss_terms

    mcfg = ModelConfig(channels=(4, 8), layers_per_block=1, stem_channels=4, experts=3, rank=2,
                       alpha=4.0, rows=16, frames=256, router_hidden=4, task_router_hidden=4,
                       decoder_channels=(4, 4, 4, 4), seed=seed)
    cfg = TrainConfig(model=mcfg, loss=L.LossWeights(delta=delta))
    model = PhysMleModel(mcfg)
    rng = np.random.default_rng(seed + 1)
    for layer in model.mle_layers():
        for e in layer.experts:
            e.A.data = (rng.standard_normal(e.A.shape) * 0.1).astype(np.float32)
    gp = GeneratorParams(rows=8, frames=256)
    windows = [generate_window(gp, seed + 10 + i) for i in range(4)]
    x_all = np.stack([resize_rows_array(w.values, 16) for w, _ in windows]) / np.float32(255.0)
    labels = L.LabelBatch.from_labels([lb for _, lb in windows], gp.fps)
    model.train()
    x, xp = x_all[:2].astype(np.float32), x_all[2:].astype(np.float32)
    with_target = {}

    def f():
        terms, _, out = loss_terms(model, x, xp, labels, cfg, 0, np.random.default_rng(seed + 2),
                                   gp.fps, hb_target=with_target.get("hb"))
        return L.joint_loss(terms, cfg.loss, 1.0), terms, out

    _, _, out = f()
    with_target["hb"] = L.peak_hr(out.predictions["bvp"].data, gp.fps)
    snapshot = [b.copy() for _, b in model.named_buffers()]

    def loss():
        # running statistics must not drift between evaluations
        for (_, b), s in zip(model.named_buffers(), snapshot):
            b[...] = s
        return f()[0]

    return loss, model.trainable_parameters(), f


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self):
        return self.error < TOLERANCE


def run_suite(n_coords=16, composite_coords=4, seed=0) -> list:
    results = []
    for name, make in primitive_cases().items():
        t0 = time.perf_counter()
        f, params = make()
        err = check_gradients(f, params, h=1e-3, n_coords=n_coords, seed=seed)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    t0 = time.perf_counter()
    f, params, _ = composite_case(seed)
    # small step: the deep graph has many ReLU kinks within +-1e-3 of a coordinate
    err = check_gradients(f, params, h=COMPOSITE_STEP, n_coords=composite_coords, seed=seed,
                          analytic_dtype=np.float64)
    results.append(CheckResult("composite", err, time.perf_counter() - t0))
    return results
