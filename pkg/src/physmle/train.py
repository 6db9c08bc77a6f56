"""Training loop, Adam, configuration and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import losses as L
from .data import BatchSampler, WindowDataset
from .grad import backward, no_grad
from .mle import oem_loss
from .model import ModelConfig, PhysMleModel
from .stmap import AUG_SHIFT

LOG_TERMS = ("L_BVP", "L_HR", "L_SpO2", "L_RR", "L_OEM", "L_Spatial", "L_Temporal", "L_HB", "L_BR", "L_ASp")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term, iteration):
        super().__init__(f"non-finite {term} at iteration {iteration}")
        self.term = term
        self.iteration = iteration


@dataclass
class TrainConfig:
    batch_size: int = 60
    iterations: int = 2000
    lr: float = 1e-3
    seed: int = 0
    shift_frames: int = AUG_SHIFT
    balanced_domains: bool = False
    oem_target: str = "ones_offdiag"
    # stop early once wall time exceeds this many seconds (0 = off)
    time_limit: float = 0.0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: L.LossWeights = field(default_factory=L.LossWeights)

    @classmethod
    def published(cls, **kw):
        """Published hyperparameters (batch 60, 20000 iterations, lr 1e-5)."""
        return cls(batch_size=60, iterations=20000, lr=1e-5, **kw)

    def validate(self):
        if self.batch_size < 1 or self.iterations < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, iterations >= 0 and lr > 0 required")
        if self.shift_frames < 0:
            raise ValueError("shift_frames must be >= 0")
        self.model.validate()
        self.loss.validate()
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        model = ModelConfig.from_dict(d.pop("model", {}))
        loss = L.LossWeights.from_dict(d.pop("loss", {}))
        return cls(model=model, loss=loss, **d).validate()

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        """One update; parameters whose gradient is ``None`` are skipped."""
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class TrainResult:
    model: PhysMleModel
    config: TrainConfig
    log: list
    seconds: float


def concat_labels(a: L.LabelBatch, b: L.LabelBatch) -> L.LabelBatch:
    cat = lambda x, y: np.concatenate([x, y])
    rr = None if a.rr_from_bvp is None or b.rr_from_bvp is None else cat(a.rr_from_bvp, b.rr_from_bvp)
    return L.LabelBatch(cat(a.hr, b.hr), cat(a.spo2, b.spo2), cat(a.rr, b.rr), cat(a.bvp, b.bvp),
                        cat(a.mask, b.mask), rr)


def loss_terms(model: PhysMleModel, x, x_prime, labels: L.LabelBatch, cfg: TrainConfig,
               iteration: int, rng: np.random.Generator, fs: float, hb_target=None):
    """Forward ``X`` and ``X'`` together and compute every objective term.

    ``labels`` covers ``X`` followed by ``X'``. Supervised losses and priors
    use both halves; the temporal term compares them. ``hb_target``
    overrides the peak-derived HR used by the heartbeat prior.
    """
    w = cfg.loss
    n = len(x)
    out = model(np.concatenate([x, x_prime]))
    pred = out.predictions
    terms = L.task_losses(pred, labels)
    terms["L_OEM"] = oem_loss(model.mle_layers(), seed=iteration, target=cfg.oem_target)
    terms["L_Spatial"] = L.spatial_loss(out.blocks, rng)
    first = {t: pred[t][:n] for t in L.SCALAR_TASKS}
    second = {t: pred[t][n:] for t in L.SCALAR_TASKS}
    terms["L_Temporal"] = L.temporal_loss(first, second, w.delta)
    hb = L.hb_loss(pred["hr"], pred["bvp"], labels, fs, surrogate=w.hb_surrogate,
                   target=hb_target)
    br = L.br_loss(pred["rr"], labels, w.delta, fs)
    terms["L_HB"] = hb.value
    terms["L_BR"] = br.value
    terms["L_ASp"] = L.asp_loss(out.task_features["spo2"], model.heads["spo2"], labels.spo2,
                                labels.has("spo2"), w.taus, w.spo2_range)
    return terms, {"hb_failures": hb.failures, "br_failures": br.failures}, out


def train(config: TrainConfig, dataset: WindowDataset, log_path=None,
          on_step: Optional[Callable] = None, model: Optional[PhysMleModel] = None) -> TrainResult:
    cfg = config.validate()
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if dataset.raw.shape[2] != cfg.model.frames:
        raise ValueError(f"data has {dataset.raw.shape[2]} frames, model expects {cfg.model.frames}")
    rng = np.random.default_rng(cfg.seed)
    model = model or PhysMleModel(cfg.model)
    model.train()
    params = model.trainable_parameters()
    opt = Adam(params, lr=cfg.lr)
    sampler = BatchSampler(dataset, cfg.batch_size, np.random.default_rng([cfg.seed, 1]),
                           cfg.balanced_domains)
    aug_rng = np.random.default_rng([cfg.seed, 2])
    loss_rng = np.random.default_rng([cfg.seed, 3])
    rows = cfg.model.rows
    log = []
    fh = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        for it in range(cfg.iterations):
            idx = sampler.sample()
            pidx = dataset.pair[idx]
            x = dataset.inputs(idx, rows)
            xp = dataset.inputs(pidx, rows, rng=aug_rng)
            labels = concat_labels(dataset.take_labels(idx), dataset.take_labels(pidx))
            terms, extra, _ = loss_terms(model, x, xp, labels, cfg, it, loss_rng, dataset.fps)
            lam = L.lambda_schedule(it, cfg.iterations, cfg.loss.lambda_gamma)
            for name in LOG_TERMS:
                if not np.all(np.isfinite(terms[name].data)):
                    raise NonFiniteLoss(name, it)
            total = L.joint_loss(terms, cfg.loss, lam)
            if not np.isfinite(total.data):
                raise NonFiniteLoss("joint", it)
            for p in params:
                p.grad = None
            backward(total)
            opt.step()
            line = {"iter": it, **{k: float(terms[k].data) for k in LOG_TERMS},
                    "lambda": lam, "joint": float(total.data), **extra}
            log.append(line)
            if fh:
                fh.write(json.dumps(line) + "\n")
            if on_step:
                on_step(line)
            if cfg.time_limit and time.perf_counter() - t0 > cfg.time_limit:
                break
    finally:
        if fh:
            fh.close()
    model.eval()
    return TrainResult(model, cfg, log, time.perf_counter() - t0)


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, model: PhysMleModel, config: TrainConfig):
    """``.npz`` with ``param/<path>`` and ``buffer/<path>`` arrays plus the
    config as JSON under ``config``."""
    state = model.state_dict()
    state["config"] = np.array(json.dumps(config.to_dict(), sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **state)
    return path


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        cfg = TrainConfig.from_dict(json.loads(str(z["config"])))
        state = {k: z[k] for k in z.files if k != "config"}
    model = PhysMleModel(cfg.model)
    model.load_state_dict(state)
    model.eval()
    return model, cfg


def predict(model: PhysMleModel, dataset: WindowDataset, batch_size=32):
    """Eval-mode predictions for every window: dict of arrays."""
    model.eval()
    out = {"hr": [], "spo2": [], "rr": [], "bvp": []}
    rows = model.config.rows
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(dataset)))
            pred = model(dataset.inputs(idx, rows)).predictions
            for k in out:
                out[k].append(pred[k].data)
    return {k: np.concatenate(v) for k, v in out.items()}
