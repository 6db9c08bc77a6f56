"""Training objectives: supervised task losses, consistency terms, physiological priors."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import signal
from .grad import ops
from .grad.tensor import Tensor
from .model import pooled

TERMS = ("hr", "spo2", "rr", "oem", "spatial", "temporal", "hb", "br", "asp")
SCALAR_TASKS = ("hr", "spo2", "rr")
MASK_INDEX = {"hr": 0, "bvp": 1, "spo2": 2, "rr": 3}
DEFAULT_TAUS = (0.85, 0.90, 0.95, 1.0, 1.05, 1.10, 1.15)


@dataclass
class LossWeights:
    p: dict = field(default_factory=lambda: {t: 1.0 for t in TERMS})
    delta: float = 5.0
    taus: tuple = DEFAULT_TAUS
    spo2_range: tuple = (80.0, 100.0)
    # lambda(i) = 2 / (1 + exp(-lambda_gamma * i / n_iter)) - 1
    lambda_gamma: float = 10.0
    hb_surrogate: bool = False

    def validate(self):
        unknown = set(self.p) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms: {sorted(unknown)}")
        if any(v < 0 for v in self.p.values()):
            raise ValueError("loss weights must be non-negative")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        self.p = {t: float(self.p.get(t, 1.0)) for t in TERMS}
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        if "p" in d:
            d["p"] = {**{t: 1.0 for t in TERMS}, **d["p"]}
        return cls(**d).validate()


def lambda_schedule(iteration, n_iter, gamma=10.0) -> float:
    """Ramp from 0 towards 1; stays below 1 for finite iterations."""
    if n_iter <= 0:
        return 0.0
    return float(2.0 / (1.0 + np.exp(-gamma * iteration / n_iter)) - 1.0)


@dataclass
class LabelBatch:
    hr: np.ndarray
    spo2: np.ndarray
    rr: np.ndarray
    bvp: np.ndarray
    mask: np.ndarray  # (N, 4) bool in (HR, BVP, SpO2, RR) order
    # RR extracted from the ground-truth BVP; NaN where extraction failed or no BVP
    rr_from_bvp: Optional[np.ndarray] = None

    def __post_init__(self):
        self.hr = np.asarray(self.hr, np.float32)
        self.spo2 = np.asarray(self.spo2, np.float32)
        self.rr = np.asarray(self.rr, np.float32)
        self.bvp = np.asarray(self.bvp, np.float32)
        self.mask = np.asarray(self.mask, bool)

    def __len__(self):
        return len(self.hr)

    def has(self, task) -> np.ndarray:
        return self.mask[:, MASK_INDEX[task]]

    def value(self, task) -> np.ndarray:
        """Label values with masked-off entries replaced by 0."""
        v = getattr(self, task)
        has = self.has(task)
        return np.where(has.reshape((-1,) + (1,) * (v.ndim - 1)), v, 0).astype(np.float32)

    @classmethod
    def from_labels(cls, labels, fs=30.0, rr_cache=None):
        mask = np.array([list(lb.mask) for lb in labels], bool)
        rr = rr_cache if rr_cache is not None else extract_rr(
            [lb.bvp for lb in labels], mask[:, MASK_INDEX["bvp"]], fs)
        return cls([lb.hr for lb in labels], [lb.spo2 for lb in labels], [lb.rr for lb in labels],
                   np.stack([lb.bvp for lb in labels]), mask, np.asarray(rr, np.float64))


def extract_rr(bvps, has_bvp, fs=30.0) -> np.ndarray:
    out = np.full(len(bvps), np.nan)
    for i, (b, ok) in enumerate(zip(bvps, has_bvp)):
        if not ok:
            continue
        try:
            out[i] = signal.rr_from_bvp(b, fs)
        except ValueError:
            pass
    return out


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    count = int(mask.sum())
    if count == 0:
        return ops.sum_(values * 0.0)
    return ops.sum_(values * mask.astype(np.float32)) / count


def pearson_loss(pred: Tensor, target: np.ndarray, eps=1e-8) -> Tensor:
    """Per-sample ``1 - corr(pred, target)`` along the last axis."""
    t = np.asarray(target, np.float32)
    t = t - t.mean(axis=-1, keepdims=True)
    p = pred - ops.mean(pred, axis=-1, keepdims=True)
    num = ops.sum_(p * t, axis=-1)
    den = ops.sqrt(ops.sum_(p * p, axis=-1) * np.sum(t * t, axis=-1) + eps)
    return 1.0 - num / den


def task_losses(pred: dict, labels: LabelBatch) -> dict:
    out = {}
    for task, name in (("hr", "L_HR"), ("spo2", "L_SpO2"), ("rr", "L_RR")):
        err = ops.abs_(pred[task] - labels.value(task))
        out[name] = _masked_mean(err, labels.has(task))
    out["L_BVP"] = _masked_mean(pearson_loss(pred["bvp"], labels.value("bvp")), labels.has("bvp"))
    return out


def spatial_loss(features, rng: np.random.Generator, eps=1e-12) -> Tensor:
    """Negative cosine between each spatial row and a random other row, per
    sample and channel; averaged per feature map then summed over maps.

    Rows are ``s[b, c, h, :]``. A zero row has cosine 0 with everything.
    """
    total = None
    for s in features:
        b, c, h, w = s.shape
        if h < 2:
            raise ops.DimensionError("spatial_loss needs at least two rows")
        draws = draw_other_rows(rng, (b, c, h))
        mask = np.zeros((b, c, h, h), np.float32)
        np.put_along_axis(mask, draws[..., None], 1.0, axis=-1)
        sq = ops.sum_(s * s, axis=-1, keepdims=True)
        unit = s / ops.sqrt(sq + eps)
        gram = ops.matmul(unit, ops.transpose(unit, (0, 1, 3, 2)))
        cos = ops.sum_(gram * mask, axis=-1)
        term = -ops.mean(cos)
        total = term if total is None else total + term
    return total


def draw_other_rows(rng: np.random.Generator, shape) -> np.ndarray:
    """For each index in ``shape`` (last axis = row h) a uniform row != h."""
    h = shape[-1]
    offset = rng.integers(1, h, size=shape)
    return (np.arange(h) + offset) % h


def _deadband(diff: Tensor, delta: float) -> Tensor:
    """Keep the whole |diff| where it reaches ``delta``; exactly 0 inside."""
    mag = ops.abs_(diff)
    keep = (mag.data >= delta).astype(np.float32)
    return mag * keep


def temporal_loss(pred: dict, pred_prime: dict, delta=5.0, tasks=SCALAR_TASKS) -> Tensor:
    total = None
    for t in tasks:
        term = _deadband(pred_prime[t] - pred[t], delta)
        total = term if total is None else total + term
    return ops.mean(total)


def asp_loss(s_spo: Tensor, head, y_spo, has_spo, taus=DEFAULT_TAUS, valid=(80.0, 100.0)) -> Tensor:
    """Scaled-feature SpO2 consistency: ``|head(tau * s) - tau * y|`` for
    every tau whose scaled label stays in the plausible range."""
    f = pooled(s_spo)
    has = np.asarray(has_spo, bool)
    y = np.where(has, np.asarray(y_spo, np.float64), 0.0)
    total, count = None, 0
    for tau in taus:
        scaled = tau * y
        admit = has & (scaled >= valid[0]) & (scaled <= valid[1])
        n = int(admit.sum())
        if n == 0:
            continue
        err = ops.abs_(head(f * float(tau)) - scaled.astype(np.float32))
        term = ops.sum_(err * admit.astype(np.float32))
        total = term if total is None else total + term
        count += n
    if total is None:
        return ops.sum_(f * 0.0)
    return total / count


@dataclass
class PriorResult:
    value: Tensor
    failures: int


def br_loss(rr_pred: Tensor, labels: LabelBatch, delta=5.0, fs=30.0) -> PriorResult:
    """Deadbanded |rr - RR(ground-truth BVP)| averaged over the batch."""
    target = labels.rr_from_bvp
    if target is None:
        target = extract_rr(labels.bvp, labels.has("bvp"), fs)
    target = np.asarray(target, np.float64)
    ok = labels.has("bvp") & np.isfinite(target)
    failures = int((labels.has("bvp") & ~np.isfinite(target)).sum())
    safe = np.where(ok, target, 0.0).astype(np.float32)
    term = _deadband(rr_pred - safe, delta) * ok.astype(np.float32)
    return PriorResult(ops.sum_(term) / len(labels), failures)


def peak_hr(bvp: np.ndarray, fs=30.0) -> np.ndarray:
    out = np.full(len(bvp), np.nan)
    for i, b in enumerate(bvp):
        try:
            out[i] = signal.heart_rate(b, fs)
        except ValueError:
            pass
    return out


def spectral_hr(bvp: Tensor, fs=30.0, band=(40.0, 180.0), step=1.0, sharpness=4) -> Tensor:
    """Differentiable HR: power-weighted mean bpm over a DFT grid, with the
    power raised to ``sharpness`` so the dominant peak takes most weight."""
    n = bvp.shape[-1]
    bpm = np.arange(band[0], band[1] + 1e-9, step)
    t = np.arange(n) / fs
    arg = 2 * np.pi * np.outer(t, bpm / 60.0)
    cos = ops.matmul(bvp, np.cos(arg).astype(np.float32))
    sin = ops.matmul(bvp, np.sin(arg).astype(np.float32))
    power = (cos * cos + sin * sin) / n
    w = power ** float(sharpness)
    w = w / (ops.sum_(w, axis=-1, keepdims=True) + 1e-12)
    return ops.sum_(w * bpm.astype(np.float32), axis=-1)


def hb_loss(hr_pred: Tensor, bvp_pred: Tensor, labels: LabelBatch, fs=30.0,
            surrogate=False, target: Optional[np.ndarray] = None) -> PriorResult:
    """|hr - FindPeak(predicted BVP)| over HR-labelled samples, averaged over the batch.

    The peak-derived HR is a constant in backward. With ``surrogate`` the
    loss also pulls a spectral HR of the predicted BVP towards the HR label,
    which does reach the BVP head. ``target`` supplies precomputed peak HRs
    (gradient checks hold them fixed).
    """
    has = labels.has("hr")
    target = peak_hr(bvp_pred.data, fs) if target is None else np.asarray(target, np.float64)
    ok = has & np.isfinite(target)
    failures = int((has & ~np.isfinite(target)).sum())
    safe = np.where(ok, target, 0.0).astype(np.float32)
    value = ops.sum_(ops.abs_(hr_pred - safe) * ok.astype(np.float32)) / len(labels)
    if surrogate:
        est = spectral_hr(bvp_pred, fs)
        value = value + ops.sum_(ops.abs_(est - labels.value("hr")) * has.astype(np.float32)) / len(labels)
    return PriorResult(value, failures)


def joint_loss(terms: dict, weights: LossWeights, lam: float) -> Tensor:
    """``L_BVP + lam * sum_i p_i * L_i`` over the nine weighted terms present."""
    names = {"hr": "L_HR", "spo2": "L_SpO2", "rr": "L_RR", "oem": "L_OEM", "spatial": "L_Spatial",
             "temporal": "L_Temporal", "hb": "L_HB", "br": "L_BR", "asp": "L_ASp"}
    total = terms["L_BVP"]
    weighted = None
    for key, name in names.items():
        if name not in terms or weights.p.get(key, 0.0) == 0.0:
            continue
        t = terms[name] * weights.p[key]
        weighted = t if weighted is None else weighted + t
    if weighted is not None and lam != 0.0:
        total = total + weighted * lam
    return total
