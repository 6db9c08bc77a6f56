"""Metrics, evaluation reports and the two cross-domain protocols."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import signal
from .data import AccessLog, WindowDataset
from .mle import trainable_param_count
from .model import PhysMleModel, flops_estimate
from .stmap import DomainManifest
from .train import TrainConfig, predict, train

SCALAR_TASKS = ("hr", "spo2", "rr")
HRV_KEYS = ("LFnu", "HFnu", "LF_over_HF")
MASK_COL = {"hr": 0, "bvp": 1, "spo2": 2, "rr": 3}


def error_metrics(pred, label) -> dict:
    """MAE, RMSE and Pearson (``None`` when either side is constant)."""
    pred = np.asarray(pred, np.float64)
    label = np.asarray(label, np.float64)
    n = int(pred.size)
    if n == 0:
        return {"mae": None, "rmse": None, "pearson": None, "n": 0}
    err = pred - label
    r = signal.pearson(pred, label) if n >= 2 else None
    return {"mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(np.mean(err**2))),
            "pearson": r, "n": n}


def hrv_table(bvps, fs) -> np.ndarray:
    out = np.full((len(bvps), len(HRV_KEYS)), np.nan)
    for i, b in enumerate(bvps):
        try:
            m = signal.hrv_metrics(b, fs)
        except ValueError:
            continue
        if m is not None:
            out[i] = [m[k] for k in HRV_KEYS]
    return out


@dataclass
class MetricsReport:
    tasks: dict
    hrv: dict
    params: dict
    macs: int
    config: dict
    per_domain: dict = field(default_factory=dict)
    bvp_pearson: Optional[float] = None
    predictions: Optional[dict] = None  # raw arrays, not serialized to JSON

    def to_dict(self):
        return {"tasks": self.tasks, "hrv": self.hrv, "params": self.params, "macs": self.macs,
                "config": self.config, "per_domain": self.per_domain, "bvp_pearson": self.bvp_pearson}

    def mae(self, task):
        return self.tasks[task]["mae"]

    def save(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        p = self.predictions
        if p is not None:
            with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["domain", "subject", "window_start", "task", "prediction", "label"])
                for task in SCALAR_TASKS:
                    for i in np.flatnonzero(p["mask"][:, MASK_COL[task]]):
                        w.writerow([p["domain"][i], p["subject"][i], int(p["start"][i]), task,
                                    repr(float(p[task][i])), repr(float(p["label_" + task][i]))])
            np.savez(out_dir / f"{stem}_bvp.npz", predicted=p["bvp"], label=p["label_bvp"],
                     has_label=p["mask"][:, 1])
        return out_dir / f"{stem}.json"


def _task_metrics(pred, dataset: WindowDataset):
    lb = dataset.labels
    out = {}
    for task in SCALAR_TASKS:
        has = lb.has(task)
        out[task] = error_metrics(pred[task][has], getattr(lb, task)[has])
    return out


def build_report(model: PhysMleModel, config: TrainConfig, dataset: WindowDataset,
                 pred: Optional[dict] = None) -> MetricsReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = predict(model, dataset) if pred is None else pred
    lb = dataset.labels
    tasks = _task_metrics(pred, dataset)
    has_bvp = lb.has("bvp")
    hrv = {}
    bvp_r = None
    if has_bvp.any():
        rs = [signal.pearson(a, b) for a, b in zip(pred["bvp"][has_bvp], lb.bvp[has_bvp])]
        rs = [r for r in rs if r is not None]
        bvp_r = float(np.mean(rs)) if rs else None
        hp = hrv_table(pred["bvp"][has_bvp], dataset.fps)
        ht = hrv_table(lb.bvp[has_bvp], dataset.fps)
        for k, name in enumerate(HRV_KEYS):
            ok = np.isfinite(hp[:, k]) & np.isfinite(ht[:, k])
            hrv[name] = error_metrics(hp[ok, k], ht[ok, k])
    per_domain = {}
    for d in np.unique(dataset.domain):
        sel = np.flatnonzero(dataset.domain == d)
        sub = dataset.subset(sel)
        per_domain[str(d)] = _task_metrics({k: v[sel] for k, v in pred.items()}, sub)
    count = trainable_param_count(model)
    raw = dict(pred)
    raw.update(mask=lb.mask, domain=dataset.domain, subject=dataset.subject, start=dataset.start,
               label_hr=lb.hr, label_spo2=lb.spo2, label_rr=lb.rr, label_bvp=lb.bvp)
    return MetricsReport(
        tasks=tasks, hrv=hrv,
        params={"trainable": count.trainable, "frozen": count.frozen,
                "by_category": {k: list(v) for k, v in sorted(count.by_category.items())}},
        macs=int(flops_estimate(config.model)["total"]),
        config=config.to_dict(), per_domain=per_domain, bvp_pearson=bvp_r, predictions=raw,
    )


def evaluate(checkpoint, manifest: DomainManifest) -> MetricsReport:
    from .train import load_checkpoint

    model, cfg = load_checkpoint(checkpoint)
    if not manifest.entries:
        raise ValueError("empty manifest")
    ds = WindowDataset.from_manifests([manifest], shift=cfg.shift_frames)
    if ds.raw.shape[2] != cfg.model.frames:
        raise ValueError(
            f"checkpoint expects {cfg.model.frames} frames, data has {ds.raw.shape[2]}")
    return build_report(model, cfg, ds)


def mean_reports(reports) -> dict:
    """Average each metric over reports (skipping undefined values)."""
    out = {}
    for task in SCALAR_TASKS:
        out[task] = {}
        for key in ("mae", "rmse", "pearson"):
            vals = [r.tasks[task][key] for r in reports if r.tasks[task][key] is not None]
            out[task][key] = float(np.mean(vals)) if vals else None
        out[task]["n"] = int(sum(r.tasks[task]["n"] for r in reports))
    return out


# -- protocols ----------------------------------------------------------------------


@dataclass
class ProtocolRun:
    target: str
    report: MetricsReport
    train_domains: list
    log: list
    seconds: float
    model: Optional[PhysMleModel] = None


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("PHYSMLE_THREADS", "1")))
    except ValueError:
        return 1


def leave_one_out(config: TrainConfig, manifests, target: int, out_dir=None) -> ProtocolRun:
    """Train on every manifest except ``manifests[target]`` and report on that one."""
    held = manifests[target]
    sources = [m for i, m in enumerate(manifests) if i != target]
    log = AccessLog()
    train_ds = WindowDataset.from_manifests(sources, access_log=log, shift=config.shift_frames)
    result = train(config, train_ds,
                   log_path=None if out_dir is None else Path(out_dir) / f"loss_{held.domain_id}.jsonl")
    if log.touched(held):
        raise RuntimeError(f"held-out domain {held.domain_id} was read during training")
    test_ds = WindowDataset.from_manifests([held], shift=config.shift_frames)
    report = build_report(result.model, config, test_ds)
    report.config["held_out"] = held.domain_id
    report.config["train_domains"] = [m.domain_id for m in sources]
    if out_dir is not None:
        report.save(out_dir, stem=f"report_{held.domain_id}")
    return ProtocolRun(held.domain_id, report, [m.domain_id for m in sources], result.log, result.seconds,
                       result.model)


def run_protocol_I(config: TrainConfig, manifests, out_dir=None, parallel: bool = False):
    """Leave-one-domain-out: train on all other domains, test on the held-out one."""
    manifests = list(manifests)
    if len(manifests) < 2:
        raise ValueError("protocol I needs at least two domains")
    ids = [m.domain_id for m in manifests]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate domain ids: {ids}")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    if parallel and _workers() > 1:
        with ProcessPoolExecutor(max_workers=_workers()) as pool:
            futures = [pool.submit(leave_one_out, config, manifests, i, out_dir) for i in range(len(manifests))]
            runs = [f.result() for f in futures]
    else:
        runs = [leave_one_out(config, manifests, i, out_dir) for i in range(len(manifests))]
    for run in runs:
        assert run.target not in run.train_domains
    return runs


def subject_folds(subjects, k: int, seed: int = 0):
    """Partition distinct subjects into ``k`` folds (sizes differ by at most 1)."""
    subjects = sorted(set(subjects))
    if k < 2:
        raise ValueError("need at least 2 folds")
    if len(subjects) < k:
        raise ValueError(f"{len(subjects)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return [sorted(subjects[i] for i in order[f::k]) for f in range(k)]


@dataclass
class FoldedReport:
    folds: list
    mean: dict
    splits: list


def run_protocol_II(config: TrainConfig, manifest: DomainManifest, k: int = 5, out_dir=None):
    """Subject-disjoint k-fold cross-validation inside one domain."""
    folds = subject_folds(manifest.subjects(), k, config.seed)
    ds = WindowDataset.from_manifests([manifest], shift=config.shift_frames)
    reports, splits = [], []
    for f, test_subjects in enumerate(folds):
        test_set = set(test_subjects)
        is_test = np.array([s in test_set for s in ds.subject])
        train_subjects = {str(s) for s in ds.subject[~is_test]}
        if train_subjects & test_set:
            raise RuntimeError("subject appears in both train and test")
        result = train(config, ds.subset(np.flatnonzero(~is_test)))
        rep = build_report(result.model, config, ds.subset(np.flatnonzero(is_test)))
        rep.config["fold"] = f
        rep.config["test_subjects"] = list(test_subjects)
        if out_dir is not None:
            rep.save(out_dir, stem=f"report_fold{f}")
        reports.append(rep)
        splits.append({"train": sorted(train_subjects), "test": list(test_subjects)})
    return FoldedReport(reports, mean_reports(reports), splits)
