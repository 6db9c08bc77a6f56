"""In-memory window datasets assembled from domain manifests."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .losses import LabelBatch, extract_rr
from .stmap import (
    AUG_SHIFT,
    DomainManifest,
    StMap,
    augment,
    read_stmap,
    row_interp_matrix,
)


@dataclass
class AccessLog:
    """Every STMap path opened through a dataset, in order."""

    paths: list = field(default_factory=list)

    def record(self, path):
        self.paths.append(str(path))

    def touched(self, manifest: DomainManifest) -> bool:
        wanted = {str(manifest.resolve(e)) for e in manifest.entries}
        return any(p in wanted for p in self.paths)


@dataclass
class WindowDataset:
    raw: np.ndarray  # (N, rows, frames, 3) row-normalized values in [0, 255]
    labels: LabelBatch
    domain: np.ndarray
    subject: np.ndarray
    start: np.ndarray
    paths: list
    fps: int
    pair: np.ndarray  # index of the shifted window used as X'

    def __len__(self):
        return len(self.raw)

    @classmethod
    def from_manifests(cls, manifests, access_log: Optional[AccessLog] = None,
                       shift: int = AUG_SHIFT) -> "WindowDataset":
        raws, labels, domain, subject, start, paths = [], [], [], [], [], []
        fps = None
        for m in manifests:
            for e in m.entries:
                path = m.resolve(e)
                if access_log is not None:
                    access_log.record(path)
                x, y = read_stmap(path)
                fps = x.fps if fps is None else fps
                if x.fps != fps:
                    raise ValueError(f"mixed frame rates: {path} has {x.fps}, expected {fps}")
                raws.append(x.values)
                labels.append(y)
                domain.append(e.domain_id)
                subject.append(e.subject_id)
                start.append(e.window_start)
                paths.append(str(path))
        if not raws:
            raise ValueError("no windows in the given manifests")
        shapes = {r.shape for r in raws}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent STMap shapes: {sorted(shapes)}")
        mask = np.array([list(lb.mask) for lb in labels], bool)
        rr = extract_rr([lb.bvp for lb in labels], mask[:, 1], fps)
        batch = LabelBatch([lb.hr for lb in labels], [lb.spo2 for lb in labels],
                           [lb.rr for lb in labels], np.stack([lb.bvp for lb in labels]), mask, rr)
        subject = np.array(subject)
        start = np.array(start, np.int64)
        return cls(np.stack(raws), batch, np.array(domain), subject, start, paths, fps,
                   pair_windows(subject, start, shift))

    def take_labels(self, idx) -> LabelBatch:
        lb = self.labels
        return LabelBatch(lb.hr[idx], lb.spo2[idx], lb.rr[idx], lb.bvp[idx], lb.mask[idx],
                          None if lb.rr_from_bvp is None else lb.rr_from_bvp[idx])

    def inputs(self, idx, rows: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Model inputs for ``idx``: rows resized to ``rows`` and scaled to [0, 1].

        With ``rng`` each window is row-permuted first (augmentation branch).
        """
        vals = self.raw[idx]
        if rng is not None:
            vals = np.stack([augment(StMap(v, self.fps), 0, rng).values for v in vals])
        m = row_interp_matrix(vals.shape[1], rows).astype(np.float32)
        out = np.einsum("tr,nrfc->ntfc", m, vals, optimize=True)
        return (out / np.float32(255.0)).astype(np.float32)

    def subset(self, idx) -> "WindowDataset":
        idx = np.asarray(idx)
        remap = -np.ones(len(self), np.int64)
        remap[idx] = np.arange(len(idx))
        pair = remap[self.pair[idx]]
        pair = np.where(pair < 0, np.arange(len(idx)), pair)
        return WindowDataset(self.raw[idx], self.take_labels(idx), self.domain[idx],
                             self.subject[idx], self.start[idx], [self.paths[i] for i in idx],
                             self.fps, pair)


def pair_windows(subject, start, shift):
    """Index of the same subject's window ``shift`` frames later (else earlier,
    else the window itself)."""
    lookup = {(s, int(t)): i for i, (s, t) in enumerate(zip(subject, start))}
    out = np.arange(len(subject))
    for i, (s, t) in enumerate(zip(subject, start)):
        for cand in ((s, int(t) + shift), (s, int(t) - shift)):
            j = lookup.get(cand)
            if j is not None:
                out[i] = j
                break
    return out


class BatchSampler:
    """Seeded uniform sampling over pooled windows, or per-domain balanced."""

    def __init__(self, dataset: WindowDataset, batch_size: int, rng: np.random.Generator,
                 balanced: bool = False):
        self.dataset = dataset
        self.batch_size = min(batch_size, len(dataset))
        self.rng = rng
        self.balanced = balanced
        self.by_domain = {d: np.flatnonzero(dataset.domain == d) for d in np.unique(dataset.domain)}

    def sample(self) -> np.ndarray:
        if not self.balanced:
            return self.rng.choice(len(self.dataset), size=self.batch_size, replace=False)
        doms = list(self.by_domain)
        picks = self.rng.integers(0, len(doms), size=self.batch_size)
        return np.array([self.rng.choice(self.by_domain[doms[k]]) for k in picks])
