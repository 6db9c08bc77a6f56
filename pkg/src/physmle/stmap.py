"""Spatial-temporal maps: synthetic generation, augmentation, file format, manifests.

An STMap is a ``rows x frames x 3`` grid of ROI-averaged colour intensities
(R, G, B order). Stored maps are normalized per row to ``[0, 255]``.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

DEFAULT_ROWS = 25
DEFAULT_FRAMES = 256
DEFAULT_FPS = 30
WINDOW_STRIDE = 10
AUG_SHIFT = 30

MAGIC = b"PMLE"
VERSION = 1
_HEADER = struct.Struct("<4sHHIBBBfff")

# pulse shape: fundamental plus a skewing second harmonic
_HARMONIC_AMP = 0.25
_HARMONIC_PHASE = -np.pi / 3
_WANDER_FRACTION = 0.3


class LabelMask(NamedTuple):
    hr: bool = True
    bvp: bool = True
    spo2: bool = True
    rr: bool = True

    def bits(self) -> int:
        return int(self.hr) | int(self.bvp) << 1 | int(self.spo2) << 2 | int(self.rr) << 3

    @classmethod
    def from_bits(cls, b: int) -> "LabelMask":
        return cls(bool(b & 1), bool(b & 2), bool(b & 4), bool(b & 8))

    @classmethod
    def parse(cls, value) -> "LabelMask":
        """Accepts a LabelMask, 4 booleans, or names like ``["HR", "BVP"]``."""
        if isinstance(value, LabelMask):
            return value
        if isinstance(value, str):
            value = [v for v in value.replace("+", ",").split(",") if v.strip()]
        value = list(value)
        if len(value) == 4 and all(isinstance(v, bool) for v in value):
            return cls(*value)
        names = {v.strip().lower() for v in value}
        unknown = names - {"hr", "bvp", "spo2", "rr"}
        if unknown:
            raise ValueError(f"unknown label names: {sorted(unknown)}")
        return cls("hr" in names, "bvp" in names, "spo2" in names, "rr" in names)

    def names(self):
        return [n.upper() if n != "spo2" else "SpO2" for n, on in zip(self._fields, self) if on]


@dataclass
class StMap:
    values: np.ndarray  # (rows, frames, channels)
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"STMap values must be rows x frames x channels, got {self.values.shape}")

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def frames(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass
class VitalLabels:
    hr: float
    spo2: float
    rr: float
    bvp: np.ndarray
    mask: LabelMask = LabelMask()

    def __post_init__(self):
        self.bvp = np.asarray(self.bvp, dtype=np.float32)
        self.mask = LabelMask.parse(self.mask)

    def masked(self, mask) -> "VitalLabels":
        mask = LabelMask.parse(mask)
        return VitalLabels(
            self.hr if mask.hr else 0.0,
            self.spo2 if mask.spo2 else 0.0,
            self.rr if mask.rr else 0.0,
            self.bvp if mask.bvp else np.zeros_like(self.bvp),
            LabelMask(*(a and b for a, b in zip(self.mask, mask))),
        )


@dataclass
class GeneratorParams:
    wa: float = 100.0
    wb: float = 5.0
    hr_range: tuple = (55.0, 110.0)
    rr_range: tuple = (9.0, 24.0)
    spo2_range: tuple = (90.0, 100.0)
    rsa_depth: float = 0.05
    noise_sigma: float = 0.5
    # skin DC level per channel before illumination and chroma
    dc: tuple = (180.0, 130.0, 100.0)
    # pulsatile modulation depth of green and blue; red follows from SpO2
    ac_green: float = 0.02
    ac_blue: float = 0.008
    illumination_gain: float = 1.0
    chroma_gains: tuple = (1.0, 1.0, 1.0)
    rows: int = DEFAULT_ROWS
    frames: int = DEFAULT_FRAMES
    fps: int = DEFAULT_FPS

    def validate(self):
        for name in ("hr_range", "rr_range", "spo2_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"{name} must be a non-empty interval, got {(lo, hi)}")
        if self.spo2_range[0] < 80 or self.spo2_range[1] > 100:
            raise ValueError("spo2_range must lie within [80, 100]")
        if self.hr_range[0] <= 0 or self.hr_range[1] > 220:
            raise ValueError("hr_range must lie within (0, 220] beats/min")
        if self.rr_range[0] <= 0:
            raise ValueError("rr_range must be positive")
        if self.wb == 0:
            raise ValueError("wb must be non-zero")
        if self.rows < 1 or self.frames < 1 or not (0 < self.fps < 256):
            raise ValueError("rows, frames and fps must be positive (fps < 256)")
        if len(self.dc) != 3 or len(self.chroma_gains) != 3:
            raise ValueError("dc and chroma_gains need three channels")
        return self

    def ratio_for(self, spo2: float) -> float:
        """Red/blue ratio-of-ratios that maps to ``spo2`` under the linear model."""
        return (self.wa - spo2) / self.wb

    def spo2_for(self, ratio: float) -> float:
        return self.wa - self.wb * ratio

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------


@dataclass
class SubjectState:
    hr: float
    rr: float
    spo2: float
    pulse_phase: float
    rsa_phase: float
    wander_phase: float
    skin: np.ndarray  # per-channel DC multiplier
    row_gain: np.ndarray  # per-row DC multiplier
    row_ac: np.ndarray  # per-row pulsatile amplitude multiplier


def sample_subject(params: GeneratorParams, rng: np.random.Generator) -> SubjectState:
    rows = params.rows
    r = np.arange(rows) / max(rows - 1, 1)
    tilt = rng.uniform(-0.15, 0.15)
    return SubjectState(
        hr=float(rng.uniform(*params.hr_range)),
        rr=float(rng.uniform(*params.rr_range)),
        spo2=float(rng.uniform(*params.spo2_range)),
        pulse_phase=float(rng.uniform(0, 2 * np.pi)),
        rsa_phase=float(rng.uniform(0, 2 * np.pi)),
        wander_phase=float(rng.uniform(0, 2 * np.pi)),
        skin=rng.uniform(0.9, 1.1, size=3),
        row_gain=1.0 + tilt * (r - 0.5) + 0.05 * np.sin(2 * np.pi * r + rng.uniform(0, 2 * np.pi)),
        row_ac=rng.uniform(0.7, 1.3) + 0.2 * np.cos(np.pi * r),
    )


def pulse_phase(subject: SubjectState, t: np.ndarray, rsa_depth: float) -> np.ndarray:
    """Integral of 2*pi*f_h*(1 + depth*sin(2*pi*f_r*t + phi))."""
    fh = subject.hr / 60.0
    fr = subject.rr / 60.0
    ph = subject.rsa_phase
    integral = t.copy()
    if rsa_depth:
        integral -= rsa_depth / (2 * np.pi * fr) * (np.cos(2 * np.pi * fr * t + ph) - np.cos(ph))
    return 2 * np.pi * fh * integral + subject.pulse_phase


def pulse_wave(phase: np.ndarray) -> np.ndarray:
    return np.cos(phase) + _HARMONIC_AMP * np.cos(2 * phase + _HARMONIC_PHASE)


def _standardize(x):
    x = x - x.mean()
    sd = x.std()
    return x / sd if sd > 0 else x


def channel_modulations(params: GeneratorParams, spo2: float) -> np.ndarray:
    """Per-channel modulation depths (R, G, B); red/blue fixes the SpO2 ratio."""
    ratio = params.ratio_for(spo2)
    return np.array([ratio * params.ac_blue, params.ac_green, params.ac_blue])


@dataclass
class Rendered:
    raw: np.ndarray  # (rows, frames, 3) float64 intensities with noise
    clean: np.ndarray  # same, without noise
    bvp: np.ndarray  # standardized clean pulse
    hr: float  # mean instantaneous pulse rate over the window


def render(params: GeneratorParams, subject: SubjectState, start: int, frames: int,
           rng: Optional[np.random.Generator]) -> Rendered:
    """Render frames ``[start, start + frames)`` of one subject's trace.

    Each channel is ``DC * (1 + m * a_row * p(t))`` plus noise, where ``p`` is
    the standardized pulse plus a respiratory baseline wander of 0.3 x its AC,
    mean-removed over the rendered span so means equal DC and the
    ratio-of-ratios equals m_red / m_blue exactly before noise.
    """
    fps = params.fps
    t = (start + np.arange(frames)) / fps
    phase = pulse_phase(subject, t, params.rsa_depth)
    bvp = _standardize(pulse_wave(phase))
    wander = _WANDER_FRACTION * np.sin(2 * np.pi * subject.rr / 60.0 * t + subject.wander_phase)
    p = bvp + wander
    p = p - p.mean()
    m = channel_modulations(params, subject.spo2)
    dc = (np.asarray(params.dc) * subject.skin * params.illumination_gain
          * np.asarray(params.chroma_gains))
    base = subject.row_gain[:, None, None] * dc[None, None, :]
    clean = base * (1.0 + m[None, None, :] * subject.row_ac[:, None, None] * p[None, :, None])
    raw = clean
    if rng is not None and params.noise_sigma > 0:
        raw = clean + rng.normal(0.0, params.noise_sigma, size=clean.shape)
    t_edges = np.array([t[0], t[0] + frames / fps])
    ph_edges = pulse_phase(subject, t_edges, params.rsa_depth)
    hr = float((ph_edges[1] - ph_edges[0]) / (2 * np.pi) / (frames / fps) * 60.0)
    return Rendered(raw, clean, bvp, hr)


def normalize_rows(values: np.ndarray) -> np.ndarray:
    """Min-max scale each row (over frames and channels) to [0, 255].

    Constant rows become 127.5.
    """
    v = np.asarray(values, dtype=np.float64)
    lo = v.min(axis=(1, 2), keepdims=True)
    hi = v.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (v - lo) / safe * 255.0, 127.5)
    return out.astype(np.float32)


def generate_window(params: GeneratorParams, seed: int):
    """One synthetic window with complete labels."""
    params.validate()
    rng = np.random.default_rng(seed)
    subject = sample_subject(params, rng)
    r = render(params, subject, 0, params.frames, rng)
    labels = VitalLabels(r.hr, subject.spo2, subject.rr, r.bvp, LabelMask())
    return StMap(normalize_rows(r.raw), params.fps), labels


def channel_ratio(values: np.ndarray) -> float:
    """Mean over rows of (AC_R/DC_R)/(AC_B/DC_B), AC = std and DC = mean over frames."""
    v = np.asarray(values, dtype=np.float64)
    ac = v.std(axis=1)
    dc = v.mean(axis=1)
    rr = ac / dc
    return float(np.mean(rr[:, 0] / rr[:, 2]))


# --------------------------------------------------------------------------
# Augmentation and resizing
# --------------------------------------------------------------------------


def augment(x: StMap, shift_frames: int, rng: np.random.Generator, start: int = 0,
            window: Optional[int] = None, permutation=None) -> StMap:
    """Window of ``x`` advanced by ``shift_frames`` with the row order permuted.

    ``x`` is the source trace; the returned window starts at
    ``start + shift_frames`` and spans ``window`` frames (default: the source
    length minus the shift start). Rows are permuted as whole rows and then
    row-normalized, which is a no-op on an already normalized window.
    """
    begin = start + shift_frames
    if window is None:
        window = x.frames - max(begin, 0) if begin >= 0 else x.frames
    if begin < 0:
        raise ValueError(f"shift {shift_frames} from start {start} runs before the trace")
    if begin + window > x.frames or window < 1:
        raise ValueError(
            f"insufficient trailing frames: need {begin + window}, trace has {x.frames}"
        )
    if permutation is None:
        permutation = rng.permutation(x.rows)
    seg = x.values[np.asarray(permutation), begin : begin + window]
    return StMap(normalize_rows(seg), x.fps)


def resize_rows(x: StMap, target_rows: int) -> StMap:
    """Linear interpolation along the row axis (end points aligned)."""
    if target_rows < 1:
        raise ValueError("target_rows must be >= 1")
    return StMap(resize_rows_array(x.values, target_rows), x.fps)


def row_interp_matrix(src_rows: int, target_rows: int) -> np.ndarray:
    if src_rows == target_rows:
        return np.eye(src_rows)
    if target_rows == 1 or src_rows == 1:
        m = np.zeros((target_rows, src_rows))
        m[:, :] = 1.0 / src_rows
        return m
    pos = np.arange(target_rows) * (src_rows - 1) / (target_rows - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, src_rows - 2)
    frac = pos - lo
    m = np.zeros((target_rows, src_rows))
    m[np.arange(target_rows), lo] = 1 - frac
    m[np.arange(target_rows), lo + 1] += frac
    return m


def resize_rows_array(values: np.ndarray, target_rows: int) -> np.ndarray:
    """Row-axis interpolation of ``(..., rows, frames, channels)`` arrays."""
    v = np.asarray(values)
    src = v.shape[-3]
    if src == target_rows:
        return v.astype(np.float32, copy=True)
    m = row_interp_matrix(src, target_rows)
    return np.einsum("tr,...rfc->...tfc", m, v.astype(np.float64)).astype(np.float32)


# --------------------------------------------------------------------------
# File format
# --------------------------------------------------------------------------


class StMapFormatError(ValueError):
    BAD_MAGIC = "bad magic"
    VERSION_MISMATCH = "version mismatch"
    TRUNCATED = "truncated payload"

    def __init__(self, code, detail=""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


def encode_stmap(x: StMap, labels: VitalLabels) -> bytes:
    if x.rows > 0xFFFF or x.channels > 0xFF or not (0 < x.fps < 256):
        raise ValueError("STMap geometry does not fit the header fields")
    if labels.bvp.size not in (0, x.frames):
        raise ValueError("bvp length must equal frame count")
    mask = labels.mask
    bvp = labels.bvp if (mask.bvp and labels.bvp.size) else np.zeros(x.frames, np.float32)
    header = _HEADER.pack(
        MAGIC, VERSION, x.rows, x.frames, x.channels, int(x.fps), mask.bits(),
        labels.hr if mask.hr else 0.0,
        labels.spo2 if mask.spo2 else 0.0,
        labels.rr if mask.rr else 0.0,
    )
    return header + bvp.astype("<f4").tobytes() + x.values.astype("<f4").tobytes()


def decode_stmap(buf: bytes):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise StMapFormatError(StMapFormatError.BAD_MAGIC, repr(bytes(buf[:4])))
    if len(buf) < _HEADER.size:
        raise StMapFormatError(StMapFormatError.TRUNCATED, "header")
    _, version, rows, frames, channels, fps, bits, hr, spo2, rr = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise StMapFormatError(StMapFormatError.VERSION_MISMATCH, f"file v{version}, reader v{VERSION}")
    need = _HEADER.size + 4 * frames + 4 * rows * frames * channels
    if len(buf) < need:
        raise StMapFormatError(StMapFormatError.TRUNCATED, f"{len(buf)} of {need} bytes")
    off = _HEADER.size
    bvp = np.frombuffer(buf, dtype="<f4", count=frames, offset=off).astype(np.float32)
    off += 4 * frames
    values = np.frombuffer(buf, dtype="<f4", count=rows * frames * channels, offset=off)
    values = values.reshape(rows, frames, channels).astype(np.float32)
    labels = VitalLabels(hr, spo2, rr, bvp, LabelMask.from_bits(bits))
    return StMap(values, fps), labels


def write_stmap(path, x: StMap, labels: VitalLabels) -> None:
    path = Path(path)
    path.write_bytes(encode_stmap(x, labels))


def read_stmap(path):
    return decode_stmap(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Domains and manifests
# --------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    domain_id: str
    subject_id: str
    window_start: int


@dataclass
class DomainManifest:
    domain_id: str
    label_mask: LabelMask
    generator_params: dict
    entries: list = field(default_factory=list)
    root: Optional[Path] = None

    MANIFEST = "manifest.jsonl"
    SIDECAR = "domain.json"

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def subjects(self):
        return sorted({e.subject_id for e in self.entries})

    def subset(self, subjects) -> "DomainManifest":
        keep = set(subjects)
        return DomainManifest(self.domain_id, self.label_mask, self.generator_params,
                              [e for e in self.entries if e.subject_id in keep], self.root)

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / self.MANIFEST, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(dataclasses.asdict(e), sort_keys=True) + "\n")
        sidecar = {
            "domain_id": self.domain_id,
            "label_mask": self.label_mask.names(),
            "generator_params": self.generator_params,
        }
        (directory / self.SIDECAR).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        self.root = directory
        return directory / self.MANIFEST

    @classmethod
    def load(cls, path) -> "DomainManifest":
        path = Path(path)
        directory = path if path.is_dir() else path.parent
        manifest = directory / cls.MANIFEST
        sidecar = json.loads((directory / cls.SIDECAR).read_text())
        entries = []
        with open(manifest) as fh:
            for line in fh:
                if line.strip():
                    entries.append(ManifestEntry(**json.loads(line)))
        return cls(sidecar["domain_id"], LabelMask.parse(sidecar["label_mask"]),
                   sidecar["generator_params"], entries, directory)


def build_domain(params: GeneratorParams, label_mask, n_subjects: int, windows_per_subject: int,
                 out_dir, domain_id: str = "D0", seed: int = 0,
                 stride: int = WINDOW_STRIDE) -> DomainManifest:
    """Generate one synthetic domain: a trace per subject cut into overlapping windows.

    Windows start every ``stride`` frames; each is row-normalized on its own
    and written with the domain's label mask applied.
    """
    params.validate()
    mask = LabelMask.parse(label_mask)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    window = params.frames
    gp = params.to_dict()
    gp.update(subject_count=n_subjects, windows_per_subject=windows_per_subject)
    manifest = DomainManifest(domain_id, mask, gp)
    for s in range(n_subjects):
        rng = np.random.default_rng([seed, s])
        subject = sample_subject(params, rng)
        subject_id = f"{domain_id}-s{s:03d}"
        for w in range(windows_per_subject):
            start = w * stride
            r = render(params, subject, start, window, rng)
            labels = VitalLabels(r.hr, subject.spo2, subject.rr, r.bvp).masked(mask)
            name = f"{subject_id}_w{start:05d}.stmap"
            try:
                write_stmap(out / name, StMap(normalize_rows(r.raw), params.fps), labels)
            except OSError as exc:
                raise OSError(f"cannot write {out / name}: {exc}") from exc
        manifest.entries.extend(
            ManifestEntry(f"{subject_id}_w{w * stride:05d}.stmap", domain_id, subject_id, w * stride)
            for w in range(windows_per_subject)
        )
    manifest.write(out)
    return manifest
