"""The JSON document read by the command line: training, generator, data and protocol settings."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .stmap import GeneratorParams, LabelMask
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _reject_unknown(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass
class DomainSpec:
    domain_id: str
    label_mask: tuple
    illumination_gain: float = 1.0
    chroma_gains: tuple = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.5

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(cls, d, "domain")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            spec = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"domain: {exc}") from exc
        LabelMask.parse(spec.label_mask)
        return spec

    def generator(self, base: GeneratorParams) -> GeneratorParams:
        return dataclasses.replace(base, illumination_gain=self.illumination_gain,
                                   chroma_gains=tuple(self.chroma_gains), noise_sigma=self.noise_sigma)


# Four domains with heterogeneous label sets and different camera/lighting conditions.
DEFAULT_DOMAINS = (
    DomainSpec("D1", ("HR", "BVP", "SpO2"), 1.0, (1.0, 1.0, 1.0), 0.5),
    DomainSpec("D2", ("HR", "BVP"), 1.6, (1.1, 0.95, 0.9), 0.8),
    DomainSpec("D3", ("HR", "RR"), 0.7, (0.9, 1.05, 1.1), 0.4),
    DomainSpec("D4", ("HR", "BVP", "RR"), 1.3, (1.05, 1.0, 0.95), 1.0),
)


@dataclass
class DataConfig:
    subjects: int = 8
    windows_per_subject: int = 10
    domains: tuple = DEFAULT_DOMAINS

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(cls, d, "data")
        d = dict(d)
        if "domains" in d:
            d["domains"] = tuple(DomainSpec.from_dict(x) for x in d["domains"])
        cfg = cls(**d)
        if cfg.subjects < 1 or cfg.windows_per_subject < 1 or not cfg.domains:
            raise ConfigError("need at least one domain, subject and window")
        return cfg

    def domain_specs(self, n=None):
        """The first ``n`` domains; beyond the configured list the specs repeat under new ids."""
        n = len(self.domains) if n is None else n
        if n < 1:
            raise ConfigError("--domains must be at least 1")
        out = []
        for i in range(n):
            spec = self.domains[i % len(self.domains)]
            if i >= len(self.domains):
                spec = dataclasses.replace(spec, domain_id=f"D{i + 1}")
            out.append(spec)
        return out


@dataclass
class ProtocolConfig:
    kind: str = "I"
    folds: int = 5
    parallel: bool = False

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(cls, d, "protocol")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"protocol: {exc}") from exc
        if cfg.kind not in ("I", "II"):
            raise ConfigError("protocol kind must be 'I' or 'II'")
        if cfg.folds < 2:
            raise ConfigError("protocol folds must be >= 2")
        return cfg


@dataclass
class CliConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    data: DataConfig = field(default_factory=DataConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    @classmethod
    def from_dict(cls, d) -> "CliConfig":
        _reject_unknown(cls, d, "top-level")
        try:
            train = TrainConfig.from_dict(d.get("train", {}))
            gen = GeneratorParams.from_dict(d.get("generator", {})).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(train, gen, DataConfig.from_dict(d.get("data", {})),
                   ProtocolConfig.from_dict(d.get("protocol", {})))

    @classmethod
    def load(cls, path=None) -> "CliConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def to_dict(self):
        return {"train": self.train.to_dict(), "generator": self.generator.to_dict(),
                "data": dataclasses.asdict(self.data), "protocol": dataclasses.asdict(self.protocol)}
