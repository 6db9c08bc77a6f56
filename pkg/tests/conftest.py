import contextlib

import numpy as np
import pytest

from physmle.model import ModelConfig
from physmle.stmap import GeneratorParams, build_domain
from physmle.train import TrainConfig

FS = 30.0
TINY_MASKS = (("HR", "BVP", "SpO2"), ("HR", "BVP"), ("HR", "RR"), ("HR", "BVP", "RR"))


def tiny_model_config(**kw) -> ModelConfig:
    """Two-block model on 16x64 maps; fast enough for unit tests."""
    base = dict(channels=(8, 16), layers_per_block=1, stem_channels=8, rank=4, alpha=8.0,
                rows=16, frames=64, router_hidden=4, task_router_hidden=4,
                decoder_channels=(8, 8, 8, 8))
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(**kw) -> TrainConfig:
    model = kw.pop("model", tiny_model_config())
    base = dict(batch_size=4, iterations=3, model=model)
    base.update(kw)
    return TrainConfig(**base)


def tiny_params(**kw) -> GeneratorParams:
    base = dict(frames=64, rows=8)
    base.update(kw)
    return GeneratorParams(**base)


def rsa_pulse(hr, rr_hz, depth, n=256, phase=0.0, fs=FS):
    """cos of the integrated instantaneous pulse frequency."""
    t = np.arange(n) / fs
    fh = hr / 60.0
    if depth == 0:
        ph = 2 * np.pi * fh * t
    else:
        ph = 2 * np.pi * fh * (
            t - depth / (2 * np.pi * rr_hz) * (np.cos(2 * np.pi * rr_hz * t + phase) - np.cos(phase))
        )
    return np.cos(ph)


def tiny_batch(n=3, seed=0, cfg=None):
    cfg = cfg or tiny_model_config()
    return np.random.default_rng(seed).uniform(0, 1, (n, cfg.rows, cfg.frames, 3)).astype(np.float32)


@pytest.fixture(scope="session")
def tiny_domains(tmp_path_factory):
    root = tmp_path_factory.mktemp("domains")
    return [build_domain(tiny_params(), list(m), 3, 2, root / f"D{i}", domain_id=f"D{i}", seed=i)
            for i, m in enumerate(TINY_MASKS)]


# -- acceptance verdicts -------------------------------------------------------------

_VERDICTS = []


class Verdict:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.detail = ""


@pytest.fixture
def criterion():
    """``with criterion(n, title) as v:`` records PASS, or FAIL when the body raises."""

    @contextlib.contextmanager
    def record(number, title):
        v = Verdict(number, title)
        try:
            yield v
        except BaseException as exc:
            reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            _report(v, "FAIL", f"{v.detail} {reason}".strip())
            raise
        _report(v, "PASS", v.detail)

    return record


def _report(v, status, detail):
    line = f"criterion {v.number:>2} {status}: {v.title}" + (f" ({detail})" if detail else "")
    _VERDICTS.append((v.number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
