import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physmle.signal import heart_rate, rr_from_bvp
from physmle.stmap import (
    DomainManifest,
    GeneratorParams,
    LabelMask,
    StMap,
    StMapFormatError,
    VitalLabels,
    augment,
    build_domain,
    channel_ratio,
    decode_stmap,
    encode_stmap,
    generate_window,
    normalize_rows,
    read_stmap,
    render,
    resize_rows,
    sample_subject,
    write_stmap,
)


def fixed_subject(params, hr=72.0, rr=15.0, spo2=95.0, seed=0):
    s = sample_subject(params, np.random.default_rng(seed))
    s.hr, s.rr, s.spo2 = hr, rr, spo2
    return s


def test_ratio_at_spo2_95_is_one():
    params = GeneratorParams()
    r = render(params, fixed_subject(params, spo2=95.0), 0, 256, rng=None)
    assert channel_ratio(r.clean) == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(spo2=st.floats(80.0, 100.0), seed=st.integers(0, 10_000))
def test_spo2_round_trip_through_ratio(spo2, seed):
    params = GeneratorParams(spo2_range=(80.0, 100.0))
    r = render(params, fixed_subject(params, spo2=spo2, seed=seed), 0, 256, rng=None)
    assert params.spo2_for(channel_ratio(r.clean)) == pytest.approx(spo2, abs=1e-4)


def test_clean_bvp_hr_without_rsa():
    params = GeneratorParams(rsa_depth=0.0)
    r = render(params, fixed_subject(params, hr=72.0), 0, 256, rng=None)
    assert heart_rate(r.bvp, 30) == pytest.approx(72.0, abs=1.0)
    assert r.hr == pytest.approx(72.0, abs=1e-9)


def test_clean_bvp_rr_from_rsa():
    params = GeneratorParams(rsa_depth=0.05)
    r = render(params, fixed_subject(params, hr=72.0, rr=15.0), 0, 256, rng=None)
    assert rr_from_bvp(r.bvp, 30) == pytest.approx(15.0, abs=1.5)


@pytest.mark.parametrize("seed", range(12))
def test_label_hr_agrees_with_bvp_peaks(seed):
    x, y = generate_window(GeneratorParams(), seed)
    assert x.values.shape == (25, 256, 3)
    assert abs(heart_rate(y.bvp, 30) - y.hr) <= 2.0
    assert y.bvp.std() == pytest.approx(1.0, rel=1e-4)


def test_generated_rows_are_normalized():
    x, _ = generate_window(GeneratorParams(), 3)
    assert np.allclose(x.values.min(axis=(1, 2)), 0.0)
    assert np.allclose(x.values.max(axis=(1, 2)), 255.0)


def test_constant_row_normalizes_to_midpoint():
    v = np.random.default_rng(0).uniform(0, 9, size=(3, 10, 3))
    v[1] = 4.0
    out = normalize_rows(v)
    assert np.all(out[1] == 127.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), rows=st.integers(1, 6))
def test_normalization_idempotent(seed, rows):
    v = np.random.default_rng(seed).normal(0, 50, size=(rows, 20, 3))
    once = normalize_rows(v)
    np.testing.assert_allclose(normalize_rows(once), once, atol=1e-4)


def test_generation_is_deterministic_per_seed():
    a, ya = generate_window(GeneratorParams(), 11)
    b, yb = generate_window(GeneratorParams(), 11)
    assert np.array_equal(a.values, b.values) and np.array_equal(ya.bvp, yb.bvp)


@pytest.mark.parametrize(
    "kw",
    [
        dict(hr_range=(90.0, 60.0)),
        dict(spo2_range=(70.0, 95.0)),
        dict(spo2_range=(90.0, 101.0)),
        dict(rr_range=(float("nan"), 12.0)),
    ],
)
def test_invalid_ranges_rejected(kw):
    with pytest.raises(ValueError):
        generate_window(GeneratorParams(**kw), 0)


def test_domain_manifest_counts_and_mask(tmp_path):
    m = build_domain(GeneratorParams(), ["HR", "BVP"], 2, 3, tmp_path / "d", domain_id="A")
    assert len(m.entries) == 6
    loaded = DomainManifest.load(tmp_path / "d")
    assert loaded.label_mask == LabelMask(True, True, False, False)
    lines = (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 6
    assert set(json.loads(lines[0])) == {"path", "domain_id", "subject_id", "window_start"}
    for e in loaded.entries:
        x, y = read_stmap(loaded.resolve(e))
        assert y.mask == LabelMask(True, True, False, False)
        assert y.spo2 == 0.0 and y.rr == 0.0
        assert y.hr > 0 and y.bvp.std() > 0.5


def test_windows_overlap_by_246(tmp_path):
    m = build_domain(GeneratorParams(), LabelMask(), 1, 4, tmp_path)
    starts = [e.window_start for e in m.entries]
    assert np.all(np.diff(starts) == 10)
    assert all(256 - d == 246 for d in np.diff(starts))
    # the overlapping frames come from one continuous trace
    x0, y0 = read_stmap(m.resolve(m.entries[0]))
    x1, y1 = read_stmap(m.resolve(m.entries[1]))
    np.testing.assert_allclose(
        np.corrcoef(y0.bvp[10:], y1.bvp[:246])[0, 1], 1.0, atol=1e-4
    )


def test_domain_gain_scales_green_dc():
    base = GeneratorParams(illumination_gain=1.0)
    bright = GeneratorParams(illumination_gain=1.6)
    ratios = []
    for s in range(5):
        g = []
        for p in (base, bright):
            subj = sample_subject(p, np.random.default_rng([0, s]))
            raw = render(p, subj, 0, 256, np.random.default_rng(s)).raw
            g.append(raw[..., 1].mean())
        ratios.append(g[1] / g[0])
    assert np.mean(ratios) == pytest.approx(1.6, rel=0.05)


def test_augment_identity():
    x, _ = generate_window(GeneratorParams(), 1)
    out = augment(x, 0, np.random.default_rng(0), permutation=np.arange(x.rows))
    np.testing.assert_array_equal(out.values, x.values)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_augment_preserves_row_multiset(seed):
    x, _ = generate_window(GeneratorParams(rows=6, frames=64), 2)
    out = augment(x, 0, np.random.default_rng(seed))
    key = lambda v: sorted(map(bytes, v.reshape(v.shape[0], -1)))
    assert key(out.values) == key(x.values)


def test_augment_shift_keeps_constant_hr():
    params = GeneratorParams(rsa_depth=0.0, noise_sigma=0.0)
    subj = fixed_subject(params, hr=80.0)
    trace = render(params, subj, 0, 256 + 30, rng=None)
    x = StMap(normalize_rows(trace.raw))
    shifted = augment(x, 30, np.random.default_rng(0), window=256)
    assert shifted.frames == 256
    y, y2 = render(params, subj, 0, 256, None), render(params, subj, 30, 256, None)
    assert abs(y2.hr - y.hr) == 0.0
    with pytest.raises(ValueError):
        augment(x, 31, np.random.default_rng(0), window=256)


def interp_oracle(v, target):
    src = v.shape[0]
    pos = np.linspace(0, src - 1, target)
    out = np.empty((target,) + v.shape[1:])
    for f in range(v.shape[1]):
        for c in range(v.shape[2]):
            out[:, f, c] = np.interp(pos, np.arange(src), v[:, f, c])
    return out


def test_resize_identity_and_constant():
    x, _ = generate_window(GeneratorParams(), 4)
    np.testing.assert_array_equal(resize_rows(x, 25).values, x.values)
    c = StMap(np.full((25, 16, 3), 42.0))
    np.testing.assert_allclose(resize_rows(c, 64).values, 42.0, atol=1e-4)


def test_resize_round_trip_smooth_map():
    r = np.linspace(0, 1, 25)[:, None, None]
    f = np.linspace(0, 4 * np.pi, 64)[None, :, None]
    c = np.arange(3)[None, None, :]
    x = StMap(127.5 + 120 * np.sin(2 * np.pi * r + f + c))
    up = resize_rows(x, 64)
    np.testing.assert_allclose(up.values, interp_oracle(x.values, 64), atol=1e-3)
    back = resize_rows(up, 25)
    assert np.max(np.abs(back.values - x.values)) < 10.0
    with pytest.raises(ValueError):
        resize_rows(x, 0)


def test_file_round_trip_bit_identical(tmp_path):
    x, y = generate_window(GeneratorParams(), 5)
    write_stmap(tmp_path / "a.stmap", x, y)
    x2, y2 = read_stmap(tmp_path / "a.stmap")
    assert x2.values.tobytes() == x.values.tobytes()
    assert y2.bvp.tobytes() == y.bvp.tobytes()
    assert (np.float32(y.hr), np.float32(y.spo2), np.float32(y.rr)) == (y2.hr, y2.spo2, y2.rr)
    assert y2.mask == y.mask and x2.fps == x.fps
    assert encode_stmap(x2, y2) == (tmp_path / "a.stmap").read_bytes()


def test_masked_fields_written_as_zero():
    x, y = generate_window(GeneratorParams(), 5)
    _, y2 = decode_stmap(encode_stmap(x, y.masked(["HR", "RR"])))
    assert not y2.bvp.any() and y2.spo2 == 0.0 and y2.mask == LabelMask(True, False, False, True)


def test_format_errors():
    x, y = generate_window(GeneratorParams(rows=2, frames=64), 0)
    buf = encode_stmap(x, y)
    cases = {
        StMapFormatError.TRUNCATED: buf[:-3],
        StMapFormatError.BAD_MAGIC: b"XXXX" + buf[4:],
        StMapFormatError.VERSION_MISMATCH: buf[:4] + (2).to_bytes(2, "little") + buf[6:],
    }
    for code, data in cases.items():
        with pytest.raises(StMapFormatError) as err:
            decode_stmap(data)
        assert err.value.code == code
    codes = set(cases)
    assert len(codes) == 3
