import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physmle import evaluate as E
from physmle.data import AccessLog, WindowDataset
from physmle.grad.nn import Parameter
from physmle.losses import lambda_schedule
from physmle.stmap import DomainManifest, build_domain
from physmle.train import (
    LOG_TERMS,
    Adam,
    NonFiniteLoss,
    TrainConfig,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

from conftest import tiny_model_config, tiny_params, tiny_train_config


@pytest.fixture(scope="module")
def pooled(tiny_domains):
    return WindowDataset.from_manifests(tiny_domains)


# -- config ---------------------------------------------------------------------


def test_config_round_trip():
    cfg = tiny_train_config(seed=5, balanced_domains=True)
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("doc", [{"batchsize": 3}, {"model": {"rnak": 2}}, {"loss": {"p": {"zzz": 1}}},
                                 {"loss": {"dleta": 1}}])
def test_config_unknown_keys_rejected(doc):
    with pytest.raises(ValueError):
        TrainConfig.from_dict(doc)


def test_config_presets():
    desk = TrainConfig()
    assert (desk.batch_size, desk.iterations, desk.lr) == (60, 2000, 1e-3)
    published = TrainConfig.published()
    assert (published.batch_size, published.iterations, published.lr) == (60, 20000, 1e-5)
    m = desk.model
    assert (m.experts, m.rank, m.alpha, m.gamma) == (3, 16, 32.0, 2.0)
    assert desk.loss.delta == 5.0 and set(desk.loss.p.values()) == {1.0}


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        tiny_train_config(lr=0.0).validate()
    with pytest.raises(ValueError):
        tiny_train_config(batch_size=0).validate()


# -- Adam -----------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), steps=st.integers(1, 5), lr=st.floats(1e-5, 1.0))
def test_adam_zero_gradient_is_a_no_op(seed, steps, lr):
    p = Parameter(np.random.default_rng(seed).standard_normal((3, 2)))
    q = Parameter(np.ones(4))
    before_p, before_q = p.data.copy(), q.data.copy()
    opt = Adam([p, q], lr=lr)
    for _ in range(steps):
        p.grad = np.zeros_like(p.data)
        q.grad = None
        opt.step()
    assert np.array_equal(p.data, before_p)
    assert np.array_equal(q.data, before_q)


def test_adam_matches_reference_update():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=0.1)
    m = v = np.zeros(2)
    x = np.array([1.0, -2.0])
    for t in range(1, 4):
        g = 2 * x
        p.grad = g.astype(np.float32)
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-5)


# -- training loop ----------------------------------------------------------------


def test_log_lines_and_lambda_column(pooled, tmp_path):
    cfg = tiny_train_config(iterations=4)
    res = train(cfg, pooled, log_path=tmp_path / "log.jsonl")
    lines = [json.loads(s) for s in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == res.log
    assert [ln["iter"] for ln in lines] == list(range(4))
    for ln in lines:
        assert set(LOG_TERMS) | {"lambda", "joint", "hb_failures", "br_failures"} <= set(ln)
        assert ln["lambda"] == lambda_schedule(ln["iter"], cfg.iterations, cfg.loss.lambda_gamma)
    assert lines[0]["lambda"] == 0.0
    # at lambda = 0 only the BVP term is optimized
    assert lines[0]["joint"] == pytest.approx(lines[0]["L_BVP"], rel=1e-6)


def test_identical_seeds_identical_logs(pooled):
    a = train(tiny_train_config(seed=3), pooled).log
    b = train(tiny_train_config(seed=3), pooled).log
    c = train(tiny_train_config(seed=4), pooled).log
    assert a == b
    assert a != c


def test_spo2_head_untouched_without_spo2_labels(tiny_domains):
    ds = WindowDataset.from_manifests(tiny_domains[1:])
    assert not ds.labels.has("spo2").any()
    from physmle.model import PhysMleModel

    cfg = tiny_train_config(iterations=3)
    init = PhysMleModel(cfg.model)
    w0 = init.heads["spo2"].weight.data.copy()
    b0 = init.heads["spo2"].bias.data.copy()
    hr0 = init.heads["hr"].weight.data.copy()
    res = train(cfg, ds, model=init)
    assert np.array_equal(res.model.heads["spo2"].weight.data, w0)
    assert np.array_equal(res.model.heads["spo2"].bias.data, b0)
    assert not np.array_equal(res.model.heads["hr"].weight.data, hr0)


def _poison_masked_labels(ds: WindowDataset):
    lb = ds.labels
    for task, col in (("hr", 0), ("spo2", 2), ("rr", 3)):
        v = getattr(lb, task)
        v[~lb.mask[:, col]] = np.nan
    lb.bvp[~lb.mask[:, 1]] = 1e30


def test_masked_off_labels_never_reach_the_loss(tiny_domains):
    clean = WindowDataset.from_manifests(tiny_domains)
    dirty = WindowDataset.from_manifests(tiny_domains)
    _poison_masked_labels(dirty)
    a = train(tiny_train_config(iterations=3), clean).log
    b = train(tiny_train_config(iterations=3), dirty).log
    assert a == b


def test_nonfinite_loss_names_the_term(tiny_domains):
    ds = WindowDataset.from_manifests(tiny_domains)
    ds.labels.hr[:] = np.inf
    with pytest.raises(NonFiniteLoss) as info:
        train(tiny_train_config(iterations=2), ds)
    assert info.value.term == "L_HR"
    assert info.value.iteration == 0
    assert "L_HR" in str(info.value)


def test_train_rejects_geometry_mismatch(pooled):
    with pytest.raises(ValueError, match="frames"):
        train(tiny_train_config(model=tiny_model_config(frames=128)), pooled)


def test_time_limit_stops_early(pooled):
    res = train(tiny_train_config(iterations=50, time_limit=1e-9), pooled)
    assert len(res.log) == 1


def test_checkpoint_round_trip(pooled, tmp_path):
    cfg = tiny_train_config(iterations=2)
    res = train(cfg, pooled)
    path = save_checkpoint(tmp_path / "c.npz", res.model, cfg)
    model, back = load_checkpoint(path)
    assert back.to_dict() == cfg.to_dict()
    a, b = predict(res.model, pooled), predict(model, pooled)
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_checkpoint_state_mismatch_rejected(pooled, tmp_path):
    from physmle.model import PhysMleModel

    res = train(tiny_train_config(iterations=1), pooled)
    state = res.model.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        PhysMleModel(tiny_model_config()).load_state_dict(state)


# -- metrics ------------------------------------------------------------------------


def test_metrics_identity_and_offset():
    y = np.array([60.0, 70.0, 85.0, 90.0])
    m = E.error_metrics(y, y)
    assert m["mae"] == 0 and m["rmse"] == 0 and m["pearson"] == pytest.approx(1.0)
    m = E.error_metrics(y + 2, y)
    assert m["mae"] == pytest.approx(2) and m["rmse"] == pytest.approx(2)
    assert m["pearson"] == pytest.approx(1.0)
    const = E.error_metrics(np.full(4, 80.0), np.full(4, 80.0))
    assert const["mae"] == 0 and const["pearson"] is None
    assert E.error_metrics([], [])["mae"] is None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=30))
def test_metrics_invariants(pairs):
    pred, label = np.array(pairs).T
    m = E.error_metrics(pred, label)
    assert m["rmse"] >= m["mae"] - 1e-9
    if m["pearson"] is not None:
        assert -1.0 - 1e-9 <= m["pearson"] <= 1.0 + 1e-9


def test_report_pearson_matches_saved_csv(tiny_domains, tmp_path):
    ds = WindowDataset.from_manifests(tiny_domains)
    cfg = tiny_train_config(iterations=2)
    res = train(cfg, ds)
    rep = E.build_report(res.model, cfg, ds)
    rep.save(tmp_path)
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {"domain", "subject", "task", "prediction", "label"} <= set(rows[0])
    for task in E.SCALAR_TASKS:
        sel = [r for r in rows if r["task"] == task]
        assert len(sel) == rep.tasks[task]["n"] == int(ds.labels.has(task).sum())
        p = np.array([float(r["prediction"]) for r in sel])
        y = np.array([float(r["label"]) for r in sel])
        assert rep.tasks[task]["pearson"] == pytest.approx(np.corrcoef(p, y)[0, 1], abs=1e-9)
        assert rep.tasks[task]["mae"] == pytest.approx(np.mean(np.abs(p - y)), abs=1e-9)
    saved = json.loads((tmp_path / "report.json").read_text())
    assert TrainConfig.from_dict(saved["config"]).to_dict() == cfg.to_dict()
    assert saved["params"]["trainable"] > 0 and saved["macs"] > 0
    assert set(saved["per_domain"]) == {m.domain_id for m in tiny_domains}


def test_evaluate_from_checkpoint(tiny_domains, tmp_path):
    ds = WindowDataset.from_manifests(tiny_domains)
    cfg = tiny_train_config(iterations=1)
    res = train(cfg, ds)
    path = save_checkpoint(tmp_path / "c.npz", res.model, cfg)
    rep = E.evaluate(path, tiny_domains[0])
    sub = WindowDataset.from_manifests([tiny_domains[0]])
    direct = E.build_report(res.model, cfg, sub)
    assert rep.tasks == direct.tasks
    assert rep.config == cfg.to_dict()


def test_evaluate_rejects_empty_manifest(tiny_domains, tmp_path):
    ds = WindowDataset.from_manifests(tiny_domains)
    cfg = tiny_train_config(iterations=1)
    path = save_checkpoint(tmp_path / "c.npz", train(cfg, ds).model, cfg)
    empty = DomainManifest("E", tiny_domains[0].label_mask, tiny_domains[0].generator_params, [], tmp_path)
    with pytest.raises(ValueError, match="empty"):
        E.evaluate(path, empty)


def test_hrv_errors_reported_for_bvp_targets(tiny_domains):
    ds = WindowDataset.from_manifests(tiny_domains)
    cfg = tiny_train_config(iterations=1)
    rep = E.build_report(train(cfg, ds).model, cfg, ds)
    assert set(rep.hrv) == set(E.HRV_KEYS)
    # 64-frame windows are too short for HRV; every entry is undefined, not an error
    assert all(rep.hrv[k]["n"] == 0 for k in E.HRV_KEYS)


# -- protocols ----------------------------------------------------------------------


def test_protocol_one_bookkeeping(tiny_domains, tmp_path):
    runs = E.run_protocol_I(tiny_train_config(iterations=2), tiny_domains, out_dir=tmp_path)
    ids = [m.domain_id for m in tiny_domains]
    assert [r.target for r in runs] == ids
    for r in runs:
        assert r.target not in r.train_domains
        assert sorted(r.train_domains + [r.target]) == sorted(ids)
        assert r.report.config["held_out"] == r.target
        assert (tmp_path / f"report_{r.target}.json").exists()
        assert (tmp_path / f"loss_{r.target}.jsonl").exists()


def test_protocol_one_input_checks(tiny_domains):
    with pytest.raises(ValueError):
        E.run_protocol_I(tiny_train_config(), tiny_domains[:1])
    with pytest.raises(ValueError, match="duplicate"):
        E.run_protocol_I(tiny_train_config(), [tiny_domains[0], tiny_domains[0]])


def test_access_log_audits_held_out_files(tiny_domains):
    log = AccessLog()
    WindowDataset.from_manifests(tiny_domains[1:], access_log=log)
    assert not log.touched(tiny_domains[0])
    assert all(log.touched(m) for m in tiny_domains[1:])


def test_protocol_one_detects_leakage(tiny_domains, monkeypatch):
    original = WindowDataset.from_manifests.__func__

    def leaky(cls, manifests, access_log=None, shift=30):
        ds = original(cls, manifests, access_log, shift)
        if access_log is not None:
            for m in tiny_domains:
                access_log.record(m.resolve(m.entries[0]))
        return ds

    monkeypatch.setattr(WindowDataset, "from_manifests", classmethod(leaky))
    with pytest.raises(RuntimeError, match="held-out"):
        E.run_protocol_I(tiny_train_config(iterations=1), tiny_domains)


@pytest.fixture(scope="module")
def ten_subjects(tmp_path_factory):
    root = tmp_path_factory.mktemp("ten")
    return build_domain(tiny_params(), ["HR", "BVP", "RR"], 10, 1, root, domain_id="S", seed=11)


def test_subject_folds_partition():
    subjects = [f"s{i}" for i in range(10)]
    folds = E.subject_folds(subjects, 5, seed=0)
    assert all(len(f) == 2 for f in folds)
    flat = [s for f in folds for s in f]
    assert sorted(flat) == sorted(subjects) and len(set(flat)) == len(flat)
    with pytest.raises(ValueError):
        E.subject_folds(subjects[:3], 5)
    with pytest.raises(ValueError):
        E.subject_folds(subjects, 1)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 30), k=st.integers(2, 8), seed=st.integers(0, 100))
def test_subject_folds_balanced(n, k, seed):
    if n < k:
        return
    folds = E.subject_folds([f"s{i}" for i in range(n)], k, seed)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == n


def test_protocol_two_folds_and_average(ten_subjects):
    out = E.run_protocol_II(tiny_train_config(iterations=1), ten_subjects, k=5)
    assert len(out.folds) == 5
    tests = [set(s["test"]) for s in out.splits]
    assert all(len(t) == 2 for t in tests)
    assert set().union(*tests) == set(ten_subjects.subjects())
    for s in out.splits:
        assert not set(s["train"]) & set(s["test"])
        assert len(s["train"]) == 8
    for task in ("hr", "rr"):
        for key in ("mae", "rmse"):
            vals = [r.tasks[task][key] for r in out.folds]
            assert out.mean[task][key] == pytest.approx(np.mean(vals), abs=1e-6)


def test_protocol_two_needs_enough_subjects(ten_subjects):
    with pytest.raises(ValueError):
        E.run_protocol_II(tiny_train_config(iterations=1), ten_subjects, k=11)
