import csv
import json
import logging

import numpy as np
import pytest

from capsdistill.capsnet import CapsNet
from capsdistill.data import SynthSpec, make_splits, synthetic_dataset
from capsdistill.distill import DistillConfig
from capsdistill.errors import ConfigError
from capsdistill.training import (ExperimentPlan, OptimState, adam_step, arch_for, fit, lr_at, metrics,
                                  phase_plan, run_phase, summarize, sweep_data_fraction, sweep_model_size)
from capsdistill.training.loop import TEACHER_ARCH, TeacherTargets, train_indices
from capsdistill.training.logs import file_sha256, write_manifest, write_metrics_csv, write_steps_csv

TINY = {"n_layers": 1, "hidden_units": 16}
TINY_TEACHER = {"n_layers": 1, "hidden_units": 25}


@pytest.fixture(scope="module")
def ds():
    return synthetic_dataset(SynthSpec(n_subjects=3, n_sessions=12, segments_per_session=2, n_channels=3))


def tiny_plan(**kw):
    base = dict(phase="distill", epochs=2, seed=0, subjects=(0,), teacher=TINY_TEACHER, student=TINY)
    base.update(kw)
    return ExperimentPlan(**base)


@pytest.fixture(scope="module")
def pretrained(ds):
    res = run_phase(phase_plan(tiny_plan(subjects=(0, 1)), "pretrain", epochs=2), ds)
    return {r.split.subject: r.model for r in res.results}


# ---------------------------------------------------------------- optimizer

def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([0.5, -1.0])}
    st = OptimState()
    assert adam_step(p, {"w": np.zeros(2)}, st, 1e-3)
    assert np.array_equal(p["w"], [0.5, -1.0]) and st.step == 1


def test_adam_first_step_unit_update():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, OptimState(), 1e-3)
    # m_hat = 1, v_hat = 1 after bias correction
    assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_matches_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    p = {"w": np.zeros(3)}
    st = OptimState(weight_clip=None)
    w, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, 1):
        adam_step(p, {"w": g}, st, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"], w, atol=1e-15)


def test_adam_weight_clip():
    p = {"w": np.array([5.0, -5.0])}
    adam_step(p, {"w": np.array([-1.0, 1.0])}, OptimState(weight_clip=5.0), 1e-3)
    assert np.array_equal(p["w"], [5.0, -5.0])


def test_adam_skips_non_finite(caplog):
    p = {"w": np.array([1.0])}
    st = OptimState()
    with caplog.at_level(logging.WARNING):
        assert not adam_step(p, {"w": np.array([np.nan])}, st, 1e-3)
    assert p["w"][0] == 1.0 and st.step == 0 and "non-finite" in caplog.text


def test_adam_grad_clip_scales_norm():
    a, b = {"w": np.zeros(2)}, {"w": np.zeros(2)}
    adam_step(a, {"w": np.array([30.0, 40.0])}, OptimState(grad_clip=1.0), 0.1)
    adam_step(b, {"w": np.array([0.6, 0.8])}, OptimState(), 0.1)
    assert np.allclose(a["w"], b["w"], atol=1e-15)


@pytest.mark.parametrize("epoch, phase, want", [(50, "pretrain", 1e-3), (120, "pretrain", 1e-4),
                                                (180, "pretrain", 2e-5), (400, "pretrain", 2e-5),
                                                (30, "distill", 1e-3), (30, "finetune", 1e-3)])
def test_lr_schedule(epoch, phase, want):
    assert lr_at(epoch, phase) == pytest.approx(want, rel=1e-12)


def test_lr_unknown_phase():
    with pytest.raises(ValueError):
        lr_at(1, "warmup")


# ---------------------------------------------------------------- metrics

def test_metric_examples():
    y = np.array([-1.0, 0.5, 0.5])
    assert metrics(y, y, "regression").rmse == 0.0 and metrics(y, y, "regression").pcc == pytest.approx(1.0)
    assert metrics(-y, y, "regression").pcc == pytest.approx(-1.0)
    assert metrics([0, 1, 1], [0, 1, 0], "classification").accuracy == pytest.approx(2 / 3)


def test_constant_prediction_pcc_flagged():
    rep = metrics(np.full(4, 0.3), np.array([0.1, 0.2, 0.4, 0.9]), "regression")
    assert rep.pcc == 0.0 and rep.pcc_undefined


def test_summarize_population_sd():
    reps = [metrics([0, 1], [0, 1], "classification"), metrics([0, 1], [1, 1], "classification")]
    assert summarize(reps) == {"accuracy": (0.75, 0.25)}


# ---------------------------------------------------------------- plan

def test_plan_defaults_and_validation():
    assert ExperimentPlan(phase="pretrain").n_batch == 64 and ExperimentPlan().n_batch == 8
    assert ExperimentPlan(phase="pretrain").n_epochs == 200 and ExperimentPlan().n_epochs == 50
    assert ExperimentPlan().split_protocol("classification") == "fixed-session"
    assert ExperimentPlan().split_protocol("regression") == "kfold"
    assert ExperimentPlan(phase="pretrain", protocol="kfold").split_protocol("regression") == "loso"
    assert ExperimentPlan(phase="scratch").loss_config().uses_teacher is False
    with pytest.raises(ConfigError):
        ExperimentPlan(phase="warmup")
    with pytest.raises(ConfigError):
        ExperimentPlan(data_fraction=0.0)


# ---------------------------------------------------------------- phases

def test_pretrain_excludes_held_out_subject(ds):
    plan = phase_plan(tiny_plan(subjects=None), "pretrain")
    for sp in make_splits(ds, plan.split_protocol(ds.task)):
        assert sp.subject not in set(ds.subjects[sp.train].tolist())
        assert set(ds.subjects[sp.test].tolist()) == {sp.subject}


def test_distill_and_finetune_need_teacher(ds):
    with pytest.raises(ConfigError, match="teacher"):
        run_phase(tiny_plan(), ds)
    with pytest.raises(ConfigError, match="teacher"):
        run_phase(tiny_plan(phase="finetune"), ds)


def test_distill_rejects_incompatible_teacher(ds):
    teacher = CapsNet.create(arch_for(dict(TINY_TEACHER, capsule_groups=4, higher_dim=16), ds), 0)
    with pytest.raises(ConfigError, match="incompatible"):
        run_phase(tiny_plan(), ds, teacher=teacher)


def test_step0_task_loss_equal_for_distill_and_scratch(ds, pretrained):
    d = run_phase(tiny_plan(epochs=1), ds, teacher=pretrained, log_steps=True).results[0]
    s = run_phase(tiny_plan(phase="scratch", epochs=1), ds, log_steps=True).results[0]
    assert d.steps[0][3] == s.steps[0][3]
    assert d.steps[0][1] > 0 and s.steps[0][1] == 0


def test_run_phase_bit_exact_and_parallel(ds, pretrained):
    a = run_phase(tiny_plan(subjects=(0, 1)), ds, teacher=pretrained)
    b = run_phase(tiny_plan(subjects=(0, 1)), ds, teacher=pretrained, jobs=2)
    for ra, rb in zip(a.results, b.results):
        assert ra.report == rb.report
        assert [e.l_total for e in ra.history] == [e.l_total for e in rb.history]
        for k, t in ra.model.params.items():
            assert t.data.tobytes() == rb.model.params[k].data.tobytes()


def test_history_length_and_weight_clip(ds):
    res = run_phase(tiny_plan(phase="scratch", epochs=3, weight_clip=0.05), ds).results[0]
    assert [e.epoch for e in res.history] == [1, 2, 3]
    assert max(np.abs(t.data).max() for t in res.model.params.values()) <= 0.05


def test_fraction_draw_is_fixed(ds):
    sp = make_splits(ds, "fixed-session", subjects=[0])[0]
    plan = tiny_plan(data_fraction=0.2)
    a, b = train_indices(plan, ds, sp), train_indices(plan, ds, sp)
    assert np.array_equal(a, b) and len(a) == round(0.2 * len(sp.train))
    assert np.array_equal(train_indices(tiny_plan(data_fraction=1.0), ds, sp), sp.train)


def test_full_fraction_reproduces_standard_run(ds):
    a = run_phase(tiny_plan(phase="scratch"), ds)
    b = run_phase(tiny_plan(phase="scratch", data_fraction=1.0), ds)
    assert a.results[0].report == b.results[0].report


def test_tiny_fraction_warns_on_missing_class(ds, caplog):
    sp = make_splits(ds, "fixed-session", subjects=[0])[0]
    with caplog.at_level(logging.WARNING):
        train_indices(tiny_plan(data_fraction=0.01), ds, sp)
    assert "absent" in caplog.text


def test_loss_descends_on_200_samples():
    data = synthetic_dataset(SynthSpec(n_subjects=1, n_sessions=10, segments_per_session=20, n_channels=4,
                                       noise=0.2))
    assert len(data) == 200
    model = CapsNet.create(arch_for(TEACHER_ARCH, data), 0)
    model.set_input_stats(data.features)
    hist = fit(model, data.features, data.labels, epochs=50, batch_size=64, lr=lambda e: 1e-3, seed=0,
               cfg=DistillConfig.scratch("classification"), n_classes=3)
    assert hist[-1].l_task < 0.5 * hist[0].l_task


def test_teacher_targets_match_forward(ds, pretrained):
    t = pretrained[0]
    tt = TeacherTargets.compute(t, ds.features[:5], batch_size=2)
    out = t.forward(ds.features[:5])
    # batching may change BLAS summation order, so compare to round-off
    assert np.allclose(tt.lower, out.capsules.lower.data, rtol=0, atol=1e-12)
    assert np.allclose(tt.lengths, out.lengths.data, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- sweeps and logs

def test_size_sweep_rows(ds, pretrained, tmp_path):
    ladder = ((1, 25), (1, 16))
    tab = sweep_model_size(tiny_plan(epochs=1), ds, pretrained, ladder, teacher_epochs=1)
    assert len(tab.rows) == 2 * len(ladder)
    assert [r["arm"] for r in tab.rows] == ["distill", "scratch"] * 2
    assert tab.rows[0]["params"] > tab.rows[2]["params"]
    assert tab.rows[0]["compression_ratio"] == pytest.approx(1.0)  # student 1 x 25 equals the tiny teacher
    tab.write_csv(tmp_path / "a.csv")
    again = sweep_model_size(tiny_plan(epochs=1), ds, pretrained, ladder, teacher_epochs=1)
    again.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert set(tab.pivot("accuracy")) == {0, 1}


def test_fraction_sweep_rows(ds, pretrained):
    tab = sweep_data_fraction(tiny_plan(epochs=1), ds, pretrained, (0.5, 1.0), teacher_epochs=1)
    assert [(r["fraction"], r["arm"]) for r in tab.rows] == [(0.5, "distill"), (0.5, "scratch"),
                                                            (1.0, "distill"), (1.0, "scratch")]
    assert tab.rows[0]["n_train"] < tab.rows[2]["n_train"]
    with pytest.raises(ConfigError):
        sweep_data_fraction(tiny_plan(), ds, pretrained, (0.0,))


def test_logs_and_manifest(ds, tmp_path):
    res = run_phase(tiny_plan(phase="scratch"), ds, log_steps=True)
    write_metrics_csv(tmp_path / "m.csv", res)
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 2 and rows[0]["accuracy"] == "" and float(rows[1]["accuracy"]) == res.reports[0].accuracy
    write_steps_csv(tmp_path / "s.csv", res)
    assert len(list(csv.DictReader(open(tmp_path / "s.csv")))) == len(res.results[0].steps)
    res.results[0].model.save(tmp_path / "c.ckpt")
    write_manifest(tmp_path / "man.json", {"a": 1}, 0, [tmp_path / "c.ckpt"], res.summary())
    doc = json.loads((tmp_path / "man.json").read_text())
    assert doc["checkpoints"]["c.ckpt"] == file_sha256(tmp_path / "c.ckpt")
    assert doc["summary"]["accuracy"][0] == res.reports[0].accuracy
