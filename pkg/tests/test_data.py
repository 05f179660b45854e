import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsdistill.data import (Dataset, SynthSpec, generate_synthetic, load_dataset, make_splits, save_dataset,
                              subsample, synthetic_dataset)
from capsdistill.errors import ConfigError
from capsdistill.signal import band_powers


def toy(n_subjects=3, n_sessions=15, per_session=4, task="classification"):
    n = n_subjects * n_sessions * per_session
    subj = np.repeat(np.arange(n_subjects), n_sessions * per_session)
    sess = np.tile(np.repeat(np.arange(n_sessions), per_session), n_subjects)
    labels = sess % 3 if task == "classification" else np.linspace(0, 1, n)
    return Dataset(np.zeros((n, 2, 3)), labels, subj, sess, task)


def ridge_fit(x, y, n_classes):
    x = np.c_[x, np.ones(len(x))]
    return np.linalg.lstsq(x, np.eye(n_classes)[y], rcond=None)[0]


def ridge_predict(w, x):
    return np.argmax(np.c_[x, np.ones(len(x))] @ w, axis=1)


# ---------------------------------------------------------------- splits

def test_loso_fifteen_subjects():
    ds = toy(n_subjects=15, n_sessions=2, per_session=2)
    splits = make_splits(ds, "loso")
    assert len(splits) == 15
    for sp in splits:
        assert set(ds.subjects[sp.test]) == {sp.subject}
        assert sp.subject not in set(ds.subjects[sp.train])


def test_fixed_session_nine_six():
    ds = toy()
    for sp in make_splits(ds, "fixed-session"):
        assert set(ds.sessions[sp.train]) == set(range(9))
        assert set(ds.sessions[sp.test]) == set(range(9, 15))
        assert set(ds.subjects[sp.train]) == set(ds.subjects[sp.test]) == {sp.subject}


def test_kfold_885_segments():
    ds = Dataset(np.zeros((885, 1, 1)), np.linspace(0, 1, 885), np.zeros(885), np.zeros(885), "regression")
    splits = make_splits(ds, "kfold", k=5)
    assert [len(sp.test) for sp in splits] == [177] * 5
    # contiguous blocks in time order
    assert all(np.array_equal(sp.test, np.arange(177 * f, 177 * (f + 1))) for f, sp in enumerate(splits))


@pytest.mark.parametrize("protocol", ["loso", "fixed-session", "kfold"])
def test_splits_disjoint_and_covering(protocol):
    ds = toy()
    for sp in make_splits(ds, protocol):
        assert len(np.intersect1d(sp.train, sp.test)) == 0
        scope = np.arange(len(ds)) if protocol == "loso" else np.flatnonzero(ds.subjects == sp.subject)
        assert np.array_equal(np.union1d(sp.train, sp.test), scope)


def test_kfold_tests_cover_subject_once():
    ds = toy()
    tests = np.concatenate([sp.test for sp in make_splits(ds, "kfold", subjects=[1])])
    assert np.array_equal(np.sort(tests), np.flatnonzero(ds.subjects == 1))


def test_split_errors():
    ds = toy()
    with pytest.raises(ConfigError):
        make_splits(ds, "random")
    with pytest.raises(ConfigError):
        make_splits(ds, "loso", subjects=[7])
    with pytest.raises(ConfigError):
        make_splits(ds, "fixed-session", n_train_sessions=15)
    with pytest.raises(ConfigError):
        make_splits(toy(n_subjects=1), "loso")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_subsample_deterministic_subset(n, frac, seed):
    idx = np.arange(n) * 3
    a = subsample(idx, frac, seed)
    assert np.array_equal(a, subsample(idx, frac, seed))
    assert len(a) == max(1, int(round(frac * n)))
    assert np.all(np.isin(a, idx)) and np.all(np.diff(a) > 0)


def test_subsample_rejects_bad_fraction():
    for f in (0.0, 1.5):
        with pytest.raises(ConfigError):
            subsample(np.arange(5), f, 0)


# ---------------------------------------------------------------- synthetic generator

def test_synth_defaults_and_validation():
    assert SynthSpec().n_channels == 62
    assert SynthSpec(task="regression").n_channels == 17
    for kw in [dict(noise=-1), dict(n_subjects=0), dict(task="ranking"), dict(n_classes=6)]:
        with pytest.raises(ConfigError):
            SynthSpec(**kw)


def test_same_seed_same_bytes():
    spec = SynthSpec(n_subjects=2, n_sessions=3, segments_per_session=2, n_channels=3, distractor=1.0)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for ra, rb in zip(a, b):
        assert ra.recording.samples.tobytes() == rb.recording.samples.tobytes()
        assert ra.labels.tobytes() == rb.labels.tobytes()
    c = generate_synthetic(SynthSpec(n_subjects=2, n_sessions=3, segments_per_session=2, n_channels=3, seed=1))
    assert c[0].recording.samples.tobytes() != a[0].recording.samples.tobytes()


def test_noiseless_classes_linearly_separable():
    ds = synthetic_dataset(SynthSpec(n_subjects=3, n_sessions=6, segments_per_session=4, n_channels=4, noise=0.0))
    x = ds.features.mean(axis=1)
    assert np.mean(ridge_predict(ridge_fit(x, ds.labels, 3), x) == ds.labels) == 1.0


def test_regression_target_tracks_band_power():
    recs = generate_synthetic(SynthSpec(n_subjects=2, n_sessions=10, segments_per_session=6, n_channels=4,
                                        task="regression", noise=0.05))
    target, power = [], []
    for r in recs:
        bp = band_powers(r.recording, 8, [(8.0, 13.0)])
        power.extend(np.log(bp.mean(axis=(1, 2, 3))))
        target.extend(r.labels)
    assert np.all((np.array(target) > 0) & (np.array(target) < 1))
    assert np.corrcoef(target, power)[0, 1] > 0.9


def test_shuffled_labels_are_not_learnable():
    accs, real = [], []
    for seed in range(5):
        ds = synthetic_dataset(SynthSpec(n_subjects=6, n_sessions=15, segments_per_session=10, n_channels=4,
                                         seed=seed))
        x = ds.features.mean(axis=1)
        shuffled = np.random.default_rng(seed).permutation(ds.labels)
        for sp in make_splits(ds, "loso"):
            w = ridge_fit(x[sp.train], shuffled[sp.train], 3)
            accs.append(np.mean(ridge_predict(w, x[sp.test]) == shuffled[sp.test]))
        for sp in make_splits(ds, "fixed-session"):
            w = ridge_fit(x[sp.train], ds.labels[sp.train], 3)
            real.append(np.mean(ridge_predict(w, x[sp.test]) == ds.labels[sp.test]))
    assert abs(np.mean(accs) - 1 / 3) < 0.05
    assert np.mean(real) > 0.8


def test_dataset_directory_round_trip(tmp_path):
    ds = synthetic_dataset(SynthSpec(n_subjects=2, n_sessions=2, segments_per_session=3, n_channels=3))
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.n_classes == 3 and back.task == "classification"
    assert np.array_equal(back.features, ds.features.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.labels, ds.labels) and np.array_equal(back.subjects, ds.subjects)
    assert np.array_equal(back.sessions, ds.sessions)


def test_subset_keeps_metadata():
    ds = toy(task="regression")
    sub = ds.subset([0, 5])
    assert len(sub) == 2 and sub.task == "regression" and sub.labels[1] == ds.labels[5]
