import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsdistill import tensorcore as tc
from capsdistill.capsnet import (STUDENT_LADDER, ArchSpec, CapsNet, count_params, dynamic_routing,
                                 ladder_specs, param_shapes, predict_vectors)
from capsdistill.errors import ConfigError
from capsdistill.tensorcore import Tensor

SEED_TEACHER = ArchSpec(620, n_layers=3, hidden_units=256)


def squash_np(s):
    n2 = np.sum(s * s, axis=-1, keepdims=True)
    return n2 / (1 + n2) * s / np.sqrt(n2 + 1e-300)


def routing_oracle(u_hat, iters):
    """Plain-loop routing by agreement."""
    a, k, h = u_hat.shape
    b = np.zeros((a, k))
    for r in range(iters):
        c = np.zeros((a, k))
        for i in range(a):
            e = np.exp(b[i] - b[i].max())
            c[i] = e / e.sum()
        v = np.zeros((k, h))
        for j in range(k):
            s = sum(c[i, j] * u_hat[i, j] for i in range(a))
            v[j] = squash_np(s)
        if r < iters - 1:
            for i in range(a):
                for j in range(k):
                    b[i, j] += u_hat[i, j] @ v[j]
    return v, c


def entropy(c):
    return -(c * np.log(c)).sum(axis=-1)


# ---------------------------------------------------------------- shapes and counts

@pytest.mark.parametrize("m, a", [(256, 392), (144, 200), (64, 72), (16, 8)])
def test_lower_capsule_count(m, a):
    spec = ArchSpec(620, hidden_units=m)
    assert spec.n_lower == a and spec.lower_dim == 4


def test_invalid_specs_rejected():
    for kw in [dict(hidden_units=250), dict(windows=7), dict(higher_dim=4), dict(n_higher=0),
               dict(head="ranking"), dict(routing_iters=0), dict(hidden_units=4)]:
        with pytest.raises(ConfigError):
            ArchSpec(620, **kw)


def test_student_ladder_params_match_table():
    counts = [count_params(s) for s in ladder_specs(SEED_TEACHER)]
    for got, want in zip(counts, [0.97e6, 0.48e6, 0.19e6, 0.04e6]):
        assert abs(got - want) / want < 0.1
    assert all(a > b for a, b in zip(counts, counts[1:]))
    assert count_params(SEED_TEACHER) > counts[0]


def test_count_params_equals_initialised_model():
    spec = ArchSpec(40, n_layers=2, hidden_units=16, head="regression", n_higher=10)
    assert CapsNet.create(spec, 0).num_params() == count_params(spec)
    assert param_shapes(spec)["route.W"] == (8, 10, 4, 16)


def test_forward_shapes_and_contract():
    spec = ArchSpec(12, hidden_units=25, n_higher=3, higher_dim=6)
    x = np.random.default_rng(0).normal(size=(5, 8, 12))
    out = CapsNet.create(spec, 1).forward(x)
    caps = out.capsules
    assert caps.lower.shape == (5, spec.n_lower, 4)
    assert caps.higher.shape == (5, 3, 6)
    assert np.allclose(caps.coupling.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out.lengths.data < 1) and np.all(out.lengths.data >= 0)
    assert out.predictions().shape == (5,)


def test_regression_head_in_unit_interval():
    spec = ArchSpec(12, hidden_units=16, n_higher=10, head="regression")
    x = np.random.default_rng(1).normal(size=(4, 8, 12)) * 10
    pred = CapsNet.create(spec, 2).predict(x)
    assert pred.shape == (4,) and np.all((pred > 0) & (pred < 1))


def test_forward_rejects_wrong_input_shape():
    net = CapsNet.create(ArchSpec(12, hidden_units=16), 0)
    with pytest.raises(ConfigError):
        net.forward(np.zeros((2, 8, 13)))


def test_predicted_class_is_argmax_of_pre_squash_norm():
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = rng.normal(size=(4, 6)) * rng.uniform(0.1, 3)
        lengths = np.linalg.norm(squash_np(s), axis=-1)
        assert np.argmax(lengths) == np.argmax(np.linalg.norm(s, axis=-1))


# ---------------------------------------------------------------- prediction vectors

def test_predict_vectors_identity_blocks_zero_pad():
    rng = np.random.default_rng(4)
    u = rng.normal(size=(3, 2))
    w = np.zeros((3, 2, 2, 5))
    w[:, :, 0, 0] = w[:, :, 1, 1] = 1.0
    out = predict_vectors(Tensor(u), Tensor(w)).data
    for j in range(2):
        assert np.array_equal(out[:, j, :2], u) and np.all(out[:, j, 2:] == 0)
    assert np.all(predict_vectors(Tensor(np.zeros((3, 2))), Tensor(w)).data == 0)


def test_predict_vectors_matches_loop():
    rng = np.random.default_rng(5)
    u, w = rng.normal(size=(6, 4)), rng.normal(size=(6, 3, 4, 7))
    out = predict_vectors(Tensor(u), Tensor(w)).data
    ref = np.zeros((6, 3, 7))
    for i in range(6):
        for j in range(3):
            ref[i, j] = u[i] @ w[i, j]
    assert np.abs(out - ref).max() < 1e-12
    with pytest.raises(tc.ShapeError):
        predict_vectors(Tensor(u), Tensor(rng.normal(size=(5, 3, 4, 7))))


# ---------------------------------------------------------------- routing

def test_routing_single_iteration_is_uniform():
    rng = np.random.default_rng(6)
    u_hat = rng.normal(size=(5, 3, 4))
    v, c = dynamic_routing(Tensor(u_hat), 1)
    assert np.allclose(c, 1 / 3, rtol=0, atol=1e-15)
    assert np.allclose(v.data, squash_np(u_hat.sum(axis=0) / 3), atol=1e-14)


def test_routing_single_higher_capsule():
    u_hat = np.random.default_rng(7).normal(size=(5, 1, 4))
    for iters in (1, 3, 5):
        _, c = dynamic_routing(Tensor(u_hat), iters)
        assert np.all(c == 1.0)


def test_routing_toy_hand_trace():
    u_hat = np.array([[[1.0], [0.0]], [[0.0], [1.0]]])
    v, c = dynamic_routing(Tensor(u_hat), 3)
    v_ref, c_ref = routing_oracle(u_hat, 3)
    assert np.abs(c - c_ref).max() < 1e-10 and np.abs(v.data - v_ref).max() < 1e-10
    assert c[0, 0] > c[0, 1] and c[1, 1] > c[1, 0]


def test_routing_matches_loop_oracle_on_random_input():
    rng = np.random.default_rng(8)
    for _ in range(5):
        u_hat = rng.normal(size=(7, 3, 5))
        v, c = dynamic_routing(Tensor(u_hat), 3)
        v_ref, c_ref = routing_oracle(u_hat, 3)
        assert np.abs(c - c_ref).max() < 1e-10 and np.abs(v.data - v_ref).max() < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_routing_contract_every_iteration(a, k, iters, seed):
    u_hat = np.random.default_rng(seed).normal(size=(a, k, 3))
    hist = []
    v, _ = dynamic_routing(Tensor(u_hat), iters, hist)
    assert len(hist) == iters
    for c in hist:
        assert np.abs(c.sum(axis=-1) - 1).max() < 1e-12
    assert np.all(np.linalg.norm(v.data, axis=-1) < 1)


def test_routing_entropy_non_increasing():
    rng = np.random.default_rng(9)
    ok = 0
    for _ in range(1000):
        hist = []
        dynamic_routing(Tensor(rng.normal(size=(8, 3, 4))), 3, hist)
        e = [entropy(c) for c in hist]
        ok += all(np.all(e[r + 1] <= e[r] + 1e-12) for r in range(len(e) - 1))
    assert ok >= 950


def test_routing_needs_an_iteration():
    with pytest.raises(ValueError):
        dynamic_routing(Tensor(np.zeros((2, 2, 2))), 0)


# ---------------------------------------------------------------- gradients

def test_end_to_end_gradients_tiny_spec():
    from capsdistill.distill import margin_loss, one_hot
    spec = ArchSpec(6, hidden_units=16, windows=4, n_higher=2, higher_dim=4)
    x = np.random.default_rng(10).normal(size=(2, 4, 6))
    t = one_hot([0, 1], 2)
    net = CapsNet.create(spec, 3)
    names = sorted(net.params)
    errs = tc.check_gradients(lambda: margin_loss(net.forward(x).lengths, t),
                              [net.params[n] for n in names])
    assert max(errs.values()) < 1e-4
    for n in names:
        assert np.any(net.params[n].grad != 0), n


# ---------------------------------------------------------------- checkpoints

def test_save_load_bit_exact(tmp_path):
    spec = ArchSpec(12, n_layers=2, hidden_units=16, head="regression", n_higher=10)
    net = CapsNet.create(spec, 11)
    x = np.random.default_rng(12).normal(size=(20, 8, 12))
    net.set_input_stats(x)
    net.save(tmp_path / "m.ckpt")
    back = CapsNet.load(tmp_path / "m.ckpt", expect=spec)
    assert back.spec == spec
    for k, t in net.params.items():
        assert t.data.tobytes() == back.params[k].data.tobytes()
    assert np.array_equal(net.predict(x), back.predict(x))


def test_load_rejects_mismatched_spec(tmp_path):
    spec = ArchSpec(12, hidden_units=16)
    CapsNet.create(spec, 0).save(tmp_path / "m.ckpt")
    with pytest.raises(ConfigError, match="hidden_units"):
        CapsNet.load(tmp_path / "m.ckpt", expect=ArchSpec(12, hidden_units=25))


def test_copy_is_independent():
    net = CapsNet.create(ArchSpec(12, hidden_units=16), 0)
    twin = net.copy()
    twin.params["conv1.b"].data += 1
    assert np.all(net.params["conv1.b"].data == 0)


def test_ladder_default():
    assert [(s.n_layers, s.hidden_units) for s in ladder_specs(SEED_TEACHER)] == list(STUDENT_LADDER)
