import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoadapt.errors import DimensionError, SchemaError, StateError
from protoadapt.losses import ce_loss
from protoadapt.nn import (EmaEncoder, Network, load_checkpoint, save_checkpoint,
                           softmax)


def zeroed(net):
    for p in net.parameters():
        p[...] = 0.0
    return net


def test_zero_weight_network_gives_uniform_probs():
    net = zeroed(Network(3, (4,), 2, 5, seed=0))
    x = np.random.default_rng(0).normal(size=(7, 3))
    _, probs = net.forward(x)
    npt.assert_allclose(probs, np.full((7, 5), 0.2), atol=1e-12)


def test_identity_single_layer_features_are_tanh():
    net = Network(2, (), 2, 2, seed=0)
    net.weights[0][...] = np.eye(2)
    net.biases[0][...] = 0.0
    feats, _ = net.forward(np.array([[1.0, 2.0]]))
    npt.assert_allclose(feats, [[np.tanh(1.0), np.tanh(2.0)]], rtol=1e-12)


def test_empty_batch_forward():
    net = Network(3, (4,), 2, 5, seed=0)
    feats, probs = net.forward(np.zeros((0, 3)))
    assert feats.shape == (0, 2)
    assert probs.shape == (0, 5)


def test_forward_rejects_bad_width_and_nonfinite():
    net = Network(3, (4,), 2, 5, seed=0)
    with pytest.raises(DimensionError):
        net.forward(np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        net.forward(np.array([[1.0, np.nan, 0.0]]))


def test_backward_zero_upstream_gives_zero_grads():
    net = Network(3, (4,), 2, 5, seed=1)
    rec = net.forward_recorded(np.ones((3, 3)))
    grads = net.backward(rec, grad_logits=np.zeros((3, 5)))
    for g in grads:
        npt.assert_array_equal(g, 0.0)


def test_backward_requires_recorded_forward():
    net = Network(3, (4,), 2, 5, seed=1)
    with pytest.raises(StateError):
        net.backward(None, grad_logits=np.zeros((1, 5)))


def test_backward_rejects_stale_recording():
    net = Network(3, (4,), 2, 5, seed=1)
    rec = net.forward_recorded(np.ones((3, 3)))
    other = Network(3, (6,), 2, 5, seed=1)
    with pytest.raises(StateError):
        other.backward(rec, grad_logits=np.zeros((3, 5)))


def test_sum_of_probs_gradient_is_zero(gradcheck):
    # softmax rows always sum to one, so d(sum probs)/d(theta) == 0;
    # the analytic path must reproduce that through the Jacobian.
    net = zeroed(Network(3, (4,), 2, 4, seed=2))
    x = np.random.default_rng(2).normal(size=(5, 3))
    rec = net.forward_recorded(x)
    grads = net.backward(rec, grad_probs=np.ones((5, 4)))
    for g in grads:
        npt.assert_allclose(g, 0.0, atol=1e-12)

    def scalar():
        _, probs = net.forward(x)
        return float(probs.sum())

    gradcheck(net, scalar, grads, tol=1e-4)


def test_ce_gradient_matches_finite_differences(gradcheck):
    net = Network(2, (), 2, 2, seed=3)
    x = np.array([[0.4, -1.2]])
    y = np.array([1])
    rec = net.forward_recorded(x)
    ce = ce_loss(rec.probs, y)
    grads = net.backward(rec, grad_logits=ce.grad_logits)

    def scalar():
        r = net.forward_recorded(x)
        return ce_loss(r.probs, y).value

    gradcheck(net, scalar, grads, tol=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=2, max_size=6),
       st.integers(min_value=1, max_value=4))
def test_softmax_rows_sum_to_one(row, rows):
    logits = np.tile(np.array(row), (rows, 1))
    probs = softmax(logits)
    assert np.isfinite(probs).all()
    npt.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_parameter_init_is_seeded_and_bounded():
    a = Network(4, (8, 8), 3, 2, seed=42)
    b = Network(4, (8, 8), 3, 2, seed=42)
    for pa, pb in zip(a.parameters(), b.parameters()):
        npt.assert_array_equal(pa, pb)
    assert np.abs(a.weights[0]).max() <= 1.0 / np.sqrt(4)
    assert np.abs(a.weights[1]).max() <= 1.0 / np.sqrt(8)


# -- momentum encoder ---------------------------------------------------------


def test_ema_decay_zero_copies_live():
    net = Network(3, (4,), 2, 2, seed=5)
    ema = EmaEncoder(net)
    for p in net.feature_parameters():
        p += 1.0
    ema.update(net, 0.0)
    for shadow, live in zip(ema.weights + ema.biases,
                            net.weights + net.biases):
        npt.assert_array_equal(shadow, live)


def test_ema_small_epsilon_step():
    eps = 1e-3
    net = Network(2, (), 2, 2, seed=0)
    for w, b in zip(net.weights, net.biases):
        w[...] = 1.0
        b[...] = 1.0
    ema = EmaEncoder(net)
    for shadow in ema.weights + ema.biases:
        shadow[...] = 0.0
    ema.update(net, 1.0 - eps)
    for shadow in ema.weights + ema.biases:
        npt.assert_allclose(shadow, eps, rtol=1e-12)


def test_ema_two_half_steps():
    net = Network(2, (), 2, 2, seed=0)
    for w, b in zip(net.weights, net.biases):
        w[...] = 4.0
        b[...] = 4.0
    ema = EmaEncoder(net)
    for shadow in ema.weights + ema.biases:
        shadow[...] = 0.0
    ema.update(net, 0.5)
    ema.update(net, 0.5)
    for shadow in ema.weights + ema.biases:
        npt.assert_allclose(shadow, 3.0, rtol=1e-12)


def test_ema_rejects_bad_decay_and_shape():
    net = Network(3, (4,), 2, 2, seed=5)
    ema = EmaEncoder(net)
    with pytest.raises(ValueError):
        ema.update(net, 1.0)
    other = Network(3, (5,), 2, 2, seed=5)
    with pytest.raises(DimensionError):
        ema.update(other, 0.5)


def test_ema_forward_matches_after_full_copy():
    net = Network(3, (4, 4), 2, 2, seed=6)
    ema = EmaEncoder(net)
    for p in net.feature_parameters():
        p += 0.3
    ema.update(net, 0.0)
    x = np.random.default_rng(6).normal(size=(5, 3))
    feats, _ = net.forward(x)
    npt.assert_array_equal(ema.features(x), feats)


def test_ema_zero_weights_features_are_tanh_bias():
    net = Network(3, (4,), 2, 2, seed=7)
    ema = EmaEncoder(net)
    for shadow in ema.weights:
        shadow[...] = 0.0
    # zero weights make every layer output tanh(bias), so only the last bias matters
    ema.biases[0][...] = 0.7
    x = np.random.default_rng(7).normal(size=(5, 3))
    expected = np.tile(np.tanh(ema.biases[-1]), (5, 1))
    npt.assert_allclose(ema.features(x), expected, rtol=1e-12)


def test_ema_forward_empty_batch():
    net = Network(3, (4,), 2, 2, seed=7)
    ema = EmaEncoder(net)
    assert ema.features(np.zeros((0, 3))).shape == (0, 2)


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.0, max_value=0.999),
       st.integers(min_value=0, max_value=10_000))
def test_ema_update_is_a_contraction(decay, seed):
    net = Network(2, (3,), 2, 2, seed=seed)
    ema = EmaEncoder(net)
    rng = np.random.default_rng(seed)
    for shadow in ema.weights + ema.biases:
        shadow += rng.normal(size=shadow.shape)
    before = [np.abs(s - l) for s, l in zip(ema.weights + ema.biases,
                                            net.weights + net.biases)]
    ema.update(net, decay)
    after = [np.abs(s - l) for s, l in zip(ema.weights + ema.biases,
                                           net.weights + net.biases)]
    for b, a in zip(before, after):
        assert (a <= decay * b + 1e-12).all()


# -- checkpoint io ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    net = Network(3, (5, 4), 2, 3, seed=11)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    for pa, pb in zip(net.parameters(), loaded.parameters()):
        npt.assert_array_equal(pa, pb)
    x = np.random.default_rng(1).normal(size=(4, 3))
    npt.assert_array_equal(net.forward(x)[1], loaded.forward(x)[1])


def test_checkpoint_rejects_garbage_and_truncation(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not json\n\x00\x01")
    with pytest.raises(SchemaError):
        load_checkpoint(path)
    net = Network(3, (5,), 2, 3, seed=11)
    good = tmp_path / "good.ckpt"
    save_checkpoint(net, good)
    blob = good.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(blob[:-16])
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path / "short.ckpt")
