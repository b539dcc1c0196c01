import numpy as np
import pytest

from utils.errors import OutOfBounds, SchemaError, ShapeMismatch
from utils.gatedcell import (ConvLSTMParams, GatedCellParams, batch_heatmap_loss, conv2d, conv2d_backward,
                             conv_lstm_backward, conv_lstm_forward, gated_step, gated_step_backward,
                             gated_step_forward, heatmap_loss, heatmap_loss_grad, load_params, save_params,
                             spatial_softmax)

EPS = 1e-6


def numeric_grad(f, array):
    """Central differences of a scalar function w.r.t. every entry of `array`, perturbed in place"""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        keep = array[idx]
        array[idx] = keep + EPS
        up = f()
        array[idx] = keep - EPS
        down = f()
        array[idx] = keep
        grad[idx] = (up - down) / (2 * EPS)
    return grad


def rel_error(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)


def test_conv_matches_direct_summation(rng):
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    out = conv2d(x, w)
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((2, 4, 5, 6))
    for n in range(2):
        for o in range(4):
            for r in range(5):
                for c in range(6):
                    expected[n, o, r, c] = np.sum(padded[n, :, r:r + 3, c:c + 3] * w[o])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        conv2d(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 5, 3, 3)))


def test_conv_gradients(rng):
    x = rng.normal(size=(2, 2, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    g = rng.normal(size=(2, 3, 4, 5))
    dx, dw = conv2d_backward(g, x, w)
    loss = lambda: float(np.sum(conv2d(x, w) * g))
    assert rel_error(dx, numeric_grad(loss, x)) < 1e-5
    assert rel_error(dw, numeric_grad(loss, w)) < 1e-5


def _gated_case(rng):
    x = rng.normal(size=(2, 2, 5, 4))
    h = rng.normal(size=(2, 3, 5, 4))
    params = GatedCellParams.init(2, 3, 3, rng)
    return x, h, params.W_z.copy(), params.W_c.copy()


def test_gated_output_is_bounded(rng):
    x, h, W_z, W_c = _gated_case(rng)
    out = gated_step(10.0 * x, h, GatedCellParams(W_z, W_c))
    assert out.shape == h.shape
    assert np.all(np.abs(out) < 1.0)


def test_gated_single_map_keeps_its_shape(rng):
    x, h, W_z, W_c = _gated_case(rng)
    params = GatedCellParams(W_z, W_c)
    np.testing.assert_allclose(gated_step(x[0], h[0], params), gated_step(x, h, params)[0], rtol=1e-12, atol=1e-15)


def test_gated_rejects_wrong_channels(rng):
    x, h, W_z, W_c = _gated_case(rng)
    with pytest.raises(ShapeMismatch):
        gated_step(h, h, GatedCellParams(W_z, W_c))


def test_gated_gradients_over_random_draws(rng):
    for _ in range(20):
        x, h, W_z, W_c = _gated_case(rng)
        g = rng.normal(size=h.shape)
        loss = lambda: float(np.sum(gated_step(x, h, GatedCellParams(W_z, W_c)) * g))
        _, cache = gated_step_forward(x, h, GatedCellParams(W_z, W_c))
        grads = gated_step_backward(g, cache, GatedCellParams(W_z, W_c))
        assert rel_error(grads["dx"], numeric_grad(loss, x)) < 1e-5
        assert rel_error(grads["dh_prev"], numeric_grad(loss, h)) < 1e-5
        assert rel_error(grads["dW_z"], numeric_grad(loss, W_z)) < 1e-5
        assert rel_error(grads["dW_c"], numeric_grad(loss, W_c)) < 1e-5


def test_conv_lstm_gradients(rng):
    for _ in range(5):
        x = rng.normal(size=(2, 2, 4, 4))
        h = rng.normal(size=(2, 3, 4, 4))
        cell = rng.normal(size=(2, 3, 4, 4))
        init = ConvLSTMParams.init(2, 3, 3, rng)
        W, b = init.W.copy(), rng.normal(size=init.b.shape)
        gh, gc = rng.normal(size=h.shape), rng.normal(size=h.shape)

        def loss():
            (h_out, c_out), _ = conv_lstm_forward(x, h, cell, ConvLSTMParams(W, b))
            return float(np.sum(h_out * gh) + np.sum(c_out * gc))

        _, cache = conv_lstm_forward(x, h, cell, ConvLSTMParams(W, b))
        grads = conv_lstm_backward(gh, gc, cache, ConvLSTMParams(W, b))
        assert rel_error(grads["dx"], numeric_grad(loss, x)) < 1e-5
        assert rel_error(grads["dh_prev"], numeric_grad(loss, h)) < 1e-5
        assert rel_error(grads["dcell_prev"], numeric_grad(loss, cell)) < 1e-5
        assert rel_error(grads["dW"], numeric_grad(loss, W)) < 1e-5
        assert rel_error(grads["db"], numeric_grad(loss, b)) < 1e-5


def test_softmax_of_a_constant_map_is_uniform():
    heat = spatial_softmax(np.full((32, 40), 3.7))
    np.testing.assert_allclose(heat, 1.0 / 1280)
    assert heatmap_loss(heat, (10, 20)) == pytest.approx(np.log(1280))


def test_softmax_matches_brute_force_and_permutes(rng):
    logits = rng.normal(size=(6, 7))
    heat = spatial_softmax(logits)
    brute = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(heat, brute, rtol=1e-12)
    assert heat.sum() == pytest.approx(1.0)

    order = rng.permutation(42)
    permuted = spatial_softmax(logits.reshape(-1)[order].reshape(6, 7))
    np.testing.assert_allclose(permuted.reshape(-1), heat.reshape(-1)[order], rtol=1e-12)


def test_softmax_survives_large_logits():
    logits = np.zeros((4, 4))
    logits[1, 2] = 1000.0
    heat = spatial_softmax(logits)
    assert heat[1, 2] == pytest.approx(1.0)
    assert np.all(np.isfinite(heat))


def test_loss_rejects_targets_off_the_map():
    heat = spatial_softmax(np.zeros((32, 40)))
    with pytest.raises(OutOfBounds):
        heatmap_loss(heat, (32, 0))
    with pytest.raises(OutOfBounds):
        batch_heatmap_loss(np.zeros((2, 32, 40)), np.array([[0, 0], [0, 40]]))


def test_loss_gradient(rng):
    logits = rng.normal(size=(5, 6))
    loss, grad = heatmap_loss_grad(logits, (2, 3))
    assert loss == pytest.approx(heatmap_loss(spatial_softmax(logits), (2, 3)))
    numeric = numeric_grad(lambda: heatmap_loss_grad(logits, (2, 3))[0], logits)
    assert rel_error(grad, numeric) < 1e-6


def test_batch_loss_averages_single_maps(rng):
    logits = rng.normal(size=(3, 5, 6))
    targets = np.array([[0, 0], [4, 5], [2, 1]])
    loss, grad = batch_heatmap_loss(logits, targets)
    singles = [heatmap_loss_grad(logits[i], targets[i]) for i in range(3)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]))
    np.testing.assert_allclose(grad, np.stack([s[1] for s in singles]) / 3)


def test_params_save_and_load(tmp_path, rng):
    arrays = {"W_z": rng.normal(size=(3, 5, 3, 3)), "W_c": rng.normal(size=(3, 5, 3, 3))}
    path = tmp_path / "params.bin"
    save_params(str(path), arrays)
    loaded = load_params(str(path))
    assert sorted(loaded) == ["W_c", "W_z"]
    for name in arrays:
        np.testing.assert_array_equal(loaded[name], arrays[name])


def test_truncated_params_file(tmp_path, rng):
    path = tmp_path / "params.bin"
    save_params(str(path), {"W": rng.normal(size=(4, 4))})
    path.write_bytes(path.read_bytes()[:64])
    with pytest.raises(SchemaError):
        load_params(str(path))
