import numpy as np
import pytest

from vnn_brainage.covariance import CovarianceModel, covariance_of
from vnn_brainage.errors import DataError
from vnn_brainage.vnn import (
    VnnConfig,
    VnnModel,
    apply_filter,
    forward,
    init_model,
    layer_forward,
    load_model,
    model_from_json,
    model_to_json,
    permute_input,
    random_model,
    save_model,
)

from conftest import random_cov


def dense_filter(h, C, x):
    return sum(hk * np.linalg.matrix_power(C, k) @ x for k, hk in enumerate(h))


def dense_forward(model, C, x):
    act = {"relu": lambda u: np.maximum(u, 0), "tanh": np.tanh}[model.config.nonlinearity]
    z = [np.asarray(x, dtype=float)]
    for taps in model.taps:
        z = [act(sum(dense_filter(taps[f, g], C, z[g]) for g in range(taps.shape[1]))) for f in range(taps.shape[0])]
    pooled = np.array([zf.mean() for zf in z])
    return float(pooled @ model.readout_weights + model.readout_bias)


def test_identity_filter(rng):
    cov = random_cov(5, rng)
    x = rng.normal(size=5)
    np.testing.assert_array_equal(apply_filter([1.0], cov, x), x)


def test_first_order_on_identity():
    cov = CovarianceModel(np.eye(3), np.zeros(3), 1.0, True)
    np.testing.assert_array_equal(apply_filter([0.0, 1.0], cov, [1.0, -2.0, 3.0]), [1.0, -2.0, 3.0])


def test_hand_polynomial():
    cov = CovarianceModel(np.array([[1.0, 0.5], [0.5, 1.0]]), np.zeros(2))
    np.testing.assert_allclose(apply_filter([1.0, 2.0], cov, [1.0, 0.0]), [3.0, 1.0], atol=1e-15)


def test_filter_matches_dense_powers(rng):
    for _ in range(100):
        m, K = rng.integers(1, 21), rng.integers(0, 6)
        cov = random_cov(m, rng)
        h, x = rng.normal(size=K + 1), rng.normal(size=m)
        np.testing.assert_allclose(apply_filter(h, cov, x), dense_filter(h, cov.matrix, x), rtol=0, atol=1e-10)


def test_filter_linearity(rng):
    cov = random_cov(9, rng)
    h1, h2 = rng.normal(size=3), rng.normal(size=3)
    x1, x2 = rng.normal(size=9), rng.normal(size=9)
    a, b = 0.7, -1.3
    np.testing.assert_allclose(
        apply_filter(h1, cov, a * x1 + b * x2), a * apply_filter(h1, cov, x1) + b * apply_filter(h1, cov, x2), atol=1e-12
    )
    np.testing.assert_allclose(
        apply_filter(a * h1 + b * h2, cov, x1), a * apply_filter(h1, cov, x1) + b * apply_filter(h2, cov, x1), atol=1e-12
    )


def test_filter_errors(rng):
    cov = random_cov(4, rng)
    with pytest.raises(DataError):
        apply_filter([1.0], cov, np.ones(5))
    with pytest.raises(DataError):
        apply_filter([1.0], cov, [1.0, np.inf, 0.0, 0.0])


def test_layer_relu_identity():
    cov = CovarianceModel(np.eye(2), np.zeros(2), 1.0, True)
    out = layer_forward(np.ones((1, 1, 1)), cov, np.array([[-1.0, 2.0]]), "relu")
    np.testing.assert_array_equal(out, [[0.0, 2.0]])


def test_layer_sum_rule(rng):
    cov = random_cov(6, rng)
    u, v = rng.normal(size=6), rng.normal(size=6)
    out = layer_forward(np.ones((1, 2, 1)), cov, np.stack([u, v]), "tanh")
    np.testing.assert_allclose(out[0], np.tanh(u + v), atol=1e-15)


def test_layer_matches_dense_oracle(rng):
    cov = random_cov(4, rng)
    taps = rng.normal(size=(3, 2, 3))
    x_in = rng.normal(size=(2, 4))
    expected = np.stack(
        [np.maximum(sum(dense_filter(taps[f, g], cov.matrix, x_in[g]) for g in range(2)), 0) for f in range(3)]
    )
    np.testing.assert_allclose(layer_forward(taps, cov, x_in), expected, atol=1e-12)
    batch = np.stack([x_in, 2 * x_in], axis=1)  # (F_in, n, m)
    out = layer_forward(taps, cov, batch)
    np.testing.assert_allclose(out[:, 0], expected, atol=1e-12)


def test_layer_shape_mismatch(rng):
    with pytest.raises(DataError):
        layer_forward(np.ones((2, 3, 2)), random_cov(4, rng), np.ones((2, 4)))


def test_forward_zero_readout(rng):
    model = init_model(VnnConfig(widths=(5, 5)), seed=1)
    model.readout_bias = 42.5
    cov = random_cov(7, rng)
    for _ in range(3):
        assert forward(model, cov, rng.normal(size=7)) == 42.5


def test_forward_constant_propagation():
    cfg = VnnConfig(layers=1, taps_per_layer=0, widths=(1,))
    model = VnnModel(cfg, [np.ones((1, 1, 1))], [1.7], 0.3)
    cov = CovarianceModel(np.eye(4), np.zeros(4), 1.0, True)
    assert forward(model, cov, np.full(4, 2.0)) == pytest.approx(2.0 * 1.7 + 0.3, abs=1e-15)


def test_forward_matches_dense_oracle(rng):
    for nl in ("relu", "tanh"):
        cfg = VnnConfig(layers=3, taps_per_layer=2, widths=(3, 4, 2), nonlinearity=nl)
        for _ in range(5):
            model = random_model(cfg, rng)
            cov = random_cov(6, rng)
            x = rng.normal(size=6)
            assert forward(model, cov, x) == pytest.approx(dense_forward(model, cov.matrix, x), abs=1e-12)


def test_forward_batch_equals_rows(rng):
    model = random_model(VnnConfig(widths=(4, 3)), rng)
    cov = random_cov(5, rng)
    X = rng.normal(size=(6, 5))
    np.testing.assert_allclose(forward(model, cov, X), [forward(model, cov, x) for x in X], atol=1e-13)


def test_dimension_free(rng):
    model = random_model(VnnConfig(widths=(4, 4)), rng)
    for m in (1, 5, 50):
        assert np.isfinite(forward(model, random_cov(m, rng), rng.normal(size=m)))


def test_permute_identity_and_involution(rng):
    cov = random_cov(5, rng)
    x = rng.normal(size=5)
    px, pc = permute_input(x, cov, np.arange(5))
    np.testing.assert_array_equal(px, x)
    np.testing.assert_array_equal(pc.matrix, cov.matrix)
    swap = np.array([0, 3, 2, 1, 4])
    x2, c2 = permute_input(*permute_input(x, cov, swap), swap)
    np.testing.assert_array_equal(x2, x)
    np.testing.assert_array_equal(c2.matrix, cov.matrix)
    np.testing.assert_array_equal(c2.mean, cov.mean)


def test_permutation_invariance_m7(rng):
    for _ in range(20):
        model = random_model(VnnConfig(widths=(4, 4)), rng)
        cov = random_cov(7, rng)
        x = rng.normal(size=7)
        px, pc = permute_input(x, cov, rng.permutation(7))
        assert abs(forward(model, pc, px) - forward(model, cov, x)) <= 1e-9


def test_permute_invalid(rng):
    with pytest.raises(DataError):
        permute_input(np.ones(3), random_cov(3, rng), [0, 0, 1])


def test_config_validation():
    with pytest.raises(DataError):
        VnnConfig(layers=2, widths=(4,))
    with pytest.raises(DataError):
        VnnConfig(nonlinearity="sigmoid")
    with pytest.raises(DataError):
        VnnConfig(taps_per_layer=-1)
    assert VnnConfig().tap_shapes() == [(44, 1, 2), (44, 44, 2)]


def test_init_bounds():
    cfg = VnnConfig(layers=2, taps_per_layer=1, widths=(10, 6))
    model = init_model(cfg, seed=4)
    assert np.abs(model.taps[0]).max() <= 1 / np.sqrt(1 * 2)
    assert np.abs(model.taps[1]).max() <= 1 / np.sqrt(10 * 2)
    np.testing.assert_array_equal(model.readout_weights, 0)
    np.testing.assert_array_equal(init_model(cfg, seed=4).taps[1], model.taps[1])


def test_model_json_roundtrip_bit_exact(tmp_path, rng):
    model = random_model(VnnConfig(layers=2, taps_per_layer=3, widths=(5, 2), nonlinearity="tanh", seed=9), rng)
    back = model_from_json(model_to_json(model))
    for a, b in zip(model.taps, back.taps):
        np.testing.assert_array_equal(a, b)
    save_model(model, tmp_path / "m.json")
    again = load_model(tmp_path / "m.json")
    cov = covariance_of(rng.normal(size=(10, 8)))
    x = rng.normal(size=8)
    assert forward(again, cov, x) == forward(model, cov, x)
    assert model_to_json(again) == model_to_json(model)


def test_model_format_version_checked(rng):
    text = model_to_json(random_model(VnnConfig(widths=(2, 2)), rng)).replace('"format_version": 1', '"format_version": 99')
    with pytest.raises(DataError):
        model_from_json(text)
