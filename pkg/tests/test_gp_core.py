import json
import math
import warnings

import numpy as np
import pytest

from oracles import dense_gram, dense_nll, dense_predict, fd_gradient, random_inputs
from wassgp.dist_core import QuantileFunction
from wassgp.errors import IllConditionedError, InvalidInputError, NumericError
from wassgp.gp_core import (Dataset, FitConfig, build_gram, cholesky_jitter, cir, dump_model,
                            fit_ml, info_matrix, info_matrix_at, load_model, make_model,
                            neg_log_lik, neg_log_lik_grad, normal_quantile_for_level,
                            predict, predict_many, rmse)
from wassgp.kernels import FbmSpec, FeatureVector, LegendreSpec, PowExpSpec


def smooth_data(rng, n, m=32):
    qs = random_inputs(rng, n, m)
    y = np.array([np.sin(q.values.mean()) + 0.3 * np.log(q.values.std() + 0.1) for q in qs])
    return Dataset(qs, y)


# ---------------------------------------------------------------------------
# Gram matrix
# ---------------------------------------------------------------------------

def test_gram_single_input():
    q = QuantileFunction(np.arange(4.0))
    np.testing.assert_array_equal(build_gram(PowExpSpec(2.0, 1.0, 0.5, 0.3), [q]), [[2.3]])


def test_gram_permutation():
    rng = np.random.default_rng(0)
    qs = random_inputs(rng, 6)
    spec = PowExpSpec(1.0, 0.5, 0.7)
    K = build_gram(spec, qs)
    p = rng.permutation(6)
    np.testing.assert_array_equal(build_gram(spec, [qs[i] for i in p]), K[np.ix_(p, p)])


def test_gram_matches_loop():
    rng = np.random.default_rng(1)
    qs = random_inputs(rng, 7)
    for spec in (PowExpSpec(1.5, 0.8, 0.6, 0.1), FbmSpec(0.35, qs[2])):
        np.testing.assert_allclose(build_gram(spec, qs), dense_gram(spec, qs),
                                   rtol=1e-12, atol=1e-12)
    feats = [FeatureVector(rng.normal(size=3)) for _ in range(5)]
    spec = LegendreSpec(1.1, (0.3, 0.6, 2.0), 0.8)
    np.testing.assert_allclose(build_gram(spec, feats), dense_gram(spec, feats), rtol=1e-12)


def test_gram_nonfinite():
    qs = [QuantileFunction([0.0, 1e300]), QuantileFunction([0.0, -1e300 + 1e300])]
    spec = FbmSpec(1.0, QuantileFunction([-1e300, 0.0]))
    with pytest.raises(NumericError, match="pair"):
        build_gram(spec, qs)


def test_gram_wrong_input_type():
    with pytest.raises(InvalidInputError):
        build_gram(PowExpSpec(1, 1, 0.5), [FeatureVector([1.0])])
    with pytest.raises(InvalidInputError):
        build_gram(LegendreSpec(1, (1.0,), 0.5), [QuantileFunction([1.0])])


# ---------------------------------------------------------------------------
# Cholesky with jitter
# ---------------------------------------------------------------------------

def test_jitter_escalates_then_fails():
    R = np.ones((3, 3))
    c, j = cholesky_jitter(R, 1e-10)
    assert j > 0
    np.testing.assert_allclose(c @ c.T, R + j * np.eye(3), rtol=1e-12)
    bad = -np.eye(2)
    with pytest.raises(IllConditionedError) as err:
        cholesky_jitter(bad, 1e-10)
    assert err.value.smallest_pivot is not None


def test_jitter_zero_tries_exact_first():
    R = np.array([[2.0, 1.0], [1.0, 2.0]])
    c, j = cholesky_jitter(R, 0.0)
    assert j == 0.0
    np.testing.assert_allclose(c @ c.T, R, rtol=1e-15)


def test_chol_reconstructs_gram():
    rng = np.random.default_rng(2)
    data = smooth_data(rng, 12)
    spec = PowExpSpec(1.0, 1.0, 0.5, 0.01)
    model = make_model(spec, data)
    R = build_gram(spec, data.inputs)
    err = np.linalg.norm(model.chol @ model.chol.T - R) / np.linalg.norm(R)
    assert err <= 1e-8
    assert np.all(np.diag(model.chol) > 0)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def test_nll_scalar():
    q = QuantileFunction([0.0, 1.0])
    val = neg_log_lik(PowExpSpec(2.0, 1.0, 0.5), Dataset([q], [3.0]), jitter=0.0)
    assert val == pytest.approx(math.log(2.0) + 9.0 / 2.0, rel=1e-14)


def test_nll_identity():
    qs = [QuantileFunction(np.full(4, 1e3 * k)) for k in range(5)]
    y = np.array([1.0, -2.0, 0.5, 3.0, 0.0])
    val = neg_log_lik(PowExpSpec(1.0, 1.0, 0.5), Dataset(qs, y), jitter=0.0)
    assert val == pytest.approx(np.mean(y ** 2), rel=1e-14)


def test_nll_matches_dense_oracle():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = int(rng.integers(1, 6))
        qs = random_inputs(rng, n)
        y = rng.normal(size=n)
        spec = PowExpSpec(rng.uniform(0.2, 3), rng.uniform(0.2, 3), rng.uniform(0.1, 1),
                          rng.uniform(0, 0.5))
        val = neg_log_lik(spec, Dataset(qs, y), jitter=0.0)
        assert val == pytest.approx(dense_nll(spec, qs, y), rel=1e-10, abs=1e-12)


def test_nll_returns_jitter():
    q = QuantileFunction([0.0, 1.0])
    data = Dataset([q, QuantileFunction(q.values.copy())], [1.0, 1.0])
    val, j = neg_log_lik(PowExpSpec(1.0, 1.0, 0.5), data, jitter=1e-10, return_jitter=True)
    assert j > 0 and np.isfinite(val)


# ---------------------------------------------------------------------------
# gradient
# ---------------------------------------------------------------------------

def test_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(3, 9))
        data = smooth_data(rng, n)
        spec = PowExpSpec(rng.uniform(0.3, 3), rng.uniform(0.3, 3), rng.uniform(0.2, 0.9),
                          rng.uniform(0.01, 0.3))
        names = spec.param_names
        g = neg_log_lik_grad(spec, data, names, jitter=0.0)
        fd = fd_gradient(lambda s: neg_log_lik(s, data, jitter=0.0), spec, names)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7 * (1 + np.abs(fd).max()))


def test_grad_projection_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(10):
        feats = [FeatureVector(rng.normal(size=3)) for _ in range(6)]
        data = Dataset(feats, rng.normal(size=6))
        spec = LegendreSpec(rng.uniform(0.5, 2), tuple(rng.uniform(0.3, 3, 3)),
                            rng.uniform(0.3, 0.95))
        g = neg_log_lik_grad(spec, data, jitter=0.0)
        fd = fd_gradient(lambda s: neg_log_lik(s, data, jitter=0.0), spec, spec.param_names)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7 * (1 + np.abs(fd).max()))


def test_grad_sigma2_closed_form():
    rng = np.random.default_rng(6)
    data = smooth_data(rng, 8)
    s2 = 1.7
    spec = PowExpSpec(s2, 0.9, 0.6)
    C = build_gram(PowExpSpec(1.0, 0.9, 0.6), data.inputs)
    y = data.targets
    n = y.size
    expected = (n / s2 - y @ np.linalg.solve(C, y) / s2 ** 2) / n
    g = neg_log_lik_grad(spec, data, ("sigma2",), jitter=0.0)
    assert g[0] == pytest.approx(expected, rel=1e-9)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def test_fit_stationary_and_improves_on_starts():
    rng = np.random.default_rng(7)
    data = smooth_data(rng, 25)
    model = fit_ml(data, "POWEXP", FitConfig(n_starts=5, seed=3))
    info = model.fit_info
    assert all(model.nll <= v + 1e-12 for v in info["start_values"])
    assert model.nll == min(info["final_values"])
    # first-order condition on coordinates strictly inside the box
    g = neg_log_lik_grad(model.spec, Dataset(data.inputs, data.targets - model.y_offset),
                         model.free_params)
    for k, name in enumerate(model.free_params):
        lo, hi = info["bounds"][name]
        v = model.spec.get(name)
        if lo * 1.01 < v < hi * 0.99:
            assert abs(g[k]) * v <= 1e-4 * (1 + abs(model.nll))


def test_fit_is_reproducible():
    rng = np.random.default_rng(8)
    data = smooth_data(rng, 15)
    cfg = FitConfig(n_starts=4, seed=11)
    a = dump_model(fit_ml(data, "POWEXP", cfg))
    b = dump_model(fit_ml(data, "POWEXP", cfg))
    c = dump_model(fit_ml(data, "POWEXP", FitConfig(n_starts=4, seed=11, threads=3)))
    assert a == b == c


def test_fit_more_starts_never_worse():
    rng = np.random.default_rng(9)
    data = smooth_data(rng, 20)
    m4 = fit_ml(data, "POWEXP", FitConfig(n_starts=4, seed=1))
    m8 = fit_ml(data, "POWEXP", FitConfig(n_starts=8, seed=1))
    assert m8.nll <= m4.nll + 1e-12


def test_fit_constant_targets():
    rng = np.random.default_rng(10)
    qs = random_inputs(rng, 10)
    model = fit_ml(Dataset(qs, np.zeros(10)), "POWEXP",
                   FitConfig(n_starts=3, center_targets=False))
    lo, _ = model.fit_info["bounds"]["sigma2"]
    assert model.spec.sigma2 <= lo * 1.01


def test_fit_two_points_and_errors():
    rng = np.random.default_rng(11)
    qs = random_inputs(rng, 2)
    model = fit_ml(Dataset(qs, [0.0, 1.0]), "POWEXP", FitConfig(n_starts=2))
    assert np.isfinite(model.nll)
    with pytest.raises(InvalidInputError):
        fit_ml(Dataset(qs[:1], [0.0]), "POWEXP")
    with pytest.raises(InvalidInputError):
        FitConfig(n_starts=0)
    with pytest.raises(InvalidInputError):
        FitConfig(bounds={"ell": (2.0, 1.0)})


def test_fit_other_variants():
    rng = np.random.default_rng(12)
    data = smooth_data(rng, 15)
    fbm = fit_ml(data, "FBM", FitConfig(n_starts=2))
    assert 0.01 <= fbm.spec.H <= 1.0
    feats = [FeatureVector([q.values.mean(), q.values.std()]) for q in data.inputs]
    leg = fit_ml(Dataset(feats, data.targets), "LEGENDRE", FitConfig(n_starts=2))
    assert leg.spec.order == 2
    off = fit_ml(data, "POWEXP", FitConfig(n_starts=2, nugget="off"))
    assert off.spec.delta == 0.0 and "delta" not in off.free_params
    fixed = fit_ml(data, "POWEXP", FitConfig(n_starts=2, nugget=0.02))
    assert fixed.spec.delta == 0.02


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def test_interpolation_without_nugget():
    rng = np.random.default_rng(13)
    data = smooth_data(rng, 10)
    spec = PowExpSpec(1.0, 2.0, 0.5)
    model = make_model(spec, data, jitter=0.0)
    assert model.jitter == 0.0
    mean, var = predict_many(model, data.inputs)
    np.testing.assert_allclose(mean, data.targets, rtol=1e-8, atol=1e-8 * np.abs(data.targets).max())
    assert np.all(var <= 1e-8 * spec.sigma2)
    assert np.all(var >= 0)


def test_far_query():
    rng = np.random.default_rng(14)
    data = smooth_data(rng, 8)
    spec = PowExpSpec(1.3, 0.5, 0.5, 0.2)
    model = make_model(spec, data, y_offset=0.7)
    far = QuantileFunction(np.linspace(1e4, 1e4 + 1, 32))
    mu, var = predict(model, far)
    assert mu == pytest.approx(0.7, abs=1e-6)
    assert var == pytest.approx(1.5, abs=1e-6)


def test_predict_matches_dense():
    rng = np.random.default_rng(15)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        qs = random_inputs(rng, n + 1)
        y = rng.normal(size=n)
        spec = PowExpSpec(rng.uniform(0.2, 3), rng.uniform(0.2, 3), rng.uniform(0.1, 1),
                          rng.uniform(0, 0.5))
        model = make_model(spec, Dataset(qs[:n], y), jitter=0.0)
        mu, var = predict(model, qs[n])
        mu0, var0 = dense_predict(spec, qs[:n], y, qs[n])
        assert mu == pytest.approx(mu0, rel=1e-10, abs=1e-12)
        assert var == pytest.approx(var0, rel=1e-10, abs=1e-12)


def test_variance_clamp_and_error(monkeypatch):
    rng = np.random.default_rng(16)
    data = smooth_data(rng, 5)
    model = make_model(PowExpSpec(1.0, 1.0, 0.5), data)
    import wassgp.gp_core as gp
    real = gp.solve_triangular

    def inflate(scale):
        def f(*a, **k):
            return real(*a, **k) * scale
        return f

    monkeypatch.setattr(gp, "solve_triangular", inflate(1 + 1e-10))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        _, var = predict_many(model, data.inputs)
    assert np.all(var >= 0)
    monkeypatch.setattr(gp, "solve_triangular", inflate(1.1))
    with pytest.raises(NumericError):
        predict_many(model, data.inputs)


def test_predict_grid_mismatch():
    rng = np.random.default_rng(17)
    model = make_model(PowExpSpec(1, 1, 0.5), smooth_data(rng, 4))
    with pytest.raises(InvalidInputError):
        predict(model, QuantileFunction(np.zeros(5)))


# ---------------------------------------------------------------------------
# information matrix
# ---------------------------------------------------------------------------

def test_info_sigma2_only():
    rng = np.random.default_rng(18)
    qs = random_inputs(rng, 9)
    s2 = 2.5
    M = info_matrix_at(PowExpSpec(s2, 1.0, 0.5), qs, ("sigma2",), jitter=0.0)
    assert M.matrix[0, 0] == pytest.approx(1 / (2 * s2 ** 2), rel=1e-10)


def test_info_symmetric_psd():
    rng = np.random.default_rng(19)
    for _ in range(10):
        data = smooth_data(rng, 12)
        model = fit_ml(data, "POWEXP", FitConfig(n_starts=2, seed=int(rng.integers(100))))
        info = info_matrix(model)
        M = info.matrix
        assert np.allclose(M, M.T, atol=1e-12 * np.abs(M).max())
        assert info.eigenvalues[0] >= -1e-8 * np.trace(M)


def test_info_matches_expected_hessian():
    # E[d2L] = 2 M for data drawn from the model; Monte-Carlo over 400 draws
    rng = np.random.default_rng(20)
    qs = random_inputs(rng, 15)
    spec = PowExpSpec(1.0, 1.5, 0.6, 0.1)
    names = ("sigma2", "ell")
    M = info_matrix_at(spec, qs, names, jitter=0.0).matrix
    R = build_gram(spec, qs)
    L = np.linalg.cholesky(R)
    H = np.zeros((2, 2))
    draws = 400
    for _ in range(draws):
        y = L @ rng.standard_normal(15)
        H += _hessian(Dataset(qs, y), spec, names)
    H /= draws
    np.testing.assert_allclose(H / 2, M, rtol=0.1)


def _hessian(data, spec, names, rel=1e-5):
    out = np.empty((len(names), len(names)))
    for k, name in enumerate(names):
        v = spec.get(name)
        h = rel * v
        gp_ = neg_log_lik_grad(spec.with_params({name: v + h}), data, names, jitter=0.0)
        gm = neg_log_lik_grad(spec.with_params({name: v - h}), data, names, jitter=0.0)
        out[:, k] = (gp_ - gm) / (2 * h)
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_model_roundtrip():
    rng = np.random.default_rng(21)
    data = smooth_data(rng, 8)
    model = fit_ml(data, "POWEXP", FitConfig(n_starts=2))
    text = dump_model(model)
    again = load_model(text)
    assert dump_model(again) == text
    q = random_inputs(rng, 3)
    np.testing.assert_array_equal(predict_many(model, q)[0], predict_many(again, q)[0])


def test_model_tampered():
    rng = np.random.default_rng(22)
    model = fit_ml(smooth_data(rng, 6), "POWEXP", FitConfig(n_starts=2))
    d = json.loads(dump_model(model))
    d["nll"] += 1.0
    with pytest.raises(NumericError):
        load_model(json.dumps(d))
    d["format"] = "other"
    with pytest.raises(InvalidInputError):
        load_model(json.dumps(d))


# ---------------------------------------------------------------------------
# quality criteria
# ---------------------------------------------------------------------------

def test_quality_criteria():
    assert rmse([1, 2], [1, 2]) == 0.0
    assert cir([1, 2], [0.0, 0.0], [1, 2], 0.5) == 1.0
    assert rmse([3, 4], [0, 0]) == pytest.approx(math.sqrt(12.5))
    q = normal_quantile_for_level(0.9)
    assert q == pytest.approx(1.6448536269514722, rel=1e-12)
    assert cir([0.0, 0.0], [1.0, 1.0], [q, -q], 0.9) == 1.0
    assert cir([0.0], [1.0], [q * (1 + 1e-9)], 0.9) == 0.0
    with pytest.raises(InvalidInputError):
        rmse([1], [1, 2])
    with pytest.raises(InvalidInputError):
        cir([1], [-1], [1])
