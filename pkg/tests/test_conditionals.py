import mpmath
import numpy as np
import pytest

from robust_uda.conditionals import (
    ConditionalEnsemble,
    FitError,
    LogisticModel,
    fit_ensemble,
    fit_logistic,
    load_ensemble,
    logistic_objective,
    predict_proba,
    save_ensemble,
    soft_pseudo_label,
)
from robust_uda.dataset import LabeledSet, PseudoSourcePlan, make_pseudo_sources, spurious_benchmark, synth_generate
from robust_uda.numeric import cross_entropy


def _blobs(n=120, d=3, C=3, seed=0, sep=2.0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % C
    centers = rng.normal(size=(C, d)) * sep
    return LabeledSet(centers[y] + rng.normal(size=(n, d)), y, C)


def _random_model(rng, C=3, d=4, scale=1.0):
    return LogisticModel(rng.normal(size=(C, d)) * scale, rng.normal(size=C) * scale, 0.0)


def _fd_rel_error(f, x, analytic, h=1e-5):
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        num[i] = (f(xp) - f(xm)) / (2 * h)
    return np.max(np.abs(num - analytic) / np.maximum(np.abs(num), 1e-6))


# --- fit_logistic -------------------------------------------------------------


def test_separable_1d_reaches_full_accuracy():
    x = np.array([[-2.0], [-1.5], [-1.0], [1.0], [1.5], [2.0]])
    data = LabeledSet(x, np.array([0, 0, 0, 1, 1, 1]), 2)
    m = fit_logistic(data, lam=1e-4)
    assert np.all(np.argmax(predict_proba(m, x), axis=1) == data.labels)


def test_huge_penalty_gives_near_uniform():
    data = _blobs(C=2)
    m = fit_logistic(data, lam=1e6)
    assert np.abs(m.weights).max() < 1e-4
    p = predict_proba(m, data.features)
    np.testing.assert_allclose(p, 0.5, atol=1e-3)


def test_logistic_gradient_finite_differences():
    rng = np.random.default_rng(1)
    data = _blobs(n=30, d=3, C=3, seed=1)
    Y = np.eye(3)[data.labels]
    for _ in range(10):
        W, b = rng.normal(size=(3, 3)), rng.normal(size=3)
        _, gW, gb = logistic_objective(W, b, data.features, Y, 0.1)
        assert _fd_rel_error(lambda w: logistic_objective(w, b, data.features, Y, 0.1)[0], W, gW) < 1e-4
        assert _fd_rel_error(lambda c: logistic_objective(W, c, data.features, Y, 0.1)[0], b, gb) < 1e-4


def test_fit_reaches_global_minimum():
    rng = np.random.default_rng(2)
    data = _blobs(seed=2)
    Y = np.eye(3)[data.labels]
    m = fit_logistic(data, lam=1e-2)
    best = logistic_objective(m.weights, m.bias, data.features, Y, 1e-2)[0]
    for _ in range(50):
        W, b = rng.normal(size=m.weights.shape), rng.normal(size=3)
        assert best <= logistic_objective(W, b, data.features, Y, 1e-2)[0]
    assert m.converged


def test_objective_non_increasing():
    # fits are deterministic, so truncating at t iterations replays the path
    data = _blobs(seed=3)
    Y = np.eye(3)[data.labels]
    values = []
    for t in range(0, 40):
        m = fit_logistic(data, lam=1e-3, max_iters=t)
        values.append(logistic_objective(m.weights, m.bias, data.features, Y, 1e-3)[0])
    assert np.all(np.diff(values) <= 0)
    assert values[-1] < values[0]


def test_single_class_is_degenerate_and_concentrates():
    data = LabeledSet(np.random.default_rng(4).normal(size=(20, 2)), np.ones(20, int), 3)
    m = fit_logistic(data, max_iters=500)
    assert m.degenerate
    assert predict_proba(m, data.features)[:, 1].min() > 0.9


def test_fit_errors():
    with pytest.raises(FitError):
        fit_logistic(LabeledSet(np.zeros((0, 2)), np.zeros(0, int), 2))
    with pytest.raises(ValueError):
        fit_logistic(_blobs(), lam=-1)
    with pytest.raises(FitError):
        fit_logistic(LabeledSet(np.array([[1e300], [-1e300]]), np.array([0, 1]), 2))


# --- predict_proba ------------------------------------------------------------


def test_predict_proba_trivial_cases():
    m = LogisticModel(np.zeros((4, 2)), np.zeros(4), 0.0)
    np.testing.assert_array_equal(predict_proba(m, np.ones(2)), np.full(4, 0.25))
    m2 = LogisticModel(np.array([[1.0], [-1.0]]), np.zeros(2), 0.0)
    np.testing.assert_array_equal(predict_proba(m2, np.zeros(1)), [0.5, 0.5])
    with pytest.raises(ValueError):
        predict_proba(m, np.ones(3))


def test_predict_proba_extended_precision():
    mpmath.mp.dps = 40
    rng = np.random.default_rng(5)
    for _ in range(20):
        m = _random_model(rng)
        z = rng.normal(size=4)
        logits = [mpmath.fsum(mpmath.mpf(float(w)) * mpmath.mpf(float(x)) for w, x in zip(row, z)) + mpmath.mpf(float(b))
                  for row, b in zip(m.weights, m.bias)]
        den = mpmath.fsum(mpmath.e ** l for l in logits)
        ref = np.array([float(mpmath.e ** l / den) for l in logits])
        np.testing.assert_allclose(predict_proba(m, z), ref, rtol=0, atol=1e-12)


# --- ensembles ----------------------------------------------------------------


def test_single_full_plan_equals_direct_fit():
    data = _blobs(seed=6)
    plan = PseudoSourcePlan.from_groups([np.arange(data.n)], data.n)
    ens = fit_ensemble(data, plan)
    direct = fit_logistic(data)
    np.testing.assert_array_equal(ens.models[0].weights, direct.weights)
    np.testing.assert_array_equal(ens.models[0].bias, direct.bias)


def test_identical_lists_identical_models_and_dispersion():
    src, _, _ = synth_generate(spurious_benchmark(seed=0))
    same = PseudoSourcePlan.from_groups([np.arange(80)] * 10, src.n)
    ens_same = fit_ensemble(src, same)
    W = np.stack([m.weights for m in ens_same.models])
    assert np.all(W == W[0])
    ens_boot = fit_ensemble(src, make_pseudo_sources(src, 10, 0.2, seed=0))
    Wb = np.stack([m.weights for m in ens_boot.models])
    assert Wb.var(axis=0).sum() > 1e-3


def test_parallel_fit_matches_serial():
    data = _blobs(seed=7)
    plan = make_pseudo_sources(data, 6, 0.3, seed=1)
    a = fit_ensemble(data, plan)
    b = fit_ensemble(data, plan, n_jobs=4)
    for ma, mb in zip(a.models, b.models):
        np.testing.assert_array_equal(ma.weights, mb.weights)


def test_fit_ensemble_annotates_group():
    data = LabeledSet(np.array([[1e300], [-1e300], [0.0]]), np.array([0, 1, 0]), 2)
    plan = PseudoSourcePlan.from_groups([[2], [0, 1]], 3)
    with pytest.raises(FitError, match="pseudo-source 1"):
        fit_ensemble(data, plan)


def test_ensemble_shape_check():
    rng = np.random.default_rng(8)
    with pytest.raises(ValueError):
        ConditionalEnsemble((_random_model(rng, 3, 4), _random_model(rng, 2, 4)))


# --- soft pseudo-labels ---------------------------------------------------------


def test_vertex_beta_gives_model_output():
    rng = np.random.default_rng(9)
    ens = ConditionalEnsemble(tuple(_random_model(rng) for _ in range(3)))
    z = rng.normal(size=(5, 4))
    for k in range(3):
        np.testing.assert_array_equal(soft_pseudo_label(ens, np.eye(3)[k], z), predict_proba(ens.models[k], z))


def test_identical_models_beta_independent():
    rng = np.random.default_rng(10)
    m = _random_model(rng)
    ens = ConditionalEnsemble((m, m, m))
    z = rng.normal(size=4)
    a = soft_pseudo_label(ens, np.array([0.1, 0.2, 0.7]), z)
    b = soft_pseudo_label(ens, np.array([0.6, 0.3, 0.1]), z)
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_mixture_matches_independent_sum():
    rng = np.random.default_rng(11)
    ens = ConditionalEnsemble(tuple(_random_model(rng) for _ in range(3)))
    beta = np.array([0.2, 0.3, 0.5])
    z = rng.normal(size=(7, 4))
    ref = np.zeros((7, 3))
    for k in reversed(range(3)):  # different summation order
        ref += beta[k] * predict_proba(ens.models[k], z)
    out = soft_pseudo_label(ens, beta, z)
    np.testing.assert_allclose(out, ref, atol=1e-15)
    np.testing.assert_allclose(out.sum(axis=1), 1, atol=1e-12)


def test_soft_label_errors():
    rng = np.random.default_rng(12)
    ens = ConditionalEnsemble(tuple(_random_model(rng) for _ in range(2)))
    with pytest.raises(ValueError):
        soft_pseudo_label(ens, np.array([0.6, 0.6]), np.zeros(4))
    with pytest.raises(ValueError):
        soft_pseudo_label(ens, np.array([1.0, 0, 0]), np.zeros(4))


def test_cross_entropy_linear_in_beta():
    rng = np.random.default_rng(13)
    for _ in range(200):
        K = rng.integers(1, 6)
        ens = ConditionalEnsemble(tuple(_random_model(rng, 3, 2, 2.0) for _ in range(K)))
        beta = rng.dirichlet(np.ones(K))
        z = rng.normal(size=2)
        f = rng.dirichlet(np.ones(3))
        lhs = cross_entropy(f, soft_pseudo_label(ens, beta, z))
        rhs = sum(beta[k] * cross_entropy(f, predict_proba(ens.models[k], z)) for k in range(K))
        assert abs(lhs - rhs) < 1e-9


# --- persistence ----------------------------------------------------------------


def test_ensemble_round_trip(tmp_path):
    data = _blobs(seed=14)
    ens = fit_ensemble(data, make_pseudo_sources(data, 4, 0.3, seed=2))
    save_ensemble(tmp_path / "e.drlc", ens, "abc")
    back, meta = load_ensemble(tmp_path / "e.drlc")
    assert meta["K"] == 4 and meta["C"] == 3 and meta["d"] == 3 and meta["config_hash"] == "abc"
    for m, mb in zip(ens.models, back.models):
        np.testing.assert_array_equal(m.weights.astype(np.float32), mb.weights)
    save_ensemble(tmp_path / "f.drlc", back, "abc")
    assert (tmp_path / "f.drlc").read_bytes() == (tmp_path / "e.drlc").read_bytes()
