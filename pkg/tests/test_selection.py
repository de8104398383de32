from dataclasses import replace

import numpy as np
import pytest

import robust_uda.selection as sel
from robust_uda.conditionals import ConditionalEnsemble, fit_ensemble, fit_logistic
from robust_uda.dataset import (
    LabeledSet,
    PseudoSourcePlan,
    make_pseudo_sources,
    spurious_benchmark,
    synth_generate,
)
from robust_uda.selection import (
    DEFAULT_K_CANDIDATES,
    GridCellError,
    GridSpec,
    SweepResult,
    grid_search,
    k_scores,
    lodo_cv,
    select_cell,
    select_k,
    sweep_heatmap,
)
from robust_uda.trainer import TrainConfig, evaluate, self_train

FAST = TrainConfig(epochs=3, batch_size=16)


@pytest.fixture(scope="module")
def bench():
    src, tgt, truth = synth_generate(spurious_benchmark(seed=0, n_target=60))
    ens = fit_ensemble(src, make_pseudo_sources(src, 4, 0.2, seed=0))
    return src, tgt, truth, ens


# --- grid spec and tables ------------------------------------------------------------


def test_grid_defaults_and_validation():
    g = GridSpec()
    assert g.eps1_values == (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    assert g.eps2_values == (0.0, 0.2, 0.4, 0.6, 1.0)
    assert len(list(g.cells())) == 30
    for bad in [((), (0.0,)), ((0.0,), (-0.1,)), ((0.2, 0.2), (0.0,)), ((0.4, 0.2), (0.0,))]:
        with pytest.raises(ValueError):
            GridSpec(*bad)


def test_select_cell_ties_prefer_small_radii():
    t = np.array([[0.1, 0.5], [0.5, 0.5]])
    assert select_cell(t) == (0, 1)
    t = np.array([[0.1, 0.2], [0.5, 0.5]])
    assert select_cell(t) == (1, 0)


def test_heatmap_csv_format_and_round_trip():
    g = GridSpec((0.0, 0.5), (0.0, 0.2, 1.0))
    mean = np.arange(6.0).reshape(2, 3) / 10
    res = SweepResult(g, mean, np.zeros((2, 3)), 3)
    lines = res.to_csv().splitlines()
    assert lines[0] == "eps1,eps2,mean_acc,sd_acc,n_seeds"
    assert [tuple(map(float, l.split(",")[:2])) for l in lines[1:]] == [
        (0.0, 0.0), (0.0, 0.2), (0.0, 1.0), (0.5, 0.0), (0.5, 0.2), (0.5, 1.0)
    ]
    back = SweepResult.from_csv(res.to_csv())
    np.testing.assert_array_equal(back.mean, mean)
    assert back.n_seeds == 3
    with pytest.raises(ValueError):
        SweepResult(g, np.zeros((3, 2)), np.zeros((3, 2)), 1)


# --- grid search ------------------------------------------------------------------------


def test_grid_search_single_cell(bench):
    _, tgt, truth, ens = bench
    e1, e2, res = grid_search(GridSpec((0.3,), (0.1,)), truth, ens, tgt, FAST)
    assert (e1, e2) == (0.3, 0.1) and res.mean.shape == (1, 1)


def test_grid_search_default_grid_and_order_invariance(bench, monkeypatch):
    _, tgt, truth, ens = bench
    grid = GridSpec()
    # stub training so that cell (3, 2) is the unique best on the validation set
    calls = []

    def fake_train_cell(ensemble, target, eps1, eps2, cfg, beta_bar=None, theta0=None):
        calls.append((eps1, eps2))
        good = (eps1, eps2) == (0.6, 0.4)
        w = np.array([[0.0] * truth.dim, [1.0] * truth.dim]) if good else np.array([[1.0] * truth.dim, [0.0] * truth.dim])
        from robust_uda.trainer import LinearClassifier

        return LinearClassifier(w * 1e3, np.array([0.0, 1e9 if good else -1e9]))

    monkeypatch.setattr(sel, "train_cell", fake_train_cell)
    e1, e2, res = grid_search(grid, truth, ens, tgt, FAST)
    assert len(calls) == 30 and (e1, e2) == (0.6, 0.4)
    order = [(i, j) for i, j, _, _ in grid.cells()]
    np.random.default_rng(0).shuffle(order)
    e1b, e2b, resb = grid_search(grid, truth, ens, tgt, FAST, order=order)
    assert (e1b, e2b) == (e1, e2)
    np.testing.assert_array_equal(res.mean, resb.mean)
    # the choice is a pure function of the table
    assert res.best() == (e1, e2)


def test_grid_search_real_training_order_invariance(bench):
    _, tgt, truth, ens = bench
    grid = GridSpec((0.0, 0.5), (0.0, 0.5))
    a = grid_search(grid, truth, ens, tgt, FAST)
    b = grid_search(grid, truth, ens, tgt, FAST, order=[(1, 1), (0, 1), (1, 0), (0, 0)])
    assert a[:2] == b[:2]
    np.testing.assert_array_equal(a[2].mean, b[2].mean)


def test_grid_search_errors(bench):
    _, tgt, truth, ens = bench
    with pytest.raises(ValueError):
        grid_search(GridSpec((0.0,), (0.0,)), truth.subset([]), ens, tgt, FAST)
    with pytest.raises(GridCellError, match="eps1=0.0, eps2=0.0"):
        grid_search(GridSpec((0.0,), (0.0,)), truth, ens, tgt, FAST, beta_bar=np.ones(ens.K + 1) / (ens.K + 1))


# --- leave-one-pseudo-source-out -----------------------------------------------------------


def test_lodo_requires_two_sources(bench):
    src, tgt, _, _ = bench
    with pytest.raises(ValueError):
        lodo_cv(GridSpec((0.0,), (0.0,)), src, make_pseudo_sources(src, 1, 0.2), tgt, FAST)


def test_lodo_two_sources_deterministic(bench):
    src, tgt, _, _ = bench
    plan = make_pseudo_sources(src, 2, 0.2, seed=1)
    grid = GridSpec((0.0, 0.4), (0.0, 0.4))
    a = lodo_cv(grid, src, plan, tgt, FAST)
    b = lodo_cv(grid, src, plan, tgt, FAST)
    assert a[:2] == b[:2]
    np.testing.assert_array_equal(a[2].mean, b[2].mean)


def test_lodo_identical_sources_equals_in_fold_and_grid_search(bench):
    src, tgt, _, _ = bench
    ix = make_pseudo_sources(src, 1, 0.2, seed=2).index_lists[0]
    plan = PseudoSourcePlan.from_groups([ix] * 3, src.n)
    ens = fit_ensemble(src, plan)
    grid = GridSpec((0.0, 0.3, 0.6), (0.0, 0.5))
    e1, e2, res = lodo_cv(grid, src, plan, tgt, FAST, ensemble=ens)
    held = src.subset(ix)
    in_fold = np.zeros(grid.shape)
    for i, j, a, b in grid.cells():
        in_fold[i, j] = evaluate(sel.train_cell(ens, tgt, a, b, FAST), held).accuracy
    for k in range(3):
        np.testing.assert_array_equal(res.samples[k], in_fold)
    g1, g2, _ = grid_search(grid, held, ens, tgt, FAST)
    assert (e1, e2) == (g1, g2)


# --- K selection --------------------------------------------------------------------------


def test_select_k_single_candidate(bench):
    src = bench[0]
    assert select_k(src, [1]) == 1


def test_select_k_defaults_include_ten():
    assert 10 in DEFAULT_K_CANDIDATES


def test_select_k_homogeneous_plateau():
    rng = np.random.default_rng(0)
    y = np.arange(300) % 2
    src = LabeledSet(rng.normal(size=(300, 2)) + np.array([[-1.5, 0], [1.5, 0]])[y], y, 2)
    cands = [1, 2, 4, 8]
    means, ses = k_scores(src, cands, folds=5, seed=0)
    # the score barely moves with K: every candidate is within one SE of the best
    assert np.all(means >= means.max() - ses[np.argmax(means)])
    assert select_k(src, cands, folds=5, seed=0) == 1


def test_select_k_fold_too_small():
    src = LabeledSet(np.random.default_rng(1).normal(size=(12, 2)), np.array([0] * 9 + [1] * 3), 2)
    with pytest.raises(ValueError, match="class 1"):
        select_k(src, [2, 3], folds=5)


# --- sweeps -------------------------------------------------------------------------------


def test_sweep_single_seed_zero_sd_and_baseline_cell(bench):
    src, tgt, truth, _ = bench
    grid = GridSpec((0.0, 0.5), (0.0, 0.5))
    res = sweep_heatmap(grid, [7], src, tgt, truth, FAST, K=4)
    assert np.all(res.sd == 0) and res.n_seeds == 1
    ens = fit_ensemble(src, make_pseudo_sources(src, 4, 0.2, 7))
    theta, _ = self_train(ens, tgt, np.full(4, 0.25), replace(FAST, seed=7))
    assert abs(res.mean[0, 0] - evaluate(theta, truth).accuracy) <= 1e-12


def test_sweep_seed_order_invariance(bench):
    src, tgt, truth, _ = bench
    grid = GridSpec((0.0, 0.5), (0.0,))
    a = sweep_heatmap(grid, [0, 1, 2], src, tgt, truth, FAST, K=3)
    b = sweep_heatmap(grid, [2, 0, 1], src, tgt, truth, FAST, K=3)
    assert a.to_csv() == b.to_csv()
    with pytest.raises(ValueError):
        sweep_heatmap(grid, [], src, tgt, truth, FAST)


# --- benchmark protocol --------------------------------------------------------------------


def test_benchmark_run_shapes():
    grid = GridSpec((0.0, 0.6), (0.0, 0.6))
    out = sel.spurious_benchmark_run(0, grid=grid, cfg=TrainConfig(epochs=5), n_test=100)
    assert out.test_table.shape == (2, 2)
    assert out.selected in [(a, b) for _, _, a, b in grid.cells()]
    assert 0 <= out.erm_accuracy <= 1
