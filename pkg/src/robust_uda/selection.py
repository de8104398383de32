"""Hyperparameter selection for the ambiguity radii and the number of pseudo-sources."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .conditionals import ConditionalEnsemble, fit_ensemble, fit_logistic
from .numeric import log_softmax
from .dataset import (
    STREAM_FOLDS,
    LabeledSet,
    PseudoSourcePlan,
    UnlabeledSet,
    make_pseudo_sources,
    make_rng,
    split_validation,
    spurious_benchmark,
    synth_generate,
)
from .trainer import AmbiguityConfig, LinearClassifier, TrainConfig, evaluate, train

DEFAULT_EPS1 = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_EPS2 = (0.0, 0.2, 0.4, 0.6, 1.0)
DEFAULT_K_CANDIDATES = tuple(range(2, 15))


class GridCellError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    eps1_values: tuple[float, ...] = DEFAULT_EPS1
    eps2_values: tuple[float, ...] = DEFAULT_EPS2

    def __post_init__(self):
        for name in ("eps1_values", "eps2_values"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ValueError(f"{name} must be nonempty")
            if vals[0] < 0:
                raise ValueError(f"{name} must be nonnegative")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, vals)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.eps1_values), len(self.eps2_values)

    def cells(self):
        for i, e1 in enumerate(self.eps1_values):
            for j, e2 in enumerate(self.eps2_values):
                yield i, j, e1, e2


@dataclass
class SweepResult:
    grid: GridSpec
    mean: np.ndarray
    sd: np.ndarray
    n_seeds: int
    samples: np.ndarray | None = None  # raw per-seed (or per-fold) tables, stacked

    def __post_init__(self):
        if self.mean.shape != self.grid.shape or self.sd.shape != self.grid.shape:
            raise ValueError("result table does not match the grid")

    def best(self) -> tuple[float, float]:
        i, j = select_cell(self.mean)
        return self.grid.eps1_values[i], self.grid.eps2_values[j]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eps1", "eps2", "mean_acc", "sd_acc", "n_seeds"])
        for i, j, e1, e2 in self.grid.cells():
            w.writerow([repr(e1), repr(e2), repr(float(self.mean[i, j])), repr(float(self.sd[i, j])), self.n_seeds])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SweepResult":
        rows = list(csv.DictReader(io.StringIO(text)))
        e1 = sorted({float(r["eps1"]) for r in rows})
        e2 = sorted({float(r["eps2"]) for r in rows})
        grid = GridSpec(tuple(e1), tuple(e2))
        mean = np.full(grid.shape, np.nan)
        sd = np.full(grid.shape, np.nan)
        for r in rows:
            i, j = e1.index(float(r["eps1"])), e2.index(float(r["eps2"]))
            mean[i, j] = float(r["mean_acc"])
            sd[i, j] = float(r["sd_acc"])
        return cls(grid, mean, sd, int(rows[0]["n_seeds"]))


def select_cell(scores: np.ndarray) -> tuple[int, int]:
    """Argmax of a score table; ties go to the smaller eps1, then the smaller eps2."""
    flat = int(np.argmax(scores))  # first maximum in row-major (eps1, eps2) order
    return divmod(flat, scores.shape[1])


def train_cell(
    ensemble: ConditionalEnsemble,
    target: UnlabeledSet,
    eps1: float,
    eps2: float,
    cfg: TrainConfig,
    beta_bar: np.ndarray | None = None,
    theta0: LinearClassifier | None = None,
) -> LinearClassifier:
    bb = np.full(ensemble.K, 1.0 / ensemble.K) if beta_bar is None else beta_bar
    try:
        theta, _ = train(ensemble, target, AmbiguityConfig(eps1, eps2, bb), cfg, theta0)
    except Exception as exc:
        raise GridCellError(f"cell (eps1={eps1}, eps2={eps2}): {exc}") from exc
    return theta


def grid_search(
    grid: GridSpec,
    val: LabeledSet,
    ensemble: ConditionalEnsemble,
    target: UnlabeledSet,
    cfg: TrainConfig,
    beta_bar: np.ndarray | None = None,
    theta0: LinearClassifier | None = None,
    order: Sequence[tuple[int, int]] | None = None,
) -> tuple[float, float, SweepResult]:
    """Train once per (eps1, eps2) cell and pick the cell with the best validation accuracy.

    ``order`` only changes the evaluation sequence; results are stored by
    cell coordinates, so the selection does not depend on it.
    """
    if val.n == 0:
        raise ValueError("grid_search: empty validation set")
    scores = np.full(grid.shape, np.nan)
    cells = list(order) if order is not None else [(i, j) for i, j, _, _ in grid.cells()]
    for i, j in cells:
        e1, e2 = grid.eps1_values[i], grid.eps2_values[j]
        theta = train_cell(ensemble, target, e1, e2, cfg, beta_bar, theta0)
        scores[i, j] = evaluate(theta, val).accuracy
    if np.isnan(scores).any():
        raise ValueError("grid_search: evaluation order did not cover every cell")
    result = SweepResult(grid, scores, np.zeros(grid.shape), 1)
    e1, e2 = result.best()
    return e1, e2, result


def lodo_cv(
    grid: GridSpec,
    source: LabeledSet,
    plan: PseudoSourcePlan,
    target: UnlabeledSet,
    cfg: TrainConfig,
    ensemble: ConditionalEnsemble | None = None,
    lam: float = 1e-4,
    max_iters: int = 2000,
    tol: float = 1e-6,
) -> tuple[float, float, SweepResult]:
    """Leave-one-pseudo-source-out selection; never touches target labels.

    For every cell and every held-out pseudo-source ``k``, train on the
    target with the other ``K - 1`` conditionals (uniform center) and score
    accuracy on the labeled rows of pseudo-source ``k``. The cell with the
    best mean score wins.
    """
    if plan.K < 2:
        raise ValueError("lodo_cv needs at least two pseudo-sources")
    if ensemble is None:
        ensemble = fit_ensemble(source, plan, lam, max_iters, tol)
    if ensemble.K != plan.K:
        raise ValueError("ensemble and plan disagree on K")
    held_out = [source.subset(ix) for ix in plan.index_lists]
    folds = [ensemble.drop(k) for k in range(plan.K)]
    scores = np.zeros((plan.K,) + grid.shape)
    for i, j, e1, e2 in grid.cells():
        for k in range(plan.K):
            scores[k, i, j] = evaluate(train_cell(folds[k], target, e1, e2, cfg), held_out[k]).accuracy
    result = SweepResult(grid, scores.mean(axis=0), scores.std(axis=0), 1, scores)
    e1, e2 = result.best()
    return e1, e2, result


def _aggregate(grid: GridSpec, per_seed: dict[int, np.ndarray]) -> SweepResult:
    # reduce in sorted-seed order so the table does not depend on run order
    stack = np.stack([per_seed[s] for s in sorted(per_seed)])
    return SweepResult(grid, stack.mean(axis=0), stack.std(axis=0), len(per_seed), stack)


def sweep_heatmap(
    grid: GridSpec,
    seeds: Iterable[int],
    source: LabeledSet,
    target: UnlabeledSet,
    truth: LabeledSet,
    cfg: TrainConfig,
    K: int = 10,
    fraction: float = 0.2,
    lam: float = 1e-4,
    max_iters: int = 2000,
    tol: float = 1e-6,
    beta_bar: np.ndarray | None = None,
) -> SweepResult:
    """Test accuracy per cell, mean and population sd over seeds.

    A seed drives both the pseudo-source plan and the minibatch order.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("sweep_heatmap needs at least one seed")
    per_seed = {}
    for seed in seeds:
        ens = fit_ensemble(source, make_pseudo_sources(source, K, fraction, seed), lam, max_iters, tol)
        run_cfg = replace(cfg, seed=seed)
        acc = np.zeros(grid.shape)
        for i, j, e1, e2 in grid.cells():
            acc[i, j] = evaluate(train_cell(ens, target, e1, e2, run_cfg, beta_bar), truth).accuracy
        per_seed[seed] = acc
    return _aggregate(grid, per_seed)


def _stratified_folds(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    rng = make_rng(seed, STREAM_FOLDS)
    assign = np.empty(labels.shape[0], dtype=np.int64)
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        if rows.size < folds:
            raise ValueError(f"class {c} has {rows.size} samples, too few for {folds} folds")
        assign[rng.permutation(rows)] = np.arange(rows.size) % folds
    return assign


def k_scores(
    source: LabeledSet,
    k_candidates: Sequence[int] = DEFAULT_K_CANDIDATES,
    folds: int = 5,
    seed: int = 0,
    fraction: float = 0.2,
    lam: float = 1e-4,
    max_iters: int = 2000,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Cross-validated held-out log-likelihood per candidate K: ``(means, standard errors)``.

    A fold's score is the per-model mean validation log-likelihood averaged
    over the K models fitted on pseudo-sources drawn from the training folds.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    assign = _stratified_folds(source.labels, folds, seed)
    per_fold = np.zeros((len(k_candidates), folds))
    for f in range(folds):
        train_set = source.subset(np.flatnonzero(assign != f))
        val = source.subset(np.flatnonzero(assign == f))
        for a, K in enumerate(k_candidates):
            ens = fit_ensemble(train_set, make_pseudo_sources(train_set, K, fraction, seed), lam, max_iters, tol)
            ll = [
                np.mean(log_softmax(val.features @ m.weights.T + m.bias)[np.arange(val.n), val.labels])
                for m in ens.models
            ]
            per_fold[a, f] = np.mean(ll)
    means = per_fold.mean(axis=1)
    ses = per_fold.std(axis=1, ddof=1) / np.sqrt(folds)
    return means, ses


def select_k(
    source: LabeledSet,
    k_candidates: Sequence[int] = DEFAULT_K_CANDIDATES,
    folds: int = 5,
    seed: int = 0,
    fraction: float = 0.2,
    lam: float = 1e-4,
    max_iters: int = 2000,
    tol: float = 1e-6,
) -> int:
    """Smallest K whose CV score is within one standard error of the best K's."""
    k_candidates = sorted(int(k) for k in k_candidates)
    if not k_candidates:
        raise ValueError("k_candidates must be nonempty")
    if len(k_candidates) == 1:
        return k_candidates[0]
    means, ses = k_scores(source, k_candidates, folds, seed, fraction, lam, max_iters, tol)
    best = int(np.argmax(means))
    threshold = means[best] - ses[best]
    return k_candidates[int(np.flatnonzero(means >= threshold)[0])]


# ---------------------------------------------------------------------------
# Spurious-correlation benchmark protocol
# ---------------------------------------------------------------------------


@dataclass
class SeedOutcome:
    seed: int
    erm_accuracy: float
    selected: tuple[float, float]
    selected_accuracy: float
    test_table: np.ndarray


@dataclass
class BenchmarkReport:
    grid: GridSpec
    outcomes: list[SeedOutcome] = field(default_factory=list)

    @property
    def erm_mean(self) -> float:
        return float(np.mean([o.erm_accuracy for o in self.outcomes]))

    @property
    def selected_mean(self) -> float:
        return float(np.mean([o.selected_accuracy for o in self.outcomes]))

    @property
    def gain(self) -> float:
        return self.selected_mean - self.erm_mean

    def heatmap(self) -> SweepResult:
        return _aggregate(self.grid, {o.seed: o.test_table for o in self.outcomes})


def spurious_benchmark_run(
    seed: int,
    grid: GridSpec = GridSpec(),
    cfg: TrainConfig = TrainConfig(),
    n_source: int = 400,
    n_unlabeled: int = 50,
    n_test: int = 500,
    val_per_class: int = 10,
    K: int = 10,
    fraction: float = 0.2,
) -> SeedOutcome:
    """One seed of the bundled benchmark: scarce unlabeled target, small labeled target validation set.

    The validation rows are drawn from the target's labels (only the
    classes present there), the next ``n_unlabeled`` rows form the unlabeled
    training target, and the rest are the test set. ERM is a logistic model
    fitted on the whole source.
    """
    spec = spurious_benchmark(seed=seed, n_source=n_source, n_target=n_unlabeled + n_test + 10 * val_per_class)
    source, _, truth = synth_generate(spec)
    present = np.unique(truth.labels).tolist()
    val, rest = split_validation(truth, val_per_class, seed, classes=present)
    unlabeled = rest.subset(np.arange(n_unlabeled)).unlabeled()
    test = rest.subset(np.arange(n_unlabeled, min(rest.n, n_unlabeled + n_test)))

    erm = fit_logistic(source)
    ens = fit_ensemble(source, make_pseudo_sources(source, K, fraction, seed))
    run_cfg = replace(cfg, seed=seed)
    val_acc = np.zeros(grid.shape)
    test_acc = np.zeros(grid.shape)
    for i, j, e1, e2 in grid.cells():
        theta = train_cell(ens, unlabeled, e1, e2, run_cfg)
        val_acc[i, j] = evaluate(theta, val).accuracy
        test_acc[i, j] = evaluate(theta, test).accuracy
    i, j = select_cell(val_acc)
    return SeedOutcome(
        seed,
        evaluate(erm, test).accuracy,
        (grid.eps1_values[i], grid.eps2_values[j]),
        float(test_acc[i, j]),
        test_acc,
    )


def spurious_benchmark_report(seeds: Iterable[int], **kwargs) -> BenchmarkReport:
    report = BenchmarkReport(kwargs.get("grid", GridSpec()))
    for seed in seeds:
        report.outcomes.append(spurious_benchmark_run(seed, **kwargs))
    return report
