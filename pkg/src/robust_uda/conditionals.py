"""Per-pseudo-source logistic conditionals and the soft pseudo-label mixture."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset import LabeledSet, PseudoSourcePlan, read_container, write_container
from .numeric import log_softmax, on_simplex, softmax

ARMIJO_C = 1e-4


class FitError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LogisticModel:
    weights: np.ndarray  # (C, d)
    bias: np.ndarray  # (C,)
    lam: float
    degenerate: bool = False
    n_iter: int = 0
    converged: bool = False

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]


def predict_proba(model, z: np.ndarray) -> np.ndarray:
    """``softmax(W z + b)`` for one feature vector or a batch of rows."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.weights.shape[1]:
        raise ValueError(f"feature dimension {z.shape[-1]} != model dimension {model.weights.shape[1]}")
    return softmax(z @ model.weights.T + model.bias)


def logistic_objective(weights, bias, X, Y, lam):
    """Mean multinomial cross-entropy plus ``lam/2 * ||W||_F^2`` (bias unpenalized).

    ``Y`` is one-hot (n, C). Returns ``(value, grad_W, grad_b)``.
    """
    logits = X @ weights.T + bias
    logp = log_softmax(logits)
    n = X.shape[0]
    value = -np.sum(Y * logp) / n + 0.5 * lam * np.sum(weights * weights)
    resid = (np.exp(logp) - Y) / n
    return value, resid.T @ X + lam * weights, resid.sum(axis=0)


@np.errstate(over="ignore", invalid="ignore")  # non-finite objectives raise FitError below
def fit_logistic(group: LabeledSet, lam: float = 1e-4, max_iters: int = 2000, tol: float = 1e-6) -> LogisticModel:
    """L2-regularized multinomial logistic regression by full-batch gradient descent.

    Starts from zero parameters. Each step backtracks (halving) from twice
    the last accepted step until the Armijo condition holds, so the objective
    never increases. Stops when the gradient's max-norm drops below ``tol``.
    A group holding a single class is fitted anyway and flagged ``degenerate``.
    """
    if group.n == 0:
        raise FitError("cannot fit on an empty group")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    X = group.features
    C = group.class_count
    Y = np.eye(C)[group.labels]
    W = np.zeros((C, X.shape[1]))
    b = np.zeros(C)
    f, gW, gb = logistic_objective(W, b, X, Y, lam)
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        gmax = max(np.abs(gW).max(), np.abs(gb).max())
        if gmax < tol:
            converged = True
            break
        gsq = np.sum(gW * gW) + np.sum(gb * gb)
        step *= 2.0
        while True:
            W_new, b_new = W - step * gW, b - step * gb
            f_new, gW_new, gb_new = logistic_objective(W_new, b_new, X, Y, lam)
            if not np.isfinite(f_new):
                raise FitError("non-finite objective during logistic fit")
            if f_new <= f - ARMIJO_C * step * gsq:
                break
            step *= 0.5
            if step < 1e-20:
                break
        if step < 1e-20:
            # no descent possible at machine precision: treat as stationary
            converged = True
            break
        W, b, f, gW, gb = W_new, b_new, f_new, gW_new, gb_new
    if not np.isfinite(f):
        raise FitError("non-finite objective during logistic fit")
    degenerate = np.unique(group.labels).size < 2
    return LogisticModel(W, b, float(lam), bool(degenerate), it, converged)


@dataclass(frozen=True, eq=False)
class ConditionalEnsemble:
    models: tuple[LogisticModel, ...]

    def __post_init__(self):
        if len(self.models) < 1:
            raise ValueError("ensemble needs at least one model")
        shapes = {m.weights.shape for m in self.models}
        if len(shapes) != 1:
            raise ValueError(f"ensemble models disagree on (C, d): {sorted(shapes)}")

    @property
    def K(self) -> int:
        return len(self.models)

    @property
    def class_count(self) -> int:
        return self.models[0].class_count

    @property
    def feature_dim(self) -> int:
        return self.models[0].feature_dim

    @property
    def degenerate(self) -> list[bool]:
        return [m.degenerate for m in self.models]

    def predict_all(self, z: np.ndarray) -> np.ndarray:
        """Stacked class probabilities, shape ``(K, n, C)`` (``(K, C)`` for one vector)."""
        return np.stack([predict_proba(m, z) for m in self.models])

    def drop(self, k: int) -> "ConditionalEnsemble":
        return ConditionalEnsemble(self.models[:k] + self.models[k + 1 :])


def fit_ensemble(
    source: LabeledSet,
    plan: PseudoSourcePlan,
    lam: float = 1e-4,
    max_iters: int = 2000,
    tol: float = 1e-6,
    n_jobs: int = 1,
) -> ConditionalEnsemble:
    """Fit one logistic model per pseudo-source, each on its own rows only."""
    if plan.n_source != source.n:
        raise ValueError(f"plan drawn for {plan.n_source} rows, source has {source.n}")

    def fit_one(k):
        try:
            return fit_logistic(source.subset(plan.index_lists[k]), lam, max_iters, tol)
        except (FitError, ValueError) as exc:
            raise FitError(f"pseudo-source {k}: {exc}") from exc

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            models = list(pool.map(fit_one, range(plan.K)))
    else:
        models = [fit_one(k) for k in range(plan.K)]
    return ConditionalEnsemble(tuple(models))


def mix_probs(beta: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """``sum_k beta_k probs[k]`` for stacked per-model probabilities."""
    return np.tensordot(beta, probs, axes=1)


def soft_pseudo_label(ensemble: ConditionalEnsemble, beta: np.ndarray, z: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (ensemble.K,):
        raise ValueError(f"beta has length {beta.size}, ensemble has K={ensemble.K}")
    if not on_simplex(beta, tol=1e-9):
        raise ValueError("beta must lie on the simplex")
    return mix_probs(beta, ensemble.predict_all(z))


def save_ensemble(path, ensemble: ConditionalEnsemble, config_hash: str = "") -> None:
    """Persist as a container; parameters are stored as float32."""
    header = {
        "K": ensemble.K,
        "C": ensemble.class_count,
        "d": ensemble.feature_dim,
        "lambda": ensemble.models[0].lam,
        "degenerate": ensemble.degenerate,
        "config_hash": config_hash,
    }
    blocks = []
    for m in ensemble.models:
        blocks.append(m.weights)
        blocks.append(m.bias[None, :])
    write_container(path, "ensemble", header, blocks)


def load_ensemble(path) -> tuple[ConditionalEnsemble, dict]:
    meta, blocks = read_container(path, "ensemble")
    K, C, d = meta["K"], meta["C"], meta["d"]
    if len(blocks) != 2 * K:
        raise ValueError(f"ensemble file holds {len(blocks)} blocks, expected {2 * K}")
    models = []
    for k in range(K):
        W, b = blocks[2 * k], blocks[2 * k + 1]
        if W.shape != (C, d) or b.shape != (1, C):
            raise ValueError(f"model {k}: block shapes {W.shape}, {b.shape} disagree with header")
        models.append(LogisticModel(W, b[0], meta["lambda"], meta["degenerate"][k]))
    return ConditionalEnsemble(tuple(models)), meta
