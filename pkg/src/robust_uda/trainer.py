"""Robust minimax training of a linear head on target embeddings.

Each iteration draws a target minibatch and

1. pushes every embedding up the loss inside an L2 ball of radius ``eps1``
   (projected gradient ascent),
2. reweights the conditional estimators by an exponentiated-gradient step on
   their per-group losses, projected back onto the simplex intersected with
   the ``eps2`` ball around ``beta_bar``,
3. takes a gradient step on the classifier against the re-mixed soft labels
   at the perturbed embeddings.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditionals import ConditionalEnsemble, mix_probs
from .dataset import STREAM_TRAIN, LabeledSet, UnlabeledSet, make_rng, read_container, write_container
from .numeric import log_softmax, on_simplex, project_ball, project_simplex_ball, softmax

FEASIBILITY_TOL = 1e-8


class TrainingDiverged(RuntimeError):
    """Non-finite loss during training; ``trace`` holds the iterations up to the failure."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True, eq=False)
class AmbiguityConfig:
    eps1: float
    eps2: float
    beta_bar: np.ndarray

    def __post_init__(self):
        if self.eps1 < 0 or self.eps2 < 0:
            raise ValueError("ambiguity radii must be nonnegative")
        bb = np.asarray(self.beta_bar, dtype=np.float64)
        if not on_simplex(bb, tol=1e-9):
            raise ValueError("beta_bar must lie on the simplex")
        object.__setattr__(self, "beta_bar", bb)

    @classmethod
    def uniform(cls, K: int, eps1: float = 0.0, eps2: float = 0.0) -> "AmbiguityConfig":
        return cls(eps1, eps2, np.full(K, 1.0 / K))

    @property
    def K(self) -> int:
        return self.beta_bar.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    eta_z: float = 20.0
    eta_beta: float = 10.0
    eta_theta: float = 0.5
    epochs: int = 30
    batch_size: int = 32
    pgd_steps: int = 1
    seed: int = 0
    log_grad_norms: bool = True

    def __post_init__(self):
        if min(self.eta_z, self.eta_beta, self.eta_theta) <= 0:
            raise ValueError("step sizes must be > 0")
        if self.pgd_steps < 1:
            raise ValueError("pgd_steps must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass(frozen=True, eq=False)
class LinearClassifier:
    weights: np.ndarray  # (C, d)
    bias: np.ndarray  # (C,)

    @classmethod
    def zeros(cls, class_count: int, dim: int) -> "LinearClassifier":
        return cls(np.zeros((class_count, dim)), np.zeros(class_count))

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.weights.T + self.bias

    def predict_proba(self, z: np.ndarray) -> np.ndarray:
        return softmax(self.logits(z))

    def predict(self, z: np.ndarray) -> np.ndarray:
        # np.argmax breaks ties toward the lowest class index
        return np.argmax(self.logits(z), axis=-1)


@dataclass
class TrainTrace:
    loss: list = field(default_factory=list)
    grad_norm_beta: list = field(default_factory=list)
    grad_norm_theta: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    max_shift: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loss)

    def record(self, loss, gnb, gnt, beta, shift):
        self.loss.append(float(loss))
        self.grad_norm_beta.append(float(gnb))
        self.grad_norm_theta.append(float(gnt))
        self.beta.append(np.array(beta, dtype=np.float64))
        self.max_shift.append(float(shift))

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {
            "loss": np.array(self.loss),
            "grad_norm_beta": np.array(self.grad_norm_beta),
            "grad_norm_theta": np.array(self.grad_norm_theta),
            "beta": np.array(self.beta),
            "max_shift": np.array(self.max_shift),
        }

    def to_csv(self) -> str:
        K = len(self.beta[0]) if self.beta else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "loss", "grad_norm_beta", "grad_norm_theta"] + [f"beta_{k}" for k in range(K)])
        for t in range(len(self)):
            w.writerow(
                [t, repr(self.loss[t]), repr(self.grad_norm_beta[t]), repr(self.grad_norm_theta[t])]
                + [repr(float(b)) for b in self.beta[t]]
            )
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Loss and gradients of z' -> CE(softmax(W z' + b), y)
# ---------------------------------------------------------------------------


def pointwise_loss(theta: LinearClassifier, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cross-entropy of the classifier at ``z`` against soft labels ``y``, per row."""
    return -np.sum(y * log_softmax(theta.logits(z)), axis=-1)


def grad_z(theta: LinearClassifier, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    pi = theta.predict_proba(z)
    mass = np.sum(y, axis=-1, keepdims=True)
    return (mass * pi - y) @ theta.weights


def theta_grad(theta: LinearClassifier, z: np.ndarray, y: np.ndarray):
    """Minibatch-mean loss and its gradient: ``(pi - y) z^T`` for W, ``pi - y`` for b."""
    z = np.atleast_2d(z)
    y = np.atleast_2d(y)
    logp = log_softmax(theta.logits(z))
    n = z.shape[0]
    resid = (np.sum(y, axis=-1, keepdims=True) * np.exp(logp) - y) / n
    loss = -np.sum(y * logp) / n
    return loss, resid.T @ z, resid.sum(axis=0)


def ascend_z(
    theta: LinearClassifier,
    z_tg: np.ndarray,
    y: np.ndarray,
    eps1: float,
    eta_z: float,
    steps: int = 1,
) -> np.ndarray:
    """Projected gradient ascent on the loss, started at ``z_tg`` and kept in its ``eps1`` ball."""
    z_tg = np.asarray(z_tg, dtype=np.float64)
    if eps1 < 0:
        raise ValueError("eps1 must be nonnegative")
    if eps1 == 0 or eta_z == 0:
        return z_tg.copy()
    z = z_tg
    for _ in range(steps):
        z = project_ball(z + eta_z * grad_z(theta, z, y), z_tg, eps1)
    return z


def eg_step(beta: np.ndarray, losses: np.ndarray, eta_beta: float) -> np.ndarray:
    """Exponentiated-gradient ascent on the simplex, before any projection."""
    beta = np.asarray(beta, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if beta.shape != losses.shape:
        raise ValueError("beta and losses must have the same length")
    if not np.any(beta > 0):
        raise ValueError("exponentiated gradient needs a nonzero weight vector")
    if np.all(losses == losses[0]):
        return beta.copy()
    expo = eta_beta * losses
    w = beta * np.exp(expo - expo.max())
    return w / w.sum()


def ascend_beta(
    beta: np.ndarray,
    per_group_losses: np.ndarray,
    eta_beta: float,
    beta_bar: np.ndarray,
    eps2: float,
) -> np.ndarray:
    """One projected exponentiated-gradient step on the mixture weights."""
    return project_simplex_ball(eg_step(beta, per_group_losses, eta_beta), beta_bar, eps2)


def descend_theta(theta: LinearClassifier, z_prime: np.ndarray, y: np.ndarray, eta_theta: float) -> LinearClassifier:
    _, gW, gb = theta_grad(theta, z_prime, y)
    return LinearClassifier(theta.weights - eta_theta * gW, theta.bias - eta_theta * gb)


def group_losses(theta: LinearClassifier, z: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Minibatch-mean cross-entropy against each conditional, shape ``(K,)``."""
    logp = log_softmax(theta.logits(z))
    return -np.sum(probs * logp, axis=-1).mean(axis=-1)


def minibatches(n: int, cfg: TrainConfig):
    rng = make_rng(cfg.seed, STREAM_TRAIN)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            yield perm[start : start + cfg.batch_size]


def _check_inputs(ensemble, target, K, theta0):
    if ensemble.feature_dim != target.dim:
        raise ValueError(f"ensemble expects d={ensemble.feature_dim}, target has d={target.dim}")
    if K != ensemble.K:
        raise ValueError(f"beta_bar has length {K}, ensemble has K={ensemble.K}")
    if theta0 is None:
        return LinearClassifier.zeros(ensemble.class_count, ensemble.feature_dim)
    if theta0.weights.shape != (ensemble.class_count, ensemble.feature_dim):
        raise ValueError("theta0 shape does not match the ensemble")
    return LinearClassifier(theta0.weights.copy(), theta0.bias.copy())


def train(
    ensemble: ConditionalEnsemble,
    target: UnlabeledSet,
    amb: AmbiguityConfig,
    cfg: TrainConfig,
    theta0: LinearClassifier | None = None,
) -> tuple[LinearClassifier, TrainTrace]:
    """Minimize the robust surrogate by alternating z', beta and theta updates.

    The trace records, per iteration, the minibatch loss at the perturbed
    embeddings, the norm of the per-group loss vector (the beta gradient),
    the classifier gradient norm, the updated beta and the largest
    perturbation norm in the batch.
    """
    theta = _check_inputs(ensemble, target, amb.K, theta0)
    Z = target.features
    probs = ensemble.predict_all(Z)  # (K, m, C)
    beta = amb.beta_bar.copy()
    trace = TrainTrace()
    for idx in minibatches(target.n, cfg):
        zb, pb = Z[idx], probs[:, idx, :]
        y = mix_probs(beta, pb)
        zp = ascend_z(theta, zb, y, amb.eps1, cfg.eta_z, cfg.pgd_steps)
        gl = group_losses(theta, zp, pb)
        beta = ascend_beta(beta, gl, cfg.eta_beta, amb.beta_bar, amb.eps2)
        y = mix_probs(beta, pb)
        loss, gW, gb = theta_grad(theta, zp, y)
        shift = np.linalg.norm(zp - zb, axis=-1).max()
        trace.record(loss, np.linalg.norm(gl), np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)), beta, shift)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {len(trace) - 1}", trace)
        theta = LinearClassifier(theta.weights - cfg.eta_theta * gW, theta.bias - cfg.eta_theta * gb)
    return theta, trace


def self_train(
    ensemble: ConditionalEnsemble,
    target: UnlabeledSet,
    beta_bar: np.ndarray,
    cfg: TrainConfig,
    theta0: LinearClassifier | None = None,
) -> tuple[LinearClassifier, TrainTrace]:
    """Plain self-training: SGD on the fixed soft pseudo-labels ``y(beta_bar, x)``.

    Reference loop without either robustness layer; the trace carries the
    same diagnostics as :func:`train` so the two can be compared directly.
    """
    beta_bar = np.asarray(beta_bar, dtype=np.float64)
    theta = _check_inputs(ensemble, target, beta_bar.shape[0], theta0)
    Z = target.features
    probs = ensemble.predict_all(Z)
    trace = TrainTrace()
    for idx in minibatches(target.n, cfg):
        zb, pb = Z[idx], probs[:, idx, :]
        y = mix_probs(beta_bar, pb)
        gl = group_losses(theta, zb, pb)
        loss, gW, gb = theta_grad(theta, zb, y)
        trace.record(loss, np.linalg.norm(gl), np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)), beta_bar, 0.0)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {len(trace) - 1}", trace)
        theta = LinearClassifier(theta.weights - cfg.eta_theta * gW, theta.bias - cfg.eta_theta * gb)
    return theta, trace


# ---------------------------------------------------------------------------
# Surrogate objective evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InnerConfig:
    pgd_steps: int = 50
    eta_beta: float = 1.0
    beta_tol: float = 1e-8
    max_beta_iters: int = 300


@dataclass
class SurrogateResult:
    value: float
    beta: np.ndarray
    z_prime: np.ndarray
    converged: bool


def _starts(theta, z, y, eps1):
    """Multi-start points for the inner max: the anchor, +/- the gradient
    direction, and one push toward each class's logit."""
    starts = [z]
    g = grad_z(theta, z, y)
    gn = np.linalg.norm(g, axis=-1, keepdims=True)
    unit = np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
    starts += [z + eps1 * unit, z - eps1 * unit]
    C = theta.class_count
    for c in range(C):
        d = (np.eye(C)[c] - y) @ theta.weights
        dn = np.linalg.norm(d, axis=-1, keepdims=True)
        starts.append(z + eps1 * np.divide(d, dn, out=np.zeros_like(d), where=dn > 0))
    return np.stack(starts)  # (S, m, d)


def inner_max_z(theta, z, y, eps1, steps=50):
    """Per-row sup of the loss over the ``eps1`` ball, by multi-start PGD with backtracking.

    The loss is convex in z, so its maximum sits on the sphere and plain
    gradient ascent can stop at a local maximum; the starts cover the
    candidate directions. Returns ``(values, maximizers)``.
    """
    z = np.atleast_2d(z)
    y = np.atleast_2d(y)
    if eps1 == 0:
        return pointwise_loss(theta, z, y), z.copy()
    starts = _starts(theta, z, y, eps1)
    anchor = np.broadcast_to(z, starts.shape)
    cur = project_ball(starts, anchor, eps1)
    ys = np.broadcast_to(y, cur.shape[:2] + (y.shape[-1],))
    val = pointwise_loss(theta, cur, ys)
    step = np.full(val.shape + (1,), eps1)
    for _ in range(steps):
        g = grad_z(theta, cur, ys)
        gn = np.linalg.norm(g, axis=-1, keepdims=True)
        dirn = np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
        pending = np.ones(val.shape, dtype=bool)
        for _ in range(30):
            cand = project_ball(cur + step * dirn, anchor, eps1)
            cval = pointwise_loss(theta, cand, ys)
            ok = pending & (cval >= val)
            cur = np.where(ok[..., None], cand, cur)
            val = np.where(ok, cval, val)
            pending &= ~ok
            if not pending.any():
                break
            step = np.where(pending[..., None], 0.5 * step, step)
        step = np.minimum(2.0 * step, 2.0 * eps1)
    best = np.argmax(val, axis=0)
    rows = np.arange(z.shape[0])
    return val[best, rows], cur[best, rows]


def surrogate_value(
    theta: LinearClassifier,
    ensemble: ConditionalEnsemble,
    target: UnlabeledSet,
    amb: AmbiguityConfig,
    inner_cfg: InnerConfig = InnerConfig(),
) -> SurrogateResult:
    """Robust surrogate: sup over feasible beta of the target mean of the per-point sup over z'.

    The objective is convex in beta (a mean of maxima of functions linear in
    beta), so its maximum lies on the boundary of the feasible set. Ascent
    runs exponentiated-gradient steps (Danskin gradient: per-group losses at
    the current maximizers) from ``beta_bar`` and from the projection of
    every vertex; the best value visited is reported.
    """
    if amb.K != ensemble.K:
        raise ValueError("beta_bar length does not match ensemble K")
    Z = target.features
    probs = ensemble.predict_all(Z)

    def objective(beta):
        vals, zs = inner_max_z(theta, Z, mix_probs(beta, probs), amb.eps1, inner_cfg.pgd_steps)
        return float(vals.mean()), zs

    starts = [amb.beta_bar.copy()]
    if amb.eps2 > 0:
        starts += [project_simplex_ball(np.eye(amb.K)[k], amb.beta_bar, amb.eps2) for k in range(amb.K)]
    best = (-np.inf, None, None)
    converged = True
    for beta in starts:
        val, zs = objective(beta)
        if val > best[0]:
            best = (val, beta, zs)
        if amb.eps2 == 0:
            continue
        for it in range(inner_cfg.max_beta_iters):
            gl = group_losses(theta, zs, probs)
            new = ascend_beta(beta, gl, inner_cfg.eta_beta, amb.beta_bar, amb.eps2)
            moved = np.linalg.norm(new - beta)
            beta = new
            val, zs = objective(beta)
            if val > best[0]:
                best = (val, beta, zs)
            if moved < inner_cfg.beta_tol:
                break
        else:
            converged = False
    if not converged:
        warnings.warn("surrogate_value: beta ascent hit max_beta_iters before converging", RuntimeWarning)
    return SurrogateResult(best[0], best[1], best[2], converged)


# ---------------------------------------------------------------------------
# Evaluation and persistence
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    per_class_accuracy: list
    n_test: int
    confusion: np.ndarray

    def to_dict(self, config_hash: str = "") -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "n_test": self.n_test,
            "config_hash": config_hash,
        }


def evaluate(theta, truth: LabeledSet) -> Metrics:
    """Accuracy of ``argmax(W z + b)`` (ties to the lowest index) plus per-class accuracy.

    Classes absent from ``truth`` report ``None``.
    """
    if truth.n == 0:
        raise ValueError("evaluate: empty labeled set")
    W, b = theta.weights, theta.bias
    if W.shape[1] != truth.dim:
        raise ValueError(f"classifier expects d={W.shape[1]}, data has d={truth.dim}")
    if W.shape[0] != truth.class_count:
        raise ValueError(f"classifier has C={W.shape[0]}, data declares C={truth.class_count}")
    pred = np.argmax(truth.features @ W.T + b, axis=-1)
    C = truth.class_count
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (truth.labels, pred), 1)
    per_class = []
    for c in range(C):
        total = confusion[c].sum()
        per_class.append(None if total == 0 else float(confusion[c, c] / total))
    return Metrics(float(np.trace(confusion) / truth.n), per_class, int(truth.n), confusion)


def save_classifier(path, theta: LinearClassifier, config_hash: str = "") -> None:
    header = {"C": theta.class_count, "d": theta.feature_dim, "config_hash": config_hash}
    write_container(path, "classifier", header, [theta.weights, theta.bias[None, :]])


def load_classifier(path) -> tuple[LinearClassifier, dict]:
    meta, blocks = read_container(path, "classifier")
    W, b = blocks
    if W.shape != (meta["C"], meta["d"]) or b.shape != (1, meta["C"]):
        raise ValueError("classifier blocks disagree with header")
    return LinearClassifier(W, b[0]), meta


def write_trace_csv(path, trace: TrainTrace) -> None:
    Path(path).write_text(trace.to_csv())
