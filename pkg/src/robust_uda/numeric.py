"""Numeric kernels: softmax, cross-entropy and the projections used by the trainer."""
from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-12


class ProjectionError(RuntimeError):
    """Raised when Dykstra's alternating projections fail to converge.

    The last iterate is kept on ``last_iterate`` so callers can inspect it.
    """

    def __init__(self, message: str, last_iterate: np.ndarray):
        super().__init__(message)
        self.last_iterate = last_iterate


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift stabilization.

    Accepts a single logit vector or a 2D array with one vector per row.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("softmax: logits must be finite")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(pred: np.ndarray, target: np.ndarray) -> np.ndarray | float:
    """Cross-entropy ``-sum_y target_y * log(pred_y)`` between probability vectors.

    ``pred`` is clamped to ``[1e-12, 1]`` inside the log. Batched inputs
    (one vector per row) return one value per row.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"cross_entropy: shape mismatch {pred.shape} vs {target.shape}")
    out = -np.sum(target * np.log(np.clip(pred, PROB_FLOOR, 1.0)), axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def project_ball(point: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the closed ball ``{x : ||x - center|| <= radius}``.

    Works row-wise when ``point`` and ``center`` are 2D. Points already inside
    the ball are returned unchanged; ``radius == 0`` returns the center.
    """
    point = np.asarray(point, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if point.shape != center.shape:
        raise ValueError(f"project_ball: shape mismatch {point.shape} vs {center.shape}")
    if radius < 0:
        raise ValueError("project_ball: radius must be nonnegative")
    if radius == 0:
        return center.copy()
    diff = point - center
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    outside = norm > radius
    scale = np.where(outside, radius / np.where(outside, norm, 1.0), 1.0)
    return np.where(outside, center + diff * scale, point)


def on_simplex(v: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    v = np.asarray(v, dtype=np.float64)
    return bool(v.ndim == 1 and v.size > 0 and np.all(v >= 0) and abs(v.sum() - 1.0) <= tol)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex.

    Sort-and-threshold method: find the largest ``rho`` with
    ``u_rho > (sum_{j<=rho} u_j - 1) / rho`` on the decreasingly sorted
    input, then shift and clip. O(K log K).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("project_simplex: expected a nonempty 1D vector")
    if not np.isfinite(v).all():
        raise ValueError("project_simplex: input must be finite")
    if on_simplex(v):
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u * ks > css - 1.0)[0][-1]
    tau = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def project_simplex_ball(
    v: np.ndarray,
    center: np.ndarray,
    radius: float,
    method: str = "exact",
    tol: float = 1e-9,
    max_rounds: int = 1000,
) -> np.ndarray:
    """Projection onto the simplex intersected with an L2 ball around ``center``.

    The returned point lies on the simplex and within ``radius + 1e-8`` of
    ``center``. Inputs already on the simplex are handled in closed form: the
    ball projection of a simplex point toward a simplex center is a convex
    combination of the two, hence already in the intersection.

    Parameters
    ----------
    v : np.ndarray
        Point to project, length K.
    center : np.ndarray
        Ball center; must lie on the simplex.
    radius : float
        Ball radius, nonnegative.
    method : {"exact", "dykstra"}
        ``"exact"`` solves the one-dimensional KKT condition on the ball
        multiplier by bisection. ``"dykstra"`` runs Dykstra's alternating
        projections, which can stall when both constraints are active at a
        shallow angle.
    tol, max_rounds
        Dykstra stopping rule: iterate change and the gap between the two
        partial projections both below ``tol``, at most ``max_rounds`` rounds.

    Raises
    ------
    ValueError
        On a negative radius, a center off the simplex or an unknown method.
    ProjectionError
        If Dykstra does not converge within ``max_rounds``.
    """
    v = np.asarray(v, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if radius < 0:
        raise ValueError("project_simplex_ball: infeasible, radius must be >= 0")
    if v.shape != center.shape:
        raise ValueError(f"project_simplex_ball: shape mismatch {v.shape} vs {center.shape}")
    if not on_simplex(center, tol=1e-9):
        raise ValueError("project_simplex_ball: center must lie on the simplex")
    if method not in ("exact", "dykstra"):
        raise ValueError(f"project_simplex_ball: unknown method {method!r}")
    if radius == 0:
        return center.copy()
    if on_simplex(v):
        return project_ball(v, center, radius)

    s = project_simplex(v)
    if np.linalg.norm(s - center) <= radius:
        return s
    if method == "exact":
        return _simplex_ball_exact(v, center, radius)
    return _simplex_ball_dykstra(v, center, radius, tol, max_rounds)


def _simplex_ball_exact(v, center, radius):
    # Minimizer of 0.5||x-v||^2 + 0.5*mu*||x-c||^2 over the simplex is
    # P((1-t) v + t c) with t = mu / (1 + mu); its distance to c is
    # nonincreasing in t, so bisect t for the ball to become active.
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        x = project_simplex((1.0 - mid) * v + mid * center)
        if np.linalg.norm(x - center) > radius:
            lo = mid
        else:
            hi = mid
    return project_simplex((1.0 - hi) * v + hi * center)


def _simplex_ball_dykstra(v, center, radius, tol, max_rounds):
    x = v.copy()
    p = np.zeros_like(v)
    q = np.zeros_like(v)
    y = x
    for _ in range(max_rounds):
        y = project_simplex(x + p)
        p = x + p - y
        x_new = project_ball(y + q, center, radius)
        q = y + q - x_new
        change = np.linalg.norm(x_new - x)
        gap = np.linalg.norm(x_new - y)
        x = x_new
        if change < tol and gap < tol and np.linalg.norm(y - center) <= radius + 1e-8:
            return y
    raise ProjectionError(
        f"project_simplex_ball: no convergence after {max_rounds} rounds", last_iterate=y
    )
