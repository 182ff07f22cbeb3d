"""Dense matrix primitives shared by every loss in the package.

All training math runs on float64 ndarrays. Checkpoints downcast to
float32 on disk; see topodistill.checkpoint.
"""

from __future__ import annotations

import numpy as np

# Guard applied to every row norm before division.
NORM_EPS = 1e-12

SIMILARITIES = ("cosine", "neg_euclidean")


def assert_finite(x: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (x_hat, n) where x_hat has unit rows and n is the guarded norm.

    Rows with norm below NORM_EPS are divided by NORM_EPS instead, so the
    result is always finite.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    guarded = np.maximum(norms, NORM_EPS)
    return x / guarded[:, None], guarded


def normalize_rows_backward(
    upstream: np.ndarray, x_hat: np.ndarray, norms: np.ndarray
) -> np.ndarray:
    """Backprop through normalize_rows.

    upstream is dL/dx_hat; norms is the guarded norm returned by the
    forward pass. Where the guard was active the map is linear (x / eps).
    """
    proj = np.einsum("ij,ij->i", upstream, x_hat)
    grad = (upstream - proj[:, None] * x_hat) / norms[:, None]
    active = norms <= NORM_EPS
    if np.any(active):
        grad[active] = upstream[active] / NORM_EPS
    return grad


def cosine_matrix(b: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities, out[i, j] = cos(b_i, d_j).

    Zero rows are epsilon-guarded rather than erroring; their similarities
    come out near zero.
    """
    if b.ndim != 2 or d.ndim != 2 or b.shape[1] != d.shape[1]:
        raise ValueError(f"incompatible shapes {b.shape} and {d.shape}")
    b_hat, _ = normalize_rows(b)
    d_hat, _ = normalize_rows(d)
    return b_hat @ d_hat.T


def similarity_forward(
    b: np.ndarray, d: np.ndarray, kind: str = "cosine"
) -> tuple[np.ndarray, dict]:
    """Similarity matrix plus the cache needed by similarity_backward."""
    if kind == "cosine":
        b_hat, bn = normalize_rows(b)
        d_hat, dn = normalize_rows(d)
        s = b_hat @ d_hat.T
        return s, {"kind": kind, "b_hat": b_hat, "bn": bn, "d_hat": d_hat, "dn": dn}
    if kind == "neg_euclidean":
        sq = (
            np.einsum("ij,ij->i", b, b)[:, None]
            + np.einsum("ij,ij->i", d, d)[None, :]
            - 2.0 * (b @ d.T)
        )
        dist = np.sqrt(np.maximum(sq, 0.0) + NORM_EPS**2)
        return -dist, {"kind": kind, "b": b, "d": d, "dist": dist}
    raise ValueError(f"unknown similarity kind {kind!r}")


def similarity_backward(
    upstream: np.ndarray, cache: dict
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through similarity_forward.

    Returns (dL/db, dL/dd) treating the two inputs as independent; when the
    forward pass was called with b is d, the caller adds both pieces.
    """
    if cache["kind"] == "cosine":
        d_hat_grad = upstream.T @ cache["b_hat"]
        b_hat_grad = upstream @ cache["d_hat"]
        db = normalize_rows_backward(b_hat_grad, cache["b_hat"], cache["bn"])
        dd = normalize_rows_backward(d_hat_grad, cache["d_hat"], cache["dn"])
        return db, dd
    # neg_euclidean: s = -dist, d(dist)/d(sq) = 1 / (2 dist)
    w = upstream * (-0.5 / cache["dist"])
    b, d = cache["b"], cache["d"]
    db = 2.0 * w.sum(axis=1)[:, None] * b - 2.0 * (w @ d)
    dd = 2.0 * w.sum(axis=0)[:, None] * d - 2.0 * (w.T @ b)
    return db, dd


def frob_sq_distance(
    x: np.ndarray, y: np.ndarray, mask: np.ndarray | None = None
) -> float:
    """Squared Frobenius distance, optionally restricted to mask == 1 entries."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    diff = x - y
    if mask is None:
        return float(np.einsum("ij,ij->", diff, diff))
    if mask.shape != x.shape:
        raise ValueError(f"mask shape {mask.shape} does not match {x.shape}")
    return float(np.einsum("ij,ij,ij->", mask, diff, diff))


def grad_check(loss_and_grad, point: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central differences.

    loss_and_grad maps an ndarray to (scalar loss, gradient ndarray of the
    same shape). The error per entry is |a - n| / max(1, |a| + |n|).
    """
    _, analytic = loss_and_grad(point)
    if analytic.shape != point.shape:
        raise ValueError("gradient shape does not match point shape")
    worst = 0.0
    x = point.astype(np.float64, copy=True)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = float(loss_and_grad(x)[0])
        flat[i] = orig - step
        minus = float(loss_and_grad(x)[0])
        flat[i] = orig
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise FloatingPointError(f"non-finite loss at probe index {i}")
        numeric = (plus - minus) / (2.0 * step)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
