"""Numerically safe primitives and a finite-difference gradient checker.

All routines work on float64 numpy arrays. Vector functions operate along the
last axis, so a ``(n, d)`` matrix is treated as ``n`` independent rows.
"""

import numpy as np

from .errors import NonFiniteError

DEFAULT_EPS = 1e-12


def l2_normalize(v, eps=DEFAULT_EPS):
    """Return ``v / max(||v||, eps)`` row-wise.

    A zero vector maps to zero instead of NaN.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, eps)


def l2_normalize_vjp(v, upstream, eps=DEFAULT_EPS):
    """Vector-Jacobian product of :func:`l2_normalize`.

    Computes ``(I - v_hat v_hat^T) upstream / ||v||`` for each row; rows with
    norm below ``eps`` get a zero gradient.
    """
    v = np.asarray(v, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.maximum(norm, eps)
    v_hat = v / safe
    radial = np.sum(v_hat * upstream, axis=-1, keepdims=True)
    out = (upstream - v_hat * radial) / safe
    return np.where(norm < eps, 0.0, out)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    return np.exp(log_softmax(logits, axis=axis))


def grad_check(f, analytic_grad, point, step=1e-5, num_coords=64, seed=0):
    """Compare an analytic gradient against central finite differences.

    Args:
        f: callable mapping an array shaped like ``point`` to a scalar.
        analytic_grad: gradient of ``f`` at ``point``.
        point: the array at which to check.
        step: finite-difference step.
        num_coords: number of coordinates to sample (all if the array is smaller).
        seed: seed for the coordinate sample.

    Returns:
        The maximum over sampled coordinates of
        ``|fd - analytic| / max(|fd|, |analytic|, 1e-8)``.

    At least half of the sample is drawn from coordinates where the analytic
    gradient is non-zero, so sparse gradients over a large table are still
    exercised; the rest is uniform over all coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=np.float64, copy=True)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != point.shape:
        raise ValueError(f"gradient shape {analytic_grad.shape} != point shape {point.shape}")

    size = point.size
    rng = np.random.default_rng(seed)
    if size <= num_coords:
        coords = np.arange(size)
    else:
        nonzero = np.flatnonzero(analytic_grad.ravel())
        n_active = min(len(nonzero), num_coords // 2)
        active = rng.choice(nonzero, size=n_active, replace=False) if n_active else np.array([], int)
        rest = rng.choice(size, size=num_coords - n_active, replace=False)
        coords = np.unique(np.concatenate([active, rest]))

    flat = point.ravel()
    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + step
        f_plus = f(point)
        flat[c] = orig - step
        f_minus = f(point)
        flat[c] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"function is not finite near coordinate {int(c)}")
        fd = (f_plus - f_minus) / (2.0 * step)
        an = analytic_grad.flat[c]
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, err)
    return float(worst)
