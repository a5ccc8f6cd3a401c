"""Heat kernel of the flat torus and the Varadhan cost -2t log K.

On T^m the heat kernel of d/dt = (1/2) Laplacian factorizes over axes into
periodized Gaussians,

    K(t, x, y) = prod_k (2 pi t)^(-1/2) sum_n exp(-(d_k + 2 pi n)^2 / (2t)),

with d = y - x.  All quantities below are evaluated axis by axis from the
truncated image sum.  The cost and its derivatives go through a log-sum-exp
anchored at the nearest image so that no exponent is ever positive; the
softmax weights of the images give the gradient (weighted mean offset) and
the Hessian (weighted offset variance).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import InvalidInputError
from .manifold import TWO_PI, FlatTorus


@dataclass(frozen=True)
class KernelConfig:
    trunc_eps: float = 1e-14
    max_images: int = 64

    def __post_init__(self):
        if not 0.0 < self.trunc_eps <= 1e-6:
            raise InvalidInputError(f"trunc_eps must lie in (0, 1e-6], got {self.trunc_eps}")
        if int(self.max_images) != self.max_images or self.max_images < 1:
            raise InvalidInputError(f"max_images must be an integer >= 1, got {self.max_images}")


DEFAULT_CONFIG = KernelConfig()


@dataclass(frozen=True)
class CostEval:
    """Value, gradient and Hessian of y -> F^t(x, y) differentiated in x."""

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray


def _check_time(t, allow_zero=False):
    t = float(t)
    if not np.isfinite(t) or t < 0 or (t == 0 and not allow_zero):
        raise InvalidInputError(f"time must be {'>= 0' if allow_zero else '> 0'}, got {t}")
    return t


def truncation_order(t: float, eps: float, max_images: int = 64) -> int:
    """Number of images N per side: smallest N >= 1 with exp(-(2 pi N - pi)^2 / 2t) < eps.

    The first omitted image sits at distance >= 2 pi N + pi, and
    (2 pi N + pi)^2 - pi^2 > (2 pi N - pi)^2, so the omitted tail is below
    ``eps`` relative to the leading term for every minimal difference.
    Capped at ``max_images``.
    """
    t = _check_time(t)
    if not 0.0 < eps < 1.0:
        raise InvalidInputError(f"eps must lie in (0, 1), got {eps}")
    threshold = -2.0 * t * np.log(eps)
    n = 1
    while n < max_images and (TWO_PI * n - np.pi) ** 2 <= threshold:
        n += 1
    return n


def _image_offsets(d, t, cfg):
    n = truncation_order(t, cfg.trunc_eps, cfg.max_images)
    shifts = TWO_PI * np.arange(-n, n + 1)
    return np.asarray(d, dtype=float)[..., None] + shifts


def _abs_delta(x, y):
    # |minimal difference| computed symmetrically so that K(x, y) == K(y, x) bitwise
    a = np.remainder(np.abs(np.asarray(y, dtype=float) - np.asarray(x, dtype=float)), TWO_PI)
    return np.minimum(a, TWO_PI - a)


def axis_log_sum(d, t, cfg=DEFAULT_CONFIG):
    """log sum_n exp(-((d + 2 pi n)^2 - d^2) / 2t) for minimal differences d."""
    off = _image_offsets(d, t, cfg)
    d = np.asarray(d, dtype=float)
    return logsumexp(-(off**2 - d[..., None] ** 2) / (2.0 * t), axis=-1)


def axis_cost(d, t, cfg=DEFAULT_CONFIG):
    """Per-axis cost t log(2 pi t) + d^2 - 2t logsumexp(...), d minimal."""
    d = np.asarray(d, dtype=float)
    return t * np.log(TWO_PI * t) + d**2 - 2.0 * t * axis_log_sum(d, t, cfg)


def axis_derivatives(d, t, cfg=DEFAULT_CONFIG):
    """First and second x-derivatives of the per-axis cost, d = y - x minimal.

    Returns ``(grad, hess)`` with grad = -2 E_w[o] and hess = 2 - 2 Var_w[o] / t
    where o runs over the image offsets and w are their softmax weights.
    """
    off = _image_offsets(d, t, cfg)
    d = np.asarray(d, dtype=float)
    w = softmax(-(off**2 - d[..., None] ** 2) / (2.0 * t), axis=-1)
    mean = np.sum(w * off, axis=-1)
    var = np.sum(w * (off - mean[..., None]) ** 2, axis=-1)
    return -2.0 * mean, 2.0 - 2.0 * var / t


def kernel(mfd: FlatTorus, t, x, y, cfg: KernelConfig = DEFAULT_CONFIG):
    """Heat kernel K(t, x, y), density per unit volume."""
    t = _check_time(t)
    mfd._check(np.asarray(x), np.asarray(y))
    d = _abs_delta(x, y)
    off = _image_offsets(d, t, cfg)
    per_axis = np.sum(np.exp(-(off**2) / (2.0 * t)), axis=-1) / np.sqrt(TWO_PI * t)
    return np.prod(per_axis, axis=-1)


def cost(mfd: FlatTorus, t, x, y, cfg: KernelConfig = DEFAULT_CONFIG):
    """Varadhan cost F^t(x, y) = -2t log K(t, x, y); F^0 = d^2."""
    t = _check_time(t, allow_zero=True)
    mfd._check(np.asarray(x), np.asarray(y))
    d = _abs_delta(x, y)
    if t == 0.0:
        return np.sum(d**2, axis=-1)
    return np.sum(axis_cost(d, t, cfg), axis=-1)


def grad_x(mfd: FlatTorus, t, x, y, cfg: KernelConfig = DEFAULT_CONFIG):
    """Gradient in x of F^t(x, y), shape (..., m)."""
    t = _check_time(t)
    g, _ = axis_derivatives(mfd.delta(x, y), t, cfg)
    return g


def hess_diag_x(mfd: FlatTorus, t, x, y, cfg: KernelConfig = DEFAULT_CONFIG):
    """Diagonal of the x-Hessian of F^t(x, y); off-diagonals vanish identically."""
    t = _check_time(t)
    _, h = axis_derivatives(mfd.delta(x, y), t, cfg)
    return h


def hess_x(mfd: FlatTorus, t, x, y, cfg: KernelConfig = DEFAULT_CONFIG):
    """Hessian in x of F^t(x, y), shape (..., m, m)."""
    h = hess_diag_x(mfd, t, x, y, cfg)
    out = np.zeros(h.shape + (mfd.dim,))
    idx = np.arange(mfd.dim)
    out[..., idx, idx] = h
    return out


def evaluate(mfd: FlatTorus, t, x, y, cfg: KernelConfig = DEFAULT_CONFIG) -> CostEval:
    """Value, gradient and Hessian in one pass over the image sums."""
    t = _check_time(t)
    d = mfd.delta(x, y)
    g, h = axis_derivatives(d, t, cfg)
    hess = np.zeros(h.shape + (mfd.dim,))
    idx = np.arange(mfd.dim)
    hess[..., idx, idx] = h
    value = np.sum(axis_cost(np.abs(d), t, cfg), axis=-1)
    return CostEval(value=value, grad=g, hess=hess)


def cost_dt(mfd: FlatTorus, t, x, y, cfg: KernelConfig = DEFAULT_CONFIG):
    """Diagnostic time derivative d/dt F^t(x, y); grows like m log t as t -> 0."""
    t = _check_time(t)
    d = _abs_delta(x, y)
    off = _image_offsets(d, t, cfg)
    a = -(off**2 - d[..., None] ** 2) / (2.0 * t)
    w = softmax(a, axis=-1)
    per_axis = (
        np.log(TWO_PI * t)
        + 1.0
        - 2.0 * logsumexp(a, axis=-1)
        + (d**2 - np.sum(w * off**2, axis=-1)) / t
    )
    return np.sum(per_axis, axis=-1)


__all__ = [
    "CostEval",
    "DEFAULT_CONFIG",
    "KernelConfig",
    "axis_cost",
    "axis_derivatives",
    "cost",
    "cost_dt",
    "evaluate",
    "grad_x",
    "hess_diag_x",
    "hess_x",
    "kernel",
    "truncation_order",
]
