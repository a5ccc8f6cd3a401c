"""Population and empirical t-Varadhan functions, variances and means.

``F^t(x) = E[F^t(x, Xi)]`` for a density (population) or the sample
average over a point set (empirical).  For t = 0 this is the Frechet
function and its minimizers are Frechet means.

Population expectations exploit that the flat cost is a sum of per-axis
terms: each axis only sees the marginal density, so every value, gradient
and Hessian entry is a one-dimensional integral in the difference
coordinate, computed with the cut-aligned rule of :mod:`.quadrature`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import heat_kernel as hk
from .distributions import Density, SampleSet
from .errors import InvalidInputError, UnsupportedOperationError
from .manifold import FlatTorus, wrap_angle, wrap_delta
from .quadrature import delta_rule

log = logging.getLogger(__name__)

GTOL = 1e-10
STEP_TOL = 1e-12
VTOL = 1e-10
FLAT_TOL = 1e-9
MAX_ITER = 200
N_STARTS_REFINED = 5
MIN_EIG = 1e-8


def _axis_terms(t, d, cfg):
    """Per-axis (cost, grad, hess) of the cost at minimal differences d."""
    if t == 0.0:
        return d**2, -2.0 * d, np.full_like(d, 2.0)
    g, h = hk.axis_derivatives(d, t, cfg)
    return hk.axis_cost(np.abs(d), t, cfg), g, h


@dataclass(frozen=True, eq=False)
class VaradhanFunction:
    """F^t for a population density or an empirical sample.

    Exactly one of ``density`` and ``samples`` is set.  Arguments ``x`` of
    the evaluation methods may be a single point ``(m,)`` or a batch
    ``(B, m)``.
    """

    t: float
    density: Optional[Density] = None
    samples: Optional[np.ndarray] = None
    res: int = 1024
    cfg: hk.KernelConfig = hk.DEFAULT_CONFIG
    _marginals: tuple = field(init=False, repr=False, default=())

    def __post_init__(self):
        t = float(self.t)
        if not np.isfinite(t) or t < 0:
            raise InvalidInputError(f"time must be >= 0, got {self.t}")
        object.__setattr__(self, "t", t)
        if (self.density is None) == (self.samples is None):
            raise InvalidInputError("give exactly one of a density or samples")
        if self.samples is not None:
            s = self.samples.points if isinstance(self.samples, SampleSet) else self.samples
            s = np.asarray(s, dtype=float)
            if s.ndim == 1:
                s = s[:, None]
            if s.ndim != 2 or s.shape[0] < 1:
                raise InvalidInputError(f"samples must have shape (n, m), got {s.shape}")
            object.__setattr__(self, "samples", wrap_angle(s))
        else:
            if self.res < 16:
                raise InvalidInputError(f"quadrature resolution must be >= 16, got {self.res}")
            margs = tuple(self.density.marginal((k,)) for k in range(self.density.dim))
            object.__setattr__(self, "_marginals", margs)

    @classmethod
    def population(cls, density, t, res=1024, cfg=hk.DEFAULT_CONFIG):
        return cls(t, density=density, res=res, cfg=cfg)

    @classmethod
    def empirical(cls, samples, t, cfg=hk.DEFAULT_CONFIG):
        return cls(t, samples=samples, cfg=cfg)

    @property
    def dim(self) -> int:
        return self.density.dim if self.density is not None else self.samples.shape[1]

    @property
    def manifold(self) -> FlatTorus:
        return FlatTorus(self.dim)

    @property
    def is_population(self) -> bool:
        return self.density is not None

    def with_time(self, t) -> "VaradhanFunction":
        return VaradhanFunction(t, self.density, self.samples, self.res, self.cfg)

    def _batch(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[-1] != self.dim:
            raise InvalidInputError(f"expected points of dimension {self.dim}, got {x.shape}")
        return x, single

    def _axis_rule(self):
        nodes, weights = delta_rule(self.t, self.res)
        c, g, h = _axis_terms(self.t, nodes, self.cfg)
        return nodes, weights, c, g, h

    def _population_parts(self, x):
        """Per-axis expectations of (cost, grad, hess), each shaped (B, m)."""
        nodes, weights, c, g, h = self._axis_rule()
        out = np.empty((3,) + x.shape)
        for k, marg in enumerate(self._marginals):
            psi = marg.pdf((x[:, k, None] + nodes)[..., None]) * weights
            out[0, :, k] = psi @ c
            out[1, :, k] = psi @ g
            out[2, :, k] = psi @ h
        return out

    def _empirical_parts(self, x):
        d = wrap_delta(self.samples[None, :, :] - x[:, None, :])
        c, g, h = _axis_terms(self.t, d, self.cfg)
        return np.stack([c.mean(axis=1), g.mean(axis=1), h.mean(axis=1)])

    def _parts(self, x):
        return self._population_parts(x) if self.is_population else self._empirical_parts(x)

    def value(self, x):
        x, single = self._batch(x)
        if self.is_population:
            v = self._population_parts(x)[0].sum(axis=-1)
        else:
            d = np.abs(wrap_delta(self.samples[None, :, :] - x[:, None, :]))
            if self.t == 0.0:
                v = np.mean(np.sum(d**2, axis=-1), axis=1)
            else:
                v = np.mean(np.sum(hk.axis_cost(d, self.t, self.cfg), axis=-1), axis=1)
        return v[0] if single else v

    __call__ = value

    def subgrad(self, x):
        """-2 E[Log_x Xi] with the +pi tie convention; equals grad for t = 0 off atoms."""
        x, single = self._batch(x)
        if self.t != 0.0:
            g = self._parts(x)[1]
        elif self.is_population:
            g = self._population_parts(x)[1]
        else:
            g = -2.0 * np.mean(wrap_delta(self.samples[None] - x[:, None]), axis=1)
        return g[0] if single else g

    def grad(self, x):
        if self.t == 0.0:
            raise UnsupportedOperationError("the t=0 gradient is a limit; see asymptotics")
        x, single = self._batch(x)
        g = self._parts(x)[1]
        return g[0] if single else g

    def hess(self, x):
        if self.t == 0.0:
            raise UnsupportedOperationError("the t=0 Hessian is a limit; see asymptotics")
        x, single = self._batch(x)
        h = self._parts(x)[2]
        out = np.zeros(h.shape + (self.dim,))
        idx = np.arange(self.dim)
        out[..., idx, idx] = h
        return out[0] if single else out

    def value_grad_hess(self, x):
        """Value, gradient and Hessian at a single point in one pass (t > 0)."""
        if self.t == 0.0:
            raise UnsupportedOperationError("the t=0 Hessian is a limit; see asymptotics")
        x, _ = self._batch(x)
        parts = self._parts(x)
        return parts[0, 0].sum(), parts[1, 0], np.diag(parts[2, 0])


@dataclass
class StartRecord:
    grid_index: int
    start: np.ndarray
    point: np.ndarray
    value: float
    converged: bool
    iterations: int


@dataclass
class MeanResult:
    minimizer: np.ndarray
    value: float
    starts: list
    uniqueness_margin: float
    converged: bool
    flat: bool = False
    grad_norm: float = float("nan")

    @property
    def variance(self) -> float:
        return self.value


def _newton(F: VaradhanFunction, x0, gtol=GTOL, max_iter=MAX_ITER):
    mfd = F.manifold
    x = np.array(x0, dtype=float)
    f, g, H = F.value_grad_hess(x)
    for it in range(max_iter):
        if np.linalg.norm(g) < gtol:
            return x, f, True, it
        eig = np.linalg.eigvalsh(H)
        step = -np.linalg.solve(H, g) if eig.min() >= MIN_EIG else -0.5 * g
        slope = g @ step
        alpha = 1.0
        while True:
            xn = mfd.exp(x, alpha * step)
            fn = F.value(xn)
            if fn <= f + 1e-4 * alpha * slope + 4e-16 * (1.0 + abs(f)):
                break
            alpha *= 0.5
            if alpha < 1e-12:
                return x, f, False, it
        if np.linalg.norm(alpha * step) < 1e-15:
            x, (f, g, H) = xn, F.value_grad_hess(xn)
            return x, f, bool(np.linalg.norm(g) < 1e3 * gtol), it + 1
        x = xn
        f, g, H = F.value_grad_hess(x)
    return x, f, bool(np.linalg.norm(g) < gtol), max_iter


def _descent(F: VaradhanFunction, x0, step_tol=STEP_TOL, max_iter=MAX_ITER):
    """Armijo gradient descent along exp-map retractions (t = 0)."""
    mfd = F.manifold
    x = np.array(x0, dtype=float)
    f = F.value(x)
    for it in range(max_iter):
        g = F.subgrad(x)
        gg = g @ g
        if gg == 0.0:
            return x, f, True, it
        alpha = 0.5
        while True:
            xn = mfd.exp(x, -alpha * g)
            fn = F.value(xn)
            if fn <= f - 1e-4 * alpha * gg + 4e-16 * (1.0 + abs(f)):
                break
            alpha *= 0.5
            if alpha < 1e-14:
                return x, f, False, it
        moved = alpha * np.sqrt(gg)
        x, f = xn, fn
        if moved < step_tol:
            return x, f, True, it + 1
    return x, f, False, max_iter


def local_minimize(F: VaradhanFunction, x0, max_iter=MAX_ITER):
    """Local refinement from ``x0``; returns (point, value, converged, iterations)."""
    if F.t > 0:
        return _newton(F, x0, max_iter=max_iter)
    return _descent(F, x0, max_iter=max_iter)


def minimize(
    F: VaradhanFunction,
    starts: int = 32,
    k: int = N_STARTS_REFINED,
    vtol: float = VTOL,
    max_iter: int = MAX_ITER,
) -> MeanResult:
    """Global minimization by deterministic multistart.

    F is evaluated on the lexicographic ``starts``-per-axis grid, the best
    ``k`` grid points are refined locally, and the lowest refined value is
    returned.  Values within ``vtol`` of the best are broken in favour of the
    smallest originating grid index.  A nearly constant function (grid spread
    below 1e-9) is flagged as flat instead of refined.
    """
    if int(starts) != starts or starts < 8:
        raise InvalidInputError(f"need at least 8 starts per axis, got {starts}")
    mfd = F.manifold
    grid = mfd.grid(int(starts))
    vals = np.asarray(F.value(grid))
    best = int(np.argmin(vals))
    if vals.max() - vals.min() < FLAT_TOL:
        log.info("flat Varadhan function: every grid value within %.1e", FLAT_TOL)
        rec = StartRecord(best, grid[best], grid[best], float(vals[best]), False, 0)
        return MeanResult(grid[best], float(vals[best]), [rec], 0.0, False, flat=True)

    order = np.argsort(vals, kind="stable")[:k]
    records = []
    for idx in order:
        x, f, ok, it = local_minimize(F, grid[idx], max_iter=max_iter)
        records.append(StartRecord(int(idx), grid[idx], wrap_angle(x), float(f), ok, it))

    fbest = min(r.value for r in records)
    tied = [r for r in records if r.value <= fbest + vtol]
    winner = min(tied, key=lambda r: r.grid_index)

    others = [
        r.value
        for r in records
        if mfd.distance(r.point, winner.point) > 1e-6 and r.value > winner.value + vtol
    ]
    margin = min(others) - winner.value if others else float("inf")
    if F.t > 0:
        gnorm = float(np.linalg.norm(F.grad(winner.point)))
    else:
        gnorm = float(np.linalg.norm(F.subgrad(winner.point)))
    if not winner.converged:
        log.warning("local refinement did not converge within %d iterations", max_iter)
    return MeanResult(
        winner.point, winner.value, records, margin, winner.converged, grad_norm=gnorm
    )


def circle_frechet_mean(samples) -> tuple:
    """Exact empirical Frechet mean on the circle.

    The Frechet function is quadratic between consecutive antipodes of the
    samples; each arc's stationary point is a candidate and the best valid
    one is returned as ``(mean, variance)``.
    """
    s = np.sort(wrap_angle(np.asarray(samples, dtype=float).reshape(-1)))
    breaks = np.sort(wrap_angle(s + np.pi))
    lo = breaks
    length = np.diff(np.append(breaks, breaks[0] + 2 * np.pi))
    mid = lo + 0.5 * length
    d = wrap_delta(s[None, :] - mid[:, None])
    shift = d.mean(axis=1)
    valid = np.abs(shift) <= 0.5 * length
    var = np.mean((d - shift[:, None]) ** 2, axis=1)
    var = np.where(valid, var, np.inf)
    j = int(np.argmin(var))
    return float(wrap_angle(mid[j] + shift[j])), float(var[j])


def mean(F: VaradhanFunction, **kw) -> np.ndarray:
    return minimize(F, **kw).minimizer


def variance(F: VaradhanFunction, **kw) -> float:
    return minimize(F, **kw).value
