"""Densities on the flat torus, exact samplers and periodic quadrature.

Densities are taken with respect to Lebesgue measure on [0, 2pi)^m, so the
uniform density on the circle is 1/(2 pi).  All ``pdf`` methods are
vectorized over a leading batch of points with shape ``(..., m)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import i0e

from .errors import InvalidInputError, NumericalError
from .manifold import TWO_PI, FlatTorus, wrap_angle

#: Resolution of the per-axis inverse-CDF tables.
CDF_RES = 8192


class Density:
    """Probability density on T^m (abstract)."""

    dim: int

    @property
    def manifold(self) -> FlatTorus:
        return FlatTorus(self.dim)

    def pdf(self, points) -> np.ndarray:
        raise NotImplementedError

    def marginal(self, axes: Sequence[int]) -> "Density":
        raise NotImplementedError

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def rotate(self, alpha) -> "Density":
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _points(self, points):
        p = np.asarray(points, dtype=float)
        if p.shape[-1:] != (self.dim,):
            raise InvalidInputError(f"expected points of dimension {self.dim}, got shape {p.shape}")
        return p


@dataclass(frozen=True)
class Uniform(Density):
    dim: int = 1

    def pdf(self, points):
        p = self._points(points)
        return np.full(p.shape[:-1], TWO_PI ** (-self.dim))

    def marginal(self, axes):
        return Uniform(len(axes))

    def draw(self, rng, n):
        return rng.uniform(0.0, TWO_PI, size=(n, self.dim))

    def rotate(self, alpha):
        return self

    def to_dict(self):
        return {"kind": "uniform", "dim": self.dim}


def _vm_log_norm(kappa):
    # log(2 pi I0(kappa)) without overflow for large kappa
    return np.log(TWO_PI * i0e(kappa)) + kappa


@lru_cache(maxsize=64)
def _vm_inverse_table(kappa: float):
    """CDF table of von Mises(0, kappa) on [-pi, pi] at CDF_RES + 1 nodes."""
    grid = np.linspace(-np.pi, np.pi, CDF_RES + 1)
    dens = np.exp(kappa * (np.cos(grid) - 1.0))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]))])
    cdf /= cdf[-1]
    return cdf, grid


def _inverse_cdf(u, cdf, grid):
    return np.interp(u, cdf, grid)


@dataclass(frozen=True)
class VonMises(Density):
    """Product of independent von Mises factors, one per axis."""

    loc: tuple = (0.0,)
    kappa: tuple = (1.0,)

    def __post_init__(self):
        loc = tuple(float(v) for v in np.atleast_1d(self.loc))
        kappa = tuple(float(v) for v in np.atleast_1d(self.kappa))
        if len(loc) != len(kappa):
            raise InvalidInputError("loc and kappa must have one entry per axis")
        if any(k < 0 or not np.isfinite(k) for k in kappa):
            raise InvalidInputError(f"concentrations must be finite and >= 0, got {kappa}")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "kappa", kappa)

    @property
    def dim(self):
        return len(self.loc)

    def pdf(self, points):
        p = self._points(points)
        loc, kappa = np.array(self.loc), np.array(self.kappa)
        logp = kappa * np.cos(p - loc) - _vm_log_norm(kappa)
        return np.exp(np.sum(logp, axis=-1))

    def marginal(self, axes):
        return VonMises(tuple(self.loc[a] for a in axes), tuple(self.kappa[a] for a in axes))

    def draw(self, rng, n):
        u = rng.uniform(size=(n, self.dim))
        out = np.empty((n, self.dim))
        for k, (loc, kappa) in enumerate(zip(self.loc, self.kappa)):
            cdf, grid = _vm_inverse_table(kappa)
            out[:, k] = _inverse_cdf(u[:, k], cdf, grid) + loc
        return wrap_angle(out)

    def rotate(self, alpha):
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (self.dim,))
        return VonMises(tuple(float(v) for v in wrap_angle(np.array(self.loc) + alpha)), self.kappa)

    def to_dict(self):
        return {"kind": "von_mises", "loc": list(self.loc), "kappa": list(self.kappa)}


@dataclass(frozen=True)
class Mixture(Density):
    weights: tuple
    components: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(self.components) or len(w) == 0:
            raise InvalidInputError("mixture needs one weight per component")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-12):
            raise InvalidInputError(f"mixture weights must be nonnegative and sum to 1, got {w}")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise InvalidInputError("mixture components must share a dimension")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def dim(self):
        return self.components[0].dim

    def pdf(self, points):
        p = self._points(points)
        return sum(w * c.pdf(p) for w, c in zip(self.weights, self.components))

    def marginal(self, axes):
        return Mixture(self.weights, tuple(c.marginal(axes) for c in self.components))

    def draw(self, rng, n):
        labels = rng.choice(len(self.weights), size=n, p=np.array(self.weights))
        out = np.empty((n, self.dim))
        for j, comp in enumerate(self.components):
            idx = np.flatnonzero(labels == j)
            if idx.size:
                out[idx] = comp.draw(rng, idx.size)
        return out

    def rotate(self, alpha):
        return Mixture(self.weights, tuple(c.rotate(alpha) for c in self.components))

    def to_dict(self):
        return {
            "kind": "mixture",
            "weights": list(self.weights),
            "components": [c.to_dict() for c in self.components],
        }


@dataclass(frozen=True, eq=False)
class Tabulated(Density):
    """Continuous density from values on the periodic grid, multilinear in between.

    ``values`` has shape ``(res,) * m`` with entry ``[j1, ..., jm]`` at the
    grid point ``2 pi (j1, ..., jm) / res``; it is renormalized so that the
    interpolant integrates to one exactly.
    """

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim < 1 or len(set(v.shape)) != 1 or v.shape[0] < 2:
            raise InvalidInputError(f"tabulated values need shape (res,)*m, got {v.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise InvalidInputError("tabulated values must be finite and nonnegative")
        h = TWO_PI / v.shape[0]
        total = v.sum() * h**v.ndim
        if total <= 0:
            raise InvalidInputError("tabulated values must have positive mass")
        v = v / total
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self):
        return self.values.ndim

    @property
    def res(self):
        return self.values.shape[0]

    def _interpolator(self):
        # periodic padding by one node per axis
        padded = np.pad(self.values, [(0, 1)] * self.dim, mode="wrap")
        axis = TWO_PI * np.arange(self.res + 1) / self.res
        return RegularGridInterpolator([axis] * self.dim, padded)

    def pdf(self, points):
        p = wrap_angle(self._points(points))
        if self.dim == 1:
            axis = TWO_PI * np.arange(self.res + 1) / self.res
            vals = np.append(self.values, self.values[0])
            return np.interp(p[..., 0], axis, vals)
        shape = p.shape[:-1]
        return self._interpolator()(p.reshape(-1, self.dim)).reshape(shape)

    def marginal(self, axes):
        axes = tuple(axes)
        other = tuple(a for a in range(self.dim) if a not in axes)
        h = TWO_PI / self.res
        v = self.values.sum(axis=other) * h ** len(other) if other else self.values
        if list(axes) != sorted(axes):
            v = np.transpose(v, np.argsort(np.argsort(axes)))
        return Tabulated(v)

    @cached_property
    def _inverse_table(self):
        grid = np.linspace(0.0, TWO_PI, CDF_RES + 1)
        dens = self.pdf(grid[:, None])
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]))])
        cdf /= cdf[-1]
        return cdf, grid

    def draw(self, rng, n):
        if self.dim == 1:
            cdf, grid = self._inverse_table
            return wrap_angle(_inverse_cdf(rng.uniform(size=n), cdf, grid))[:, None]
        # exact rejection sampling against the uniform envelope
        bound = float(self.values.max())
        out = np.empty((0, self.dim))
        while out.shape[0] < n:
            cand = rng.uniform(0.0, TWO_PI, size=(2 * (n - out.shape[0]) + 16, self.dim))
            keep = rng.uniform(0.0, bound, size=cand.shape[0]) < self.pdf(cand)
            out = np.concatenate([out, cand[keep]])
        return out[:n]

    def rotate(self, alpha):
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (self.dim,))
        grid = FlatTorus(self.dim).grid(self.res)
        return Tabulated(self.pdf(grid - alpha).reshape(self.values.shape))

    def to_dict(self):
        return {"kind": "tabulated", "values": self.values.tolist()}


def tabulate(fn: Callable, dim: int, res: int) -> Tabulated:
    """Tabulate a nonnegative vectorized function on the periodic grid."""
    grid = FlatTorus(dim).grid(res)
    return Tabulated(np.asarray(fn(grid), dtype=float).reshape((res,) * dim))


def truncated_von_mises(loc: float, kappa: float, center: float, radius: float, res: int = 2048):
    """Circle von Mises density set to zero within ``radius`` of ``center``.

    The zero band is widened by one grid cell so that the continuous
    interpolant vanishes on the whole open band.
    """
    vm = VonMises((loc,), (kappa,))
    h = TWO_PI / res

    def fn(p):
        gap = np.abs(np.remainder(p[:, 0] - center + np.pi, TWO_PI) - np.pi)
        return np.where(gap <= radius + h, 0.0, vm.pdf(p))

    return tabulate(fn, 1, res)


def density_from_dict(spec: dict) -> Density:
    """Build a density from its ``to_dict`` description (also the config format)."""
    kind = spec.get("kind")
    if kind == "uniform":
        return Uniform(int(spec.get("dim", 1)))
    if kind == "von_mises":
        return VonMises(tuple(np.atleast_1d(spec["loc"])), tuple(np.atleast_1d(spec["kappa"])))
    if kind == "mixture":
        comps = tuple(density_from_dict(c) for c in spec["components"])
        return Mixture(tuple(spec["weights"]), comps)
    if kind == "tabulated":
        return Tabulated(np.asarray(spec["values"], dtype=float))
    raise InvalidInputError(f"unknown density kind {kind!r}")


@dataclass(frozen=True, eq=False)
class SampleSet:
    points: np.ndarray
    seed: Optional[int]
    provenance: dict

    @property
    def n(self):
        return self.points.shape[0]


def density_at(d: Density, p) -> np.ndarray:
    return d.pdf(p)


def sample(d: Density, n: int, seed) -> SampleSet:
    """Draw ``n`` i.i.d. points; identical (d, n, seed) give identical points."""
    if int(n) != n or n < 1:
        raise InvalidInputError(f"sample size must be a positive integer, got {n!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = d.draw(rng, int(n))
    pts.flags.writeable = False
    return SampleSet(pts, None if isinstance(seed, np.random.Generator) else seed, d.to_dict())


def integrate(d: Density, f: Callable, res: int = 1024, skip: Optional[Callable] = None):
    """Periodic trapezoid (= rectangle) rule for E_d[f] on the tensor grid.

    ``f`` maps an ``(N, m)`` array of points to ``(N,)``, ``(N, k)`` or
    ``(N, k, k)``.  ``skip`` maps the same array to a boolean mask of nodes to
    drop (measure-zero sets such as the cut locus).
    """
    if int(res) != res or res < 16:
        raise InvalidInputError(f"quadrature resolution must be an integer >= 16, got {res!r}")
    nodes = d.manifold.grid(int(res))
    w = d.pdf(nodes) * (TWO_PI / res) ** d.dim
    if skip is not None:
        keep = ~np.asarray(skip(nodes), dtype=bool)
        nodes, w = nodes[keep], w[keep]
    vals = np.asarray(f(nodes), dtype=float)
    bad = ~np.isfinite(vals.reshape(vals.shape[0], -1)).all(axis=1) & (w > 0)
    if np.any(bad):
        raise NumericalError(f"integrand is not finite at {int(bad.sum())} quadrature nodes")
    vals = np.where(np.isfinite(vals), vals, 0.0)
    return np.tensordot(w, vals, axes=(0, 0))
