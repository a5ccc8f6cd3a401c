"""Flat circle and product tori (R / 2piZ)^m.

Points are numpy arrays of angular coordinates with shape ``(..., m)``;
tangent vectors are arrays of the same shape expressed in the canonical
orthonormal frame.  Because the metric is flat, the tangent space at every
point is identified with R^m and parallel transport is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CutLocusError, InvalidInputError

TWO_PI = 2.0 * np.pi

#: ``log`` refuses targets closer than this to the cut locus.
CUT_TOL = 1e-9


def wrap_angle(x):
    """Map angles to [0, 2pi)."""
    x = np.remainder(np.asarray(x, dtype=float), TWO_PI)
    # remainder of tiny negatives rounds to exactly 2pi
    return np.where(x >= TWO_PI, 0.0, x)


def wrap_delta(d):
    """Map angle differences to (-pi, pi]; an exact +-pi becomes +pi."""
    d = np.remainder(np.asarray(d, dtype=float) + np.pi, TWO_PI) - np.pi
    return np.where(d <= -np.pi, np.pi, d)


@dataclass(frozen=True)
class FlatTorus:
    """The flat torus T^m with period 2pi on each axis (m=1 is the circle)."""

    dim: int = 1

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise InvalidInputError(f"dimension must be a positive integer, got {self.dim!r}")

    @property
    def diameter(self) -> float:
        return float(np.pi * np.sqrt(self.dim))

    @property
    def injectivity_radius(self) -> float:
        return float(np.pi)

    def point(self, coords) -> np.ndarray:
        """Validate and canonicalize coordinates; scalars are accepted for m=1."""
        p = np.asarray(coords, dtype=float)
        if p.ndim == 0:
            p = p.reshape(1)
        self._check(p)
        return wrap_angle(p)

    def _check(self, *arrays):
        for a in arrays:
            if np.shape(a)[-1:] != (self.dim,):
                raise InvalidInputError(
                    f"expected trailing dimension {self.dim}, got shape {np.shape(a)}"
                )

    def delta(self, p, q) -> np.ndarray:
        """Componentwise minimal representative of q - p in (-pi, pi]."""
        p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
        self._check(p, q)
        return wrap_delta(q - p)

    def distance(self, p, q):
        return np.sqrt(np.sum(self.delta(p, q) ** 2, axis=-1))

    def sq_distance(self, p, q):
        return np.sum(self.delta(p, q) ** 2, axis=-1)

    def exp(self, p, v) -> np.ndarray:
        p, v = np.asarray(p, dtype=float), np.asarray(v, dtype=float)
        self._check(p, v)
        return wrap_angle(p + v)

    def dist_to_cut(self, p, q):
        """Distance from q to the cut locus of p: min_k (pi - |delta_k|)."""
        return np.min(np.pi - np.abs(self.delta(p, q)), axis=-1)

    def log(self, p, q) -> np.ndarray:
        """Riemannian logarithm; raises CutLocusError near Cut_p."""
        d = self.delta(p, q)
        if np.any(np.min(np.pi - np.abs(d), axis=-1) < CUT_TOL):
            raise CutLocusError("target lies on the cut locus of the base point")
        return d

    def log_tie(self, p, q) -> np.ndarray:
        """Logarithm extended to the cut locus by the +pi tie convention.

        Used by optimizers, where landing exactly on a cut point is a
        measure-zero event that still needs a deterministic answer.
        """
        return self.delta(p, q)

    def parallel_transport(self, p, q, v) -> np.ndarray:
        p, q, v = (np.asarray(a, dtype=float) for a in (p, q, v))
        self._check(p, q, v)
        return v.copy()

    def grid(self, res: int) -> np.ndarray:
        """Tensor grid {2pi j / res}^m in lexicographic order, shape (res**m, m)."""
        if int(res) != res or res < 2:
            raise InvalidInputError(f"grid resolution must be an integer >= 2, got {res!r}")
        axis = TWO_PI * np.arange(res) / res
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)


CIRCLE = FlatTorus(1)
TORUS2 = FlatTorus(2)
