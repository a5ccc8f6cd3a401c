"""One-dimensional rules in the difference coordinate d = xi - x in [-pi, pi].

Population expectations of per-axis costs are smooth in d except at the
cut point d = +-pi (a kink at t = 0, a boundary layer of width ~t for t > 0).
Composite Gauss-Legendre on [-pi, pi] puts that point at the ends of the
interval, and geometric grading of the end panels resolves the layer.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

GL_ORDER = 16


@lru_cache(maxsize=None)
def _gl(order):
    return np.polynomial.legendre.leggauss(order)


def panel_rule(breaks, order: int = GL_ORDER):
    """Composite Gauss-Legendre rule with the given (sorted) panel breakpoints."""
    breaks = np.asarray(breaks, dtype=float)
    x, w = _gl(order)
    lo, hi = breaks[:-1, None], breaks[1:, None]
    half = 0.5 * (hi - lo)
    nodes = (lo + hi) / 2 + half * x
    weights = half * w
    return nodes.ravel(), weights.ravel()


def _half_breaks(t, res, order, extra):
    """Breakpoints on [0, pi] for the right half of the symmetric rule."""
    n_panels = max(4, int(np.ceil(res / (2 * order))))
    b = set(np.linspace(0.0, np.pi, n_panels + 1).tolist())
    width = np.pi / n_panels
    if t > 0:
        gap = t / 8.0
        while gap < width:
            b.add(np.pi - gap)
            gap *= 2.0
    for e in extra:
        if 0.0 < e < np.pi:
            b.add(float(e))
    return np.array(sorted(b))


@lru_cache(maxsize=256)
def _delta_rule_cached(t, res, extra, order):
    half = _half_breaks(t, res, order, extra)
    breaks = np.concatenate([-half[::-1], half[1:]])
    nodes, weights = panel_rule(breaks, order)
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return nodes, weights


def delta_rule(t: float = 0.0, res: int = 1024, extra_breaks=(), order: int = GL_ORDER):
    """Nodes and weights on [-pi, pi] in the difference coordinate.

    ``res`` sets the number of nodes of the uniform part; for ``t > 0`` the
    panels next to +-pi are graded geometrically down to width t/8.
    ``extra_breaks`` are non-negative radii added symmetrically as panel
    breakpoints (used to make strip boundaries exact).
    """
    extra = tuple(sorted({float(abs(e)) for e in extra_breaks}))
    return _delta_rule_cached(float(t), int(res), extra, int(order))
