"""Small-time asymptotics and CLT covariance targets.

Everything here is a population quantity computed by quadrature in the
difference coordinate d = xi - x (so the cut locus of x sits at d = +-pi on
each axis).  On the flat torus every per-point derivative is a sum or a
diagonal of per-axis terms, so the integrals only involve one- and
two-dimensional marginals of the density.

The cut-locus correction is

    J^{t,delta}(x) = integral over C_delta(x) of Hess_x F^t(., xi) dmu(xi),

where C_delta(x) is the delta-neighbourhood of the cut locus; the limit
J(x) (t -> 0 first, then delta -> 0) is the extra Hessian term of the
Frechet function, e.g. -4 pi psi(x + pi) on the circle.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import heat_kernel as hk
from .distributions import Density
from .errors import HypothesisViolation, InvalidInputError, NumericalError
from .manifold import FlatTorus
from .quadrature import delta_rule
from .varadhan import VaradhanFunction, minimize

log = logging.getLogger(__name__)

#: Maximal population gradient norm accepted at a computed mean.
FOC_TOL = 1e-8


def _axis_funcs(t, cfg):
    """Per-axis cost, gradient and Hessian as functions of the difference d."""
    if t == 0.0:
        return (lambda d: d**2), (lambda d: -2.0 * d), (lambda d: np.full_like(d, 2.0))
    return (
        lambda d: hk.axis_cost(np.abs(d), t, cfg),
        lambda d: hk.axis_derivatives(d, t, cfg)[0],
        lambda d: hk.axis_derivatives(d, t, cfg)[1],
    )


def expect_axes(
    density: Density,
    x,
    axes: Sequence[int],
    factors: Sequence[Callable],
    t: float = 0.0,
    res: int = 1024,
    strip: Sequence[Optional[float]] = (),
):
    """E[prod_i f_i(d_{a_i})] over the joint marginal of ``axes`` at base x.

    ``strip[i]``, when given, restricts axis ``axes[i]`` to |d| > pi - strip[i].
    The rule is a tensor product of cut-aligned 1-D rules; ``res`` may be
    given per axis.
    """
    x = np.asarray(x, dtype=float)
    axes = tuple(axes)
    strip = tuple(strip) + (None,) * (len(axes) - len(strip))
    res = np.broadcast_to(res, (len(axes),))
    rules = []
    for s, r in zip(strip, res):
        extra = () if s is None else (np.pi - s,)
        nodes, w = delta_rule(t, int(r), extra)
        if s is not None:
            keep = np.abs(nodes) > np.pi - s
            nodes, w = nodes[keep], w[keep]
        rules.append((nodes, w))
    marg = density.marginal(axes)
    mesh = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wmesh = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    d = np.stack(mesh, axis=-1).reshape(-1, len(axes))
    w = np.prod(np.stack(wmesh, axis=-1).reshape(-1, len(axes)), axis=-1)
    vals = np.ones(d.shape[0])
    for i, f in enumerate(factors):
        if f is not None:
            vals = vals * f(d[:, i])
    psi = marg.pdf(x[list(axes)] + d)
    out = np.dot(w * psi, vals)
    if not np.isfinite(out):
        raise NumericalError("non-finite quadrature result")
    return float(out)


def _pair_matrix(density, x, t, res, f_k, f_l=None):
    """Matrix M_kl = E[f_k(d_k) f_l(d_l)] (diagonal uses f_k(d_k) f_l(d_k))."""
    f_l = f_l or f_k
    m = density.dim
    out = np.empty((m, m))
    for k in range(m):
        out[k, k] = expect_axes(density, x, (k,), [lambda d: f_k(d) * f_l(d)], t, res)
        for l in range(k + 1, m):
            out[k, l] = expect_axes(density, x, (k, l), [f_k, f_l], t, res)
            out[l, k] = out[k, l]
    return out


# --------------------------------------------------------------------------
# cut-locus correction


@dataclass(frozen=True)
class JTermSchedule:
    """Decreasing radii and, per radius, decreasing times (t <= delta^2)."""

    deltas: tuple = (0.4, 0.2, 0.1)
    times: tuple = ()
    res: int = 1024

    def __post_init__(self):
        deltas = tuple(float(d) for d in self.deltas)
        times = self.times or tuple(tuple(d * d / f for f in (2, 4, 8)) for d in deltas)
        times = tuple(tuple(float(t) for t in ts) for ts in times)
        if len(deltas) < 1 or len(times) != len(deltas):
            raise InvalidInputError("need one list of times per radius")
        if any(d <= 0 or d >= np.pi for d in deltas) or any(
            b >= a for a, b in zip(deltas, deltas[1:])
        ):
            raise InvalidInputError(f"radii must be strictly decreasing in (0, pi), got {deltas}")
        for d, ts in zip(deltas, times):
            if not ts or any(t <= 0 for t in ts) or any(b >= a for a, b in zip(ts, ts[1:])):
                raise InvalidInputError(f"times for delta={d} must be positive, strictly decreasing")
            if max(ts) > d * d * (1 + 1e-12):
                raise InvalidInputError(f"times for delta={d} must satisfy t <= delta^2")
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "times", times)


def j_term(
    density: Density,
    x,
    t: float,
    delta: float,
    res: int = 1024,
    cfg: hk.KernelConfig = hk.DEFAULT_CONFIG,
) -> np.ndarray:
    """J^{t,delta}(x): Hessian of the cost integrated over the delta-strip of the cut.

    On T^m the strip is a union of per-axis slabs; the integral is assembled
    by inclusion-exclusion over nonempty sets of slab axes.
    """
    if not 0.0 < delta < np.pi:
        raise InvalidInputError(f"delta must lie in (0, pi), got {delta}")
    if t <= 0:
        raise InvalidInputError(f"time must be > 0, got {t}")
    x = np.asarray(x, dtype=float)
    m = density.dim
    # at least 64 ceil(delta / sqrt t) nodes across each slab
    res_local = max(res, int(np.ceil(64 * np.ceil(delta / np.sqrt(t)) * np.pi / delta)))
    hess_axis = lambda d: hk.axis_derivatives(d, t, cfg)[1]  # noqa: E731
    out = np.zeros((m, m))
    for k in range(m):
        total = 0.0
        for size in range(1, m + 1):
            for S in itertools.combinations(range(m), size):
                axes = tuple(sorted(set(S) | {k}))
                strip = [delta if a in S else None for a in axes]
                factors = [hess_axis if a == k else None for a in axes]
                rs = [res_local if a in S else res for a in axes]
                sign = 1.0 if size % 2 else -1.0
                total += sign * expect_axes(density, x, axes, factors, t, rs, strip)
        out[k, k] = total
    return out


@dataclass
class JLimit:
    value: np.ndarray
    table: list
    spread: float
    converged: bool
    per_delta: list = field(default_factory=list)


def _extrapolate_to_zero(h, values):
    """Polynomial (Richardson) extrapolation of values(h) to h = 0."""
    h = np.asarray(h, dtype=float)
    out = np.zeros_like(values[0])
    for i, v in enumerate(values):
        others = np.delete(h, i)
        out = out + v * np.prod(others / (others - h[i]))
    return out


def j_limit(
    density: Density,
    x,
    sched: JTermSchedule = JTermSchedule(),
    rtol: float = 1e-3,
    cfg: hk.KernelConfig = hk.DEFAULT_CONFIG,
) -> JLimit:
    """Iterated limit J(x) = lim_delta lim_t J^{t,delta}(x).

    For each radius the max and min over its times stand in for limsup and
    liminf; their midpoint is then extrapolated to delta = 0 through the last
    three radii.  ``spread`` is the largest limsup/liminf gap seen.
    """
    table, per_delta, spread = [], [], 0.0
    for delta, times in zip(sched.deltas, sched.times):
        vals = [j_term(density, x, t, delta, sched.res, cfg) for t in times]
        for t, v in zip(times, vals):
            table.append({"delta": delta, "t": t, "J": v})
        stack = np.stack(vals)
        hi, lo = stack.max(axis=0), stack.min(axis=0)
        spread = max(spread, float(np.max(hi - lo)))
        per_delta.append({"delta": delta, "limsup": hi, "liminf": lo, "mid": 0.5 * (hi + lo)})
    tail = per_delta[-3:]
    value = _extrapolate_to_zero([p["delta"] for p in tail], [p["mid"] for p in tail])
    converged = spread <= rtol * (1.0 + np.linalg.norm(value))
    if not converged:
        log.warning("J-term limsup/liminf spread %.3g exceeds tolerance", spread)
    return JLimit(value, table, spread, bool(converged), per_delta)


# --------------------------------------------------------------------------
# gradient and Hessian limits


@dataclass
class HessianLimit:
    limit: np.ndarray
    expected_hess0: np.ndarray
    j: JLimit
    direct: dict
    gap: float
    consistent: bool


def hessian_limit(
    density: Density,
    x,
    times: Sequence[float] = (1e-1, 1e-2, 1e-3),
    sched: JTermSchedule = JTermSchedule(),
    res: int = 1024,
    rtol: float = 0.05,
    cfg: hk.KernelConfig = hk.DEFAULT_CONFIG,
) -> HessianLimit:
    """E[Hess_x F^0(., Xi)] + J(x), cross-checked against Hess F^t at small t.

    Off the cut the t=0 cost has Hessian 2 I, so the first term is 2 I.
    ``gap`` compares the limit with the direct Hessian at the smallest time,
    relative to max(|limit|, 1).
    """
    x = np.asarray(x, dtype=float)
    m = density.dim
    base = 2.0 * np.eye(m)
    j = j_limit(density, x, sched, cfg=cfg)
    limit = base + j.value
    direct = {
        float(t): VaradhanFunction.population(density, t, res, cfg).hess(x) for t in times
    }
    last = direct[float(min(times))]
    gap = float(np.linalg.norm(limit - last) / max(np.linalg.norm(limit), 1.0))
    consistent = gap <= rtol
    if not consistent:
        log.warning("Hessian routes disagree: relative gap %.3g", gap)
    return HessianLimit(limit, base, j, direct, gap, bool(consistent))


@dataclass
class GradientLimit:
    target: np.ndarray
    grads: dict
    gaps: dict


def frechet_gradient(density: Density, x, res: int = 1024) -> np.ndarray:
    """-2 E[Log_x Xi] by quadrature (cut nodes never appear in the rule)."""
    return VaradhanFunction.population(density, 0.0, res).subgrad(np.asarray(x, dtype=float))


def gradient_limit(
    density: Density,
    x,
    times: Sequence[float] = (1e-1, 1e-2, 1e-3),
    res: int = 1024,
    cfg: hk.KernelConfig = hk.DEFAULT_CONFIG,
) -> GradientLimit:
    x = np.asarray(x, dtype=float)
    target = frechet_gradient(density, x, res)
    grads, gaps = {}, {}
    for t in times:
        g = VaradhanFunction.population(density, t, res, cfg).grad(x)
        grads[float(t)] = g
        gaps[float(t)] = float(np.linalg.norm(g - target))
    return GradientLimit(target, grads, gaps)


# --------------------------------------------------------------------------
# CLT covariances


@dataclass
class CovarianceReport:
    sigma_t: np.ndarray
    hess: np.ndarray
    score_cov: np.ndarray
    sigma_var: float
    t: float
    base: np.ndarray
    variance: float
    grad_norm: float
    j_corrected: bool = True

    @property
    def reconstruction_error(self) -> float:
        hinv = np.linalg.inv(self.hess)
        return float(np.max(np.abs(hinv @ self.score_cov @ hinv.T - self.sigma_t)))

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "base": self.base.tolist(),
            "variance": self.variance,
            "sigma_t": self.sigma_t.tolist(),
            "hess": self.hess.tolist(),
            "score_cov": self.score_cov.tolist(),
            "sigma_var": self.sigma_var,
            "grad_norm": self.grad_norm,
            "j_corrected": self.j_corrected,
        }


def _sandwich(hess, score):
    eig = np.linalg.eigvalsh(hess)
    if eig.min() <= 0:
        raise HypothesisViolation(f"Hessian at the mean is not positive definite: {eig}")
    hinv = np.linalg.inv(hess)
    s = hinv @ score @ hinv.T
    return 0.5 * (s + s.T)


def _find_mean(density, t, res, cfg, starts=32):
    F = VaradhanFunction.population(density, t, res, cfg)
    r = minimize(F, starts=starts)
    if r.flat:
        raise HypothesisViolation("flat Varadhan function: the mean is not unique")
    if r.grad_norm > FOC_TOL:
        raise NumericalError(f"gradient norm {r.grad_norm:.3g} at the computed mean")
    return F, r


def _sigma_var_at(density, x, t, V, res, cfg):
    c, _, _ = _axis_funcs(t, cfg)
    second = _pair_matrix(density, x, t, res, c).sum()
    return float(second - V**2)


def sigma_t(
    density: Density, t: float, res: int = 1024, cfg: hk.KernelConfig = hk.DEFAULT_CONFIG
) -> CovarianceReport:
    """Sandwich covariance Hess^-1 E[g g^T] Hess^-T of the t-Varadhan mean (t > 0)."""
    if t <= 0:
        raise InvalidInputError("sigma_t needs t > 0; use sigma_zero for t = 0")
    F, r = _find_mean(density, t, res, cfg)
    x = r.minimizer
    hess = F.hess(x)
    _, g, _ = _axis_funcs(t, cfg)
    score = _pair_matrix(density, x, t, res, g)
    sig = _sandwich(hess, score)
    var = _sigma_var_at(density, x, t, r.value, res, cfg)
    return CovarianceReport(sig, hess, score, var, float(t), x, r.value, r.grad_norm)


def sigma_zero(
    density: Density,
    res: int = 1024,
    sched: JTermSchedule = JTermSchedule(),
    j_correction: bool = True,
    cfg: hk.KernelConfig = hk.DEFAULT_CONFIG,
) -> CovarianceReport:
    """Covariance of the Frechet mean with Hessian E[Hess F^0] + J.

    With ``j_correction=False`` the Hessian is the naive 2 I, which ignores
    the mass of the density at the cut locus.
    """
    F, r = _find_mean(density, 0.0, res, cfg)
    x = r.minimizer
    if j_correction:
        hess = 2.0 * np.eye(density.dim) + j_limit(density, x, sched, cfg=cfg).value
    else:
        hess = 2.0 * np.eye(density.dim)
    score = _pair_matrix(density, x, 0.0, res, lambda d: -2.0 * d)
    sig = _sandwich(hess, score)
    var = _sigma_var_at(density, x, 0.0, r.value, res, cfg)
    return CovarianceReport(sig, hess, score, var, 0.0, x, r.value, r.grad_norm, j_correction)


def sigma_var(
    density: Density, t: float, res: int = 1024, cfg: hk.KernelConfig = hk.DEFAULT_CONFIG
) -> float:
    """Asymptotic variance E[F^t(x*, Xi)^2] - V^2 of the t-Varadhan variance.

    For a flat function the value is computed at the returned reference point.
    """
    F = VaradhanFunction.population(density, t, res, cfg)
    r = minimize(F)
    return _sigma_var_at(density, r.minimizer, float(t), r.value, res, cfg)


# --------------------------------------------------------------------------
# Taylor remainder of the transported gradient


@dataclass
class TaylorFit:
    radii: np.ndarray
    residuals: np.ndarray
    slope: float


def taylor_remainder(f: VaradhanFunction, x_star, radii, direction=None) -> TaylorFit:
    """Fit the decay exponent of |P grad f(x) - grad f(x*) - Hess f(x*) Log x|.

    Points are x = Exp_{x*}(r u) for a unit direction u; P is parallel
    transport back to x*. Where the residual vanishes (f exactly quadratic
    at the working precision) the slope is undefined and reported as nan.
    """
    mfd: FlatTorus = f.manifold
    x_star = np.asarray(x_star, dtype=float)
    u = np.ones(mfd.dim) if direction is None else np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    g0, h0 = f.grad(x_star), f.hess(x_star)
    radii = np.asarray(radii, dtype=float)
    res = []
    for r in radii:
        xr = mfd.exp(x_star, r * u)
        v = mfd.log(x_star, xr)
        moved = mfd.parallel_transport(xr, x_star, f.grad(xr))
        res.append(np.linalg.norm(moved - g0 - h0 @ v))
    res = np.array(res)
    if np.any(res <= 0):
        return TaylorFit(radii, res, float("nan"))
    slope = float(np.polyfit(np.log(radii), np.log(res), 1)[0])
    return TaylorFit(radii, res, slope)
