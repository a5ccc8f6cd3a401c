"""Replicated simulations of the uniform laws of large numbers and the CLTs.

Every replication draws from its own RNG stream keyed by (seed, n,
replication index), so results do not depend on how replications are
spread over worker processes; results are always reduced in replication
order.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import asymptotics as asym
from .distributions import Density, density_from_dict, integrate
from .errors import HypothesisViolation, InvalidInputError
from .heat_kernel import DEFAULT_CONFIG, KernelConfig, cost
from .manifold import FlatTorus
from .varadhan import VaradhanFunction, circle_frechet_mean, local_minimize, minimize

log = logging.getLogger(__name__)

#: Fraction of replications re-solved by full multistart to catch basin hopping.
AUDIT_EVERY = 100


@dataclass
class ExperimentConfig:
    density: Density
    t_list: tuple = (0.1,)
    n_list: tuple = (400,)
    R: int = 100
    seed: int = 0
    res: int = 1024
    audit_res: int = 64
    starts: int = 32
    probes: tuple = ()
    workers: int = 1
    kernel: KernelConfig = DEFAULT_CONFIG

    def __post_init__(self):
        if isinstance(self.density, dict):
            self.density = density_from_dict(self.density)
        self.t_list = tuple(float(t) for t in self.t_list)
        self.n_list = tuple(int(n) for n in self.n_list)
        if not self.t_list or any(t < 0 for t in self.t_list):
            raise InvalidInputError(f"t_list must be nonempty with t >= 0, got {self.t_list}")
        if not self.n_list or any(n < 1 for n in self.n_list):
            raise InvalidInputError(f"n_list must contain positive sizes, got {self.n_list}")
        if int(self.R) != self.R or self.R < 1:
            raise InvalidInputError(f"R must be a positive integer, got {self.R}")
        if self.workers is None:
            self.workers = os.cpu_count() or 1
        if self.workers < 1:
            raise InvalidInputError(f"workers must be >= 1, got {self.workers}")
        self.probes = tuple(tuple(np.atleast_1d(np.asarray(p, dtype=float)).tolist()) for p in self.probes)

    @property
    def dim(self) -> int:
        return self.density.dim

    @property
    def manifold(self) -> FlatTorus:
        return FlatTorus(self.dim)


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    runtime_s: float = 0.0

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls(**json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def config_summary(cfg: ExperimentConfig) -> dict:
    return {
        "density": cfg.density.to_dict(),
        "dim": cfg.dim,
        "t_list": list(cfg.t_list),
        "n_list": list(cfg.n_list),
        "R": cfg.R,
        "seed": cfg.seed,
        "res": cfg.res,
        "audit_res": cfg.audit_res,
        "probes": [list(p) for p in cfg.probes],
    }


def replication_rng(seed: int, n: int, rep: int) -> np.random.Generator:
    """Independent stream for replication ``rep`` at sample size ``n``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(n), int(rep))))


def _pmap(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


def covariance_compare(empirical, target) -> dict:
    """Relative Frobenius error |E - T|_F / |T|_F and PSD flags of both matrices."""
    E, T = np.atleast_2d(np.asarray(empirical, dtype=float)), np.atleast_2d(np.asarray(target, dtype=float))
    if E.shape != T.shape:
        raise InvalidInputError(f"shape mismatch {E.shape} vs {T.shape}")
    rel = float(np.linalg.norm(E - T) / np.linalg.norm(T))
    psd = lambda M: bool(np.linalg.eigvalsh(0.5 * (M + M.T)).min() >= -1e-10)  # noqa: E731
    return {"rel_frobenius": rel, "empirical_psd": psd(E), "target_psd": psd(T)}


def normality(z: np.ndarray, cov: Optional[np.ndarray] = None, bins: int = 10) -> dict:
    """Per-coordinate skewness/excess kurtosis and a chi-square test of Mahalanobis radii."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[0] == 1 and z.shape[1] > 1:
        z = z.T
    cov = np.cov(z, rowvar=False).reshape(z.shape[1], z.shape[1]) if cov is None else np.atleast_2d(cov)
    zc = z - z.mean(axis=0)
    r2 = np.einsum("ij,jk,ik->i", zc, np.linalg.inv(cov), zc)
    edges = stats.chi2.ppf(np.linspace(0, 1, bins + 1), df=z.shape[1])
    counts, _ = np.histogram(r2, bins=edges)
    p = float(stats.chisquare(counts).pvalue)
    return {
        "skewness": stats.skew(z, axis=0).tolist(),
        "excess_kurtosis": stats.kurtosis(z, axis=0).tolist(),
        "chi2_pvalue": p,
    }


def _loglog_slope(n, y):
    n, y = np.asarray(n, dtype=float), np.asarray(y, dtype=float)
    if len(n) < 2 or np.any(y <= 0) or not np.all(np.isfinite(y)):
        return float("nan")
    return float(np.polyfit(np.log(n), np.log(y), 1)[0])


# --------------------------------------------------------------------------
# empirical means


def empirical_mean(samples, t, cfg: ExperimentConfig, x0=None, audit=False):
    """Empirical t-Varadhan mean and variance.

    On the circle at t = 0 the exact arc-candidate solver is used.  Otherwise
    a local solve from ``x0`` (warm start) or a full multistart when ``x0``
    is None; ``audit`` additionally runs the multistart and keeps the better
    answer.  Returns ``(mean, variance, hopped)``.
    """
    if t == 0.0 and samples.shape[1] == 1:
        x, v = circle_frechet_mean(samples[:, 0])
        return np.array([x]), v, False
    F = VaradhanFunction.empirical(samples, t, cfg.kernel)
    if x0 is None:
        r = minimize(F, starts=cfg.starts)
        return r.minimizer, r.value, False
    x, v, _, _ = local_minimize(F, x0)
    if audit:
        r = minimize(F, starts=cfg.starts)
        if r.value < v - 1e-10:
            return r.minimizer, r.value, True
    return x, v, False


# --------------------------------------------------------------------------
# ULLN


@dataclass
class _PopulationTargets:
    grid: np.ndarray
    values: np.ndarray  # (T, X)
    means: list
    variances: list
    flat: list


def _population_targets(cfg: ExperimentConfig) -> _PopulationTargets:
    grid = cfg.manifold.grid(cfg.audit_res)
    values, means, variances, flat = [], [], [], []
    for t in cfg.t_list:
        F = VaradhanFunction.population(cfg.density, t, cfg.res, cfg.kernel)
        values.append(F.value(grid))
        r = minimize(F, starts=cfg.starts)
        means.append(r.minimizer)
        variances.append(r.value)
        flat.append(r.flat)
    return _PopulationTargets(grid, np.array(values), means, variances, flat)


def _ulln_rep(args, cfg: ExperimentConfig, pop: _PopulationTargets):
    """Per-t errors (sup_x |F_n - F|, |V_n - V|, d(x_n, x*)), shape (T, 3)."""
    n, rep = args
    xs = cfg.density.draw(replication_rng(cfg.seed, n, rep), n)
    mfd = cfg.manifold
    out = np.empty((len(cfg.t_list), 3))
    for j, t in enumerate(cfg.t_list):
        Fn = VaradhanFunction.empirical(xs, t, cfg.kernel)
        out[j, 0] = np.max(np.abs(Fn.value(pop.grid) - pop.values[j]))
        if pop.flat[j]:
            v, dist = minimize(Fn, starts=cfg.starts).value, np.nan
        else:
            x, v, _ = empirical_mean(xs, t, cfg)
            dist = mfd.distance(x, pop.means[j])
        out[j, 1] = abs(v - pop.variances[j])
        out[j, 2] = dist
    return out


ULLN_STATISTICS = ("sup_F", "abs_V", "dist_mean")


def run_ulln(cfg: ExperimentConfig) -> ExperimentReport:
    """Uniform-in-(t, x) errors of F_n, V_n and x_n per sample size.

    Records hold one row per (t, n, statistic) with the median and 90th
    percentile over replications.  ``summary["sup"]`` holds the same rows for
    the max over the t-grid taken inside each replication.
    """
    if any(b <= a for a, b in zip(cfg.n_list, cfg.n_list[1:])):
        raise InvalidInputError("n_list must be strictly increasing for ULLN experiments")
    start = time.perf_counter()
    pop = _population_targets(cfg)
    records, sup_rows = [], []
    medians = {name: [] for name in ULLN_STATISTICS}
    for n in cfg.n_list:
        out = np.array(
            _pmap(partial(_ulln_rep, cfg=cfg, pop=pop), [(n, r) for r in range(cfg.R)], cfg.workers)
        )  # (R, T, 3)
        for j, t in enumerate(cfg.t_list):
            for col, name in enumerate(ULLN_STATISTICS):
                vals = out[:, j, col]
                records.append(_summary_row(t, n, name, vals))
        sup = np.max(out, axis=1)  # nan-propagating: flat densities carry no mean distance
        for col, name in enumerate(ULLN_STATISTICS):
            row = _summary_row("sup", n, name, sup[:, col])
            medians[name].append(row["median"])
            sup_rows.append(row)
    summary = {"sup": sup_rows}
    summary.update({f"slope_{k}": _loglog_slope(cfg.n_list, v) for k, v in medians.items()})
    summary.update({f"monotone_{k}": bool(np.all(np.diff(v) < 0)) for k, v in medians.items()})
    summary["mean_tracking"] = not any(pop.flat)
    return ExperimentReport(
        "ulln", config_summary(cfg), records, summary, time.perf_counter() - start
    )


def _summary_row(t, n, name, vals):
    return {
        "t": t,
        "n": int(n),
        "statistic": name,
        "median": float(np.median(vals)),
        "p90": float(np.quantile(vals, 0.9)),
        "mean": float(np.mean(vals)),
    }


# --------------------------------------------------------------------------
# CLT for the Varadhan function at probe points


def function_covariance(cfg: ExperimentConfig, t: float, res: int = 4096) -> np.ndarray:
    """E[F_x(Xi) F_y(Xi)] - F(x) F(y) over the probe points, by quadrature."""
    mfd = cfg.manifold
    probes = np.array(cfg.probes, dtype=float)
    res = res if cfg.dim == 1 else max(64, int(res ** (1.0 / cfg.dim)))

    def probe_costs(nodes):
        return cost(mfd, t, probes[None], nodes[:, None], cfg.kernel)

    first = integrate(cfg.density, probe_costs, res)
    second = integrate(cfg.density, lambda nodes: np.einsum("ni,nj->nij", *(probe_costs(nodes),) * 2), res)
    return second - np.outer(first, first)


def _function_rep(args, cfg: ExperimentConfig, t: float, pop_vals: np.ndarray):
    n, rep = args
    xs = cfg.density.draw(replication_rng(cfg.seed, n, rep), n)
    Fn = VaradhanFunction.empirical(xs, t, cfg.kernel)
    return np.sqrt(n) * (Fn.value(np.array(cfg.probes)) - pop_vals)


def run_clt_function(cfg: ExperimentConfig, probe_points: Optional[Sequence] = None) -> ExperimentReport:
    """Empirical covariance of sqrt(n)(F_n - F) at probe points against the Gaussian-process target."""
    if probe_points is not None:
        cfg.probes = tuple(tuple(np.atleast_1d(p).tolist()) for p in probe_points)
    if len(cfg.probes) < 2:
        raise InvalidInputError("need at least two probe points")
    start = time.perf_counter()
    records = []
    probes = np.array(cfg.probes, dtype=float)
    for t in cfg.t_list:
        target = function_covariance(cfg, t)
        pop_vals = VaradhanFunction.population(cfg.density, t, cfg.res, cfg.kernel).value(probes)
        for n in cfg.n_list:
            z = np.array(
                _pmap(partial(_function_rep, cfg=cfg, t=t, pop_vals=pop_vals), [(n, r) for r in range(cfg.R)], cfg.workers)
            )
            emp = np.cov(z, rowvar=False)
            cmp_ = covariance_compare(emp, target)
            records.append(
                {
                    "t": t,
                    "n": n,
                    "empirical_cov": emp,
                    "target_cov": target,
                    "target_source": "quadrature: E[F_x F_y] - F(x) F(y)",
                    **cmp_,
                    "symmetric": bool(np.array_equal(emp, emp.T)),
                    **normality(z, target),
                }
            )
    return ExperimentReport(
        "clt_function", config_summary(cfg), _jsonable(records), {}, time.perf_counter() - start
    )


# --------------------------------------------------------------------------
# CLT for variances and means


def _mean_rep(args, cfg: ExperimentConfig, t: float, x_star: np.ndarray, V_star: float):
    n, rep = args
    mfd = cfg.manifold
    rejected = 0
    attempt = 0
    while True:
        key = rep if attempt == 0 else rep + (attempt << 32)
        xs = cfg.density.draw(replication_rng(cfg.seed, n, key), n)
        x, v, hopped = empirical_mean(xs, t, cfg, x0=x_star, audit=(rep % AUDIT_EVERY == 0))
        if mfd.dist_to_cut(x_star, x) >= 1e-9:
            break
        rejected += 1
        attempt += 1
    z = np.sqrt(n) * mfd.log(x_star, x)
    return z, np.sqrt(n) * (v - V_star), rejected, hopped


def _population_mean(cfg: ExperimentConfig, t: float):
    F = VaradhanFunction.population(cfg.density, t, cfg.res, cfg.kernel)
    r = minimize(F, starts=cfg.starts)
    if r.flat:
        raise HypothesisViolation("flat Varadhan function: the population mean is not unique")
    return r


def _simulate_means(cfg, t, n, r):
    out = _pmap(
        partial(_mean_rep, cfg=cfg, t=t, x_star=r.minimizer, V_star=r.value),
        [(n, k) for k in range(cfg.R)],
        cfg.workers,
    )
    z = np.array([o[0] for o in out])
    w = np.array([o[1] for o in out])
    rejected = int(sum(o[2] for o in out))
    hops = int(sum(o[3] for o in out))
    return z, w, rejected, hops


def run_clt_variance(cfg: ExperimentConfig) -> ExperimentReport:
    """Variance of sqrt(n)(V_n - V*) against sigma^t from quadrature."""
    start = time.perf_counter()
    records = []
    for t in cfg.t_list:
        r = _population_mean(cfg, t)
        target = asym.sigma_var(cfg.density, t, cfg.res, cfg.kernel)
        for n in cfg.n_list:
            _, w, rejected, hops = _simulate_means(cfg, t, n, r)
            emp = float(np.var(w, ddof=1))
            records.append(
                {
                    "t": t,
                    "n": n,
                    "empirical_var": emp,
                    "target_var": target,
                    "target_source": "asymptotics.sigma_var",
                    "rel_error": abs(emp / target - 1.0),
                    "cut_rejections": rejected,
                    "basin_hops": hops,
                    **normality(w[:, None], np.array([[target]])),
                }
            )
    return ExperimentReport(
        "clt_variance", config_summary(cfg), _jsonable(records), {}, time.perf_counter() - start
    )


def mean_targets(cfg: ExperimentConfig, t: float) -> dict:
    """Theoretical covariance(s) of sqrt(n) Log(x_n); at t=0 both J-corrected and naive."""
    if t > 0:
        rep = asym.sigma_t(cfg.density, t, cfg.res, cfg.kernel)
        return {"target": rep, "source": "asymptotics.sigma_t"}
    rep = asym.sigma_zero(cfg.density, cfg.res, cfg=cfg.kernel)
    naive = asym.sigma_zero(cfg.density, cfg.res, j_correction=False, cfg=cfg.kernel)
    return {"target": rep, "naive": naive, "source": "asymptotics.sigma_zero (E[Hess] + J)"}


def run_clt_mean(cfg: ExperimentConfig) -> ExperimentReport:
    """Covariance of sqrt(n) Log_{x*}(x_n) against Sigma^t (t > 0) or Sigma^0 (t = 0)."""
    start = time.perf_counter()
    records = []
    for t in cfg.t_list:
        r = _population_mean(cfg, t)
        targets = mean_targets(cfg, t)
        T = targets["target"].sigma_t
        for n in cfg.n_list:
            z, _, rejected, hops = _simulate_means(cfg, t, n, r)
            emp = np.cov(z, rowvar=False).reshape(cfg.dim, cfg.dim)
            rec = {
                "t": t,
                "n": n,
                "mean": r.minimizer,
                "empirical_cov": emp,
                "target_cov": T,
                "target_source": targets["source"],
                **covariance_compare(emp, T),
                "cut_rejections": rejected,
                "basin_hops": hops,
                **normality(z, T),
            }
            if "naive" in targets:
                N = targets["naive"].sigma_t
                rec["naive_cov"] = N
                rec["naive_rel_frobenius"] = covariance_compare(emp, N)["rel_frobenius"]
                rec["j_corrected_fits_better"] = rec["rel_frobenius"] < rec["naive_rel_frobenius"]
            records.append(rec)
    return ExperimentReport(
        "clt_mean", config_summary(cfg), _jsonable(records), {}, time.perf_counter() - start
    )
