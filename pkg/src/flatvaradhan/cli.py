"""Command-line front end.

Every run is described by one TOML file::

    [manifold]
    dim = 1

    [density]
    kind = "von_mises"          # uniform | von_mises | mixture | tabulated
    loc = [0.0]
    kappa = [2.0]

    [kernel]
    trunc_eps = 1e-14
    max_images = 64

    [schedules]
    t_list = [0.0, 0.1]
    delta_list = [0.4, 0.2, 0.1]

    [experiment]
    kind = "all"                # clt sub-experiment: mean | variance | function | all
    n_list = [400]
    R = 2000
    seed = 12345
    res = 1024

    [output]
    dir = "out"
    format = "both"             # csv | json | both

Mixtures list their components as ``[[density.components]]`` tables.
Results are computed in memory and written only once the whole command has
succeeded, so a failed run leaves no partial output behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import re
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import tomli
import tomli_w

from . import __version__
from . import asymptotics as asym
from . import montecarlo as mc
from .distributions import density_from_dict
from .errors import CutLocusError, HypothesisViolation, InvalidInputError, NumericalError
from .heat_kernel import KernelConfig
from .manifold import FlatTorus
from .varadhan import VaradhanFunction, minimize

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_HYPOTHESIS = 4

CLT_KINDS = ("mean", "variance", "function", "all")
FORMATS = ("csv", "json", "both")

# section -> key -> RunConfig attribute
_SCHEMA = {
    "manifold": {"dim": "dim"},
    "density": {},
    "kernel": {"trunc_eps": "trunc_eps", "max_images": "max_images"},
    "schedules": {"t_list": "t_list", "delta_list": "delta_list"},
    "experiment": {
        "kind": "kind",
        "n_list": "n_list",
        "R": "R",
        "seed": "seed",
        "res": "res",
        "audit_res": "audit_res",
        "starts": "starts",
        "probes": "probes",
        "point": "point",
        "workers": "workers",
    },
    "output": {"dir": "out_dir", "format": "fmt"},
}
_REQUIRED = (("manifold", "dim"), ("density", "kind"))


class ConfigError(Exception):
    """Invalid configuration, anchored to a line of the config file when possible."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass
class RunConfig:
    dim: int
    density: dict
    trunc_eps: float = 1e-14
    max_images: int = 64
    t_list: tuple = (0.1,)
    delta_list: tuple = (0.4, 0.2, 0.1)
    kind: str = "all"
    n_list: tuple = (400,)
    R: int = 100
    seed: int = 0
    res: int = 1024
    audit_res: int = 64
    starts: int = 32
    probes: tuple = ()
    point: Optional[tuple] = None
    workers: Optional[int] = None
    out_dir: str = "out"
    fmt: str = "both"

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(self.trunc_eps, self.max_images)

    def experiment(self) -> mc.ExperimentConfig:
        return mc.ExperimentConfig(
            density=density_from_dict(self.density),
            t_list=self.t_list,
            n_list=self.n_list,
            R=self.R,
            seed=self.seed,
            res=self.res,
            audit_res=self.audit_res,
            starts=self.starts,
            probes=self.probes,
            workers=self.workers,
            kernel=self.kernel,
        )

    def hash(self) -> str:
        """SHA-256 of everything that can change a numeric result.

        Worker count and output location are excluded: they never change the
        numbers, and reruns on a different pool must carry the same hash.
        """
        d = to_dict(self)
        d.pop("output", None)
        d["experiment"].pop("workers", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------
# parsing and serialization


def _key_line(text: str, section: Optional[str], key: Optional[str] = None) -> Optional[int]:
    """1-based line of ``key`` inside ``[section]`` (or of the header itself)."""
    current = None
    header_line = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[\[?\s*([^\]]+?)\s*\]\]?", line)
        if m:
            current = m.group(1)
            if current == section and header_line is None:
                header_line = i
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return i
    return header_line


def _as_float_tuple(v, name):
    if not isinstance(v, list) or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in v):
        raise ValueError(f"{name} must be a list of numbers")
    return tuple(float(a) for a in v)


def _as_int(v, name):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"{name} must be an integer")
    return int(v)


def _coerce(attr: str, v):
    if attr in ("dim", "max_images", "R", "seed", "res", "audit_res", "starts", "workers"):
        return _as_int(v, attr)
    if attr == "trunc_eps":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError("trunc_eps must be a number")
        return float(v)
    if attr in ("t_list", "delta_list"):
        return _as_float_tuple(v, attr)
    if attr == "n_list":
        if not isinstance(v, list):
            raise ValueError("n_list must be a list of integers")
        return tuple(_as_int(a, "n_list entry") for a in v)
    if attr == "probes":
        if not isinstance(v, list):
            raise ValueError("probes must be a list of points")
        return tuple(_as_float_tuple(p if isinstance(p, list) else [p], "probe") for p in v)
    if attr == "point":
        return _as_float_tuple(v if isinstance(v, list) else [v], "point")
    if attr in ("kind", "fmt", "out_dir"):
        if not isinstance(v, str):
            raise ValueError(f"{attr} must be a string")
        return v
    raise AssertionError(attr)


def parse_config(text: str) -> RunConfig:
    """Parse and validate a config file; raises ConfigError with a line anchor."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed TOML: {exc}", int(m.group(1)) if m else None) from None

    for section, value in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]", _key_line(text, section))
        if not isinstance(value, dict):
            raise ConfigError(f"[{section}] must be a table", _key_line(text, None) or 1)
    for section, key in _REQUIRED:
        if key not in raw.get(section, {}):
            raise ConfigError(f"missing required key {section}.{key}", _key_line(text, section) or 1)

    kw = {"density": dict(raw["density"])}
    for section, keys in _SCHEMA.items():
        if section == "density":
            continue
        for key, value in raw.get(section, {}).items():
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}", _key_line(text, section, key))
            try:
                kw[keys[key]] = _coerce(keys[key], value)
            except ValueError as exc:
                raise ConfigError(str(exc), _key_line(text, section, key)) from None

    cfg = RunConfig(**kw)
    _validate(cfg, text)
    return cfg


def _validate(cfg: RunConfig, text: str = "") -> None:
    def fail(msg, section, key=None):
        raise ConfigError(msg, _key_line(text, section, key) if text else None)

    if cfg.dim < 1:
        fail(f"dim must be >= 1, got {cfg.dim}", "manifold", "dim")
    dens = cfg.density
    if dens.get("kind") == "uniform":
        dens.setdefault("dim", cfg.dim)
    try:
        d = density_from_dict(dens)
    except (InvalidInputError, KeyError, TypeError, ValueError) as exc:
        fail(f"invalid density: {exc}", "density", "kind")
    if d.dim != cfg.dim:
        fail(f"density has dimension {d.dim} but manifold.dim = {cfg.dim}", "density", "kind")
    try:
        KernelConfig(cfg.trunc_eps, cfg.max_images)
    except InvalidInputError as exc:
        fail(str(exc), "kernel", "trunc_eps")
    if not cfg.t_list or any(t < 0 or not math.isfinite(t) for t in cfg.t_list):
        fail("t_list must be a nonempty list of finite times >= 0", "schedules", "t_list")
    try:
        asym.JTermSchedule(cfg.delta_list, res=max(cfg.res, 16))
    except InvalidInputError as exc:
        fail(str(exc), "schedules", "delta_list")
    if cfg.kind not in CLT_KINDS:
        fail(f"experiment.kind must be one of {CLT_KINDS}, got {cfg.kind!r}", "experiment", "kind")
    if not cfg.n_list or any(n < 1 for n in cfg.n_list):
        fail("n_list must contain positive sample sizes", "experiment", "n_list")
    checks = (("R", 1), ("res", 16), ("audit_res", 2), ("starts", 8))
    for attr, lo in checks:
        if getattr(cfg, attr) < lo:
            fail(f"{attr} must be >= {lo}, got {getattr(cfg, attr)}", "experiment", attr)
    if cfg.seed < 0:
        fail("seed must be non-negative", "experiment", "seed")
    if cfg.workers is not None and cfg.workers < 1:
        fail("workers must be >= 1", "experiment", "workers")
    if any(len(p) != cfg.dim for p in cfg.probes):
        fail(f"every probe needs {cfg.dim} coordinates", "experiment", "probes")
    if cfg.point is not None and len(cfg.point) != cfg.dim:
        fail(f"point needs {cfg.dim} coordinates", "experiment", "point")
    if cfg.fmt not in FORMATS:
        fail(f"output.format must be one of {FORMATS}, got {cfg.fmt!r}", "output", "format")


def to_dict(cfg: RunConfig) -> dict:
    """Nested-section form of a config; inverse of the parser."""
    out = {}
    for section, keys in _SCHEMA.items():
        if section == "density":
            out["density"] = json.loads(json.dumps(cfg.density))
            continue
        sec = {}
        for key, attr in keys.items():
            v = getattr(cfg, attr)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = [list(p) if isinstance(p, tuple) else p for p in v]
            sec[key] = v
        out[section] = sec
    return out


def serialize_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def load_config(path: str | os.PathLike) -> tuple[RunConfig, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not UTF-8 text") from None
    return parse_config(text), text


# --------------------------------------------------------------------------
# output formatting


def fmt_value(v) -> str:
    """CSV cell: 17 significant digits for floats (exact double round trip)."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    return str(v)


def csv_text(header: list, rows: list, config_hash: str) -> str:
    buf = io.StringIO(newline="")
    buf.write(f"# config_hash={config_hash}\n")
    buf.write(",".join(header) + "\n")
    for row in rows:
        if len(row) != len(header):
            raise AssertionError("row width does not match header")
        buf.write(",".join(fmt_value(v) for v in row) + "\n")
    return buf.getvalue()


def _parse_cell(cell: str):
    if cell in ("true", "false"):
        return cell == "true"
    for conv in (int, float):
        try:
            return conv(cell)
        except ValueError:
            pass
    return cell


def csv_to_json(text: str) -> str:
    """Re-encode a CSV payload as a JSON table (17 digits round-trip exactly)."""
    lines = text.splitlines()
    config_hash = lines[0].split("=", 1)[1]
    header = lines[1].split(",")
    rows = [[_parse_cell(c) for c in line.split(",")] for line in lines[2:]]
    return _json_text({"config_hash": config_hash, "columns": header, "rows": rows})


def select_format(files: dict, fmt: str) -> dict:
    """Keep csv, json or both kinds of payload; json turns each CSV into a table."""
    if fmt == "both":
        return files
    if fmt == "csv":
        return {k: v for k, v in files.items() if not k.endswith(".json")}
    out = {}
    for name, text in files.items():
        if name.endswith(".csv"):
            out[name[:-4] + ".json"] = csv_to_json(text)
        else:
            out[name] = text
    return out


def _coord_names(prefix, m):
    return [f"{prefix}{k}" for k in range(m)]


def _matrix_names(prefix, m):
    return [f"{prefix}_{i}{j}" for i in range(m) for j in range(m)]


def _json_text(payload: dict) -> str:
    return json.dumps(mc._jsonable(payload), indent=2, sort_keys=True, allow_nan=True) + "\n"


# --------------------------------------------------------------------------
# commands; each returns {filename: text, ...} plus extra manifest entries


def _base_point(cfg: RunConfig, density):
    if cfg.point is not None:
        return np.array(cfg.point, dtype=float)
    r = minimize(VaradhanFunction.population(density, 0.0, cfg.res, cfg.kernel), starts=cfg.starts)
    return r.minimizer


def cmd_varadhan(cfg: RunConfig, h: str) -> dict:
    density = density_from_dict(cfg.density)
    m = cfg.dim
    grid = FlatTorus(m).grid(cfg.audit_res)
    grid_rows, mean_rows = [], []
    for t in cfg.t_list:
        F = VaradhanFunction.population(density, t, cfg.res, cfg.kernel)
        vals = F.value(grid)
        if not np.all(np.isfinite(vals)):
            raise NumericalError(f"non-finite Varadhan values at t={t}")
        grid_rows += [[t, *p, v] for p, v in zip(grid, vals)]
        r = minimize(F, starts=cfg.starts)
        mean_rows.append([t, *r.minimizer, r.value, r.uniqueness_margin, r.converged, r.flat])
    return {
        "varadhan_grid.csv": csv_text(["t", *_coord_names("x", m), "F_value"], grid_rows, h),
        "varadhan_means.csv": csv_text(
            ["t", *_coord_names("mean", m), "variance", "uniqueness_margin", "converged", "flat"],
            mean_rows,
            h,
        ),
    }


def cmd_jterm(cfg: RunConfig, h: str) -> dict:
    density = density_from_dict(cfg.density)
    m = cfg.dim
    x = _base_point(cfg, density)
    sched = asym.JTermSchedule(cfg.delta_list, res=cfg.res)
    jl = asym.j_limit(density, x, sched, cfg=cfg.kernel)
    header = ["row", "delta", "t", *_matrix_names("J", m), "spread"]
    rows = []
    for p in jl.per_delta:
        spread = float(np.max(p["limsup"] - p["liminf"]))
        for e in jl.table:
            if e["delta"] == p["delta"]:
                rows.append(["table", e["delta"], e["t"], *np.ravel(e["J"]), spread])
    rows.append(["limit", 0.0, 0.0, *np.ravel(jl.value), jl.spread])
    files = {"jterm.csv": csv_text(header, rows, h)}
    files["_extra"] = {"base_point": x.tolist(), "converged": jl.converged}
    return files


def cmd_asymptotics(cfg: RunConfig, h: str) -> dict:
    density = density_from_dict(cfg.density)
    m = cfg.dim
    sched = asym.JTermSchedule(cfg.delta_list, res=cfg.res)
    s0 = asym.sigma_zero(density, cfg.res, sched, cfg=cfg.kernel)
    x0 = s0.base
    target_grad = asym.frechet_gradient(density, x0, cfg.res)
    header = ["t", "grad_gap", "hess_gap", *_matrix_names("sigma", m), "sigma_rel_gap"]
    rows = []
    for t in sorted((t for t in cfg.t_list if t > 0), reverse=True):
        F = VaradhanFunction.population(density, t, cfg.res, cfg.kernel)
        grad_gap = float(np.linalg.norm(F.grad(x0) - target_grad))
        hess_gap = float(np.linalg.norm(F.hess(x0) - s0.hess) / max(np.linalg.norm(s0.hess), 1.0))
        st = asym.sigma_t(density, t, cfg.res, cfg.kernel)
        rel = float(np.linalg.norm(st.sigma_t - s0.sigma_t) / np.linalg.norm(s0.sigma_t))
        rows.append([t, grad_gap, hess_gap, *np.ravel(st.sigma_t), rel])
    rows.append([0.0, 0.0, 0.0, *np.ravel(s0.sigma_t), 0.0])
    return {"asymptotics.csv": csv_text(header, rows, h), "_extra": {"base_point": x0.tolist()}}


def _report_payload(report: mc.ExperimentReport, h: str) -> dict:
    d = report.to_dict()
    d.pop("runtime_s", None)  # timing lives in the manifest so payloads stay reproducible
    d["config_hash"] = h
    return d


def cmd_ulln(cfg: RunConfig, h: str) -> dict:
    report = mc.run_ulln(cfg.experiment())
    header = ["t", "n", "statistic", "median", "p90", "mean"]
    files = {}
    if cfg.fmt in ("csv", "both"):
        rows = [[r[k] for k in header] for r in report.records]
        sup = [[r[k] for k in header] for r in report.summary["sup"]]
        files["ulln.csv"] = csv_text(header, rows, h)
        files["ulln_sup.csv"] = csv_text(header, sup, h)
    if cfg.fmt in ("json", "both"):
        files["ulln_report.json"] = _json_text(_report_payload(report, h))
    files["_extra"] = {"runtime_s": report.runtime_s}
    return files


def _flatten(prefix, v):
    if isinstance(v, (list, tuple, np.ndarray)):
        a = np.asarray(v, dtype=float)
        for idx in np.ndindex(a.shape):
            yield prefix + "_" + "".join(str(i) for i in idx), float(a[idx])
    elif isinstance(v, (bool, np.bool_, int, float, np.integer, np.floating)):
        yield prefix, v


def clt_rows(report: mc.ExperimentReport) -> list:
    """One row per (t, n, statistic) for a CLT report."""
    rows = []
    for rec in report.records:
        for key in sorted(rec):
            if key in ("t", "n"):
                continue
            for name, value in _flatten(key, rec[key]):
                rows.append([report.kind, rec["t"], rec["n"], name, value])
    return rows


def cmd_clt(cfg: RunConfig, h: str) -> dict:
    ecfg = cfg.experiment()
    kinds = ("function", "variance", "mean") if cfg.kind == "all" else (cfg.kind,)
    if "function" in kinds and not ecfg.probes:
        if cfg.dim != 1:
            raise ConfigError("clt function experiments on a torus need experiment.probes")
        ecfg.probes = ((0.0,), (np.pi / 2,), (np.pi,))
    runners = {"function": mc.run_clt_function, "variance": mc.run_clt_variance, "mean": mc.run_clt_mean}
    reports = [runners[k](ecfg) for k in kinds]
    files = {}
    if cfg.fmt in ("csv", "both"):
        rows = [r for rep in reports for r in clt_rows(rep)]
        files["clt.csv"] = csv_text(["experiment", "t", "n", "statistic", "value"], rows, h)
    if cfg.fmt in ("json", "both"):
        for rep in reports:
            files[f"{rep.kind}_report.json"] = _json_text(_report_payload(rep, h))
    files["_extra"] = {"runtime_s": {rep.kind: rep.runtime_s for rep in reports}}
    return files


COMMANDS = {
    "varadhan": cmd_varadhan,
    "jterm": cmd_jterm,
    "asymptotics": cmd_asymptotics,
    "ulln": cmd_ulln,
    "clt": cmd_clt,
}


# --------------------------------------------------------------------------
# entry point


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run(command: str, cfg: RunConfig) -> dict:
    """Run a command and write its files; returns the manifest."""
    h = cfg.hash()
    started = _now()
    t0 = time.perf_counter()
    files = COMMANDS[command](cfg, h)
    extra = files.pop("_extra", {})
    files = select_format(files, cfg.fmt)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in files.items():
        p = out / name
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        paths.append(str(p))
    manifest = {
        "command": command,
        "config_hash": h,
        "seed": cfg.seed,
        "version": __version__,
        "started": started,
        "finished": _now(),
        "elapsed_s": time.perf_counter() - t0,
        "workers": cfg.workers,
        "outputs": paths,
        **extra,
    }
    (out / "config.toml").write_text(serialize_config(cfg), encoding="utf-8")
    (out / f"manifest_{command}.json").write_text(_json_text(manifest), encoding="utf-8")
    return manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flatvaradhan",
        description="Varadhan functions, means and CLT experiments on flat tori.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "varadhan": "evaluate F^t on a grid and report Varadhan means per t",
        "jterm": "J-term convergence table and extrapolated limit",
        "asymptotics": "gradient/Hessian gaps and Sigma^t against the Sigma^0 target",
        "ulln": "uniform law of large numbers experiment",
        "clt": "central limit theorem experiments (experiment.kind selects which)",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("config", help="TOML config file")
        s.add_argument("--out", help="output directory (overrides output.dir)")
        s.add_argument("--seed", type=int, help="override experiment.seed")
        s.add_argument("--R", type=int, dest="R", help="override experiment.R")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, _ = load_config(args.config)
        over = {k: v for k, v in (("seed", args.seed), ("R", args.R)) if v is not None}
        if args.out:
            over["out_dir"] = args.out
        if over:
            cfg = dataclasses.replace(cfg, **over)
            _validate(cfg)
        manifest = run(args.command, cfg)
    except ConfigError as exc:
        print(f"{args.config}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidInputError as exc:
        print(f"{args.config}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HypothesisViolation as exc:
        print(f"hypothesis violation: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except (NumericalError, CutLocusError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for path in manifest["outputs"]:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
