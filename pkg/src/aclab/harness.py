"""Experiment configuration, orchestration, persistence and reports.

Configs are TOML (or JSON) trees with sections [experiment], [grid], [noise], [horizon], [tracking], [run] and one
section per experiment; times are always macroscopic. Every output file is listed in manifest.json with its sha256.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (CUBIC, ConfigurationError, Field, GateFailure, NumericError, build_grid,
                   commensurate_half_length, inner, solve_profile)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXPERIMENTS = ("profile", "spectrum", "coeffs", "dzeta", "kernel", "flow", "simulate", "compare",
               "verify-identities", "closeness-scan")

DEFAULTS = {
    "experiment": {"name": None},
    "grid": {"spacing": None, "half_length": None, "pad": 10.0, "dt": None},
    "noise": {"epsilon": 0.05, "gamma": 0.5, "cutoff": "bump", "master_seed": 0},
    "horizon": {"horizon_macroscopic_T": 1.0, "n_samples": 100},
    "tracking": {"kappa": 0.2, "t_smooth": 2.0, "check_every": 1, "freeze_on_stop": True},
    "run": {"paths": 10, "threads": 1, "first_index": 0},
    "profile": {"scheme": "compact"},
    "spectrum": {"k": 5},
    "coeffs": {"refine": True, "cross": True, "t_max": 12.0},
    "state": {"theta": 0.0, "amplitude": 0.0, "seed": 0, "t_extract": 10.0, "y": 0.0, "t": 10.0,
              "t_flow": 10.0},
    "compare": {"spde": None, "sde_paths": 100000, "sde_dt": 1e-3, "times": [0.25, 0.5, 1.0],
                "alpha1": None, "alpha2": None, "n_boot": 1000, "n_bins": 20},
    "identities": {"n": 6, "trials": 100, "fdb_order": 4},
    "scan": {"epsilons": [0.1, 0.05, 0.025], "paths": 40},
    "gates": {"closeness_fraction": 0.95, "ks_pvalue": 0.01, "variance_ratio": [0.8, 1.25],
              "diffusion_slope": [0.85, 1.15], "drift_slope": [0.6, 1.4], "slope_range": [0.5, 1.0],
              "identity_relative": 1e-10, "faa_di_bruno": 1e-5},
}

GRID_DEFAULTS = {"profile": (20.0, 0.01), "spectrum": (30.0, 0.01), "coeffs": (30.0, 0.01),
                 "dzeta": (12.0, 0.1), "kernel": (12.0, 0.1), "flow": (12.0, 0.1)}

EXIT_OK, EXIT_GATE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4


# ------------------------------------------------------------------ config


def load_config(path) -> dict:
    p = Path(path)
    raw = p.read_bytes()
    try:
        return json.loads(raw) if p.suffix == ".json" else tomllib.loads(raw.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot parse {p}: {exc}") from exc


def resolve_config(user: dict) -> dict:
    """Defaults merged with ``user``; every violated constraint is reported at once."""
    errs = []
    cfg = copy.deepcopy(DEFAULTS)
    for sec, vals in user.items():
        if sec not in cfg:
            errs.append(f"unknown section [{sec}]")
            continue
        if not isinstance(vals, dict):
            errs.append(f"[{sec}] must be a table")
            continue
        for k, v in vals.items():
            if k not in cfg[sec]:
                errs.append(f"unknown key {sec}.{k}")
            else:
                cfg[sec][k] = v
    name = cfg["experiment"]["name"]
    if name not in EXPERIMENTS:
        errs.append(f"experiment.name must be one of {', '.join(EXPERIMENTS)} (got {name!r})")
    try:
        sim_config(cfg)
    except ConfigurationError as exc:
        errs.extend(str(exc).split("; "))
    except (TypeError, ValueError) as exc:
        errs.append(f"bad value in [noise]/[grid]/[horizon]/[tracking]: {exc}")
    g = cfg["grid"]
    if g["half_length"] is not None or g["spacing"] is not None:
        L, h = grid_params(cfg)
        try:
            build_grid(L, h)
        except ConfigurationError as exc:
            errs.append(f"grid: {exc}")
    if not isinstance(cfg["run"]["paths"], int) or cfg["run"]["paths"] < 0:
        errs.append("run.paths must be a nonnegative integer")
    if not isinstance(cfg["run"]["threads"], int) or cfg["run"]["threads"] < 1:
        errs.append("run.threads must be a positive integer")
    if name == "compare" and not cfg["compare"]["spde"]:
        errs.append("compare.spde must name a simulate output directory")
    if name == "verify-identities":
        if not 1 <= int(cfg["identities"]["n"]) <= 6:
            errs.append("identities.n must lie in [1, 6]")
        if not 1 <= int(cfg["identities"]["fdb_order"]) <= 4:
            errs.append("identities.fdb_order must lie in [1, 4]")
    if name == "closeness-scan":
        sc_ = cfg["scan"]
        if len(sc_["epsilons"]) < 2:
            errs.append("scan.epsilons needs at least two values for a slope")
        if isinstance(sc_["paths"], list) and len(sc_["paths"]) != len(sc_["epsilons"]):
            errs.append("scan.paths must be one integer or one per epsilon")
    if errs:
        raise ConfigurationError("; ".join(errs))
    return cfg


def grid_params(cfg: dict) -> tuple[float, float]:
    L0, h0 = GRID_DEFAULTS.get(cfg["experiment"]["name"], (12.0, 0.1))
    h = float(cfg["grid"]["spacing"] if cfg["grid"]["spacing"] is not None else h0)
    L = cfg["grid"]["half_length"]
    return (float(L) if L is not None else commensurate_half_length(L0, h)), h


def sim_config(cfg: dict, **over):
    from .spde import SimConfig

    g, n, hz, tr = cfg["grid"], cfg["noise"], cfg["horizon"], cfg["tracking"]
    kw = dict(epsilon=float(n["epsilon"]), gamma=float(n["gamma"]), kappa=float(tr["kappa"]),
              horizon_macroscopic_T=float(hz["horizon_macroscopic_T"]),
              spacing=float(g["spacing"]) if g["spacing"] is not None else 0.1, pad=float(g["pad"]),
              dt=None if g["dt"] is None else float(g["dt"]), cutoff=str(n["cutoff"]),
              master_seed=int(n["master_seed"]), n_samples=int(hz["n_samples"]), t_smooth=float(tr["t_smooth"]),
              check_every=int(tr["check_every"]), freeze_on_stop=bool(tr["freeze_on_stop"]))
    kw.update(over)
    return SimConfig(**kw)


# ---------------------------------------------------------------- records


@dataclass
class Gate:
    name: str
    value: float
    bound: object
    passed: bool


@dataclass
class RunRecord:
    experiment: str
    config: dict
    master_seed: int
    version: str
    out_dir: str
    files: dict = field(default_factory=dict)  # relative path -> sha256
    gates: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    status: str = "ok"

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.gates)

    def failed_gates(self) -> list[str]:
        return [g.name for g in self.gates if not g.passed]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        return float(o) if math.isfinite(o) else repr(float(o))
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def atomic_write(path, data: bytes | str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, p)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_bytes(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


class _Writer:
    def __init__(self, record: RunRecord):
        self.rec = record
        self.root = Path(record.out_dir)

    def write(self, rel: str, data) -> Path:
        p = self.root / rel
        atomic_write(p, data)
        self.rec.files[rel] = sha256_file(p)
        return p

    def json(self, rel: str, obj) -> Path:
        return self.write(rel, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def csv(self, rel: str, header, rows) -> Path:
        return self.write(rel, csv_bytes(header, rows))


def verify_manifest(out_dir) -> list[str]:
    """Listed files that are missing or whose content hash changed."""
    root = Path(out_dir)
    man = json.loads((root / "manifest.json").read_text())
    bad = []
    for rel, digest in man["files"].items():
        p = root / rel
        if not p.exists():
            bad.append(f"missing: {rel}")
        elif sha256_file(p) != digest:
            bad.append(f"hash mismatch: {rel}")
    return bad


# ------------------------------------------------------------ experiments


def perturbed_state(grid, profile, theta: float = 0.0, amplitude: float = 0.0, seed: int = 0) -> Field:
    """m_theta plus a few seeded Gaussian bumps of total size ``amplitude``."""
    v = profile.translate(grid, theta).values.copy()
    if amplitude:
        rng = np.random.default_rng(seed)
        x = grid.x
        for _ in range(3):
            c, w, s = rng.uniform(-3, 3) + theta, rng.uniform(0.7, 1.5), rng.standard_normal()
            v += amplitude / 3 * s * np.exp(-((x - c) / w) ** 2)
    return Field(grid, v)


def _gate(rec: RunRecord, name, value, lo=None, hi=None):
    value = float(value)
    ok = math.isfinite(value) and (lo is None or value >= lo) and (hi is None or value <= hi)
    bound = [lo, hi] if lo is not None and hi is not None else (f">= {lo}" if lo is not None else f"<= {hi}")
    rec.gates.append(Gate(name, value, bound, bool(ok)))


def _exp_profile(cfg, rec, w, threads):
    L, h = grid_params(cfg)
    prof = solve_profile(CUBIC, build_grid(L, h), scheme=cfg["profile"]["scheme"])
    x = prof.grid.x
    w.csv("profile.csv", ["x", "m", "m1", "m2", "m3"],
          zip(x, prof.m.values, prof.mp.values, prof.mpp.values, prof.mppp.values))
    err = float(np.max(np.abs(prof.m.values - np.tanh(x / math.sqrt(2)))))
    l2 = prof.l2_sq
    rec.summary.update(sup_error_vs_closed_form=err, l2_sq_mprime=l2, alpha1=1 / math.sqrt(l2),
                       decay_constant=prof.decay_constant, residual=prof.residual)
    _gate(rec, "profile_sup_error", err, hi=1e-6)
    _gate(rec, "l2_sq_mprime_error", abs(l2 - 2 * math.sqrt(2) / 3), hi=1e-6)


def _exp_spectrum(cfg, rec, w, threads):
    from .linop import assemble, spectrum

    L, h = grid_params(cfg)
    prof = solve_profile(CUBIC, build_grid(L, h), scheme="lattice")
    sp = spectrum(assemble(prof), int(cfg["spectrum"]["k"]))
    mp = prof.mp.values
    phi0 = sp.eigenfields[0].values
    cos = abs(inner(phi0, mp, h)) / math.sqrt(inner(phi0, phi0, h) * inner(mp, mp, h))
    w.csv("eigenvalues.csv", ["index", "eigenvalue", "residual"],
          zip(range(len(sp.eigenvalues)), sp.eigenvalues, sp.residuals))
    w.csv("eigenfields.csv", ["x"] + [f"phi{j}" for j in range(len(sp.eigenfields))],
          zip(prof.grid.x, *[f.values for f in sp.eigenfields]))
    rec.summary.update(eigenvalues=sp.eigenvalues, ground_cosine=cos)
    _gate(rec, "lambda0", abs(sp.eigenvalues[0]), hi=1e-6)
    if len(sp.eigenvalues) > 1:
        _gate(rec, "lambda1_minus_1.5", abs(sp.eigenvalues[1] - 1.5), hi=2e-3)
    _gate(rec, "ground_cosine", cos, lo=1 - 1e-8)


def _exp_coeffs(cfg, rec, w, threads):
    from .correctors import limit_coefficients

    L, h = grid_params(cfg)
    c = cfg["coeffs"]
    lc = limit_coefficients(CUBIC, h=h, L=L, refine=bool(c["refine"]), cross=bool(c["cross"]),
                            t_max=float(c["t_max"]))
    w.json("coefficients.json", lc.to_dict())
    rec.summary.update(alpha1=lc.alpha1, alpha2=lc.alpha2)
    if "alpha2_relative" in lc.refinement_deltas:
        _gate(rec, "alpha2_refinement_relative", lc.refinement_deltas["alpha2_relative"], hi=0.02)
    if "alpha2_cross_theta_spread" in lc.diagnostics:
        _gate(rec, "alpha2_cross_theta_spread", lc.diagnostics["alpha2_cross_theta_spread"], hi=1e-3)
        _gate(rec, "alpha2_route_discrepancy", lc.diagnostics["alpha2_cross_relative_discrepancy"], hi=0.05)


def _state(cfg):
    L, h = grid_params(cfg)
    grid = build_grid(L, h)
    prof = solve_profile(CUBIC, grid, scheme="lattice")
    s = cfg["state"]
    return prof, perturbed_state(grid, prof, float(s["theta"]), float(s["amplitude"]), int(s["seed"]))


def _exp_dzeta(cfg, rec, w, threads):
    from .kernels import extract_lambda

    prof, v = _state(cfg)
    lam = extract_lambda(v, prof, float(cfg["state"]["t_extract"]), second="none")
    dz = -lam.lambda1.values
    w.csv("dzeta.csv", ["x", "v", "dzeta"], zip(v.grid.x, v.values, dz))
    mp_c = prof.translate(v.grid, lam.center, 1).values
    rec.summary.update(center=lam.center, decomposition_residual=lam.residual,
                       dzeta_dot_mprime_center=inner(dz, mp_c, v.grid.spacing))


def _exp_kernel(cfg, rec, w, threads):
    from .kernels import first_kernel

    prof, v = _state(cfg)
    s = cfg["state"]
    ks = first_kernel(v, float(s["y"]), float(s["t"]))
    w.csv("kernel.csv", ["x", "p"], zip(v.grid.x, ks.slice.values))
    rec.summary.update(y=ks.sources[0], time=ks.time, mass=float(np.sum(ks.slice.values) * v.grid.spacing))


def _exp_flow(cfg, rec, w, threads):
    from .flow import dist_to_manifold_array, flow

    prof, v = _state(cfg)
    fr = flow(v, prof, float(cfg["state"]["t_flow"]))
    rows = [(t, c, dist_to_manifold_array(u.values, v.grid, prof, center=c))
            for (t, u), c in zip(fr.checkpoints, fr.centers)]
    w.csv("flow.csv", ["t", "center", "dist"], rows)
    rec.summary.update(limit_center=fr.limit_center, fitted_rate=fr.fitted_rate, converged=fr.converged)


def _path_rows(p):
    st = p.stop_time
    return [(t, xi, d, st is not None and t >= st - 1e-15)
            for t, xi, d in zip(p.interface.times, p.interface.xi, p.dist)]


def _exp_simulate(cfg, rec, w, threads):
    from .spde import run_ensemble

    sc = sim_config(cfg)
    n = int(cfg["run"]["paths"])
    first = int(cfg["run"]["first_index"])
    paths = run_ensemble(sc, n, threads=threads, first_index=first) if n else []
    entries = []
    for p in paths:
        rel = f"paths/path_{p.path_index:06d}.csv"
        w.csv(rel, ["t", "xi", "dist", "stopped"], _path_rows(p))
        entries.append(dict(path_index=p.path_index, master_seed=p.master_seed, file=rel, stopped=p.stopped,
                            stop_time=p.stop_time, sup_dist=p.sup_dist, invalid=p.invalid, sup_abs=p.sup_abs,
                            noise_sha256=p.noise_digest))
    w.json("ensemble.json", dict(config=sc.to_dict(), time_scale=sc.time_scale, threshold=sc.threshold,
                                 step=sc.step, n_steps=sc.n_steps, half_length=sc.half_length, paths=entries))
    if not paths:
        rec.status = "no paths"
        return
    sup = np.array([p.sup_dist for p in paths])
    frac = float(np.mean(sup <= sc.threshold))
    rec.summary.update(n_paths=len(paths), n_stopped=int(sum(p.stopped for p in paths)),
                       n_invalid=int(sum(p.invalid for p in paths)), threshold=sc.threshold,
                       median_sup_dist=float(np.median(sup)), fraction_within_threshold=frac)
    _gate(rec, "closeness_fraction", frac, lo=float(cfg["gates"]["closeness_fraction"]))
    _gate(rec, "invalid_paths", rec.summary["n_invalid"], hi=0)


def read_spde_run(run_dir):
    """(ensemble.json contents, list of per-path column dicts) from a simulate output directory."""
    root = Path(run_dir)
    bad = verify_manifest(root)
    if bad:
        raise ConfigurationError(f"SPDE run {root} fails hash verification: {', '.join(bad)}")
    ens = json.loads((root / "ensemble.json").read_text())
    out = []
    for e in ens["paths"]:
        with open(root / e["file"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        out.append({k: np.array([float(r[k]) for r in rows]) for k in ("t", "xi", "dist", "stopped")})
    return ens, out


def _exp_compare(cfg, rec, w, threads):
    from .correctors import Cutoff, alpha1 as _a1, alpha2_spectral
    from .limit import SdeConfig, compare_distributions, empirical_qv_drift, ensemble_paths
    from .spde import InterfaceSeries, SimConfig

    c, gates = cfg["compare"], cfg["gates"]
    ens, paths = read_spde_run(c["spde"])
    sc = SimConfig(**ens["config"])
    rec.summary["spde_config"] = ens["config"]
    if not paths:
        rec.status = "no paths"
        return
    a1, a2 = c["alpha1"], c["alpha2"]
    if a1 is None or a2 is None:
        L = commensurate_half_length(30.0, sc.spacing)
        prof = solve_profile(CUBIC, build_grid(L, sc.spacing), scheme="lattice")
        a1 = _a1(prof) if a1 is None else a1
        a2 = alpha2_spectral(prof)[0] if a2 is None else a2
    a1, a2 = float(a1), float(a2)
    times = [float(t) for t in c["times"]]
    T = sc.horizon_macroscopic_T
    if any(t <= 0 or t > T + 1e-12 for t in times):
        raise ConfigurationError(f"compare times must lie in (0, {T}]")
    sde = SdeConfig(a1, a2, Cutoff(sc.cutoff), xi0=sc.xi0, dt=float(c["sde_dt"]), horizon=T,
                    master_seed=sc.master_seed)
    rec_times = [round(t / sde.dt) * sde.dt for t in times]
    X = ensemble_paths(sde, int(c["sde_paths"]), rec_times)
    rows, reports = [], {}
    for j, t in enumerate(times):
        spde = np.array([p["xi"][np.argmin(np.abs(p["t"] - t))] for p in paths])
        stopped = np.array([p["stopped"][np.argmin(np.abs(p["t"] - t))] > 0 for p in paths])
        r = compare_distributions(spde, X[:, j], n_boot=int(c["n_boot"]), seed=sc.master_seed, time=t)
        reports[repr(t)] = r.to_dict()
        reports[repr(t)]["n_stopped_by_t"] = int(stopped.sum())
        if (~stopped).sum() > 1:
            rc = compare_distributions(spde[~stopped], X[:, j], n_boot=int(c["n_boot"]), seed=sc.master_seed, time=t)
            reports[repr(t)]["conditioned"] = {"ks_statistic": rc.ks_statistic, "ks_pvalue": rc.ks_pvalue,
                                               "variance_ratio": rc.variance_ratio, "n_spde": rc.n_spde}
        for name, va, sa, vb, sb in r.moment_table:
            rows.append((t, name, va, sa, vb, sb))
        _gate(rec, f"ks_pvalue[t={t}]", r.ks_pvalue, lo=float(gates["ks_pvalue"]))
        if abs(t - T) < 1e-12:
            lo, hi = gates["variance_ratio"]
            _gate(rec, "variance_ratio[T]", r.variance_ratio, lo=float(lo), hi=float(hi))
    series = []
    for p in paths:
        keep = np.isfinite(p["xi"])
        if sc.freeze_on_stop:
            keep &= p["stopped"] == 0
        if keep.sum() >= 50:
            series.append(InterfaceSeries(p["t"][keep], p["xi"][keep]))
    fits = {}
    if series:
        q = empirical_qv_drift(series, a1, a2, Cutoff(sc.cutoff), n_bins=int(c["n_bins"]))
        fits = {"diffusion": asdict(q.diffusion), "drift": asdict(q.drift), "n_series": len(series)}
        lo, hi = gates["diffusion_slope"]
        _gate(rec, "qv_diffusion_slope", q.diffusion.slope, lo=float(lo), hi=float(hi))
        lo, hi = gates["drift_slope"]
        _gate(rec, "qv_drift_slope", q.drift.slope, lo=float(lo), hi=float(hi))
    w.csv("moments.csv", ["t", "moment", "spde", "spde_se", "sde", "sde_se"], rows)
    w.json("comparison.json", dict(alpha1=a1, alpha2=a2, sde=asdict(sde) | {"cutoff": sde.cutoff.name},
                                   reports=reports, qv_drift=fits))
    rec.summary.update(alpha1=a1, alpha2=a2, n_spde=len(paths), n_sde=int(c["sde_paths"]),
                       ks_pvalues={repr(t): reports[repr(t)]["ks_pvalue"] for t in times})


def _exp_identities(cfg, rec, w, threads):
    from .partitions import bell, check_partition_identities, enumerate_partitions, faa_di_bruno_check

    s = cfg["identities"]
    rng = np.random.default_rng(int(cfg["noise"]["master_seed"]))
    rows = []
    for n in range(1, int(s["n"]) + 1):
        r = check_partition_identities(n, int(s["trials"]), rng)
        cnt = len(enumerate_partitions(n))
        rows.append((n, cnt, bell(n), r.max_abs, r.max_rel))
        _gate(rec, f"identity_relative[n={n}]", r.max_rel, hi=float(cfg["gates"]["identity_relative"]))
        _gate(rec, f"bell_count_mismatch[n={n}]", abs(cnt - bell(n)), hi=0)
    w.csv("identities.csv", ["n", "partitions", "bell", "max_abs_residual", "max_relative_residual"], rows)
    frows = []
    for order in range(1, int(s["fdb_order"]) + 1):
        res = faa_di_bruno_check(3, 2, order, rng)
        exact = faa_di_bruno_check(3, 2, order, rng, kind="quadratic-linear")
        frows.append((order, res, exact))
        _gate(rec, f"faa_di_bruno[order={order}]", res, hi=float(cfg["gates"]["faa_di_bruno"]))
    w.csv("faa_di_bruno.csv", ["order", "trig_vs_fd", "quadratic_linear_exact"], frows)
    rec.summary.update(identities=rows, faa_di_bruno=frows)


def fit_loglog_slope(eps, values, n_boot: int = 0, samples=None, seed: int = 0):
    """Slope of log(values) against log(eps); optional bootstrap CI from per-eps samples (medians)."""
    le = np.log(np.asarray(eps, float))
    slope = float(np.polyfit(le, np.log(np.asarray(values, float)), 1)[0])
    if not n_boot or samples is None:
        return slope, None
    rng = np.random.default_rng(seed)
    bs = []
    for _ in range(n_boot):
        meds = [np.median(rng.choice(s, size=len(s))) for s in samples]
        bs.append(np.polyfit(le, np.log(meds), 1)[0])
    return slope, (float(np.percentile(bs, 2.5)), float(np.percentile(bs, 97.5)))


def _exp_scan(cfg, rec, w, threads):
    from .spde import run_ensemble

    s = cfg["scan"]
    eps_list = [float(e) for e in s["epsilons"]]
    counts = s["paths"] if isinstance(s["paths"], list) else [s["paths"]] * len(eps_list)
    rows, samples = [], []
    for e, n in zip(eps_list, map(int, counts)):
        sc = sim_config(cfg, epsilon=e)
        paths = run_ensemble(sc, n, threads=threads) if n else []
        if not paths:
            rec.status = "no paths"
            return
        sup = np.array([p.sup_dist for p in paths])
        samples.append(sup)
        frac = float(np.mean(sup <= sc.threshold))
        rows.append((e, sc.threshold, float(np.median(sup)), float(np.percentile(sup, 95)), frac, len(paths),
                     int(sum(p.stopped for p in paths)), sc.n_steps))
        w.csv(f"sup_dist_eps_{e!r}.csv", ["path_index", "sup_dist", "stopped"],
              [(p.path_index, p.sup_dist, p.stopped) for p in paths])
        if abs(e - float(cfg["noise"]["epsilon"])) < 1e-15:
            _gate(rec, f"closeness_fraction[eps={e}]", frac, lo=float(cfg["gates"]["closeness_fraction"]))
    slope, ci = fit_loglog_slope(eps_list, [r[2] for r in rows], 1000, samples, int(cfg["noise"]["master_seed"]))
    w.csv("scan.csv", ["epsilon", "threshold", "median_sup_dist", "p95_sup_dist", "fraction_within", "n_paths",
                       "n_stopped", "n_steps"], rows)
    lo, hi = cfg["gates"]["slope_range"]
    _gate(rec, "median_sup_dist_slope", slope, lo=float(lo), hi=float(hi))
    rec.summary.update(slope=slope, slope_ci95=ci, target=float(cfg["noise"]["gamma"]) + 0.25, table=rows)


_DISPATCH = {"profile": _exp_profile, "spectrum": _exp_spectrum, "coeffs": _exp_coeffs, "dzeta": _exp_dzeta,
             "kernel": _exp_kernel, "flow": _exp_flow, "simulate": _exp_simulate, "compare": _exp_compare,
             "verify-identities": _exp_identities, "closeness-scan": _exp_scan}


def run_config(user_cfg: dict, out_dir, threads: int | None = None) -> RunRecord:
    cfg = resolve_config(user_cfg)
    threads = int(threads or cfg["run"]["threads"])
    name = cfg["experiment"]["name"]
    rec = RunRecord(name, cfg, int(cfg["noise"]["master_seed"]), _version(), str(out_dir))
    w = _Writer(rec)
    w.json("config.json", cfg)
    t0 = time.perf_counter()
    _DISPATCH[name](cfg, rec, w, threads)
    rec.timing["wall_seconds"] = time.perf_counter() - t0
    emit_report(rec)
    return rec


def run_experiment(config_path, out_dir=None, seed: int | None = None, threads: int | None = None) -> RunRecord:
    """Parse, validate and execute the experiment named in the config file."""
    user = load_config(config_path)
    if seed is not None:
        user.setdefault("noise", {})["master_seed"] = int(seed)
    out = out_dir or Path("aclab-out") / str(user.get("experiment", {}).get("name", "run"))
    return run_config(user, out, threads)


def report_markdown(rec: RunRecord) -> str:
    lines = [f"# aclab {rec.experiment}", "", f"- status: {rec.status}",
             f"- result: {'PASS' if rec.passed else 'FAIL'}", f"- master_seed: {rec.master_seed}",
             f"- version: {rec.version}"]
    if rec.timing:
        lines.append(f"- wall time: {rec.timing.get('wall_seconds', float('nan')):.1f} s")
    if rec.status == "no paths":
        lines += ["", "No paths were simulated; there is nothing to summarize."]
    if rec.gates:
        lines += ["", "| gate | value | bound | result |", "|---|---|---|---|"]
        for g in rec.gates:
            lines.append(f"| {g.name} | {g.value!r} | {g.bound} | {'pass' if g.passed else 'FAIL'} |")
    if rec.summary:
        lines += ["", "## Summary", ""]
        for k, v in rec.summary.items():
            lines.append(f"- {k}: {json.dumps(_jsonable(v))}")
    csvs = sorted(f for f in rec.files if f.endswith(".csv"))
    if csvs:
        lines += ["", "## Data files", ""]
        shown = csvs if len(csvs) <= 20 else csvs[:10] + [f"... ({len(csvs) - 20} more)"] + csvs[-10:]
        lines += [f"- {f}" for f in shown]
    return "\n".join(lines) + "\n"


def emit_report(rec: RunRecord) -> tuple[Path, Path]:
    """report.md and manifest.json in the run directory (neither is listed in the manifest itself)."""
    root = Path(rec.out_dir)
    md = root / "report.md"
    atomic_write(md, report_markdown(rec))
    man = root / "manifest.json"
    atomic_write(man, json.dumps(_jsonable(rec.to_dict()), indent=2, sort_keys=True) + "\n")
    return md, man


def exit_code(rec: RunRecord) -> int:
    return EXIT_OK if rec.passed else EXIT_GATE


def raise_on_failure(rec: RunRecord) -> None:
    if not rec.passed:
        raise GateFailure(f"gates failed: {', '.join(rec.failed_gates())}")
