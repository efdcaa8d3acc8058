"""Euler-Maruyama for the limit SDE d xi = alpha1 a(xi) dB + alpha2 a(xi) a'(xi) dt and comparison statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import stats

from .core import ConfigurationError, NumericError
from .correctors import Cutoff
from .spde import InterfaceSeries, philox_key

PATH_GROUP = 1024  # paths per Philox key
STEP_BLOCK = 256  # steps per counter block
TAG_SDE = 1


@dataclass(frozen=True)
class SdeConfig:
    alpha1: float
    alpha2: float
    cutoff: Cutoff = field(default_factory=Cutoff)
    xi0: float = 0.0
    dt: float = 1e-3
    horizon: float = 1.0
    master_seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if not self.horizon >= self.dt:
            raise ConfigurationError("horizon must be at least dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def drift(self, xi):
        return self.alpha2 * self.cutoff(xi) * self.cutoff.derivative(xi)

    def diffusion(self, xi):
        return self.alpha1 * self.cutoff(xi)


def step_sde(xi, dt: float, cfg: SdeConfig, stream) -> np.ndarray:
    """xi + alpha2 a a'(xi) dt + alpha1 a(xi) sqrt(dt) N(0, 1)."""
    if dt > cfg.dt * (1 + 1e-12):
        raise ConfigurationError(f"dt = {dt} exceeds the configured step {cfg.dt}")
    xi = np.asarray(xi, dtype=float)
    z = stream.standard_normal(xi.shape)
    return xi + cfg.drift(xi) * dt + cfg.diffusion(xi) * math.sqrt(dt) * z


@njit(cache=True, nogil=True)
def _em_bump(xi, z, dt, a1, a2):
    sdt = math.sqrt(dt)
    for k in range(z.shape[0]):
        for p in range(xi.size):
            x = xi[p]
            if abs(x) < 1.0:
                q = 1.0 - x * x
                a = math.exp(1.0 - 1.0 / q)
                ap = a * (-2.0 * x / (q * q))
                xi[p] = x + a2 * a * ap * dt + a1 * a * sdt * z[k, p]


def _group_noise(master_seed: int, group: int, block: int, n_paths: int) -> np.ndarray:
    key = philox_key(master_seed, group)
    bg = np.random.Philox(key=key, counter=np.array([0, block, TAG_SDE, 0], dtype=np.uint64))
    return np.random.Generator(bg).standard_normal((STEP_BLOCK, n_paths))


def ensemble_paths(cfg: SdeConfig, n_paths: int, times) -> np.ndarray:
    """xi at the requested times for paths 0..n_paths-1, shape (n_paths, len(times)).

    Path i uses column i mod 1024 of the Philox stream keyed by (master_seed, i // 1024); the counter carries the
    block of 256 steps, so results do not depend on how paths are batched."""
    if n_paths < 1:
        raise ConfigurationError("n_paths must be >= 1")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    rec = np.round(times / cfg.dt).astype(np.int64)
    if np.any(np.abs(rec * cfg.dt - times) > 1e-9) or np.any(rec < 0) or np.any(rec > cfg.n_steps):
        raise ConfigurationError("record times must be multiples of dt within the horizon")
    out = np.empty((n_paths, times.size))
    for g0 in range(0, n_paths, PATH_GROUP):
        m = min(PATH_GROUP, n_paths - g0)
        xi = np.full(PATH_GROUP, float(cfg.xi0))
        step = 0
        for j in np.argsort(rec, kind="stable"):
            target = rec[j]
            while step < target:
                b, r = divmod(step, STEP_BLOCK)
                take = min(target - step, STEP_BLOCK - r)
                z = _group_noise(cfg.master_seed, g0 // PATH_GROUP, b, PATH_GROUP)[r:r + take]
                if cfg.cutoff.name == "bump":
                    _em_bump(xi, np.ascontiguousarray(z), cfg.dt, cfg.alpha1, cfg.alpha2)
                else:
                    for row in z:
                        xi = xi + cfg.drift(xi) * cfg.dt + cfg.diffusion(xi) * math.sqrt(cfg.dt) * row
                step += take
            out[g0:g0 + m, j] = xi[:m]
    return out


def ensemble_terminal(cfg: SdeConfig, n_paths: int) -> np.ndarray:
    return ensemble_paths(cfg, n_paths, [cfg.n_steps * cfg.dt])[:, 0]


# ------------------------------------------------------------ statistics


def _moments(x: np.ndarray) -> np.ndarray:
    """Mean, variance, third and fourth central moments along the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    return np.stack([mu[..., 0], (d**2).mean(-1), (d**3).mean(-1), (d**4).mean(-1)], axis=-1)


def bootstrap_moments(x: np.ndarray, n_boot: int = 1000, seed: int = 0, chunk: int = 50):
    """Moments and their bootstrap standard errors."""
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    reps = []
    for s in range(0, n_boot, chunk):
        k = min(chunk, n_boot - s)
        idx = rng.integers(0, x.size, size=(k, x.size))
        reps.append(_moments(x[idx]))
    reps = np.concatenate(reps)
    return _moments(x), reps.std(axis=0, ddof=1)


@dataclass
class ComparisonReport:
    ks_statistic: float
    ks_pvalue: float
    n_spde: int
    n_sde: int
    moment_table: list  # rows (name, spde, spde_se, sde, sde_se)
    variance_ratio: float
    time: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


MOMENT_NAMES = ("mean", "variance", "central3", "central4")


def compare_distributions(spde_samples, sde_samples, n_boot: int = 1000, seed: int = 0,
                          time: float | None = None) -> ComparisonReport:
    a = np.asarray(spde_samples, dtype=float)
    b = np.asarray(sde_samples, dtype=float)
    a, b = a[np.isfinite(a)], b[np.isfinite(b)]
    if a.size == 0 or b.size == 0:
        raise ConfigurationError("both sample sets must be nonempty")
    ks = stats.ks_2samp(a, b, method="asymp")
    ma, sa = bootstrap_moments(a, n_boot, seed)
    mb, sb = bootstrap_moments(b, n_boot, seed + 1)
    table = [(n, float(ma[i]), float(sa[i]), float(mb[i]), float(sb[i])) for i, n in enumerate(MOMENT_NAMES)]
    ratio = float(ma[1] / mb[1]) if mb[1] > 0 else float("nan")
    return ComparisonReport(float(ks.statistic), float(min(max(ks.pvalue, 0.0), 1.0)), int(a.size), int(b.size),
                            table, ratio, time)


@dataclass
class SlopeFit:
    slope: float
    stderr: float
    ci95: tuple
    n_increments: int
    n_bins: int


def _binned_slope(xpred: np.ndarray, y: np.ndarray, n_bins: int) -> SlopeFit:
    """Weighted least squares through the origin of bin means of y against bin means of xpred."""
    edges = np.unique(np.quantile(xpred, np.linspace(0, 1, n_bins + 1)))
    which = np.clip(np.searchsorted(edges, xpred, side="right") - 1, 0, edges.size - 2)
    X, Y, W = [], [], []
    for b in range(edges.size - 1):
        sel = which == b
        k = int(sel.sum())
        if k < 2:
            continue
        se2 = y[sel].var(ddof=1) / k
        if se2 <= 0:
            continue
        X.append(xpred[sel].mean())
        Y.append(y[sel].mean())
        W.append(1.0 / se2)
    X, Y, W = map(np.asarray, (X, Y, W))
    if X.size < 2 or not np.any(X):
        raise NumericError("not enough populated bins for a slope fit")
    sxx = float(np.sum(W * X * X))
    slope = float(np.sum(W * X * Y) / sxx)
    chi2 = float(np.sum(W * (Y - slope * X) ** 2)) / max(X.size - 1, 1)
    se = math.sqrt(max(chi2, 1.0) / sxx)
    return SlopeFit(slope, se, (slope - 1.96 * se, slope + 1.96 * se), int(y.size), int(X.size))


@dataclass
class QvDriftFit:
    diffusion: SlopeFit
    drift: SlopeFit


def empirical_qv_drift(series: list[InterfaceSeries], alpha1: float, alpha2: float,
                       cutoff: Cutoff | None = None, n_bins: int = 20, min_samples: int = 50) -> QvDriftFit:
    """Regress (d xi)^2 on alpha1^2 a(xi)^2 dt and d xi on alpha2 a a'(xi) dt over all increments."""
    cutoff = cutoff or Cutoff()
    xs, dxs, dts = [], [], []
    for s in series:
        t, xi = np.asarray(s.times), np.asarray(s.xi)
        ok = np.isfinite(xi)
        t, xi = t[ok], xi[ok]
        if t.size < min_samples:
            raise ConfigurationError(f"cadence too coarse: {t.size} samples per path, need >= {min_samples}")
        xs.append(xi[:-1])
        dxs.append(np.diff(xi))
        dts.append(np.diff(t))
    x, dx, dt = np.concatenate(xs), np.concatenate(dxs), np.concatenate(dts)
    a, ap = cutoff(x), cutoff.derivative(x)
    diff = _binned_slope(alpha1**2 * a * a * dt, dx * dx, n_bins)
    drift = _binned_slope(alpha2 * a * ap * dt, dx, n_bins)
    return QvDriftFit(diff, drift)


def sde_series(cfg: SdeConfig, n_paths: int, n_samples: int) -> list[InterfaceSeries]:
    """SDE paths sampled on a uniform cadence, in the same form as SPDE interface series."""
    k = cfg.n_steps // n_samples
    if k < 1 or k * n_samples != cfg.n_steps:
        raise ConfigurationError("n_samples must divide the number of steps")
    times = np.arange(n_samples + 1) * k * cfg.dt
    P = ensemble_paths(cfg, n_paths, times)
    return [InterfaceSeries(times, P[i]) for i in range(n_paths)]
