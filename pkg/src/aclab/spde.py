"""Simulation of the rescaled stochastic Allen-Cahn equation, its linear part and interface extraction.

dv = (Delta v + f(v)) dt + eps^{gamma'} a_eps(x) dW,  gamma' = gamma + 1/4,  a_eps(x) = a(sqrt(eps) x),

semi-implicit in time (implicit Laplacian, explicit reaction, additive noise), on [-L_sim, L_sim] with
L_sim = eps^{-1/2} + 10. Noise increments come from Philox streams keyed by (master_seed, path_index) with the
counter carrying the block of steps, so every path is reproducible independently of scheduling.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.integrate import quad
from scipy.linalg import eigh_tridiagonal

from .core import (CUBIC, M_SUP, ConfigurationError, Field, GridSpec, NumericError, Profile, ReactionTerm,
                   build_grid, commensurate_half_length, ghost_values, solve_profile)
from .correctors import Cutoff
from .flow import _tridiag, _zero_crossing, check_sup

BLOCK = 1024  # steps per Philox counter block
TAG_NOISE = 0


# ------------------------------------------------------------------ noise


@dataclass(frozen=True)
class NoiseSpec:
    epsilon: float
    gamma: float
    cutoff: Cutoff = field(default_factory=Cutoff)
    master_seed: int = 0
    path_index: int = 0

    def __post_init__(self):
        if not self.gamma > -0.25:
            raise ConfigurationError(f"gamma = {self.gamma} is in the large-noise regime; need gamma > -1/4")
        if not 0 < self.epsilon < 1:
            raise ConfigurationError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigurationError("master_seed must be a 64-bit unsigned integer")

    @property
    def gamma_prime(self) -> float:
        return self.gamma + 0.25

    @property
    def amplitude(self) -> float:
        return self.epsilon ** self.gamma_prime

    def a_eps(self, x):
        return self.cutoff.scaled(x, self.epsilon)

    def support(self, grid: GridSpec) -> np.ndarray:
        """Indices of cells where a_eps is nonzero (a subset of |x| < eps^{-1/2})."""
        return np.nonzero(self.a_eps(grid.x) != 0.0)[0]


def philox_key(master_seed: int, path_index: int) -> np.ndarray:
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(path_index),)).generate_state(2, np.uint64)


class NoiseStream:
    """Standard normal rows of width ``n_cols`` for consecutive steps; block b uses Philox counter [0, b, tag, 0]."""

    def __init__(self, master_seed: int, path_index: int, n_cols: int, tag: int = TAG_NOISE):
        self.key = philox_key(master_seed, path_index)
        self.n_cols, self.tag = int(n_cols), int(tag)
        self._block_id, self._block = -1, None
        self.position = 0
        self._hash = hashlib.sha256()

    def block(self, b: int) -> np.ndarray:
        if b != self._block_id:
            bitgen = np.random.Philox(key=self.key, counter=np.array([0, b, self.tag, 0], dtype=np.uint64))
            self._block = np.random.Generator(bitgen).standard_normal((BLOCK, self.n_cols))
            self._block_id = b
        return self._block

    def consume(self, k: int) -> np.ndarray:
        """Next k rows (k may cross block boundaries)."""
        rows = []
        while k > 0:
            b, r = divmod(self.position, BLOCK)
            take = min(k, BLOCK - r)
            chunk = self.block(b)[r:r + take]
            self._hash.update(chunk.tobytes())
            rows.append(chunk)
            self.position += take
            k -= take
        return np.concatenate(rows) if len(rows) > 1 else rows[0]

    def peek(self, k: int) -> np.ndarray:
        """Next k rows without consuming them; they must lie in one block."""
        b, r = divmod(self.position, BLOCK)
        if r + k > BLOCK:
            raise NumericError("peek across a block boundary")
        return self.block(b)[r:r + k]

    def commit(self, k: int) -> None:
        self._hash.update(self.peek(k).tobytes())
        self.position += k

    def standard_normal(self, size=None) -> np.ndarray:
        if size not in (None, self.n_cols):
            raise ConfigurationError(f"stream rows have width {self.n_cols}, asked for {size}")
        return self.consume(1)[0].copy()

    def digest(self) -> str:
        return self._hash.hexdigest()


def sample_noise(grid: GridSpec, dt: float, stream) -> Field:
    """Independent N(0, dt/h) per cell, the increment of the cylindrical Wiener process against the grid basis."""
    if not dt > 0:
        raise NumericError("dt must be positive")
    return Field(grid, math.sqrt(dt / grid.spacing) * stream.standard_normal(grid.n_points))


def step_spde(v: Field, dt: float, spec: NoiseSpec, rt: ReactionTerm = CUBIC, stream=None,
              linear: bool = False) -> Field:
    """One semi-implicit step; ``stream`` rows cover the support cells of a_eps (see NoiseSpec.support)."""
    grid = v.grid
    sup_fp = _sup_fprime(rt)
    if not linear and dt * sup_fp >= 1:
        raise NumericError(f"dt * sup f' = {dt * sup_fp:.3g} must be below 1")
    rhs = v.values.copy() if linear else v.values + dt * rt(v.values, 0)
    if spec.amplitude != 0.0 and stream is not None:
        idx = spec.support(grid)
        z = stream.standard_normal(idx.size)
        rhs[idx] += spec.amplitude * spec.a_eps(grid.x[idx]) * math.sqrt(dt / grid.spacing) * z
    out = _tridiag(grid, dt).solve(rhs)
    check_sup(out, rt.sup_bound)
    return Field(grid, out)


def _sup_fprime(rt: ReactionTerm) -> float:
    u = np.linspace(-rt.sup_bound, rt.sup_bound, 4001)
    return float(max(np.max(rt(u, 1)), 1e-12))


# ----------------------------------------------------------- numba kernels


@njit(cache=True, nogil=True)
def _herm(x0, hx, y, dy, x, lo, hi):
    """Cubic Hermite interpolant of (y, dy) on a uniform table; lo/hi outside."""
    n = y.size
    s = (x - x0) / hx
    if s < 0.0:
        return lo
    i = int(math.floor(s))
    if i >= n - 1:
        if i == n - 1 and s == n - 1:
            return y[n - 1]
        return hi
    t = s - i
    t2 = t * t
    t3 = t2 * t
    return ((2 * t3 - 3 * t2 + 1) * y[i] + (t3 - 2 * t2 + t) * hx * dy[i]
            + (-2 * t3 + 3 * t2) * y[i + 1] + (t3 - t2) * hx * dy[i + 1])


@njit(cache=True, nogil=True)
def _sup_dev(u, x, theta, tx0, thx, m, mp):
    s = 0.0
    for i in range(u.size):
        d = abs(u[i] - _herm(tx0, thx, m, mp, x[i] - theta, -1.0, 1.0))
        if d > s:
            s = d
    return s


@njit(cache=True, nogil=True)
def _fill_profile(x, theta, tx0, thx, m, mp, out):
    for i in range(x.size):
        out[i] = _herm(tx0, thx, m, mp, x[i] - theta, -1.0, 1.0)


@njit(cache=True, nogil=True)
def _g_center(u, x, h, eta, tx0, thx, mp, mpp):
    s = 0.0
    for i in range(u.size):
        s += u[i] * _herm(tx0, thx, mp, mpp, x[i] - eta, 0.0, 0.0)
    return h * s


@njit(cache=True, nogil=True)
def _linear_center(u, x, h, guess, tx0, thx, mp, mpp, mppp):
    """Root of <u, m'_eta> near guess (bisection then safeguarded Newton); NaN without a sign change."""
    a, b = guess - 1.0, guess + 1.0
    ga = _g_center(u, x, h, a, tx0, thx, mp, mpp)
    gb = _g_center(u, x, h, b, tx0, thx, mp, mpp)
    if ga * gb > 0:
        return np.nan
    for _ in range(6):
        c = 0.5 * (a + b)
        gc = _g_center(u, x, h, c, tx0, thx, mp, mpp)
        if ga * gc <= 0:
            b = c
        else:
            a, ga = c, gc
    e = 0.5 * (a + b)
    ge = _g_center(u, x, h, e, tx0, thx, mp, mpp)
    tol = 1e-13
    for _ in range(60):
        d = 0.0
        for i in range(u.size):
            d -= u[i] * _herm(tx0, thx, mpp, mppp, x[i] - e, 0.0, 0.0)
        d *= h
        newton = d != 0.0
        if newton:
            step = ge / d
            e_new = e - step
            newton = a - tol <= e_new <= b + tol
        if not newton:
            e_new = 0.5 * (a + b)
        elif abs(step) < tol:
            return e_new
        ge = _g_center(u, x, h, e_new, tx0, thx, mp, mpp)
        if ge == 0.0:
            return e_new
        if ga * ge < 0:
            b = e_new
        else:
            a, ga = e_new, ge
        e = e_new
        if b - a < tol:
            break
    return e


@njit(cache=True, nogil=True)
def _exact_dist(u, x, h, guess, tx0, thx, m, mp, mpp, mppp):
    """(inf_theta ||u - m_theta||_inf, argmin) by golden-section on [eta - 2, eta + 2]."""
    c = _linear_center(u, x, h, guess, tx0, thx, mp, mpp, mppp)
    if np.isnan(c):
        c = guess
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = c - 2.0, c + 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1 = _sup_dev(u, x, x1, tx0, thx, m, mp)
    f2 = _sup_dev(u, x, x2, tx0, thx, m, mp)
    while b - a > 1e-10:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = _sup_dev(u, x, x1, tx0, thx, m, mp)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = _sup_dev(u, x, x2, tx0, thx, m, mp)
    best, th = (f1, x1) if f1 <= f2 else (f2, x2)
    fc = _sup_dev(u, x, c, tx0, thx, m, mp)
    if fc < best:
        best, th = fc, c
    return best, th


@njit(cache=True, nogil=True)
def _solve(rhs, dl, inv_den, cp, out):
    n = rhs.size
    out[0] = rhs[0] * inv_den[0]
    for i in range(1, n):
        out[i] = (rhs[i] - dl[i - 1] * out[i - 1]) * inv_den[i]
    for i in range(n - 2, -1, -1):
        out[i] -= cp[i] * out[i + 1]


@njit(cache=True, nogil=True)
def _advance(u, noise, row0, nsteps, step0, amp, i0, dl, inv_den, cp, dt, gl, gr, linear,
             check_every, x, h, tx0, thx, m, mp, mpp, mppp, state, mth):
    """Advance u in place by nsteps using noise rows row0...; state = [theta, sup_dist, threshold, sup_bound,
    sup_abs], mth = m(x - theta) cached for the upper bound ||u - m_theta||_inf >= dist(u, M).
    Returns (status, steps done): 0 ok, 1 dist above threshold, 2 sup-norm monitor violated."""
    n = u.size
    ns = amp.size
    rhs = np.empty(n)
    for k in range(nsteps):
        if linear:
            for i in range(n):
                rhs[i] = u[i]
        else:
            for i in range(n):
                ui = u[i]
                rhs[i] = ui + dt * (ui - ui * ui * ui)
        for j in range(ns):
            rhs[i0 + j] += amp[j] * noise[row0 + k, j]
        rhs[0] += gl
        rhs[n - 1] += gr
        _solve(rhs, dl, inv_den, cp, u)
        s = 0.0
        for i in range(n):
            a = abs(u[i])
            if a > s:
                s = a
        if s > state[4]:
            state[4] = s
        if not s <= state[3]:
            return 2, k + 1
        if not linear and (step0 + k + 1) % check_every == 0:
            F = 0.0
            for i in range(n):
                a = abs(u[i] - mth[i])
                if a > F:
                    F = a
            if F > state[1] or F > state[2]:
                d, th = _exact_dist(u, x, h, state[0], tx0, thx, m, mp, mpp, mppp)
                if th != state[0]:
                    state[0] = th
                    _fill_profile(x, th, tx0, thx, m, mp, mth)
                if d > state[1]:
                    state[1] = d
                if d > state[2]:
                    return 1, k + 1
    return 0, nsteps


@njit(cache=True, nogil=True)
def _smooth(u, nsteps, dt, dl, inv_den, cp, gl, gr):
    """Deterministic micro-flow of a copy of u."""
    n = u.size
    w = u.copy()
    rhs = np.empty(n)
    for k in range(nsteps):
        for i in range(n):
            wi = w[i]
            rhs[i] = wi + dt * (wi - wi * wi * wi)
        rhs[0] += gl
        rhs[n - 1] += gr
        _solve(rhs, dl, inv_den, cp, w)
    return w


def thomas_factors(grid: GridSpec, dt: float):
    n, r = grid.n_points, dt / grid.spacing**2
    d = np.full(n, 1.0 + 2.0 * r)
    dl = np.full(n - 1, -r)
    du = np.full(n - 1, -r)
    if grid.boundary == "neumann":
        du[0] = -2.0 * r
        dl[-1] = -2.0 * r
    inv_den = np.empty(n)
    cp = np.zeros(n)
    den = d[0]
    inv_den[0] = 1.0 / den
    for i in range(1, n):
        cp[i - 1] = du[i - 1] * inv_den[i - 1]
        inv_den[i] = 1.0 / (d[i] - dl[i - 1] * cp[i - 1])
    gl, gr = ghost_values(grid.boundary)
    return dl, inv_den, cp, r * gl, r * gr


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class SimConfig:
    """Run configuration; all times are macroscopic unless named otherwise."""

    epsilon: float = 0.05
    gamma: float = 0.5
    kappa: float = 0.2
    horizon_macroscopic_T: float = 1.0
    spacing: float = 0.1
    pad: float = 10.0
    dt: float | None = None
    xi0: float = 0.0
    cutoff: str = "bump"
    master_seed: int = 0
    n_samples: int = 100
    t_smooth: float = 2.0
    check_every: int = 1
    freeze_on_stop: bool = True
    n_checkpoints: int = 0
    reaction: str = "cubic"

    def __post_init__(self):
        errs = []
        if not self.gamma > -0.25:
            errs.append(f"gamma = {self.gamma}: only the regime gamma > -1/4 is supported (large noise refused)")
        if not 0 < self.epsilon < 1:
            errs.append(f"epsilon = {self.epsilon} must lie in (0, 1)")
        if not self.kappa > 0:
            errs.append("kappa must be positive")
        if not self.horizon_macroscopic_T > 0:
            errs.append("horizon_macroscopic_T must be positive")
        if not self.spacing > 0:
            errs.append("spacing must be positive")
        if self.dt is not None and not self.dt > 0:
            errs.append("dt must be positive")
        if self.n_samples < 1 or self.check_every < 1 or self.n_checkpoints < 0:
            errs.append("n_samples, check_every must be >= 1 and n_checkpoints >= 0")
        if self.reaction != "cubic":
            errs.append(f"reaction {self.reaction!r}: the compiled path kernels implement the cubic only")
        if self.cutoff != "bump":
            errs.append(f"unknown cutoff {self.cutoff!r}")
        if not 0 <= int(self.master_seed) < 2**64:
            errs.append("master_seed must be a 64-bit unsigned integer")
        if errs:
            raise ConfigurationError("; ".join(errs))

    @property
    def gamma_prime(self) -> float:
        return self.gamma + 0.25

    @property
    def time_scale(self) -> float:
        """Internal time units per macroscopic unit, eps^{-2 gamma - 3/2}."""
        return self.epsilon ** (-2 * self.gamma - 1.5)

    @property
    def threshold(self) -> float:
        return self.epsilon ** (self.gamma_prime - self.kappa)

    @property
    def step(self) -> float:
        return self.dt if self.dt is not None else min(0.01, 0.5 / _sup_fprime(CUBIC))

    @property
    def half_length(self) -> float:
        L = commensurate_half_length(self.epsilon ** -0.5 + self.pad, self.spacing)
        if round(2 * L / self.spacing) % 2:
            L += self.spacing
        return L

    def grid(self, linear: bool = False) -> GridSpec:
        return build_grid(self.half_length, self.spacing, "dirichlet_zero" if linear else "dirichlet_pm1")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_macroscopic_T * self.time_scale / self.step))

    def noise_spec(self, path_index: int = 0) -> NoiseSpec:
        return NoiseSpec(self.epsilon, self.gamma, Cutoff(self.cutoff), self.master_seed, path_index)

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)


_PROFILE_CACHE: dict = {}


def sim_profile(cfg: SimConfig) -> Profile:
    """Lattice front on a table wide enough for every shift the interface can reach."""
    L = commensurate_half_length(cfg.half_length + 12.0, cfg.spacing)
    if round(2 * L / cfg.spacing) % 2:
        L += cfg.spacing
    key = (L, cfg.spacing)
    p = _PROFILE_CACHE.get(key)
    if p is None:
        p = _PROFILE_CACHE[key] = solve_profile(CUBIC, build_grid(L, cfg.spacing), scheme="lattice")
    return p


# ------------------------------------------------------------------ paths


@dataclass
class InterfaceSeries:
    times: np.ndarray  # macroscopic
    xi: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise NumericError("interface times must be strictly increasing")

    @property
    def samples(self):
        return list(zip(self.times.tolist(), self.xi.tolist()))


@dataclass
class SpdePath:
    path_index: int
    master_seed: int
    interface: InterfaceSeries
    dist: np.ndarray  # dist(v, M) at the interface sample times (NaN for the linear path)
    checkpoints: list  # (macroscopic t, Field)
    stopped: bool = False
    stop_time: float | None = None
    sup_dist: float = 0.0
    invalid: bool = False
    sup_abs: float = 0.0  # running sup of ||v||_inf over all steps
    sup_series: np.ndarray | None = None  # ||v||_inf at the interface sample times
    noise_digest: str = ""
    linear: bool = False


class _Ctx:
    """Per-configuration arrays shared read-only by all paths."""

    def __init__(self, cfg: SimConfig, linear: bool):
        self.cfg, self.linear = cfg, linear
        self.grid = cfg.grid(linear)
        self.dt = cfg.step
        if not linear and self.dt * _sup_fprime(CUBIC) >= 1:
            raise ConfigurationError("dt * sup f' must be below 1")
        self.dl, self.inv_den, self.cp, self.gl, self.gr = thomas_factors(self.grid, self.dt)
        spec = cfg.noise_spec()
        self.support = spec.support(self.grid)
        if self.support.size == 0 or np.any(np.diff(self.support) != 1):
            raise ConfigurationError("noise support must be a nonempty contiguous set of cells")
        self.i0 = int(self.support[0])
        self.amp = spec.amplitude * spec.a_eps(self.grid.x[self.support]) * math.sqrt(self.dt / self.grid.spacing)
        self.prof = sim_profile(cfg)
        p = self.prof
        self.tab = (float(p.grid.x[0]), p.grid.spacing, p.m.values, p.mp.values, p.mpp.values, p.mppp.values)
        n = cfg.n_steps
        self.n = n
        self.sample_steps = np.unique(np.round(np.linspace(0, n, cfg.n_samples + 1)).astype(np.int64))
        self.ck_steps = (np.unique(np.round(np.linspace(0, n, cfg.n_checkpoints + 2)).astype(np.int64))
                         if cfg.n_checkpoints else np.array([0, n], dtype=np.int64))
        self.smooth_steps = int(round(cfg.t_smooth / self.dt))
        self.mac = cfg.step / cfg.time_scale  # macroscopic time per step

    def center(self, u, guess):
        tx0, thx, m, mp, mpp, mppp = self.tab
        return _linear_center(u, self.grid.x, self.grid.spacing, guess, tx0, thx, mp, mpp, mppp)

    def dist(self, u, guess):
        tx0, thx, m, mp, mpp, mppp = self.tab
        return _exact_dist(u, self.grid.x, self.grid.spacing, guess, tx0, thx, m, mp, mpp, mppp)

    def interface(self, u, guess):
        w = _smooth(u, self.smooth_steps, self.dt, self.dl, self.inv_den, self.cp, self.gl, self.gr)
        eta = self.center(w, guess)
        if np.isnan(eta):
            eta = self.center(w, _zero_crossing(w, self.grid.x))
        if np.isnan(eta):
            raise NumericError("interface lost: no sign change of <v, m'_eta> after smoothing")
        return eta


def initial_state(cfg: SimConfig, linear: bool = False) -> Field:
    grid = cfg.grid(linear)
    if linear:
        return Field(grid, np.zeros(grid.n_points))
    theta = cfg.xi0 / math.sqrt(cfg.epsilon)
    return sim_profile(cfg).translate(grid, theta)


def _run(cfg: SimConfig, path_index: int, linear: bool, ctx: _Ctx | None = None) -> SpdePath:
    ctx = ctx or _Ctx(cfg, linear)
    grid, x, h = ctx.grid, ctx.grid.x, ctx.grid.spacing
    tx0, thx, m, mp, mpp, mppp = ctx.tab
    stream = NoiseStream(cfg.master_seed, path_index, ctx.amp.size)
    u = initial_state(cfg, linear).values.copy()
    sq = math.sqrt(cfg.epsilon)
    theta0 = 0.0 if linear else cfg.xi0 / sq
    # state = [theta, sup_dist, threshold, sup_bound, sup_abs]
    state = np.array([theta0, 0.0, cfg.threshold, M_SUP, float(np.max(np.abs(u)))])
    mth = np.zeros_like(u)

    def set_theta(th):
        state[0] = th
        _fill_profile(x, th, tx0, thx, m, mp, mth)

    if not linear:
        d0, th0 = ctx.dist(u, theta0)
        state[1] = d0
        set_theta(th0)
    events = np.union1d(ctx.sample_steps, ctx.ck_steps)
    t_s, xi_s, dist_s, sup_s, cks = [], [], [], [], []
    stopped, stop_step, invalid, frozen = False, None, False, None

    def record(step):
        if step in ctx.ck_steps:
            cks.append((step * ctx.mac, Field(grid, u.copy())))
        if step not in ctx.sample_steps:
            return
        t_s.append(step * ctx.mac)
        sup_s.append(float(np.max(np.abs(u))))
        if linear:
            xi_s.append(0.0)
            dist_s.append(np.nan)
        elif frozen is not None:
            xi_s.append(frozen[0])
            dist_s.append(frozen[1])
        elif step == 0:
            xi_s.append(cfg.xi0)
            dist_s.append(state[1])
        else:
            d, th = ctx.dist(u, state[0])
            set_theta(th)
            xi_s.append(sq * ctx.interface(u, th))
            dist_s.append(d)

    record(0)
    step = 0
    ev = 1
    while step < ctx.n:
        while events[ev] <= step:
            ev += 1
        b, r = divmod(step, BLOCK)
        stop_at = min(int(events[ev]), (b + 1) * BLOCK, ctx.n)
        noise = stream.peek(stop_at - step)
        status, done = _advance(u, noise, 0, stop_at - step, step, ctx.amp, ctx.i0, ctx.dl, ctx.inv_den, ctx.cp,
                                ctx.dt, ctx.gl, ctx.gr, linear, cfg.check_every, x, h, tx0, thx, m, mp, mpp,
                                mppp, state, mth)
        stream.commit(done)
        step += done
        if status == 2:
            invalid = True
            break
        if status == 1 and not stopped:
            stopped, stop_step = True, step
            if cfg.freeze_on_stop:
                d, th = ctx.dist(u, state[0])
                frozen = (sq * ctx.interface(u, th), d)
                break
            state[2] = np.inf
        record(step)
    if frozen is not None:
        for s in ctx.sample_steps[ctx.sample_steps >= step]:
            t_s.append(s * ctx.mac)
            xi_s.append(frozen[0])
            dist_s.append(frozen[1])
            sup_s.append(float("nan"))
    if invalid:
        n_rec = len(t_s)
        for s in ctx.sample_steps[n_rec:]:
            t_s.append(s * ctx.mac)
            xi_s.append(np.nan)
            dist_s.append(np.nan)
            sup_s.append(np.nan)
    return SpdePath(path_index, cfg.master_seed, InterfaceSeries(t_s, xi_s), np.array(dist_s), cks,
                    stopped, None if stop_step is None else stop_step * ctx.mac, float(state[1]), invalid,
                    float(state[4]), np.array(sup_s), stream.digest(), linear)


def simulate_path(cfg: SimConfig, path_index: int = 0) -> SpdePath:
    return _run(cfg, path_index, linear=False)


def simulate_linear(cfg: SimConfig, path_index: int = 0) -> SpdePath:
    """X with X[0] = 0 on dirichlet_zero, f switched off, driven by the same increments as simulate_path."""
    return _run(cfg, path_index, linear=True)


def run_ensemble(cfg: SimConfig, n_paths: int, threads: int = 1, linear: bool = False,
                 first_index: int = 0) -> list[SpdePath]:
    """Paths first_index .. first_index + n_paths - 1, merged by index."""
    ctx = _Ctx(cfg, linear)
    idx = range(first_index, first_index + n_paths)
    job = lambda i: _run(cfg, i, linear, ctx)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(job, idx))
    return [job(i) for i in idx]


# ------------------------------------------------------------ decomposition


@dataclass
class Decomposition:
    times: np.ndarray
    dist_w: np.ndarray  # dist(w[t], M), w = v - X
    sup_R: np.ndarray  # ||R[t]||_inf, R = f(w + X) - f(w)
    sup_X: np.ndarray
    bound_ok: bool  # |R| <= sup_{[w, v]} |f'| |X| pointwise at every checkpoint


def _fprime_range_max(lo, hi, rt: ReactionTerm):
    if rt.kind == "cubic":
        cand = np.maximum(np.abs(rt(lo, 1)), np.abs(rt(hi, 1)))
        return np.where((lo <= 0) & (hi >= 0), np.maximum(cand, 1.0), cand)
    s = np.linspace(0.0, 1.0, 65)[:, None]
    return np.max(np.abs(rt(lo + s * (hi - lo), 1)), axis=0)


def decompose_path(full: SpdePath, linear: SpdePath, cfg: SimConfig, rt: ReactionTerm = CUBIC) -> Decomposition:
    """w = v - X at shared checkpoints; R = f(w + X) - f(w) is the remainder in dw = (Delta w + f(w) + R) dt."""
    if (full.master_seed, full.path_index) != (linear.master_seed, linear.path_index):
        raise ConfigurationError("full and linear paths are not driven by the same noise stream")
    if full.linear or not linear.linear:
        raise ConfigurationError("expected (full, linear) paths in that order")
    from .flow import dist_to_manifold_array

    prof = sim_profile(cfg)
    n = min(len(full.checkpoints), len(linear.checkpoints))
    ts, dw, sr, sx, ok = [], [], [], [], True
    for (t1, v), (t2, X) in zip(full.checkpoints[:n], linear.checkpoints[:n]):
        if abs(t1 - t2) > 1e-12:
            raise ConfigurationError("checkpoint times differ")
        w = v.values - X.values
        R = rt(v.values, 0) - rt(w, 0)
        bound = _fprime_range_max(np.minimum(w, v.values), np.maximum(w, v.values), rt) * np.abs(X.values)
        ok &= bool(np.all(np.abs(R) <= bound * (1 + 1e-12) + 1e-15))
        ts.append(t1)
        dw.append(dist_to_manifold_array(w, v.grid, prof))
        sr.append(float(np.max(np.abs(R))))
        sx.append(float(np.max(np.abs(X.values))))
    return Decomposition(np.array(ts), np.array(dw), np.array(sr), np.array(sx), ok)


# ---------------------------------------------------------------- oracles


def ito_variance(x: float, t: float, spec: NoiseSpec) -> float:
    """eps^{2 gamma'} int_0^t int q_s(x - y)^2 a_eps(y)^2 dy ds with the whole-line heat kernel q."""
    R = spec.epsilon ** -0.5

    def inner_(s):
        g = lambda y: math.exp(-(x - y) ** 2 / (2 * s)) / (4 * math.pi * s) * float(spec.a_eps(y)) ** 2
        return quad(g, -R, R, epsabs=1e-14, epsrel=1e-10, limit=200, points=[x] if -R < x < R else None)[0]

    return spec.amplitude**2 * quad(inner_, 0.0, t, epsabs=1e-13, epsrel=1e-10, limit=200)[0]


def scheme_variance(idx: int, t: float, cfg: SimConfig, semi_discrete: bool = False) -> float:
    """Exact variance of the linear scheme at grid index idx after round(t/dt) steps (or the continuous-time
    limit on the same grid); used to separate time-discretization bias from Monte Carlo error."""
    grid = cfg.grid(linear=True)
    h, dt = grid.spacing, cfg.step
    spec = cfg.noise_spec()
    lam, phi = eigh_tridiagonal(np.full(grid.n_points, 2 / h**2), np.full(grid.n_points - 1, -1 / h**2))
    a2 = spec.a_eps(grid.x) ** 2
    G = phi.T @ (a2[:, None] * phi)
    if semi_discrete:
        ls = lam[:, None] + lam[None, :]
        K = -np.expm1(-ls * t) / ls
    else:
        N = int(round(t / dt))
        rho = 1.0 / np.outer(1 + dt * lam, 1 + dt * lam)
        K = dt * rho * (1 - rho**N) / (1 - rho)
    p = phi[idx]
    return spec.amplitude**2 / h * float(p @ (G * K) @ p)


def with_overrides(cfg: SimConfig, **kw) -> SimConfig:
    return replace(cfg, **kw)
