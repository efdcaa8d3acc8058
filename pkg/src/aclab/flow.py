"""Deterministic Allen-Cahn flow, the limit point zeta, the linear center eta and dist to the front manifold."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack
from scipy.optimize import minimize_scalar

from .core import (BETA, CUBIC, Field, GridSpec, NumericError, Profile, ReactionTerm, SupBoundViolation,
                   ghost_values, inner)


class NotInNeighborhood(NumericError):
    """The state is too far from the manifold of fronts for the requested functional."""


class Tridiag:
    """LU factors of (I - dt*Delta) for repeated semi-implicit solves."""

    def __init__(self, grid: GridSpec, dt: float, diag_extra: np.ndarray | None = None):
        n, h = grid.n_points, grid.spacing
        r = dt / h**2
        d = np.full(n, 1.0 + 2.0 * r)
        if diag_extra is not None:
            d = d + diag_extra
        dl = np.full(n - 1, -r)
        du = np.full(n - 1, -r)
        if grid.boundary == "neumann":
            du[0] = -2.0 * r
            dl[-1] = -2.0 * r
        self.dl0, self.d0, self.du0 = dl, d, du
        self.factors = lapack.dgttrf(dl, d, du)[:5]
        gl, gr = ghost_values(grid.boundary)
        self.ghost_l, self.ghost_r = r * gl, r * gr
        self.grid, self.dt = grid, dt

    def solve(self, rhs: np.ndarray, ghosts: bool = True) -> np.ndarray:
        b = np.array(rhs, dtype=float, order="F", copy=True)
        two_d = b.ndim == 2
        if not two_d:
            b = b.reshape(-1, 1, order="F")
        if ghosts:
            b[0] += self.ghost_l
            b[-1] += self.ghost_r
        x, info = lapack.dgttrs(*self.factors, b, overwrite_b=1)
        if info:
            raise NumericError(f"tridiagonal solve failed (info={info})")
        return x if two_d else x[:, 0]

    def as_dense(self) -> np.ndarray:
        return np.diag(self.d0) + np.diag(self.dl0, -1) + np.diag(self.du0, 1)


_TRIDIAG_CACHE: dict = {}


def _tridiag(grid: GridSpec, dt: float) -> Tridiag:
    key = (grid, float(dt))
    t = _TRIDIAG_CACHE.get(key)
    if t is None:
        if len(_TRIDIAG_CACHE) > 64:
            _TRIDIAG_CACHE.clear()
        t = _TRIDIAG_CACHE[key] = Tridiag(grid, dt)
    return t


def check_sup(u: np.ndarray, bound: float) -> None:
    s = float(np.max(np.abs(u)))
    if not s <= bound:
        raise SupBoundViolation(f"sup-norm {s:.4g} exceeds the monitor bound {bound}")


def step_array(u: np.ndarray, dt: float, grid: GridSpec, rt: ReactionTerm = CUBIC) -> np.ndarray:
    """(I - dt Delta) u_{n+1} = u_n + dt f(u_n)."""
    out = _tridiag(grid, dt).solve(u + dt * rt(u, 0))
    check_sup(out, rt.sup_bound)
    return out


def step_deterministic(v: Field, dt: float = 0.01, rt: ReactionTerm = CUBIC) -> Field:
    if not dt > 0:
        raise NumericError("dt must be positive")
    return Field(v.grid, step_array(v.values, dt, v.grid, rt))


def flow_array(u: np.ndarray, t: float, grid: GridSpec, dt: float = 0.01, rt: ReactionTerm = CUBIC,
               every: int | None = None):
    """Flow for time t. Returns the final state, or (times, states) if ``every`` steps are recorded."""
    nsteps = int(round(t / dt))
    if abs(nsteps * dt - t) > 1e-9 * max(1.0, t):
        raise NumericError(f"flow time {t} is not a multiple of dt {dt}")
    solver = _tridiag(grid, dt)
    u = np.array(u, dtype=float)
    rec_t, rec_u = [0.0], [u.copy()]
    for k in range(1, nsteps + 1):
        u = solver.solve(u + dt * rt(u, 0))
        if every and k % every == 0:
            rec_t.append(k * dt)
            rec_u.append(u.copy())
    check_sup(u, rt.sup_bound)
    if every:
        return np.array(rec_t), rec_u
    return u


# -------------------------------------------------------- linear center


def _zero_crossing(v: np.ndarray, x: np.ndarray) -> float:
    s = np.nonzero(np.diff(np.signbit(v)))[0]
    if s.size == 0:
        return 0.0
    i = s[np.argmin(np.abs(x[s]))]
    x0, x1, v0, v1 = x[i], x[i + 1], v[i], v[i + 1]
    return float(x0 - v0 * (x1 - x0) / (v1 - v0)) if v1 != v0 else float(x0)


def linear_center_array(v: np.ndarray, grid: GridSpec, profile: Profile, guess: float | None = None,
                        tol: float = 1e-13, bracket: float = 1.0) -> float:
    """Root of g(eta) = <v, m'_eta>: bisection on [guess-1, guess+1] then Newton with g' = -<v, m''_eta>."""
    x, h = grid.x, grid.spacing
    if guess is None:
        guess = _zero_crossing(v, x)
    g = lambda e: inner(v, profile.evaluate(x - e, 1), h)
    dg = lambda e: -inner(v, profile.evaluate(x - e, 2), h)
    a, b = guess - bracket, guess + bracket
    ga, gb = g(a), g(b)
    if ga * gb > 0:
        raise NotInNeighborhood(f"no sign change of <v, m'_eta> on [{a:.4g}, {b:.4g}]")
    for _ in range(6):
        c = 0.5 * (a + b)
        gc = g(c)
        if ga * gc <= 0:
            b, gb = c, gc
        else:
            a, ga = c, gc
    e = 0.5 * (a + b)
    ge = g(e)
    for _ in range(60):
        d = dg(e)
        step = ge / d if d != 0 else np.inf
        e_new = e - step
        newton = a - tol <= e_new <= b + tol
        if not newton:
            e_new = 0.5 * (a + b)
        if newton and abs(step) < tol:
            return float(e_new)
        ge = g(e_new)
        if ge == 0.0:
            return float(e_new)
        if ga * ge < 0:
            b, gb = e_new, ge
        else:
            a, ga = e_new, ge
        e = e_new
        if b - a < tol:
            break
    return float(e)


def linear_center(v: Field, profile: Profile, guess: float | None = None) -> float:
    return linear_center_array(v.values, v.grid, profile, guess)


# ------------------------------------------------------------- distance


def _sup_dev(v: np.ndarray, x: np.ndarray, profile: Profile, theta: float) -> float:
    return float(np.max(np.abs(v - profile.evaluate(x - theta, 0))))


def dist_to_manifold_array(v: np.ndarray, grid: GridSpec, profile: Profile, center: float | None = None,
                           return_theta: bool = False):
    """inf_theta ||v - m_theta||_inf by bounded golden-section/Brent search on [eta-2, eta+2]."""
    x = grid.x
    if center is None:
        try:
            center = linear_center_array(v, grid, profile)
        except NotInNeighborhood:
            # coarse scan over theta on the grid, then refine
            thetas = x[:: max(1, grid.n_points // 400)]
            vals = [_sup_dev(v, x, profile, th) for th in thetas]
            center = float(thetas[int(np.argmin(vals))])
    res = minimize_scalar(lambda th: _sup_dev(v, x, profile, th), bounds=(center - 2.0, center + 2.0),
                          method="bounded", options={"xatol": 1e-10})
    best, th = float(res.fun), float(res.x)
    at_c = _sup_dev(v, x, profile, center)
    if at_c < best:
        best, th = at_c, center
    return (best, th) if return_theta else best


def dist_to_manifold(v: Field, profile: Profile) -> float:
    return dist_to_manifold_array(v.values, v.grid, profile)


# ------------------------------------------------------------------ zeta


@dataclass
class FlowResult:
    checkpoints: list  # (t, Field)
    limit_center: float
    fitted_rate: float
    converged: bool
    centers: list = field(default_factory=list)
    error_estimate: float = float("nan")


def _fit_rate(ts, ds, floor=1e-12):
    ts, ds = np.asarray(ts, float), np.asarray(ds, float)
    ok = ds > floor
    if ok.sum() < 3:
        return float("nan")
    return float(-np.polyfit(ts[ok], np.log(ds[ok]), 1)[0])


def flow(v: Field, profile: Profile, t_flow: float = 10.0, dt: float = 0.01, rt: ReactionTerm = CUBIC,
         checkpoint_every: float = 1.0, tol: float = 1e-8) -> FlowResult:
    every = max(1, int(round(checkpoint_every / dt)))
    ts, states = flow_array(v.values, t_flow, v.grid, dt, rt, every=every)
    cps = [(float(t), Field(v.grid, u)) for t, u in zip(ts, states)]
    centers, dists = [], []
    eta = None
    for t, u in zip(ts, states):
        eta = linear_center_array(u, v.grid, profile, guess=eta)
        centers.append(eta)
        dists.append(dist_to_manifold_array(u, v.grid, profile, center=eta))
    win = ts >= 1.0
    rate = _fit_rate(ts[win], np.array(dists)[win])
    converged = dists[-1] < max(tol, 1e-6) or (len(centers) > 1 and abs(centers[-1] - centers[-2]) < tol)
    return FlowResult(cps, centers[-1], rate, bool(converged), centers)


def zeta_array(v: np.ndarray, grid: GridSpec, profile: Profile, t_flow: float = 10.0, tol: float = 1e-8,
               dt: float = 0.01, rt: ReactionTerm = CUBIC, check_every: float = 1.0,
               adaptive: bool = True, info: dict | None = None) -> float:
    """zeta(v) = lim eta(F^t v): flow, then take the linear center of the flowed state."""
    every = max(1, int(round(check_every / dt)))
    nsteps = int(round(t_flow / dt))
    solver = _tridiag(grid, dt)
    u = np.array(v, dtype=float)
    d0 = dist_to_manifold_array(u, grid, profile)
    if d0 > BETA * 5:
        raise NotInNeighborhood(f"dist {d0:.3g} is far outside the neighbourhood (beta = {BETA})")
    eta_prev = linear_center_array(u, grid, profile)
    k = 0
    while k < nsteps:
        for _ in range(min(every, nsteps - k)):
            u = solver.solve(u + dt * rt(u, 0))
            k += 1
        eta = linear_center_array(u, grid, profile, guess=eta_prev)
        if adaptive and abs(eta - eta_prev) < tol:
            eta_prev = eta
            break
        eta_prev = eta
    check_sup(u, rt.sup_bound)
    d1 = dist_to_manifold_array(u, grid, profile, center=eta_prev)
    # m_eta is a fixed point only up to the profile tail at the nearer wall
    floor = max(1e-6, 4.0 * math.exp(-profile.decay_constant * (grid.half_length - abs(eta_prev))))
    if d1 > max(d0, 1e-9) * 1.5 and d1 > floor:
        raise NotInNeighborhood(f"distance grew during the flow ({d0:.3g} -> {d1:.3g})")
    if info is not None:
        info.update(t=k * dt, dist0=d0, dist_end=d1, error_estimate=d1)
    return float(eta_prev)


def zeta(v: Field, profile: Profile, t_flow: float = 10.0, tol: float = 1e-8, dt: float = 0.01,
         rt: ReactionTerm = CUBIC) -> float:
    return zeta_array(v.values, v.grid, profile, t_flow, tol, dt, rt)


@dataclass
class RateResult:
    rate: float
    floor_hit: bool
    n_points: int


def measure_convergence_rate(v: Field, profile: Profile, dt: float = 0.01, rt: ReactionTerm = CUBIC,
                             window=(1.0, 8.0), every: float = 0.25, floor: float = 1e-12) -> RateResult:
    """Least-squares slope of log dist(F^t v) over the window; stops at the floor."""
    k = max(1, int(round(every / dt)))
    ts, states = flow_array(v.values, window[1], v.grid, dt, rt, every=k)
    t_used, d_used, floor_hit = [], [], False
    eta = None
    for t, u in zip(ts, states):
        if t < window[0] - 1e-12:
            continue
        try:
            eta = linear_center_array(u, v.grid, profile, guess=eta)
        except NotInNeighborhood:
            eta = None
        d = dist_to_manifold_array(u, v.grid, profile, center=eta)
        if d <= floor:
            floor_hit = True
            break
        t_used.append(t)
        d_used.append(d)
    if len(t_used) < 3:
        return RateResult(float("nan"), True, len(t_used))
    rate = float(-np.polyfit(t_used, np.log(d_used), 1)[0])
    return RateResult(rate, floor_hit, len(t_used))
