"""Limit coefficients alpha1, alpha2, the first-order correctors psi1, psibar1, psi_cor and the cancellation identities."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .core import (CUBIC, ConfigurationError, Field, NumericError, Profile, ReactionTerm, UnsupportedError,
                   build_grid, commensurate_half_length, inner, laplacian_array)
from .flow import _tridiag, check_sup, zeta_array
from .kernels import extract_lambda


class InconsistencyError(NumericError):
    pass


class TailGateError(NumericError):
    """Truncated time integral whose tail estimate is above tolerance; increase T."""


class WindowTruncationError(NumericError):
    pass


# ---------------------------------------------------------------- cutoff


def bump(x):
    """exp(1 - 1/(1 - x^2)) on (-1, 1), 0 outside; a(0) = 1."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    xi = x[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - xi**2))
    return out


def bump_prime(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    xi = x[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - xi**2)) * (-2.0 * xi / (1.0 - xi**2) ** 2)
    return out


@dataclass(frozen=True)
class Cutoff:
    """Noise cutoff a(x) with compact support in (-1, 1)."""

    name: str = "bump"
    func: Callable | None = None
    deriv: Callable | None = None

    def __post_init__(self):
        if self.name != "bump":
            if self.func is None:
                raise ConfigurationError(f"unknown cutoff {self.name!r}")
            s = np.concatenate([np.linspace(-3, -1, 201), np.linspace(1, 3, 201)])
            if np.any(np.asarray(self.func(s), dtype=float) != 0.0):
                raise ConfigurationError("cutoff must vanish outside (-1, 1)")

    def __call__(self, x):
        return bump(x) if self.name == "bump" else np.asarray(self.func(np.asarray(x, dtype=float)), dtype=float)

    def derivative(self, x):
        if self.name == "bump":
            return bump_prime(x)
        if self.deriv is not None:
            return np.asarray(self.deriv(np.asarray(x, dtype=float)), dtype=float)
        x = np.asarray(x, dtype=float)
        d = 1e-6
        return (self(x + d) - self(x - d)) / (2 * d)

    def scaled(self, x, eps: float):
        """a_eps(x) = a(sqrt(eps) x)."""
        return self(math.sqrt(eps) * np.asarray(x, dtype=float))


@dataclass(frozen=True)
class CorrectorSpec:
    epsilon: float
    gamma: float
    order: int = 1
    cutoff: Cutoff = field(default_factory=Cutoff)

    def __post_init__(self):
        if not self.gamma > -0.25:
            raise ConfigurationError(f"gamma must exceed -1/4, got {self.gamma}")
        if not 0 < self.epsilon <= 1:
            raise ConfigurationError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.order < 1:
            raise ConfigurationError("corrector order starts at 1")

    @property
    def gamma_prime(self) -> float:
        return self.gamma + 0.25


# ---------------------------------------------------------- coefficients


@dataclass
class LimitCoefficients:
    alpha1: float
    alpha2: float
    method_tags: tuple = ()
    refinement_deltas: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"alpha1": self.alpha1, "alpha2": self.alpha2, "method_tags": list(self.method_tags),
                "refinement_deltas": self.refinement_deltas, "diagnostics": self.diagnostics}


def _on_grid(profile: Profile, half_length: float, boundary: str):
    h = profile.grid.spacing
    L = min(profile.grid.half_length, commensurate_half_length(half_length, h))
    if round(2 * L / h) % 2:
        L += h
    return build_grid(L, h, boundary)


def alpha1_quadrature(profile: Profile, theta: float = 0.0, rt: ReactionTerm | None = None,
                      dt: float = 0.01, t_extract: float = 10.0) -> float:
    """(int |D zeta(y; m_theta)|^2 dy)^{1/2} with D zeta from the adjoint kernel route."""
    rt = rt or profile.reaction
    v = profile.translate(profile.grid, theta)
    lam = extract_lambda(v, profile, t_extract, dt, rt, second="none")
    return math.sqrt(inner(lam.lambda1.values, lam.lambda1.values, profile.grid.spacing))


def alpha1(profile: Profile, theta: float = 0.0, check: bool = False, tol: float = 1e-3, **kw) -> float:
    """1 / ||m'_theta||; with ``check`` the quadrature route must agree within ``tol``."""
    mp = profile.translate(profile.grid, theta, 1).values
    a1 = 1.0 / math.sqrt(inner(mp, mp, profile.grid.spacing))
    if check:
        q = alpha1_quadrature(profile, theta, **kw)
        if abs(q - a1) > tol:
            raise InconsistencyError(f"alpha1 routes disagree: {a1:.8g} vs quadrature {q:.8g}")
    return a1


def alpha2_spectral(profile: Profile, t_max: float = 12.0, half_length: float = 12.0,
                    rt: ReactionTerm | None = None, fpp: Callable | None = None, tail_tol: float = 1e-8,
                    chunk: int = 512) -> tuple[float, float]:
    """-(1/||m'||^2) int_0^T int int y p_t(y, z)^2 f''(m(z)) m'(z) dy dz dt by eigen-expansion of A_h.

    With A_h = sum lam_k phi_k phi_k^T the time integral is exact,
    sum_{k,l} Y_kl G_kl (1 - e^{-(lam_k + lam_l) T}) / (lam_k + lam_l), Y = <phi_k, y phi_l>,
    G = <phi_k, g phi_l>, g = f''(m) m'. The (0, 0) term (Y_00 = 0 by symmetry) is dropped.
    Returns (alpha2, tail) where tail is the exact remainder of the series beyond T.
    """
    rt = rt or profile.reaction
    grid = _on_grid(profile, half_length, "dirichlet_zero")
    x, h = grid.x, grid.spacing
    m = profile.evaluate(x, 0)
    mp = profile.evaluate(x, 1)
    g = (fpp(m) if fpp is not None else rt(m, 2)) * mp
    if not np.any(g):
        return 0.0, 0.0
    lam, phi = eigh_tridiagonal(2.0 / h**2 - rt(m, 1), np.full(grid.n_points - 1, -1.0 / h**2))
    lam = np.where(np.abs(lam) < 1e-300, 1e-300, lam)
    total = tail = 0.0
    yphi = x[:, None] * phi
    gphi = g[:, None] * phi
    for s in range(0, lam.size, chunk):
        sl = slice(s, s + chunk)
        Y = phi.T @ yphi[:, sl]
        G = phi.T @ gphi[:, sl]
        ls = lam[:, None] + lam[None, sl]
        if s == 0:
            ls[0, 0] = np.inf  # drop the (0, 0) term
        YG = Y * G
        total += float(np.sum(YG * (-np.expm1(-ls * t_max)) / ls))
        tail += float(np.sum(YG * np.exp(-ls * t_max) / ls))
    norm2 = inner(mp, mp, h)
    a2, tail = -total / norm2, abs(tail) / norm2
    if tail > tail_tol * max(1.0, abs(a2)):
        raise TailGateError(f"alpha2 time-tail {tail:.2e} above gate at T = {t_max}; increase T")
    return a2, tail


def alpha2_cross(profile: Profile, theta: float = 0.0, half_length: float = 12.0, dt: float = 0.01,
                 window: float = 10.0, rt: ReactionTerm | None = None) -> float:
    """int (y - theta) D^2 zeta(y, y; m_theta) dy from the kernel route."""
    rt = rt or profile.reaction
    grid = _on_grid(profile, half_length, "dirichlet_pm1")
    v = profile.translate(grid, theta)
    lam = extract_lambda(v, profile, dt=dt, rt=rt, second="diag", window=window)
    return -inner(grid.x - theta, lam.lambda2_diag.values, grid.spacing)


def alpha2(profile: Profile, **kw) -> float:
    return alpha2_spectral(profile, **kw)[0]


def limit_coefficients(rt: ReactionTerm = CUBIC, h: float = 0.01, L: float = 30.0, refine: bool = True,
                       cross: bool = True, cross_h: float | None = None, thetas=(0.0, 1.0, -2.0),
                       t_max: float = 12.0) -> LimitCoefficients:
    """alpha1, alpha2 with refinement deltas (h -> h/2) and the D^2 zeta cross-check."""
    from .core import solve_profile

    prof = solve_profile(rt, build_grid(L, h), scheme="lattice")
    a1 = alpha1(prof)
    a2, tail = alpha2_spectral(prof, t_max=t_max, rt=rt)
    tags = ["alpha1:1/||m'||", "alpha2:eigen-expansion"]
    deltas, diag = {}, {"alpha2_tail": tail, "l2_norm_mprime": prof.l2_norm_mprime}
    if refine:
        fine = solve_profile(rt, build_grid(L, h / 2), scheme="lattice")
        deltas["alpha1"] = abs(alpha1(fine) - a1)
        a2f = alpha2_spectral(fine, t_max=t_max, rt=rt)[0]
        deltas["alpha2"] = abs(a2f - a2)
        deltas["alpha2_relative"] = abs(a2f - a2) / abs(a2)
    if cross:
        ch = cross_h or max(h, 0.05)
        cp = prof if ch == h else solve_profile(rt, build_grid(commensurate_half_length(12.0, ch), ch),
                                                  scheme="lattice")
        vals = [alpha2_cross(cp, th, rt=rt) for th in thetas]
        diag["alpha2_cross"] = dict(zip(map(str, thetas), vals))
        diag["alpha2_cross_theta_spread"] = float(np.ptp(vals))
        diag["alpha2_cross_relative_discrepancy"] = abs(vals[0] - a2) / abs(a2)
        diag["alpha1_quadrature"] = alpha1_quadrature(cp, rt=rt)
        tags.append(f"alpha2:cross-check int (y-theta) D2zeta at h={ch}")
    return LimitCoefficients(a1, a2, tuple(tags), deltas, diag)


# ------------------------------------------------------------ correctors


def psi1(v: Field, profile: Profile, t_extract: float = 10.0, dt: float = 0.01, rt: ReactionTerm = CUBIC,
         window: float = 10.0) -> float:
    """int D^2 zeta(y, y; v) dy."""
    lam = extract_lambda(v, profile, t_extract, dt, rt, second="diag", window=window)
    return -float(v.grid.spacing * np.sum(lam.lambda2_diag.values))


@dataclass
class PsiBarResult:
    value: float
    tail_bound: float
    times: np.ndarray
    integrand: np.ndarray
    decay_rate: float


def checkpoint_times(t_max: float, dt: float, spacing=(0.2, 0.5), switch: float = 4.0) -> np.ndarray:
    fine = np.arange(0.0, min(switch, t_max) + 1e-12, spacing[0])
    coarse = np.arange(fine[-1] + spacing[1], t_max + 1e-12, spacing[1])
    ts = np.concatenate([fine, coarse])
    if ts[-1] < t_max - 1e-12:
        ts = np.append(ts, t_max)
    steps = np.round(ts / dt)
    if np.any(np.abs(steps * dt - ts) > 1e-9):
        raise ConfigurationError("checkpoint times must be multiples of dt")
    return steps * dt


def psibar1_series(v: Field, profile: Profile, t_max: float = 10.0, dt: float = 0.01,
                   rt: ReactionTerm = CUBIC, tail_tol: float = 1e-4, spacing=(0.2, 0.5),
                   workers: int = 1, **kw) -> PsiBarResult:
    """int_0^{t_max} psi1(F^t v) dt by composite trapezoid over flow checkpoints plus a fitted tail bound."""
    times = checkpoint_times(t_max, dt, spacing)
    steps = np.round(times / dt).astype(int)
    solver = _tridiag(v.grid, dt)
    u = v.values.copy()
    states, k = [], 0
    for target in steps:
        while k < target:
            u = solver.solve(u + dt * rt(u, 0))
            k += 1
        states.append(Field(v.grid, u.copy()))
    check_sup(u, rt.sup_bound)
    job = lambda s: psi1(s, profile, dt=dt, rt=rt, **kw)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            vals = np.array(list(ex.map(job, states)))
    else:
        vals = np.array([job(s) for s in states])
    value = float(np.trapezoid(vals, times))
    # tail beyond t_max from the exponential decay of the last checkpoints; without decay (a discretization
    # floor of psi1 on the manifold) the floor is charged for a further 2 t_max
    last = np.abs(vals[-5:])
    rate = float("nan")
    if np.all(last > 1e-300):
        rate = -float(np.polyfit(times[-5:], np.log(last), 1)[0])
    tail = abs(vals[-1]) / rate if rate > 0.05 else 2.0 * abs(vals[-1]) * t_max
    if tail > tail_tol:
        raise TailGateError(f"psibar1 tail estimate {tail:.2e} above {tail_tol:g}; increase t_max")
    return PsiBarResult(value, tail, times, vals, rate)


def psibar1(v: Field, profile: Profile, t_max: float = 10.0, **kw) -> float:
    return psibar1_series(v, profile, t_max, **kw).value


def corrector1(v: Field, profile: Profile, spec: CorrectorSpec, **kw) -> float:
    """1/2 eps^{2 gamma'} a_eps(zeta(v))^2 psibar1(v)."""
    if spec.order != 1:
        raise UnsupportedError(f"corrector of order {spec.order} is not evaluable (only order 1)")
    rt = kw.get("rt", CUBIC)
    z = zeta_array(v.values, v.grid, profile, rt=rt)
    a = float(spec.cutoff.scaled(z, spec.epsilon))
    if a == 0.0:
        return 0.0
    return 0.5 * spec.epsilon ** (2 * spec.gamma_prime) * a * a * psibar1(v, profile, **kw)


# ------------------------------------------------------------ identities


def drift_field(v: Field, rt: ReactionTerm = CUBIC) -> np.ndarray:
    """N(v) = Delta_h v + f(v)."""
    return laplacian_array(v.values, v.grid.spacing, v.grid.boundary) + rt(v.values, 0)


def orthogonality_residual(v: Field, profile: Profile, dt: float = 0.01, t_extract: float = 10.0,
                           rt: ReactionTerm = CUBIC) -> float:
    """<D zeta(v), Delta v + f(v)>."""
    lam = extract_lambda(v, profile, t_extract, dt, rt, second="none")
    return -inner(lam.lambda1.values, drift_field(v, rt), v.grid.spacing)


@dataclass
class FunctionalPDEResult:
    term1: float  # <D psibar1(v), Delta v + f(v)>
    term2: float  # int D^2 zeta(y, y; v) dy
    residual: float
    relative: float
    truncation: float  # contribution of N(v) outside the window


def functional_pde_residual(v: Field, profile: Profile, t_max: float = 10.0, delta: float = 1e-3,
                            window: float = 8.0, dt: float = 0.01, rt: ReactionTerm = CUBIC,
                            gate: float = 0.05, max_points: int = 256, **kw) -> FunctionalPDEResult:
    """<D psibar1(v), N(v)> + int D^2 zeta(y, y; v) dy, with the first term a central difference of psibar1
    along N(v) restricted to |x - zeta(v)| <= window."""
    if v.grid.n_points > max_points:
        raise ConfigurationError(f"functional PDE check needs n_points <= {max_points}")
    z = zeta_array(v.values, v.grid, profile, rt=rt)
    N = drift_field(v, rt)
    inside = np.abs(v.grid.x - z) <= window + 1e-8
    Nw, Nout = np.where(inside, N, 0.0), np.where(inside, 0.0, N)

    def directional(d):
        s = delta / np.max(np.abs(d))
        plus = psibar1(Field(v.grid, v.values + s * d), profile, t_max, dt=dt, rt=rt, **kw)
        minus = psibar1(Field(v.grid, v.values - s * d), profile, t_max, dt=dt, rt=rt, **kw)
        return (plus - minus) / (2 * s)

    term2 = psi1(v, profile, dt=dt, rt=rt)
    term1 = directional(Nw) if np.any(Nw) else 0.0
    scale = max(abs(term1), abs(term2))
    trunc = 0.0
    if np.max(np.abs(Nout), initial=0.0) > 1e-10 * max(np.max(np.abs(N)), 1e-300):
        trunc = abs(directional(Nout))
        if trunc > gate * scale:
            raise WindowTruncationError(f"window truncation contributes {trunc:.2e}; widen the window")
    res = term1 + term2
    return FunctionalPDEResult(term1, term2, res, abs(res) / scale if scale > 0 else 0.0, trunc)
