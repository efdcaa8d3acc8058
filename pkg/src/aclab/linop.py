"""The linearized operator A = -Delta - f'(m), its spectrum, the projection onto span{m'} and e^{-tA}."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal, lapack

from .core import CUBIC, Field, GridSpec, NumericError, Profile, ReactionTerm, inner


@dataclass(frozen=True, eq=False)
class LinearizedOperator:
    grid: GridSpec  # dirichlet_zero
    potential: Field  # f'(m)

    @property
    def diag(self) -> np.ndarray:
        return 2.0 / self.grid.spacing**2 - self.potential.values

    @property
    def offdiag(self) -> np.ndarray:
        return np.full(self.grid.n_points - 1, -1.0 / self.grid.spacing**2)

    def apply(self, v) -> np.ndarray:
        u = v.values if isinstance(v, Field) else np.asarray(v, dtype=float)
        out = self.diag[:, None] * u if u.ndim == 2 else self.diag * u
        off = -1.0 / self.grid.spacing**2
        out[1:] += off * u[:-1]
        out[:-1] += off * u[1:]
        return out

    def quadratic_form(self, u, w) -> float:
        return inner(self.apply(u), w, self.grid.spacing)

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)


@dataclass
class SpectrumResult:
    eigenvalues: np.ndarray
    eigenfields: list  # Fields with unit L2 norm
    residuals: np.ndarray


def assemble(profile: Profile, rt: ReactionTerm | None = None) -> LinearizedOperator:
    rt = rt or profile.reaction
    grid = profile.grid.with_boundary("dirichlet_zero")
    return LinearizedOperator(grid, Field(grid, rt(profile.m.values, 1)))


def spectrum(op: LinearizedOperator, k: int = 5) -> SpectrumResult:
    """k lowest eigenpairs of the symmetric tridiagonal operator."""
    n = op.grid.n_points
    if not 1 <= k <= n:
        raise NumericError(f"k={k} outside [1, {n}]")
    try:
        w, vec = eigh_tridiagonal(op.diag, op.offdiag, select="i", select_range=(0, k - 1))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"tridiagonal eigensolver failed: {exc}") from exc
    h = op.grid.spacing
    vec = vec / np.sqrt(h)
    # fix the sign so that each eigenfield has positive mass on its largest lobe
    for j in range(k):
        i = np.argmax(np.abs(vec[:, j]))
        if vec[i, j] < 0:
            vec[:, j] *= -1
    res = np.array([np.sqrt(h) * np.linalg.norm(op.apply(vec[:, j]) - w[j] * vec[:, j]) for j in range(k)])
    return SpectrumResult(w, [Field(op.grid, vec[:, j]) for j in range(k)], res)


def project_P(v: Field, profile: Profile) -> Field:
    """Orthogonal projection <v, m'>/||m'||^2 m' (idempotent normalization)."""
    mp = profile.mp.values
    c = inner(v.values, mp, v.grid.spacing) / inner(mp, mp, v.grid.spacing)
    return Field(v.grid, c * mp)


def project_perp(v: Field, profile: Profile) -> Field:
    return Field(v.grid, v.values - project_P(v, profile).values)


def semigroup_apply(op: LinearizedOperator, t: float, v: Field | np.ndarray, dt: float | None = None) -> np.ndarray:
    """e^{-tA} v by Crank-Nicolson with dt = min(0.01, t/100)."""
    u = np.array(v.values if isinstance(v, Field) else v, dtype=float)
    if t <= 0:
        return u
    if dt is None:
        dt = min(0.01, t / 100.0)
    nsteps = max(1, int(np.ceil(t / dt - 1e-9)))
    dt = t / nsteps
    d, e = op.diag, op.offdiag
    dl, dd, du, du2, ipiv, info = lapack.dgttrf(0.5 * dt * e, 1.0 + 0.5 * dt * d, 0.5 * dt * e)
    if info:
        raise NumericError("Crank-Nicolson factorization failed")
    two_d = u.ndim == 2
    b = u if two_d else u[:, None]
    b = np.asfortranarray(b)
    for _ in range(nsteps):
        rhs = (1.0 - 0.5 * dt * d)[:, None] * b
        rhs[1:] -= 0.5 * dt * e[:, None] * b[:-1]
        rhs[:-1] -= 0.5 * dt * e[:, None] * b[1:]
        b, info = lapack.dgttrs(dl, dd, du, du2, ipiv, np.asfortranarray(rhs), overwrite_b=1)
    return b if two_d else b[:, 0]


def fit_decay_rate(op: LinearizedOperator, v: np.ndarray, profile: Profile, t_window=(1.0, 5.0),
                   n_times: int = 17) -> float:
    """Slope of log ||e^{-tA} P_perp v||_2 over the window."""
    h = op.grid.spacing
    w = project_perp(Field(op.grid, v), profile).values
    ts = np.linspace(t_window[0], t_window[1], n_times)
    norms = []
    u, t_prev = w, 0.0
    for t in ts:
        u = semigroup_apply(op, t - t_prev, u)
        t_prev = t
        norms.append(np.sqrt(inner(u, u, h)))
    return float(-np.polyfit(ts, np.log(norms), 1)[0])
