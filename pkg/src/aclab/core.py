"""Grids, fields, weighted norms, the reaction term and the standing-wave profile."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg import solve_banded
from scipy.sparse.linalg import spsolve

Boundary = Literal["dirichlet_pm1", "dirichlet_zero", "neumann"]
BOUNDARIES = ("dirichlet_pm1", "dirichlet_zero", "neumann")

# sup-norm monitor that replaces the truncated nonlinearity
M_SUP = 2.0
# operational neighbourhood radius of the manifold of fronts
BETA = 0.1


class AclabError(Exception):
    """Base error. ``exit_code`` follows the CLI contract."""

    exit_code = 4


class ConfigurationError(AclabError):
    exit_code = 3


class NumericError(AclabError):
    exit_code = 4


class SolverError(NumericError):
    def __init__(self, msg: str, history: list[float] | None = None):
        super().__init__(msg)
        self.history = history or []


class SupBoundViolation(NumericError):
    pass


class UnsupportedError(AclabError):
    exit_code = 3


class GateFailure(AclabError):
    exit_code = 2


# ---------------------------------------------------------------- grids


@dataclass(frozen=True)
class GridSpec:
    half_length: float
    spacing: float
    n_points: int
    boundary: Boundary = "dirichlet_pm1"

    @property
    def x(self) -> np.ndarray:
        return self.spacing * (np.arange(self.n_points) - (self.n_points - 1) // 2)

    @property
    def h(self) -> float:
        return self.spacing

    def with_boundary(self, boundary: Boundary) -> "GridSpec":
        return build_grid(self.half_length, self.spacing, boundary)

    def to_dict(self) -> dict:
        return {"half_length": self.half_length, "spacing": self.spacing,
                "n_points": self.n_points, "boundary": self.boundary}


def build_grid(half_length: float, spacing: float, boundary: Boundary = "dirichlet_pm1") -> GridSpec:
    if not (spacing > 0 and half_length > 0):
        raise ConfigurationError(f"need half_length > 0 and spacing > 0, got {half_length}, {spacing}")
    if boundary not in BOUNDARIES:
        raise ConfigurationError(f"unknown boundary {boundary!r}")
    cells = 2.0 * half_length / spacing
    k = round(cells)
    if abs(cells - k) > 1e-9 * max(1.0, cells) or k % 2:
        raise ConfigurationError(
            f"half_length {half_length} is not a multiple of spacing {spacing} (2L/h = {cells!r})")
    return GridSpec(float(half_length), float(spacing), int(k) + 1, boundary)


def commensurate_half_length(length: float, spacing: float) -> float:
    """Smallest multiple of ``spacing`` that is >= ``length``."""
    return spacing * math.ceil(length / spacing - 1e-9)


@dataclass(frozen=True, eq=False)
class Field:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_points,):
            raise ConfigurationError(f"field length {v.shape} does not match grid ({self.grid.n_points})")
        if not np.all(np.isfinite(v)):
            raise NumericError("field has non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def x(self) -> np.ndarray:
        return self.grid.x

    def __add__(self, other):
        o = other.values if isinstance(other, Field) else other
        return Field(self.grid, self.values + o)

    def __sub__(self, other):
        o = other.values if isinstance(other, Field) else other
        return Field(self.grid, self.values - o)

    def __mul__(self, c):
        return Field(self.grid, self.values * c)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values)


def inner(u, v, h: float) -> float:
    """Midpoint-rule L2 inner product."""
    return float(h * np.dot(u, v))


def reflect(v: Field) -> Field:
    """(Rv)(x) = -v(-x)."""
    return Field(v.grid, -v.values[::-1])


def shift(v: Field, k: int, fill: str = "edge") -> Field:
    """Translate by k grid cells, (S v)(x) = v(x - k h); new cells copy the edge value."""
    out = np.roll(v.values, k)
    if k > 0:
        out[:k] = v.values[0] if fill == "edge" else 0.0
    elif k < 0:
        out[k:] = v.values[-1] if fill == "edge" else 0.0
    return Field(v.grid, out)


def save_field(v: Field, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    np.savetxt(tmp, np.column_stack([v.x, v.values]), delimiter=",", header="x,value",
               comments="", fmt="%.17g")
    tmp.replace(path)


def load_field(path, boundary: Boundary = "dirichlet_pm1") -> Field:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    x = data[:, 0]
    h = float(np.round((x[-1] - x[0]) / (x.size - 1), 12))
    grid = build_grid(float(np.round(x[-1], 12)), h, boundary)
    if not np.allclose(grid.x, x, atol=1e-9):
        raise ConfigurationError(f"{path}: abscissae are not a symmetric uniform grid")
    return Field(grid, data[:, 1])


# ------------------------------------------------------------ operators


def ghost_values(boundary: str) -> tuple[float, float]:
    if boundary == "dirichlet_pm1":
        return -1.0, 1.0
    return 0.0, 0.0


def laplacian_array(u: np.ndarray, h: float, boundary: str) -> np.ndarray:
    """Second-order central differences with ghost values outside the grid; works along axis 0."""
    out = np.empty_like(u)
    out[1:-1] = u[2:] - 2.0 * u[1:-1] + u[:-2]
    if boundary == "neumann":
        out[0] = 2.0 * (u[1] - u[0])
        out[-1] = 2.0 * (u[-2] - u[-1])
    else:
        gl, gr = ghost_values(boundary)
        out[0] = u[1] - 2.0 * u[0] + gl
        out[-1] = gr - 2.0 * u[-1] + u[-2]
    return out / h**2


def laplacian(v: Field) -> Field:
    return Field(v.grid, laplacian_array(v.values, v.grid.spacing, v.grid.boundary))


def laplacian_bands(n: int, h: float, boundary: str) -> np.ndarray:
    """Banded (solve_banded layout) matrix of the homogeneous part of the discrete Laplacian."""
    ab = np.zeros((3, n))
    ab[0, 1:] = 1.0 / h**2
    ab[1, :] = -2.0 / h**2
    ab[2, :-1] = 1.0 / h**2
    if boundary == "neumann":
        ab[0, 1] = 2.0 / h**2
        ab[2, -2] = 2.0 / h**2
    return ab


def laplacian_sparse(n: int, h: float, boundary: str) -> sp.csr_matrix:
    ab = laplacian_bands(n, h, boundary)
    return sp.diags([ab[2, :-1], ab[1], ab[0, 1:]], [-1, 0, 1], format="csr")


def weighted_norm(v: Field | np.ndarray, p: float, lam: float, grid: GridSpec | None = None) -> float:
    """(sum_i e^{p lam |x_i|} |v_i|^p h)^{1/p}; weighted sup for p = inf."""
    if isinstance(v, Field):
        grid, vals = v.grid, v.values
    else:
        vals = np.asarray(v, dtype=float)
    if grid is None:
        raise ConfigurationError("weighted_norm needs a grid for raw arrays")
    p = float(p)
    if p < 1:
        raise ConfigurationError(f"p must lie in [1, inf], got {p}")
    expo = lam * grid.half_length * (1.0 if math.isinf(p) else p)
    if abs(expo) > 700:
        raise NumericError(f"weighted norm overflows: lambda*L = {lam * grid.half_length:g}")
    ax = np.abs(grid.x)
    if math.isinf(p):
        return float(np.max(np.exp(lam * ax) * np.abs(vals)))
    return float((grid.spacing * np.sum(np.exp(p * lam * ax) * np.abs(vals) ** p)) ** (1.0 / p))


# --------------------------------------------------------- reaction term


def _cubic_derivs(u, order):
    if order == 0:
        return u - u**3
    if order == 1:
        return 1.0 - 3.0 * u**2
    if order == 2:
        return -6.0 * u
    return -6.0 * np.ones_like(np.asarray(u, dtype=float))


@dataclass(frozen=True)
class ReactionTerm:
    """Bistable odd nonlinearity f with derivatives up to order 3."""

    kind: Literal["cubic", "custom"] = "cubic"
    derivs: Callable | None = None  # derivs(u, order) for custom kinds
    sup_bound: float = M_SUP
    name: str = "cubic"

    def __call__(self, u, order: int = 0):
        return eval_reaction(self, u, order)

    def potential_gap(self, m):
        """int_m^1 f(s) ds, so that m' = sqrt(2 * gap) for the profile."""
        if self.kind == "cubic":
            m = np.asarray(m, dtype=float)
            return 0.25 * (1.0 - m**2) ** 2
        from scipy.integrate import quad
        m = np.atleast_1d(np.asarray(m, dtype=float))
        return np.array([quad(lambda s: float(self(s)), mi, 1.0, epsabs=1e-15, epsrel=1e-13)[0]
                         for mi in m])


CUBIC = ReactionTerm()


def custom_reaction(derivs: Callable, name: str = "custom") -> ReactionTerm:
    rt = ReactionTerm(kind="custom", derivs=derivs, name=name)
    check_reaction(rt)
    return rt


def eval_reaction(rt: ReactionTerm, u, order: int = 0):
    if not 0 <= order <= 3:
        raise UnsupportedError(f"reaction derivative of order {order} is not supported (max 3)")
    if rt.kind == "cubic":
        return _cubic_derivs(u, order)
    return rt.derivs(u, order)


def check_reaction(rt: ReactionTerm, tol: float = 1e-12) -> None:
    f = lambda u, k=0: float(eval_reaction(rt, np.float64(u), k))
    if max(abs(f(-1.0)), abs(f(0.0)), abs(f(1.0))) > tol:
        raise ConfigurationError("f must vanish at -1, 0, 1")
    if not (f(1.0, 1) < 0 and f(-1.0, 1) < 0 and f(0.0, 1) > 0):
        raise ConfigurationError("f must satisfy f'(+-1) < 0 < f'(0)")
    u = np.linspace(-2, 2, 101)
    if np.max(np.abs(eval_reaction(rt, -u, 0) + eval_reaction(rt, u, 0))) > tol:
        raise ConfigurationError("f must be odd")


# --------------------------------------------------------------- profile


@dataclass(frozen=True, eq=False)
class Profile:
    """Standing wave m and its derivatives on a reference grid."""

    grid: GridSpec
    m: Field
    mp: Field
    mpp: Field
    mppp: Field
    decay_constant: float
    l2_norm_mprime: float
    residual: float
    scheme: str = "compact"
    reaction: ReactionTerm = CUBIC
    decay_prefactor: float = 0.0
    fd_mismatch: float = 0.0
    _splines: dict = field(default_factory=dict, repr=False)

    @property
    def l2_sq(self) -> float:
        return self.l2_norm_mprime**2

    def _spline(self, order: int) -> CubicHermiteSpline:
        sp_ = self._splines.get(order)
        if sp_ is None:
            tabs = [self.m.values, self.mp.values, self.mpp.values, self.mppp.values]
            if order < 3:
                y, dy = tabs[order], tabs[order + 1]
            else:
                y = tabs[3]
                dy = np.gradient(y, self.grid.spacing, edge_order=2)
            sp_ = CubicHermiteSpline(self.grid.x, y, dy, extrapolate=False)
            self._splines[order] = sp_
        return sp_

    def evaluate(self, x, order: int = 0) -> np.ndarray:
        """m^{(order)}(x) by cubic Hermite interpolation; beyond the table m -> +-1, derivatives -> 0."""
        x = np.asarray(x, dtype=float)
        out = self._spline(order)(x)
        bad = np.isnan(out)
        if np.any(bad):
            out = np.where(bad, np.sign(x) if order == 0 else 0.0, out)
        return out

    def translate(self, grid: GridSpec, theta: float, order: int = 0) -> Field:
        """m_theta^{(order)} = m^{(order)}(. - theta) sampled on ``grid``."""
        return Field(grid, self.evaluate(grid.x - theta, order))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, fld in (("m", self.m), ("m_prime", self.mp), ("m_second", self.mpp), ("m_third", self.mppp)):
            save_field(fld, d / f"{name}.csv")
        meta = {"c0": self.decay_constant, "l2_norm_mprime": self.l2_norm_mprime,
                "residual": self.residual, "grid": self.grid.to_dict(), "scheme": self.scheme,
                "reaction": self.reaction.name}
        tmp = d / "profile.json.tmp"
        tmp.write_text(json.dumps(meta, indent=2))
        tmp.replace(d / "profile.json")


def _newton_profile(rt: ReactionTerm, grid: GridSpec, tol: float, scheme: str, max_iter: int = 60):
    x, h, n = grid.x, grid.spacing, grid.n_points
    m = np.tanh(x / math.sqrt(2.0)) if rt.kind == "cubic" else np.tanh(x)
    pad = lambda a, lo, hi: np.concatenate([[lo], a, [hi]])
    history = []
    for _ in range(max_iter):
        mp_ = pad(m, -1.0, 1.0)
        lap = (mp_[2:] - 2 * mp_[1:-1] + mp_[:-2]) / h**2
        fm, dfm = rt(m, 0), rt(m, 1)
        ab = np.zeros((3, n))
        ab[0, 1:] = 1.0 / h**2
        ab[2, :-1] = 1.0 / h**2
        if scheme == "compact":
            # fourth-order compact (Numerov) discretization of m'' + f(m) = 0
            fpad = pad(fm, 0.0, 0.0)
            F = lap + (fpad[2:] + 10 * fpad[1:-1] + fpad[:-2]) / 12.0
            ab[1] = -2.0 / h**2 + 10.0 * dfm / 12.0
            ab[0, 1:] += dfm[:-1] / 12.0
            ab[2, :-1] += dfm[1:] / 12.0
        else:
            F = lap + fm
            ab[1] = -2.0 / h**2 + dfm
        res = float(np.max(np.abs(F)))
        history.append(res)
        if res <= tol:
            break
        d = solve_banded((1, 1), ab, -F)
        step = 1.0
        while step > 1e-4:
            trial = m + step * d
            if np.all(np.abs(trial) <= 1.0 + 1e-12):
                break
            step *= 0.5
        m = trial
        m = 0.5 * (m - m[::-1])
    else:
        raise SolverError(f"profile Newton iteration did not converge (residual {history[-1]:.3e})", history)
    m[(n - 1) // 2] = 0.0
    return m, res


def _solve_bordered(A: sp.spmatrix, phi: np.ndarray, rhs: np.ndarray, c: float, h: float) -> np.ndarray:
    n = phi.size
    col = sp.csr_matrix(phi.reshape(-1, 1))
    row = sp.csr_matrix((h * phi).reshape(1, -1))
    K = sp.bmat([[A, col], [row, None]], format="csc")
    sol = spsolve(K, np.concatenate([rhs, [c]]))
    return sol[:n]


def higher_profile_derivatives(rt: ReactionTerm, grid: GridSpec, m: np.ndarray, mp: np.ndarray):
    """m'' and m''' from A m^{(j)} = sum over partitions of [j] with at least two blocks.

    j = 2: f''(m) m'^2 ; j = 3: f'''(m) m'^3 + 3 f''(m) m' m''.
    A is singular along m', so the bordered system pins <m'', m'> = 0 and <m''', m'> = -||m''||^2.
    """
    h, n = grid.spacing, grid.n_points
    A = (-laplacian_sparse(n, h, "dirichlet_zero") - sp.diags(rt(m, 1))).tocsr()
    f2, f3 = rt(m, 2), rt(m, 3)
    mpp = _solve_bordered(A, mp, f2 * mp**2, 0.0, h)
    mpp = 0.5 * (mpp - mpp[::-1])
    rhs3 = f3 * mp**3 + 3.0 * f2 * mp * mpp
    mppp = _solve_bordered(A, mp, rhs3, -inner(mpp, mpp, h), h)
    mppp = 0.5 * (mppp + mppp[::-1])
    return mpp, mppp


def solve_profile(rt: ReactionTerm = CUBIC, grid: GridSpec | None = None, tol: float = 1e-10,
                  scheme: str = "compact") -> Profile:
    """Monotone odd solution of m'' + f(m) = 0 with m(+-L +- h) = +-1.

    scheme="compact" is fourth-order accurate (continuum reference tables);
    scheme="lattice" solves the plain three-point equation, so it is an exact fixed point
    of the discrete flow on that grid.
    """
    if grid is None:
        grid = build_grid(20.0, 0.01)
    if grid.boundary != "dirichlet_pm1":
        raise ConfigurationError("solve_profile needs a dirichlet_pm1 grid")
    if scheme not in ("compact", "lattice"):
        raise ConfigurationError(f"unknown profile scheme {scheme!r}")
    m, res = _newton_profile(rt, grid, tol, scheme)
    dm = np.diff(m)
    core_ = np.abs(m[:-1]) < 1.0 - 1e-12
    if np.any(dm < -4e-16) or np.any(dm[core_] <= 0):
        raise SolverError("profile is not strictly increasing")
    h, x = grid.spacing, grid.x
    mp = np.sqrt(2.0 * np.maximum(rt.potential_gap(m), 0.0))
    mpp, mppp = higher_profile_derivatives(rt, grid, m, mp)
    fd = np.gradient(mp, h, edge_order=2)
    fd_mismatch = float(np.max(np.abs(fd[1:-1] - mpp[1:-1])))
    L = grid.half_length
    # the tail must still be resolved in double precision (1 - |m| well above rounding)
    win = (x >= L / 2) & (x <= L - 1) & (1.0 - np.abs(m) > 1e-11)
    if win.sum() >= 3:
        slope, icpt = np.polyfit(x[win], np.log(mp[win]), 1)
        c0 = float(-slope)
    else:
        c0, icpt = float("nan"), 0.0
    res_ = 1.0 - np.abs(m) > 1e-11
    pref = (float(max(np.max(np.abs(d[res_]) * np.exp(c0 * np.abs(x[res_]))) for d in (mp, mpp, mppp)))
            if np.isfinite(c0) else float("nan"))
    return Profile(grid=grid, m=Field(grid, m), mp=Field(grid, mp), mpp=Field(grid, mpp),
                   mppp=Field(grid, mppp), decay_constant=c0,
                   l2_norm_mprime=math.sqrt(inner(mp, mp, h)), residual=res, scheme=scheme,
                   reaction=rt, decay_prefactor=pref, fd_mismatch=fd_mismatch)
