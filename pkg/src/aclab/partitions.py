"""Set partitions, the product/sum identities over refinements, and a finite-dimensional Faa di Bruno check.

Index sets are [n] = {0, ..., n-1}; a partition is stored canonically with sorted blocks ordered by least element.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import ConfigurationError

MAX_N = 10


@dataclass(frozen=True)
class SetPartition:
    blocks: tuple  # tuple of sorted tuples

    def __post_init__(self):
        blocks = tuple(sorted((tuple(sorted(b)) for b in self.blocks), key=lambda b: b[0] if b else -1))
        if any(len(b) == 0 for b in blocks):
            raise ConfigurationError("partition has an empty block")
        flat = [i for b in blocks for i in b]
        if len(flat) != len(set(flat)):
            raise ConfigurationError("partition blocks overlap")
        object.__setattr__(self, "blocks", blocks)

    @property
    def ground(self) -> tuple:
        return tuple(sorted(i for b in self.blocks for i in b))

    def __len__(self) -> int:
        return len(self.blocks)

    def is_finer(self, other: "SetPartition") -> bool:
        """self <= other: every block of self lies inside a block of other (same ground set)."""
        if self.ground != other.ground:
            return False
        owner = {i: k for k, b in enumerate(other.blocks) for i in b}
        return all(len({owner[i] for i in b}) == 1 for b in self.blocks)

    def restrict(self, block) -> "SetPartition":
        """Q_B(self): the blocks of self inside ``block`` (self must be finer than a partition containing it)."""
        s = set(block)
        return SetPartition(tuple(b for b in self.blocks if set(b) <= s))


def _rgs(n: int):
    """Restricted growth strings of length n in lexicographic order."""
    a = [0] * n

    def rec(i, mx):
        if i == n:
            yield tuple(a)
            return
        for v in range(mx + 2):
            a[i] = v
            yield from rec(i + 1, max(mx, v))

    if n == 0:
        yield ()
        return
    a[0] = 0
    yield from rec(1, 0)


def partitions_of(items) -> list[SetPartition]:
    items = tuple(items)
    out = []
    for s in _rgs(len(items)):
        blocks = [[] for _ in range(max(s) + 1)] if s else []
        for it, k in zip(items, s):
            blocks[k].append(it)
        out.append(SetPartition(tuple(tuple(b) for b in blocks)))
    return out


@lru_cache(maxsize=None)
def _enumerate(n: int) -> tuple:
    return tuple(partitions_of(range(n)))


def enumerate_partitions(n: int) -> list[SetPartition]:
    if not 1 <= n <= MAX_N:
        raise ConfigurationError(f"n must lie in [1, {MAX_N}], got {n}")
    return list(_enumerate(n))


def bell(n: int) -> int:
    """Bell numbers by the triangle recurrence (independent of the enumeration)."""
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0]


@dataclass(frozen=True)
class Refinement:
    partition: SetPartition
    restrictions: tuple  # Q_B(P*) for each block B of the coarse partition, in block order


def refinements(P: SetPartition) -> list[Refinement]:
    """All P* <= P (including P) with the restriction of P* to each block of P."""
    per_block = [partitions_of(b) for b in P.blocks]
    out = []
    for combo in itertools.product(*per_block):
        star = SetPartition(tuple(blk for q in combo for blk in q.blocks))
        out.append(Refinement(star, tuple(combo)))
    return out


# ------------------------------------------------------------ identities


class SymmetricFamily:
    """G^(k)(y_1, ..., y_k) for k <= n: symmetrized random tensors over a finite set of M sample points."""

    def __init__(self, n: int, rng: np.random.Generator, n_points: int = 3):
        self.tensors = {}
        for k in range(1, n + 1):
            T = rng.standard_normal((n_points,) * k)
            perms = list(itertools.permutations(range(k)))
            self.tensors[k] = sum(np.transpose(T, p) for p in perms) / len(perms)

    def __call__(self, ys) -> float:
        return float(self.tensors[len(ys)][tuple(ys)])


def _G_prod(blocks, G, y) -> float:
    return math.prod(G([y[i] for i in b]) for b in blocks)


def prod_sum_prod(P: SetPartition, G, y, theta) -> tuple[float, float, float]:
    """Both sides of the product-over-blocks identity and the magnitude scale (sum of |terms|)."""
    lhs = 1.0
    for B in P.blocks:
        lhs *= sum(theta(len(Q)) * _G_prod(Q.blocks, G, y) for Q in partitions_of(B))
    rhs, scale = 0.0, 0.0
    for R in refinements(P):
        term = math.prod(theta(len(Q)) for Q in R.restrictions) * _G_prod(R.partition.blocks, G, y)
        rhs += term
        scale += abs(term)
    return lhs, rhs, scale


def sum_prod_sum_prod(n: int, G, y, theta, gamma) -> tuple[float, float, float]:
    """Both sides of the Gamma-weighted sum over all partitions of [n] and the magnitude scale."""
    lhs = sum(gamma(len(P)) * prod_sum_prod(P, G, y, theta)[0] for P in _enumerate(n))
    inner = {k: sum(gamma(len(Pp)) * math.prod(theta(len(b)) for b in Pp.blocks) for Pp in _enumerate(k))
             for k in range(1, n + 1)}
    rhs = scale = 0.0
    for Ps in _enumerate(n):
        term = _G_prod(Ps.blocks, G, y) * inner[len(Ps)]
        rhs += term
        scale += abs(term)
    return lhs, rhs, scale


@dataclass
class IdentityResidual:
    max_abs: float
    max_rel: float
    by_identity: dict


def check_partition_identities(n: int, trials: int = 100, rng: np.random.Generator | None = None,
                               n_points: int = 3) -> IdentityResidual:
    """Random symmetric G, random Theta and Gamma, random P and sample points; all three identities."""
    if not 1 <= n <= 6:
        raise ConfigurationError("identity checks are exhaustive and limited to n <= 6")
    rng = rng or np.random.default_rng(0)
    parts = _enumerate(n)
    res = {"prod_sum_prod": 0.0, "prod_sum_prod_theta1": 0.0, "sum_prod_sum_prod": 0.0}
    rel = dict(res)
    for _ in range(trials):
        G = SymmetricFamily(n, rng, n_points)
        th_vals = rng.standard_normal(n + 1)
        ga_vals = rng.standard_normal(n + 1)
        theta = lambda k: th_vals[k]
        gamma = lambda k: ga_vals[k]
        y = rng.integers(0, n_points, size=n)
        P = parts[rng.integers(len(parts))]
        for name, (l, r, s) in (("prod_sum_prod", prod_sum_prod(P, G, y, theta)),
                                ("prod_sum_prod_theta1", prod_sum_prod(P, G, y, lambda k: 1.0)),
                                ("sum_prod_sum_prod", sum_prod_sum_prod(n, G, y, theta, gamma))):
            res[name] = max(res[name], abs(l - r))
            rel[name] = max(rel[name], abs(l - r) / s if s > 0 else 0.0)
    return IdentityResidual(max(res.values()), max(rel.values()), rel)


# ---------------------------------------------------------- Faa di Bruno


class TrigMap:
    """x -> A sin(B x + c) (vector valued) with analytic derivative tensors."""

    def __init__(self, A: np.ndarray, B: np.ndarray, c: np.ndarray):
        self.A, self.B, self.c = A, B, c

    def __call__(self, x):
        return self.A @ np.sin(self.B @ x + self.c)

    def deriv(self, x, hs) -> np.ndarray:
        """D^j F(x)[h_1, ..., h_j] for j = len(hs)."""
        j = len(hs)
        phase = self.B @ x + self.c + j * np.pi / 2
        w = np.sin(phase)
        for h in hs:
            w = w * (self.B @ h)
        return self.A @ w


class PolyMap:
    """Linear (W x + b) or quadratic (1/2 x^T Q_i x + W x + b) maps."""

    def __init__(self, W: np.ndarray, b: np.ndarray, Q: np.ndarray | None = None):
        self.W, self.b, self.Q = W, b, Q

    def __call__(self, x):
        out = self.W @ x + self.b
        if self.Q is not None:
            out = out + 0.5 * np.einsum("ijk,j,k->i", self.Q, x, x)
        return out

    def deriv(self, x, hs) -> np.ndarray:
        j = len(hs)
        if j == 0:
            return self(x)
        if j == 1:
            out = self.W @ hs[0]
            if self.Q is not None:
                out = out + np.einsum("ijk,j,k->i", self.Q, x, hs[0])
            return out
        if j == 2 and self.Q is not None:
            return np.einsum("ijk,j,k->i", self.Q, hs[0], hs[1])
        return np.zeros(self.b.shape)


def chain_rule_partition_sum(outer, inner, x, hs) -> np.ndarray:
    """sum_{P in partitions([n])} D^{|P|} outer(inner(x)) [ D^{|B|} inner(x)[h_B] for B in P ]."""
    y = inner(x)
    total = 0.0
    for P in _enumerate(len(hs)):
        args = [inner.deriv(x, [hs[i] for i in B]) for B in P.blocks]
        total = total + outer.deriv(y, args)
    return np.asarray(total)


def mixed_difference(F, x, hs, delta: float) -> np.ndarray:
    """Central mixed difference for d^n/dt_1...dt_n F(x + sum t_i h_i) at 0, error O(delta^2)."""
    n = len(hs)
    acc = 0.0
    for signs in itertools.product((1.0, -1.0), repeat=n):
        acc = acc + math.prod(signs) * F(x + delta * sum(s * h for s, h in zip(signs, hs)))
    return np.asarray(acc) / (2 * delta) ** n


def richardson_derivative(F, x, hs, delta: float = 0.02) -> np.ndarray:
    return (4.0 * mixed_difference(F, x, hs, delta / 2) - mixed_difference(F, x, hs, delta)) / 3.0


def random_trig_map(rng, n_in: int, n_out: int, scale: float = 0.6) -> TrigMap:
    return TrigMap(rng.standard_normal((n_out, 3)) / math.sqrt(3), scale * rng.standard_normal((3, n_in)),
                   rng.uniform(0, 2 * np.pi, 3))


def faa_di_bruno_check(inner_dim: int, outer_dim: int, order: int, rng: np.random.Generator | None = None,
                       kind: str = "trig", n_dirs: int = 3, delta: float = 0.02) -> float:
    """Max |partition sum - oracle| over random points and directions for Psi o Phi,
    Phi: R^inner_dim -> R^outer_dim, Psi: R^outer_dim -> R.

    kind="trig": generic smooth maps against Richardson-extrapolated mixed differences;
    kind="quadratic-linear": Psi quadratic, Phi linear, against the exact D^2 Psi[W h1, W h2] (zero beyond order 2).
    """
    if not 1 <= order <= 4:
        raise ConfigurationError("order must lie in [1, 4]")
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for _ in range(n_dirs):
        x = rng.standard_normal(inner_dim)
        hs = [rng.standard_normal(inner_dim) / math.sqrt(inner_dim) for _ in range(order)]
        if kind == "trig":
            phi = random_trig_map(rng, inner_dim, outer_dim)
            psi = random_trig_map(rng, outer_dim, 1)
            lhs = chain_rule_partition_sum(psi, phi, x, hs)
            oracle = richardson_derivative(lambda z: psi(phi(z)), x, hs, delta)
        elif kind == "quadratic-linear":
            W = rng.standard_normal((outer_dim, inner_dim))
            phi = PolyMap(W, rng.standard_normal(outer_dim))
            Q = rng.standard_normal((1, outer_dim, outer_dim))
            psi = PolyMap(rng.standard_normal((1, outer_dim)), rng.standard_normal(1), Q + Q.transpose(0, 2, 1))
            lhs = chain_rule_partition_sum(psi, phi, x, hs)
            if order == 1:
                oracle = psi.deriv(phi(x), [W @ hs[0]])
            elif order == 2:
                oracle = psi.deriv(phi(x), [W @ hs[0], W @ hs[1]])
            else:
                oracle = np.zeros(1)
        else:
            raise ConfigurationError(f"unknown map kind {kind!r}")
        worst = max(worst, float(np.max(np.abs(np.asarray(lhs) - np.asarray(oracle)))))
    return worst
