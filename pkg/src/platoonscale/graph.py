"""Path-graph Laplacian of a platoon with proportional asymmetry.

Vehicle ``i`` feeds back ``(x[i-1] - x[i]) - eps_i * (x[i] - x[i+1])``; the
leader (vehicle 1) is uncoupled and the last vehicle has no rear term.
All vehicle indices in this module are 1-based, as in the control law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class PlatoonGraph:
    """``n`` vehicles and the bidirectionality constants ``eps_2 .. eps_{n-1}``."""

    n: int
    epsilon: tuple[float, ...]

    def __init__(self, n: int, epsilon: Sequence[float] = ()):
        eps = tuple(float(e) for e in epsilon)
        if n < 2:
            raise GraphError("a platoon needs at least two vehicles")
        if len(eps) != n - 2:
            raise GraphError(f"expected {n - 2} bidirectionality constants, got {len(eps)}")
        if any(not math.isfinite(e) or e < 0 for e in eps):
            raise GraphError("bidirectionality constants must be finite and nonnegative")
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "epsilon", eps)

    @classmethod
    def uniform(cls, n: int, value: float) -> "PlatoonGraph":
        return cls(n, [value] * (n - 2))

    @classmethod
    def random_range(cls, n: int, low: float, high: float, seed: int) -> "PlatoonGraph":
        rng = SplitMix64(seed)
        return cls(n, [low + (high - low) * rng.uniform() for _ in range(n - 2)])

    def eps(self, i: int) -> float:
        """Constant of vehicle ``i`` (defined for ``2 <= i <= n-1`` only)."""
        if not 2 <= i <= self.n - 1:
            raise GraphError(f"eps_{i} is undefined for a platoon of {self.n}")
        return self.epsilon[i - 2]

    @property
    def eps_max(self) -> float:
        return max(self.epsilon, default=0.0)


class SplitMix64:
    """Seeded 64-bit generator (SplitMix64 by Steele, Lea and Flood).

    ``uniform()`` takes the top 53 bits of each output, so a given seed
    produces the same doubles on every platform.
    """

    _MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = int(seed) & self._MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & self._MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self._MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self._MASK
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


@dataclass(frozen=True, eq=False)
class Tridiagonal:
    """Tridiagonal matrix whose rows are labelled with vehicle indices.

    ``sub[k]`` is element ``(k+1, k)`` and ``sup[k]`` element ``(k, k+1)``.
    Labels survive row/column deletion, so a submatrix still knows which
    vehicles it describes.
    """

    diag: np.ndarray
    sub: np.ndarray
    sup: np.ndarray
    labels: tuple[int, ...]

    def __post_init__(self):
        for name in ("diag", "sub", "sup"):
            a = np.asarray(getattr(self, name), dtype=float).copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.sub.size != max(self.diag.size - 1, 0) or self.sup.size != self.sub.size:
            raise GraphError("off-diagonals must be one shorter than the diagonal")
        if len(self.labels) != self.diag.size:
            raise GraphError("one label per row required")

    @property
    def size(self) -> int:
        return self.diag.size

    @property
    def products(self) -> np.ndarray:
        return self.sub * self.sup

    @property
    def block_structure(self) -> list[tuple[int, int]]:
        """Half-open row ranges of the irreducible blocks."""
        cuts = [0] + [k + 1 for k in np.nonzero(self.products == 0)[0]] + [self.size]
        return [(a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]

    def to_dense(self) -> np.ndarray:
        n = self.size
        a = np.diag(self.diag)
        if n > 1:
            a[np.arange(1, n), np.arange(n - 1)] = self.sub
            a[np.arange(n - 1), np.arange(1, n)] = self.sup
        return a

    def delete(self, labels_to_drop) -> "Tridiagonal":
        """Principal submatrix without the rows/columns of the given vehicles."""
        drop = set(labels_to_drop)
        keep = [k for k, lab in enumerate(self.labels) if lab not in drop]
        sub, sup = [], []
        for a, b in zip(keep[:-1], keep[1:]):
            if b == a + 1:
                sub.append(self.sub[a])
                sup.append(self.sup[a])
            else:
                sub.append(0.0)
                sup.append(0.0)
        return Tridiagonal(self.diag[keep], np.array(sub), np.array(sup), tuple(self.labels[k] for k in keep))


@dataclass(frozen=True)
class SpectralData:
    eigenvalues: np.ndarray
    upper_bound: float
    lower_bound: Optional[float] = None

    def __len__(self):
        return self.eigenvalues.size

    def nonzero(self, atol: float = 1e-9) -> np.ndarray:
        return self.eigenvalues[np.abs(self.eigenvalues) > atol]


def build_laplacian(g: PlatoonGraph) -> Tridiagonal:
    n = g.n
    eps = np.asarray(g.epsilon, dtype=float)
    diag = np.concatenate([[0.0], 1.0 + eps, [1.0]])
    sub = -np.ones(n - 1)
    sup = np.concatenate([[0.0], -eps])
    return Tridiagonal(diag, sub, sup, tuple(range(1, n + 1)))


def reduce_leader(l: Tridiagonal) -> Tridiagonal:
    """Drop the leader's row and column."""
    return l.delete([1])


def path_nodes(c: int, o: int) -> range:
    return range(min(c, o), max(c, o) + 1)


def delete_path(l: Tridiagonal, c: int, o: int) -> Tridiagonal:
    """Remove every vehicle on the path between ``c`` and ``o`` (inclusive).

    The result is block diagonal: the vehicles ahead of the path and the
    vehicles behind it, decoupled by a zero off-diagonal pair.
    """
    lo, hi = min(l.labels), max(l.labels)
    if not (lo <= c <= hi and lo <= o <= hi):
        raise GraphError(f"path ({c}, {o}) outside vehicles {lo}..{hi}")
    return l.delete(path_nodes(c, o))


@numba.njit(cache=True)
def _sturm_count(d, e2, x, pivmin):
    # number of eigenvalues strictly below x
    count = 0
    q = d[0] - x
    if abs(q) < pivmin:
        q = -pivmin
    if q < 0:
        count += 1
    for k in range(1, d.size):
        q = d[k] - x - e2[k - 1] / q
        if abs(q) < pivmin:
            q = -pivmin
        if q < 0:
            count += 1
    return count


@numba.njit(cache=True)
def _bisect_block(d, e2, lo, hi, abstol):
    n = d.size
    pivmin = 1e-300 * max(1.0, e2.max() if e2.size else 1.0)
    out = np.empty(n)
    a_prev = lo
    for k in range(n):
        a = a_prev
        b = hi
        for _ in range(400):
            mid = 0.5 * (a + b)
            if mid <= a or mid >= b or b - a <= abstol:
                break
            if _sturm_count(d, e2, mid, pivmin) <= k:
                a = mid
            else:
                b = mid
        out[k] = 0.5 * (a + b)
        a_prev = a
    return out


def _symmetric_eigenvalues(d: np.ndarray, e2: np.ndarray) -> np.ndarray:
    """Eigenvalues of the symmetric tridiagonal with diagonal ``d`` and squared off-diagonal ``e2``."""
    if d.size == 1:
        return d.copy()
    e = np.sqrt(e2)
    radius = np.zeros(d.size)
    radius[:-1] += e
    radius[1:] += e
    lo = float(np.min(d - radius))
    hi = float(np.max(d + radius))
    scale = max(abs(lo), abs(hi), 1e-300)
    # widen slightly so the Gershgorin ends are strictly outside the spectrum
    lo -= 4 * np.finfo(float).eps * scale
    hi += 4 * np.finfo(float).eps * scale
    return _bisect_block(d, e2, lo, hi, 1e-300)


def spectrum(t: Tridiagonal) -> SpectralData:
    """Real spectrum via blockwise symmetrization and Sturm bisection."""
    if t.size == 0:
        return SpectralData(np.zeros(0), 0.0)
    prods = t.products
    if np.any(prods < 0):
        raise GraphError("negative off-diagonal product: matrix is not symmetrizable")
    vals = []
    for a, b in t.block_structure:
        vals.append(_symmetric_eigenvalues(t.diag[a:b].copy(), prods[a:b - 1].copy()))
    eig = np.sort(np.concatenate(vals))
    rows = np.abs(t.diag).copy()
    rows[1:] += np.abs(t.sub)
    rows[:-1] += np.abs(t.sup)
    return SpectralData(eig, float(rows.max()))


def spectral_bounds(g: PlatoonGraph) -> tuple[Optional[float], float]:
    """Uniform bounds on the nonzero eigenvalues, independent of ``n``."""
    em = g.eps_max
    if em < 1:
        return (1 - em) ** 2 / (2 * (1 + em)), 2 * (1 + em)
    return None, 2 * max(1 + e for e in g.epsilon)


def path_weight(g: PlatoonGraph, c: int, o: int) -> float:
    """Product of edge weights along the directed path from ``c`` to ``o``."""
    if not (1 <= c <= g.n and 1 <= o <= g.n):
        raise GraphError(f"vehicle index out of range 1..{g.n}")
    if c <= o:
        return 1.0
    return math.prod(g.eps(i) for i in range(o, c))


def determinant(t: Tridiagonal) -> float:
    """Three-term determinant recursion, blockwise, with exponent tracking.

    The running pair ``(D_{k-1}, D_{k-2})`` is renormalized by a power of two
    whenever it leaves ``[2**-500, 2**500]``, so long chains whose
    intermediate minors overflow still return the exact-scale answer.
    """
    det_mant, det_exp = 1.0, 0
    for a, b in t.block_structure:
        d = t.diag[a:b]
        p = t.products[a:b - 1]
        prev2, prev1, exp = 0.0, 1.0, 0
        for k in range(d.size):
            cur = math.fsum((d[k] * prev1, -(p[k - 1] * prev2) if k > 0 else 0.0))
            prev2, prev1 = prev1, cur
            m = max(abs(prev1), abs(prev2))
            if m > 2.0 ** 500 or (0 < m < 2.0 ** -500):
                shift = math.frexp(m)[1]
                prev1 = math.ldexp(prev1, -shift)
                prev2 = math.ldexp(prev2, -shift)
                exp += shift
        mant, e = math.frexp(prev1)
        det_mant *= mant
        det_exp += exp + e
        det_mant, e2 = math.frexp(det_mant)
        det_exp += e2
    return math.ldexp(det_mant, det_exp)


def check_interlacing(outer: SpectralData, inner: SpectralData, per_deletion: int = 2,
                      tol: float = 1e-9) -> bool:
    """Interlacing of a principal submatrix's eigenvalues with its parent's.

    With ``k`` rows deleted, iterating the single-deletion inequality
    ``lam[j] <= mu[j] <= lam[j + per_deletion]`` gives
    ``lam[j] <= mu[j] <= lam[j + per_deletion*k]`` (0-based, upper index
    clipped to the spectrum). ``per_deletion=1`` is the Cauchy form.
    """
    lam = np.asarray(outer.eigenvalues)
    mu = np.asarray(inner.eigenvalues)
    k = lam.size - mu.size
    if k < 0:
        raise GraphError("inner spectrum larger than outer spectrum")
    if mu.size == 0:
        return True
    scale = tol * max(1.0, float(np.max(np.abs(lam))))
    j = np.arange(mu.size)
    upper = lam[np.minimum(j + per_deletion * k, lam.size - 1)]
    return bool(np.all(mu >= lam[j] - scale) and np.all(mu <= upper + scale))
