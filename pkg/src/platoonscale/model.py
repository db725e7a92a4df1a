"""Polynomials, rational functions and the per-agent open-loop model.

Coefficients are stored in ascending powers of ``s`` everywhere, so the
constant term (the steady-state value) is always index 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# relative threshold under which a coefficient counts as an exact zero
ZERO_RTOL = 1e-12
# Routh pivots this close to zero (relative to the row scale) are undecidable
ROUTH_EPS = 1e-9


class ModelError(ValueError):
    """Raised for degenerate models (zero denominators, undefined type number)."""


class MarginalEvaluationError(ValueError):
    """Raised when a transfer function is evaluated on one of its poles."""


def _horner(coef: np.ndarray, s):
    """Evaluate an ascending-order coefficient array at ``s`` (scalar or array)."""
    s = np.asarray(s)
    out = np.zeros(s.shape, dtype=np.result_type(coef.dtype, s.dtype))
    for c in coef[::-1]:
        out = out * s + c
    return out


class Polynomial:
    """Real polynomial with ascending coefficients.

    High-order coefficients that are zero relative to the largest one are
    trimmed, so ``degree`` is the index of the last nonzero coefficient.
    """

    __slots__ = ("coef",)

    def __init__(self, coefficients: Sequence[float]):
        c = np.atleast_1d(np.asarray(coefficients, dtype=float)).copy()
        if c.ndim != 1:
            raise ModelError("polynomial coefficients must be one-dimensional")
        if not np.all(np.isfinite(c)):
            raise ModelError("polynomial coefficients must be finite")
        scale = np.max(np.abs(c)) if c.size else 0.0
        if scale == 0.0:
            c = np.zeros(1)
        else:
            nz = np.nonzero(np.abs(c) > ZERO_RTOL * scale)[0]
            c = c[: nz[-1] + 1]
        c.setflags(write=False)
        self.coef = c

    @classmethod
    def monomial(cls, k: int) -> "Polynomial":
        c = np.zeros(k + 1)
        c[k] = 1.0
        return cls(c)

    @property
    def degree(self) -> int:
        return self.coef.size - 1

    def is_zero(self) -> bool:
        return self.coef.size == 1 and self.coef[0] == 0.0

    @property
    def leading(self) -> float:
        return float(self.coef[-1])

    def zero_multiplicity(self) -> int:
        """Multiplicity of the root at ``s = 0`` (exact-zero test on low coefficients)."""
        if self.is_zero():
            raise ModelError("zero polynomial has no root multiplicity")
        scale = np.max(np.abs(self.coef))
        k = 0
        while abs(self.coef[k]) <= ZERO_RTOL * scale:
            k += 1
        return k

    def shift_down(self, k: int) -> "Polynomial":
        """Divide by ``s**k``; the low ``k`` coefficients must be (exact) zeros."""
        if k == 0:
            return self
        return Polynomial(self.coef[k:])

    def __call__(self, s):
        return _horner(self.coef, s)

    def roots(self) -> np.ndarray:
        if self.degree < 1:
            return np.zeros(0, dtype=complex)
        return np.polynomial.polynomial.polyroots(self.coef).astype(complex)

    def __mul__(self, other):
        if isinstance(other, Polynomial):
            return Polynomial(np.polynomial.polynomial.polymul(self.coef, other.coef))
        return Polynomial(self.coef * float(other))

    __rmul__ = __mul__

    def __add__(self, other: "Polynomial") -> "Polynomial":
        return Polynomial(np.polynomial.polynomial.polyadd(self.coef, other.coef))

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        return Polynomial(np.polynomial.polynomial.polysub(self.coef, other.coef))

    def __neg__(self) -> "Polynomial":
        return Polynomial(-self.coef)

    def __eq__(self, other) -> bool:
        return isinstance(other, Polynomial) and np.array_equal(self.coef, other.coef)

    def __hash__(self):
        return hash(self.coef.tobytes())

    def allclose(self, other: "Polynomial", rtol: float = 1e-12) -> bool:
        n = max(self.coef.size, other.coef.size)
        a = np.pad(self.coef, (0, n - self.coef.size))
        b = np.pad(other.coef, (0, n - other.coef.size))
        return bool(np.allclose(a, b, rtol=rtol, atol=rtol * max(np.max(np.abs(a)), 1.0)))

    def __repr__(self):
        return f"Polynomial({self.coef.tolist()})"


def _shared_origin_power(num: Polynomial, den: Polynomial) -> int:
    if num.is_zero():
        return 0
    return min(num.zero_multiplicity(), den.zero_multiplicity())


class RationalFunction:
    """Ratio of two polynomials, stored as given (no cancellation).

    Shared ``s**k`` factors are only removed on the fly for evaluation, so a
    raw product such as ``s/(s*(s+1))`` keeps its stored multiplicities.
    """

    __slots__ = ("num", "den")

    def __init__(self, num, den):
        num = num if isinstance(num, Polynomial) else Polynomial(num)
        den = den if isinstance(den, Polynomial) else Polynomial(den)
        if den.is_zero():
            raise ModelError("denominator is identically zero")
        self.num = num
        self.den = den

    @classmethod
    def from_dict(cls, d: dict) -> "RationalFunction":
        return cls(d["num"], d["den"])

    def to_dict(self) -> dict:
        return {"num": self.num.coef.tolist(), "den": self.den.coef.tolist()}

    def reduced(self) -> tuple[Polynomial, Polynomial]:
        """Numerator and denominator with their shared power of ``s`` removed."""
        k = _shared_origin_power(self.num, self.den)
        return self.num.shift_down(k), self.den.shift_down(k)

    def __call__(self, s):
        num, den = self.reduced()
        d = den(s)
        n = num(s)
        return n / d

    def eval(self, omega):
        return eval_freq(self, omega)

    def is_proper(self) -> bool:
        return self.num.degree <= self.den.degree

    def poles(self) -> np.ndarray:
        return self.reduced()[1].roots()

    def zeros(self) -> np.ndarray:
        return self.reduced()[0].roots()

    def dc_value(self) -> complex:
        return complex(eval_freq(self, 0.0))

    def high_frequency_limit(self) -> float:
        if self.num.degree > self.den.degree:
            return np.inf
        if self.num.degree < self.den.degree or self.num.is_zero():
            return 0.0
        return self.num.leading / self.den.leading

    def characteristic_frequencies(self) -> np.ndarray:
        r = np.concatenate([self.poles(), self.zeros()])
        mags = np.abs(r)
        return mags[mags > 0]

    def is_stable(self) -> bool:
        return hurwitz(self.reduced()[1])

    def __mul__(self, other: "RationalFunction") -> "RationalFunction":
        return RationalFunction(self.num * other.num, self.den * other.den)

    def __repr__(self):
        return f"RationalFunction(num={self.num.coef.tolist()}, den={self.den.coef.tolist()})"


def eval_freq(r: RationalFunction, omega) -> complex | np.ndarray:
    """Value of ``r(j*omega)``; raises on poles of the imaginary axis."""
    w = np.asarray(omega, dtype=float)
    s = 1j * w
    num, den = r.reduced()
    d = den(s)
    # magnitude of the sum of term moduli, so the test is scale-free
    size = _horner(np.abs(den.coef), np.abs(w))
    if np.any(np.abs(d) <= 1e-14 * size):
        raise MarginalEvaluationError(f"pole on the imaginary axis at omega={omega}")
    out = num(s) / d
    return complex(out) if out.ndim == 0 else out


def type_number(m: RationalFunction) -> int:
    """Number of integrators: the order of the pole of ``m`` at the origin."""
    if m.num.is_zero():
        raise ModelError("type number undefined for an identically zero model")
    return max(m.den.zero_multiplicity() - m.num.zero_multiplicity(), 0)


@dataclass(frozen=True)
class OpenLoop:
    """Series connection ``M = C * P`` of controller and vehicle."""

    plant: RationalFunction
    controller: RationalFunction
    combined: RationalFunction
    type_number: int
    residual: RationalFunction

    @property
    def num(self) -> Polynomial:
        """Raw numerator product ``n * c_n``."""
        return self.combined.num

    @property
    def den(self) -> Polynomial:
        """Raw denominator product ``d * c_d``."""
        return self.combined.den

    def characteristic(self, lam: float) -> Polynomial:
        """Closed-loop polynomial ``d*c_d + lam*n*c_n``."""
        return self.den + lam * self.num


def compose_open_loop(plant: RationalFunction, controller: RationalFunction) -> OpenLoop:
    combined = RationalFunction(plant.num * controller.num, plant.den * controller.den)
    theta = type_number(combined)
    kn = combined.num.zero_multiplicity()
    kd = combined.den.zero_multiplicity()
    residual = RationalFunction(combined.num.shift_down(min(kn, kd)), combined.den.shift_down(min(kn, kd)))
    if theta > 0:
        residual = RationalFunction(residual.num, residual.den.shift_down(theta))
    return OpenLoop(plant, controller, combined, theta, residual)


def closed_loop_block(m: OpenLoop, lam: float) -> RationalFunction:
    """``lam*n*c_n / (d*c_d + lam*n*c_n)`` from the raw products."""
    if not lam > 0:
        raise ModelError("closed-loop block needs lambda > 0")
    a = lam * m.num
    return RationalFunction(a, m.den + a)


def zero_block(m: OpenLoop, gamma: float, lam: float) -> RationalFunction:
    """``(d*c_d + gamma*n*c_n) / (d*c_d + lam*n*c_n)``."""
    if not lam > 0:
        raise ModelError("zero block needs lambda > 0")
    if gamma < 0:
        raise ModelError("zero block needs gamma >= 0")
    return RationalFunction(m.characteristic(gamma), m.characteristic(lam))


def hurwitz(p: Polynomial) -> bool:
    """Strict Hurwitz test by the Routh array.

    A first-column entry within ``ROUTH_EPS`` of zero (relative to its row)
    would need the epsilon substitution; the sign of such an entry is
    undecidable, and every such case has a root on or right of the axis
    or numerically on it, so the polynomial is reported not strictly Hurwitz.
    """
    if not isinstance(p, Polynomial):
        p = Polynomial(p)
    if p.is_zero():
        raise ModelError("zero polynomial has no stability verdict")
    desc = p.coef[::-1].astype(float)
    if desc.size == 1:
        return True
    if desc[0] < 0:
        desc = -desc
    scale = np.max(np.abs(desc))
    if np.any(desc <= ZERO_RTOL * scale):
        return False
    upper = desc[0::2].copy()
    lower = desc[1::2].copy()
    lower = np.pad(lower, (0, upper.size - lower.size))
    for _ in range(desc.size - 2):
        row_scale = max(np.max(np.abs(lower)), np.max(np.abs(upper)))
        pivot = lower[0]
        if abs(pivot) <= ROUTH_EPS * row_scale:
            return False
        if pivot < 0:
            return False
        nxt = np.zeros_like(upper)
        nxt[:-1] = upper[1:] - upper[0] * lower[1:] / pivot
        m = np.max(np.abs(nxt))
        upper, lower = lower, (nxt / m if m > 0 else nxt)
    last_scale = max(np.max(np.abs(lower)), np.max(np.abs(upper)))
    return bool(lower[0] > ROUTH_EPS * last_scale)


@dataclass(frozen=True)
class StabilityCertificate:
    open_loop: OpenLoop
    lambda_values_checked: tuple[float, ...]
    all_stable: bool
    first_failure: Optional[tuple[float, Polynomial]] = None
    notes: tuple[str, ...] = field(default=())


def formation_stability(m: OpenLoop, spectrum: Sequence[float], extra_grid: int = 64) -> StabilityCertificate:
    """Check ``d*c_d + lam*n*c_n`` at every eigenvalue and on a grid spanning them."""
    spec = np.asarray(spectrum, dtype=float)
    if spec.size == 0:
        raise ModelError("empty spectrum")
    if np.any(spec < 0):
        raise ModelError("spectrum entries must be nonnegative")
    notes = []
    nz = spec[spec > 0]
    if nz.size < spec.size:
        notes.append(f"skipped {spec.size - nz.size} zero eigenvalue(s): leader mode, no feedback loop")
    lams = list(nz)
    if nz.size and extra_grid > 0:
        lams.extend(np.linspace(nz.min(), nz.max(), extra_grid))
    checked = []
    for lam in lams:
        checked.append(float(lam))
        poly = m.characteristic(float(lam))
        if not hurwitz(poly):
            return StabilityCertificate(m, tuple(checked), False, (float(lam), poly), tuple(notes))
    return StabilityCertificate(m, tuple(checked), True, None, tuple(notes))
