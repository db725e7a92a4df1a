"""Product-form platoon transfer functions and the norms built on them.

The transfer from the input of vehicle ``c`` to the position of vehicle
``o`` factors into per-eigenvalue loops ``d*c_d + lam*n*c_n`` of the reduced
Laplacian and zero factors ``d*c_d + gamma*n*c_n`` of the Laplacian with the
path ``c..o`` deleted. Every object here is evaluated factor by factor, so
no high-degree polynomial is ever formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .graph import (
    GraphError,
    PlatoonGraph,
    build_laplacian,
    delete_path,
    path_weight,
    reduce_leader,
    spectral_bounds,
    spectrum,
)
from .model import (
    OpenLoop,
    Polynomial,
    StabilityCertificate,
    closed_loop_block,
    formation_stability,
    hurwitz,
)

GOLDEN = (math.sqrt(5) - 1) / 2


class UnstableFormationError(RuntimeError):
    def __init__(self, certificate: StabilityCertificate):
        lam = certificate.first_failure[0] if certificate.first_failure else None
        super().__init__(f"closed loop d*c_d + lam*n*c_n is not Hurwitz at lam={lam}")
        self.certificate = certificate


class MarginalStabilityError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# spectra with caching (graphs are immutable and hashable)


@lru_cache(maxsize=256)
def reduced_spectrum(g: PlatoonGraph) -> np.ndarray:
    return spectrum(reduce_leader(build_laplacian(g))).eigenvalues


@lru_cache(maxsize=4096)
def path_deleted_spectrum(g: PlatoonGraph, c: int, o: int) -> np.ndarray:
    """Spectrum of the leader-reduced Laplacian with the path ``c..o`` removed."""
    return spectrum(delete_path(reduce_leader(build_laplacian(g)), c, o)).eigenvalues


def _check_follower(g: PlatoonGraph, *idx: int):
    for i in idx:
        if not 2 <= i <= g.n:
            raise GraphError(f"vehicle {i} outside followers 2..{g.n}")


def _reduced_pair(m: OpenLoop) -> tuple[Polynomial, Polynomial]:
    # T is homogeneous of degree 0 in (n*c_n, d*c_d): a shared s**k cancels exactly
    return m.combined.reduced()


def _leading_pair(a: Polynomial, b: Polynomial) -> tuple[float, float]:
    top = max(a.degree, b.degree)
    return (a.leading if a.degree == top else 0.0), (b.leading if b.degree == top else 0.0)


def _factor_product(A, B, weight, num_gammas, den_lambdas, extra_a: int):
    """``weight * A**extra_a * prod(B + g*A) / prod(B + l*A)``, paired factor by factor."""
    out = np.full(np.shape(A), complex(weight))
    ng = len(num_gammas)
    for k in range(len(den_lambdas)):
        if k < ng:
            out = out * (B + num_gammas[k] * A) / (B + den_lambdas[k] * A)
        else:
            out = out * A / (B + den_lambdas[k] * A)
    leftover = extra_a - (len(den_lambdas) - ng)
    if leftover:
        out = out * A ** leftover
    return out


class _FactoredTransfer:
    """Shared evaluation machinery for product-form objects."""

    open_loop: OpenLoop
    weight: float

    def _lists(self) -> tuple[np.ndarray, np.ndarray, int]:
        raise NotImplementedError

    def eval(self, omega):
        w = np.asarray(omega, dtype=float)
        a, b = _reduced_pair(self.open_loop)
        s = 1j * w
        A, B = a(s), b(s)
        gam, lam, extra = self._lists()
        out = _factor_product(A, B, self.weight, gam, lam, extra)
        return complex(out) if out.ndim == 0 else out

    def __call__(self, omega):
        return self.eval(omega)

    def dc_gain(self) -> float:
        return float(np.real(self.eval(0.0)))

    def high_frequency_limit(self) -> complex:
        a, b = _reduced_pair(self.open_loop)
        A, B = _leading_pair(a, b)
        gam, lam, extra = self._lists()
        return complex(_factor_product(np.asarray(A, dtype=complex), np.asarray(B, dtype=complex),
                                       self.weight, gam, lam, extra))

    def _factor_polys(self) -> list[Polynomial]:
        gam, lam, _ = self._lists()
        a, b = _reduced_pair(self.open_loop)
        return [b + float(l) * a for l in np.unique(lam)]

    def is_stable(self) -> bool:
        return all(hurwitz(p) for p in self._factor_polys())

    def characteristic_frequencies(self) -> np.ndarray:
        gam, lam, _ = self._lists()
        a, b = _reduced_pair(self.open_loop)
        polys = [a] + [b + float(v) * a for v in np.unique(np.concatenate([gam, lam]))]
        mags = np.concatenate([np.abs(p.roots()) for p in polys])
        return mags[mags > 0]


@dataclass(frozen=True, eq=False)
class AssembledTransfer(_FactoredTransfer):
    """``T_co(s) = W * (n c_n)^(d+1) * prod(d c_d + gamma n c_n) / prod(d c_d + lam n c_n)``."""

    weight: float
    pole_lambdas: np.ndarray
    zero_gammas: np.ndarray
    extra_numerator_power: int
    open_loop: OpenLoop
    distance: int
    leader_included: bool
    control: int = 0
    output: int = 0

    def _lists(self):
        return self.zero_gammas, self.pole_lambdas, self.extra_numerator_power


def assemble_transfer(g: PlatoonGraph, m: OpenLoop, c: int, o: int,
                      include_leader: bool = False, check_stability: bool = True,
                      stability_grid: int = 64) -> AssembledTransfer:
    """Product-form transfer from the input of vehicle ``c`` to the position of ``o``.

    With the leader excluded, ``c`` and ``o`` are followers and the leader's
    position is held at zero. With ``include_leader`` the leader is driven by
    its own input ``r_1``; only ``c = 1`` changes (one extra factor ``M``), since
    the leader's own loop and its zero cancel for ``c >= 2``.
    """
    if include_leader and c == 1:
        if not 1 <= o <= g.n:
            raise GraphError(f"vehicle {o} outside 1..{g.n}")
    elif include_leader and o == 1:
        raise GraphError("the leader ignores its followers: T_{c,1} = 0 for c >= 2")
    else:
        _check_follower(g, c, o)
    lams = reduced_spectrum(g)
    if check_stability:
        cert = formation_stability(m, lams, stability_grid)
        if not cert.all_stable:
            raise UnstableFormationError(cert)
    if include_leader and c == 1:
        d = o - 1
        gam = path_deleted_spectrum(g, 2, o) if o >= 2 else reduced_spectrum(g)
        if o == 1:
            # T_11 = M: keep the reduced loops paired with themselves
            return AssembledTransfer(1.0, np.concatenate([[0.0], lams]), gam, 1, m, 0, True, c, o)
        return AssembledTransfer(1.0, np.concatenate([[0.0], lams]), gam, d + 1, m, d, True, c, o)
    d = abs(c - o)
    gam = path_deleted_spectrum(g, c, o)
    return AssembledTransfer(path_weight(g, c, o), lams, gam, d + 1, m, d, include_leader, c, o)


# --------------------------------------------------------------------------
# steady-state gains


def dc_gain_spectral(g: PlatoonGraph, c: int, o: int) -> float:
    """``W_co * prod(gamma) / prod(lambda)`` over the leader-excluded spectra."""
    _check_follower(g, c, o)
    return path_weight(g, c, o) * float(np.prod(path_deleted_spectrum(g, c, o))) / float(np.prod(reduced_spectrum(g)))


def dc_gain_closed(g: PlatoonGraph, c: int, o: int) -> float:
    """Closed-form steady-state gain, a function of the asymmetry alone."""
    _check_follower(g, c, o)
    k = c if c <= o else o
    total, prod = 1.0, 1.0
    for i in range(1, k - 1):
        prod *= g.eps(k - i)
        total += prod
    return path_weight(g, c, o) * total


def dc_gain_distance(g: PlatoonGraph, c: int, o: int) -> float:
    """Steady-state gain from ``r_c`` to the spacing ``x_{o-1} - x_o``.

    The leader is fixed, so ``T_{c,1}(0) = 0``.
    """
    _check_follower(g, c, o)
    ahead = dc_gain_closed(g, c, o - 1) if o >= 3 else 0.0
    return ahead - dc_gain_closed(g, c, o)


def dc_gain_distance_closed(g: PlatoonGraph, c: int, o: int) -> float:
    _check_follower(g, c, o)
    if o > c:
        return 0.0
    return -math.prod(g.eps(i) for i in range(o, c))


# --------------------------------------------------------------------------
# H-infinity norm


@dataclass(frozen=True)
class HinfResult:
    norm: float
    peak_frequency: float
    samples: np.ndarray = field(repr=False)
    refined: bool = True

    def to_dict(self) -> dict:
        return {
            "norm": self.norm,
            "peak_frequency": None if math.isinf(self.peak_frequency) else self.peak_frequency,
            "peak_at_infinity": math.isinf(self.peak_frequency),
            "refined": self.refined,
            "n_samples": int(self.samples.shape[0]),
        }


def _golden_max(f, lo: float, hi: float, rtol: float) -> tuple[float, float]:
    """Maximize ``f`` over ``[lo, hi]`` (log-frequency coordinates)."""
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > rtol:
        if f1 >= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = f(x2)
    return (x1, f1) if f1 >= f2 else (x2, f2)


def reference_frequency(t) -> float:
    mags = t.characteristic_frequencies()
    if mags.size == 0:
        return 1.0
    return float(np.exp(np.mean(np.log(mags))))


def hinf(t, n_grid: int = 2000, decades: float = 3.0, rtol: float = 1e-9,
         check_stability: bool = True) -> HinfResult:
    """``sup_w |T(jw)|`` by a log grid around the model's own frequencies plus golden-section refinement.

    ``t`` needs ``eval``, ``characteristic_frequencies``,
    ``high_frequency_limit`` and ``is_stable``.
    """
    if check_stability and not t.is_stable():
        raise MarginalStabilityError("H-infinity norm needs an asymptotically stable transfer function")
    w_ref = reference_frequency(t)
    w = np.logspace(np.log10(w_ref) - decades, np.log10(w_ref) + decades, n_grid)
    mag = np.abs(t.eval(w))
    dc = abs(t.eval(0.0))
    hf = abs(t.high_frequency_limit())
    if not np.all(np.isfinite(mag)) or not math.isfinite(dc):
        raise MarginalStabilityError("non-finite frequency response")

    best_norm, best_w = dc, 0.0
    i = int(np.argmax(mag))
    if mag[i] > best_norm:
        best_norm, best_w = float(mag[i]), float(w[i])

    logw = np.log(w)

    def f(x):
        return abs(t.eval(math.exp(x)))

    # strict rise on the left: a plateau (e.g. an identically zero ratio) yields one candidate at most
    interior = np.nonzero((mag[1:-1] > mag[:-2]) & (mag[1:-1] >= mag[2:]))[0] + 1
    candidates = list(interior)
    if mag[0] > mag[1]:
        candidates.append(0)
    if mag[-1] > mag[-2]:
        candidates.append(n_grid - 1)
    for k in sorted(candidates):
        lo = logw[max(k - 1, 0)]
        hi = logw[min(k + 1, n_grid - 1)]
        x, v = _golden_max(f, lo, hi, rtol)
        if v > best_norm:
            best_norm, best_w = v, math.exp(x)
    if hf > best_norm:
        best_norm, best_w = hf, math.inf
    samples = np.column_stack([w, mag])
    return HinfResult(float(best_norm), float(best_w), samples, True)


# --------------------------------------------------------------------------
# pointwise classification of a single loop


@dataclass(frozen=True)
class PointClassification:
    alpha: float
    beta: float
    t_modulus: float
    flags: dict
    z_modulus: Optional[float] = None
    z_dc: Optional[float] = None


def z_modulus_squared(alpha: float, beta: float, kappa: float) -> float:
    """``|Z(jw)|^2`` from ``lam*M(jw) = alpha + j*beta`` and ``kappa = gamma/lam``.

    Expanded so that ``kappa = 0`` is allowed.
    """
    return kappa ** 2 + (1 - kappa) * (kappa * (2 * alpha + 1) + 1) / ((alpha + 1) ** 2 + beta ** 2)


def classify_point(m: OpenLoop, lam: float, gamma: Optional[float], omega0: float,
                   atol: float = 1e-12) -> PointClassification:
    """Sign tests on ``alpha = Re(lam*M(j w0))`` deciding the loop and zero-block gains."""
    if not omega0 > 0:
        raise ValueError("classification needs omega0 > 0")
    a, b = _reduced_pair(m)
    s = 1j * omega0
    z = lam * a(s) / b(s)
    alpha, beta = float(z.real), float(z.imag)
    t_mod = abs(z / (1 + z))
    flags = {
        "boundary": abs(alpha + 0.5) <= atol,
        "a": alpha < -0.5,  # |T| > 1
        "b": alpha >= -0.5,  # |T| <= 1
    }
    z_mod = z_dc = None
    if gamma is not None:
        kappa = gamma / lam
        z_mod = math.sqrt(max(z_modulus_squared(alpha, beta, kappa), 0.0))
        z_dc = kappa
        flags["c"] = alpha <= -1 and gamma >= lam
        flags["d"] = -1 < alpha <= -0.5 and gamma <= lam
        flags["e"] = alpha > -0.5 and gamma >= lam
        flags["z_at_least_dc"] = flags["c"] or flags["d"]
        flags["z_at_most_dc"] = flags["e"]
    return PointClassification(alpha, beta, t_mod, flags, z_mod, z_dc)


classify_lemma2 = classify_point  # name used by the public interface contract


# --------------------------------------------------------------------------
# exponential scaling certificate


@dataclass(frozen=True)
class ScalingCertificate:
    valid: bool
    omega0: float
    t_min_norm: float
    zeta: Optional[float]
    xi: Optional[float]
    lambda_min: float
    lambda_max: float

    def lower_bound(self, distance: int, dc_gain: float) -> float:
        """``xi**2 * T_co(0) * zeta**distance``."""
        if not self.valid:
            raise ValueError("certificate is not valid")
        return self.xi ** 2 * dc_gain * self.zeta ** distance

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "omega0": self.omega0,
            "t_min_norm": self.t_min_norm,
            "zeta": self.zeta,
            "xi": self.xi,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "bound": "xi**2 * dc_gain * zeta**distance",
        }


def _golden_min_linear(f, lo: float, hi: float, tol: float = 1e-12) -> tuple[float, float]:
    x, v = _golden_max(lambda x: -f(x), lo, hi, tol * max(1.0, abs(hi)))
    return x, -v


def scaling_certificate(m: OpenLoop, lambda_min: float, lambda_max: float, grid: int = 64) -> ScalingCertificate:
    """Constants of the exponential lower bound, anchored at the peak of the weakest loop."""
    if not 0 < lambda_min <= lambda_max:
        raise ValueError("need 0 < lambda_min <= lambda_max")
    h = hinf(closed_loop_block(m, lambda_min))
    w0 = h.peak_frequency
    if not (h.norm > 1 + 1e-12 and 0 < w0 < math.inf):
        return ScalingCertificate(False, w0, h.norm, None, None, lambda_min, lambda_max)
    a, b = _reduced_pair(m)
    A, B = complex(a(1j * w0)), complex(b(1j * w0))

    def t_mod(lam):
        return abs(lam * A / (B + lam * A))

    lams = np.linspace(lambda_min, lambda_max, grid)
    vals = np.abs(lams * A / (B + lams * A))
    k = int(np.argmin(vals))
    zeta = float(vals[k])
    if grid > 1 and lambda_max > lambda_min:
        lo, hi = lams[max(k - 1, 0)], lams[min(k + 1, grid - 1)]
        zeta = min(zeta, _golden_min_linear(t_mod, lo, hi)[1])

    gg, ll = np.meshgrid(lams, lams, indexing="ij")
    ratio = np.abs((B + gg * A) / (B + ll * A)) / (gg / ll)
    xi = float(min(max(np.min(ratio), np.finfo(float).tiny), 1.0))
    return ScalingCertificate(zeta > 1, w0, h.norm, zeta, xi, lambda_min, lambda_max)


def explain_pairing(m: OpenLoop, lambdas, gammas, omega0: float, distance: int) -> dict:
    """Pair zero factors with loop factors so that most zero blocks amplify at ``omega0``.

    Interlacing gives ``lam[i] <= gamma[i] <= lam[i + distance + 1]``. A loop
    with ``alpha <= -1`` is paired with a zero above it, a loop with
    ``-1 < alpha <= -1/2`` with a zero below it; zeros left over are paired
    with the remaining loops without a guarantee.
    """
    lam = np.sort(np.asarray(lambdas, dtype=float))
    gam = np.sort(np.asarray(gammas, dtype=float))
    a, b = _reduced_pair(m)
    Mw = complex(a(1j * omega0) / b(1j * omega0))
    alpha = lam * Mw.real
    shift = distance + 1
    used = set()
    pairs = []
    leftover = []
    for i, g in enumerate(gam):
        hi_j = i + shift
        if hi_j < lam.size and -1 < alpha[hi_j] <= -0.5 and hi_j not in used:
            used.add(hi_j)
            pairs.append((float(g), float(lam[hi_j]), "d"))
        elif alpha[i] <= -1 and i not in used:
            used.add(i)
            pairs.append((float(g), float(lam[i]), "c"))
        else:
            leftover.append(i)
    free = [j for j in range(lam.size) if j not in used]
    for i in leftover:
        j = free.pop(0)
        pairs.append((float(gam[i]), float(lam[j]), "unguaranteed"))
    s = 1j * omega0
    A, B = complex(a(s)), complex(b(s))
    out = []
    for g, l, case in pairs:
        ratio = abs((B + g * A) / (B + l * A)) / (g / l)
        out.append({"gamma": g, "lambda": l, "case": case, "ratio_to_dc": ratio})
    return {
        "pairs": out,
        "unpaired_lambdas": [float(lam[j]) for j in free],
        "n_unguaranteed": sum(1 for p in out if p["case"] == "unguaranteed"),
    }


# --------------------------------------------------------------------------
# string stability


@dataclass(frozen=True, eq=False)
class NeighborRatio(_FactoredTransfer):
    """Ratio of neighbouring positions with the common loop factors cancelled by index."""

    weight: float
    num_gammas: np.ndarray
    den_gammas: np.ndarray
    open_loop: OpenLoop
    control: int
    output: int
    direction: str

    def _lists(self):
        return self.num_gammas, self.den_gammas, 1

    def _factor_polys(self):
        a, b = _reduced_pair(self.open_loop)
        return [b + float(v) * a for v in np.unique(self.den_gammas)]


def neighbor_ratio(g: PlatoonGraph, m: OpenLoop, c: int, o: int) -> NeighborRatio:
    """``x_o/x_{o-1}`` for ``o > c`` (rearward), ``x_{o-1}/x_o`` for ``o <= c`` (forward).

    Both positions respond to the input at ``c``; the leader is held fixed,
    so ``o >= 3``.
    """
    _check_follower(g, c)
    if not 3 <= o <= g.n:
        raise GraphError(f"neighbour ratio needs 3 <= o <= {g.n}")
    if o > c:
        return NeighborRatio(1.0, path_deleted_spectrum(g, c, o), path_deleted_spectrum(g, c, o - 1),
                             m, c, o, "rearward")
    return NeighborRatio(g.eps(o - 1), path_deleted_spectrum(g, c, o - 1), path_deleted_spectrum(g, c, o),
                         m, c, o, "forward")


@dataclass(frozen=True)
class StringStabilityReport:
    condition_holds: bool
    loop_norm_at_upper_bound: float
    lambda_upper: float
    checked_ratios: tuple[tuple[int, str, float], ...]
    verdict: bool
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "condition_holds": self.condition_holds,
            "loop_norm_at_upper_bound": self.loop_norm_at_upper_bound,
            "lambda_upper": self.lambda_upper,
            "checked_ratios": [{"o": o, "direction": d, "norm": n} for o, d, n in self.checked_ratios],
            "verdict": self.verdict,
            "tolerance": self.tolerance,
        }


def string_stability_check(g: PlatoonGraph, m: OpenLoop, c: int, tol: float = 1e-3,
                           stability_grid: int = 64) -> StringStabilityReport:
    """Single-loop sufficient condition plus direct neighbour-ratio norms for input at ``c``."""
    _check_follower(g, c)
    cert = formation_stability(m, reduced_spectrum(g), stability_grid)
    if not cert.all_stable:
        raise UnstableFormationError(cert)
    _, upper = spectral_bounds(g)
    h = hinf(closed_loop_block(m, upper))
    condition = abs(h.norm - 1.0) <= tol
    ratios = []
    for o in range(3, g.n + 1):
        r = neighbor_ratio(g, m, c, o)
        ratios.append((o, r.direction, hinf(r).norm))
    verdict = all(n <= 1 + tol for _, _, n in ratios)
    return StringStabilityReport(condition, h.norm, upper, tuple(ratios), verdict, tol)


# --------------------------------------------------------------------------
# predecessor following


@dataclass(frozen=True)
class PFReport:
    unit_norm: bool
    positivity_necessary: bool
    norm: float
    peak_frequency: float
    dominant_pole: complex
    real_zeros: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "unit_norm": self.unit_norm,
            "positivity_necessary": self.positivity_necessary,
            "norm": self.norm,
            "peak_frequency": None if math.isinf(self.peak_frequency) else self.peak_frequency,
            "dominant_pole": {"re": self.dominant_pole.real, "im": self.dominant_pole.imag},
            "real_zeros": list(self.real_zeros),
        }


def pf_check(m: OpenLoop, tol: float = 1e-3) -> PFReport:
    """Checks for the loop ``M/(1+M)`` used by predecessor following."""
    t = closed_loop_block(m, 1.0)
    if not t.is_stable():
        raise UnstableFormationError(formation_stability(m, [1.0], extra_grid=0))
    h = hinf(t)
    poles = t.poles()
    order = np.argsort(-poles.real)
    dom = complex(poles[order[0]])
    scale = max(1.0, abs(dom))
    unique = poles.size == 1 or poles[order[1]].real < dom.real - 1e-9 * scale
    real_dom = abs(dom.imag) <= 1e-9 * scale
    zeros = t.zeros()
    real_zeros = tuple(sorted(float(z.real) for z in zeros if abs(z.imag) <= 1e-9 * max(1.0, abs(z))))
    no_zero_right = all(z <= dom.real for z in real_zeros)
    return PFReport(abs(h.norm - 1) <= tol, bool(real_dom and unique and no_zero_right),
                    h.norm, h.peak_frequency, dom, real_zeros)
