"""State-space assembly and fixed-step simulation of the whole platoon.

The assembled system is independent of the product-form algebra in
``analysis`` and serves as its oracle: resolvent frequency responses,
closed-loop eigenvalues and simulated final values.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import PlatoonGraph, build_laplacian
from .model import ModelError, OpenLoop, Polynomial

DRIVEN = "driven"
EXOGENOUS = "exogenous"


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentRealization:
    """Controllable canonical form of ``M = n c_n / (d c_d)``.

    The same state also gives the control effort ``u = C(s) e`` through
    ``d * c_n`` (undefined when ``C`` is improper, then ``effort_map`` is None).
    """

    state_matrix: np.ndarray
    input_map: np.ndarray
    output_map: np.ndarray
    feedthrough: float
    effort_map: Optional[np.ndarray] = None
    effort_feedthrough: float = 0.0

    @property
    def order(self) -> int:
        return self.state_matrix.shape[0]

    def transfer(self, s):
        """``C (sI - A)^-1 B + D`` at a scalar complex ``s``."""
        n = self.order
        x = np.linalg.solve(s * np.eye(n) - self.state_matrix, self.input_map)
        return complex(self.output_map @ x) + self.feedthrough


def _output_row(q: Polynomial, den_monic: np.ndarray) -> tuple[np.ndarray, float]:
    """Row and feedthrough reading ``q(s) * xi`` from the canonical state ``xi, xi', ...``."""
    n = den_monic.size - 1
    if q.degree > n:
        raise ModelError("output polynomial of higher degree than the state")
    qc = np.pad(q.coef, (0, n + 1 - q.coef.size))
    direct = qc[n]
    return qc[:n] - direct * den_monic[:n], float(direct)


def realize(m: OpenLoop) -> AgentRealization:
    num, den = m.combined.reduced()
    if num.degree > den.degree:
        raise ModelError("controller makes open loop improper; not simulatable as state space")
    lead = den.leading
    dm = den.coef / lead
    n = den.degree
    if n == 0:
        raise ModelError("static open loop has no state")
    A = np.zeros((n, n))
    A[:-1, 1:] = np.eye(n - 1)
    A[-1, :] = -dm[:n]
    B = np.zeros(n)
    B[-1] = 1.0
    C, D = _output_row(Polynomial(num.coef / lead), dm)
    eff, effd = None, 0.0
    # u = C(s) e = (d c_n)(s) xi; the power of s cancelled from M must divide d*c_n too
    kshift = m.combined.den.degree - den.degree
    effort_poly = m.plant.den * m.controller.num
    if effort_poly.zero_multiplicity() >= kshift:
        effort_poly = effort_poly.shift_down(kshift)
        if effort_poly.degree <= n:
            eff, effd = _output_row(Polynomial(effort_poly.coef / lead), dm)
    return AgentRealization(A, B, C, D, eff, effd)


@dataclass(frozen=True)
class PlatoonSystem:
    """``z' = A z + B v``; positions ``C_pos z + D_pos v``; efforts ``C_u z + D_u v``.

    Driven mode: ``v = r`` (all ``n`` inputs, leader obeys ``e_1 = r_1``).
    Exogenous mode: the leader's states are removed and ``v = [x_1, r_2..r_n]``.
    """

    A: np.ndarray
    B: np.ndarray
    C_pos: np.ndarray
    D_pos: np.ndarray
    C_u: Optional[np.ndarray]
    D_u: Optional[np.ndarray]
    mode: str
    graph: PlatoonGraph
    agent: AgentRealization = field(repr=False)

    @property
    def n(self) -> int:
        return self.graph.n

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.A)

    def spacing_map(self) -> np.ndarray:
        """Matrix taking positions to ``delta_i = x_{i-1} - x_i``, ``i = 2..n``."""
        n = self.n
        S = np.zeros((n - 1, n))
        S[np.arange(n - 1), np.arange(n - 1)] = 1.0
        S[np.arange(n - 1), np.arange(1, n)] = -1.0
        return S


def assemble_platoon(g: PlatoonGraph, a: AgentRealization, leader_mode: str = EXOGENOUS) -> PlatoonSystem:
    """Couple ``n`` copies of the agent through ``e = -L x + r``.

    With a direct term the loop ``e = (I + D L)^-1 (-L C z + r)`` is resolved
    algebraically.
    """
    if leader_mode not in (DRIVEN, EXOGENOUS):
        raise ValueError(f"unknown leader mode {leader_mode!r}")
    L = build_laplacian(g).to_dense()
    n = g.n
    if leader_mode == EXOGENOUS:
        Lf = L[1:, 1:]
        lcol = L[1:, 0]
        agents = n - 1
    else:
        Lf = L
        lcol = None
        agents = n
    I = np.eye(agents)
    loop = I + a.feedthrough * Lf
    if abs(np.linalg.det(loop)) < 1e-12:
        raise SimulationError("algebraic loop I + L*D is singular")
    E = np.linalg.inv(loop)
    Cb = np.kron(I, a.output_map[None, :])
    Bb = np.kron(I, a.input_map[:, None])
    Ab = np.kron(I, a.state_matrix)
    # controller inputs e = K z + G v
    K = -E @ Lf @ Cb
    if leader_mode == EXOGENOUS:
        G = np.hstack([-(E @ lcol)[:, None], E])
    else:
        G = E
    A = Ab + Bb @ K
    B = Bb @ G
    Cf = Cb + a.feedthrough * K
    Df = a.feedthrough * G
    if leader_mode == EXOGENOUS:
        C_pos = np.vstack([np.zeros((1, A.shape[0])), Cf])
        lead_row = np.zeros((1, n))
        lead_row[0, 0] = 1.0
        D_pos = np.vstack([lead_row, Df])
    else:
        C_pos, D_pos = Cf, Df
    C_u = D_u = None
    if a.effort_map is not None:
        Ce = np.kron(I, a.effort_map[None, :])
        C_u = Ce + a.effort_feedthrough * K
        D_u = a.effort_feedthrough * G
        if leader_mode == EXOGENOUS:
            C_u = np.vstack([np.full((1, A.shape[0]), np.nan), C_u])
            D_u = np.vstack([np.full((1, n), np.nan), D_u])
    return PlatoonSystem(A, B, C_pos, D_pos, C_u, D_u, leader_mode, g, a)


def _resolvent(p: PlatoonSystem, omega: float, rhs: np.ndarray) -> np.ndarray:
    n = p.A.shape[0]
    M = 1j * omega * np.eye(n) - p.A
    if np.linalg.cond(M) > 1 / np.finfo(float).eps:
        raise SimulationError(f"resolvent singular at omega={omega}")
    return np.linalg.solve(M, rhs)


def freq_response_direct(p: PlatoonSystem, c: int, o: int, omega: float) -> complex:
    """Resolvent evaluation of the transfer from input ``c`` to position ``o``."""
    if not (1 <= c <= p.n and 1 <= o <= p.n):
        raise ValueError("vehicle index out of range")
    x = _resolvent(p, omega, p.B[:, c - 1])
    return complex(p.C_pos[o - 1] @ x + p.D_pos[o - 1, c - 1])


def freq_response_matrix(p: PlatoonSystem, omega: float) -> np.ndarray:
    """All input-to-position responses at once; entry ``[o-1, c-1]``."""
    return p.C_pos @ _resolvent(p, omega, p.B) + p.D_pos


# --------------------------------------------------------------------------
# time stepping


@dataclass(frozen=True)
class InputSpec:
    """Input ``v(t) = offset + slope * t`` for ``t >= 0``.

    kinds: ``input-step`` (unit step at ``r_vehicle``), ``leader-step``
    (exogenous leader position step), ``leader-ramp`` (constant-velocity
    leader), ``reference-distance`` (``r_i = -d_ref + eps_i d_ref``).
    """

    kind: str
    amplitude: float = 1.0
    vehicle: int = 2

    def vectors(self, p: PlatoonSystem) -> tuple[np.ndarray, np.ndarray]:
        n = p.n
        offset = np.zeros(n)
        slope = np.zeros(n)
        if self.kind == "input-step":
            if not 1 <= self.vehicle <= n or (p.mode == EXOGENOUS and self.vehicle == 1):
                raise ValueError(f"input-step vehicle {self.vehicle} not an input of this system")
            offset[self.vehicle - 1] = self.amplitude
        elif self.kind in ("leader-step", "leader-ramp"):
            if p.mode != EXOGENOUS:
                raise ValueError("leader position inputs need the exogenous leader mode")
            (offset if self.kind == "leader-step" else slope)[0] = self.amplitude
        elif self.kind == "reference-distance":
            dref = self.amplitude
            for i in range(2, n):
                offset[i - 1] = -dref + p.graph.eps(i) * dref
            offset[n - 1] = -dref
        else:
            raise ValueError(f"unknown input kind {self.kind!r}")
        return offset, slope


@dataclass(frozen=True)
class Trajectory:
    """Sampled response; ``dt`` is the solver step, samples may be every k-th step."""

    t: np.ndarray
    positions: np.ndarray
    spacing: np.ndarray
    efforts: np.ndarray
    dt: float

    @property
    def terminal_positions(self) -> np.ndarray:
        return self.positions[-1]

    def to_csv(self) -> str:
        n = self.positions.shape[1]
        header = ["t"] + [f"x_{i}" for i in range(1, n + 1)] + [f"delta_{i}" for i in range(2, n + 1)] \
            + [f"u_{i}" for i in range(1, n + 1)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        data = np.column_stack([self.t, self.positions, self.spacing, self.efforts])
        for row in data:
            w.writerow([format(v, ".12g") for v in row])
        return buf.getvalue()


def fastest_rate(p: PlatoonSystem) -> float:
    return float(np.max(np.abs(p.eigenvalues())))


def slowest_rate(p: PlatoonSystem) -> float:
    ev = p.eigenvalues()
    return float(np.min(np.abs(ev.real)))


def _rk4_transition(A: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """One RK4 step of ``x' = A x + u`` with ``u`` constant over the step: ``x+ = Phi x + Gam u``."""
    n = A.shape[0]
    I = np.eye(n)
    hA = h * A
    hA2 = hA @ hA
    hA3 = hA2 @ hA
    Phi = I + hA + hA2 / 2 + hA3 / 6 + hA3 @ hA / 24
    Gam = h * (I + hA / 2 + hA2 / 6 + hA3 / 24)
    return Phi, Gam


def simulate_step(p: PlatoonSystem, duration: float, input_spec: InputSpec, dt: Optional[float] = None,
                  record_every: int = 1) -> Trajectory:
    """Fixed-step RK4 from rest.

    The input is affine in time, so appending ``t`` as a state makes the
    system autonomous and RK4 reduces to a constant matrix recurrence;
    ``record_every`` steps are taken at once through its power.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    rate = fastest_rate(p)
    if dt is None:
        dt = 0.02 / rate if rate > 0 else duration / 1000
    if rate > 0 and dt > 0.1 / rate:
        raise SimulationError(f"dt={dt:g} exceeds the stability limit 0.1/|fastest eigenvalue| = {0.1 / rate:g}")
    steps = max(1, int(math.ceil(duration / dt - 1e-9)))
    dt = duration / steps  # land exactly on the horizon
    offset, slope = input_spec.vectors(p)
    n = p.A.shape[0]
    # augmented state [z, t, 1]
    Aa = np.zeros((n + 2, n + 2))
    Aa[:n, :n] = p.A
    Aa[:n, n] = p.B @ slope
    Aa[:n, n + 1] = p.B @ offset
    Aa[n, n + 1] = 1.0
    Phi, _ = _rk4_transition(Aa, dt)
    stride = max(1, min(int(record_every), steps))
    Phi_s = np.linalg.matrix_power(Phi, stride)
    n_rec = steps // stride + 1
    X = np.empty((n_rec, n + 2))
    x = np.zeros(n + 2)
    x[n + 1] = 1.0
    X[0] = x
    for k in range(1, n_rec):
        x = Phi_s @ x
        X[k] = x
    t = np.arange(n_rec) * dt * stride
    v = offset[None, :] + t[:, None] * slope[None, :]
    Z = X[:, :n]
    pos = Z @ p.C_pos.T + v @ p.D_pos.T
    spacing = pos @ p.spacing_map().T
    if p.C_u is not None:
        with np.errstate(invalid="ignore"):
            eff = np.nan_to_num(Z, nan=0.0) @ np.nan_to_num(p.C_u, nan=0.0).T \
                + v @ np.nan_to_num(p.D_u, nan=0.0).T
        if p.mode == EXOGENOUS:
            eff[:, 0] = np.nan
    else:
        eff = np.full((n_rec, p.n), np.nan)
    return Trajectory(t, pos, spacing, eff, dt)


def final_value(p: PlatoonSystem, input_spec: InputSpec, duration: float, dt: Optional[float] = None) -> np.ndarray:
    """Positions after ``duration`` of RK4 stepping, taken as one matrix power."""
    tr = simulate_step(p, duration, input_spec, dt=dt, record_every=2 ** 62)
    return tr.positions[-1]
