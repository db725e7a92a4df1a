"""End-to-end acceptance checks at desk scale.

Each test prints a single ``PASS``/``FAIL`` line with the measured figure of
merit, then asserts. Run with ``pytest -m acceptance -s`` to see the lines.
"""
import math
import time

import numpy as np
import pytest

from platoonscale.analysis import (
    assemble_transfer,
    dc_gain_closed,
    dc_gain_spectral,
    hinf,
    neighbor_ratio,
    pf_check,
    reduced_spectrum,
    scaling_certificate,
    string_stability_check,
)
from platoonscale.graph import (
    PlatoonGraph,
    build_laplacian,
    check_interlacing,
    delete_path,
    determinant,
    reduce_leader,
    spectral_bounds,
    spectrum,
)
from platoonscale.model import RationalFunction, closed_loop_block, compose_open_loop, formation_stability
from platoonscale.simulate import (
    DRIVEN,
    EXOGENOUS,
    InputSpec,
    assemble_platoon,
    final_value,
    freq_response_matrix,
    realize,
    simulate_step,
    slowest_rate,
)

pytestmark = pytest.mark.acceptance


def open_loop(pn, pd, cn=(1,), cd=(1,)):
    return compose_open_loop(RationalFunction(pn, pd), RationalFunction(cn, cd))


pi_loop = open_loop([1], [0, 5, 1], [1, 1], [0, 1])
lead = open_loop([1], [0, 0.5, 1], [1, 2.4], [1, 0.125])


def report(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, detail


def symmetric_oracle(t):
    # the tridiagonal is similar to a symmetric one with off-diagonals sqrt(a_ij a_ji)
    off = np.sqrt(t.sub * t.sup)
    return np.linalg.eigvalsh(np.diag(t.diag) + np.diag(off, -1) + np.diag(off, 1))


# 1 ----------------------------------------------------------------------------------

def test_determinant_identity():
    rng = np.random.default_rng(1001)
    spectrum(reduce_leader(build_laplacian(PlatoonGraph.uniform(5, 0.5))))  # compile outside the clock
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        g = PlatoonGraph(n, 1.0 - rng.random(n - 2))  # (0, 1]
        t = reduce_leader(build_laplacian(g))
        prod = math.prod(spectrum(t).eigenvalues)
        worst = max(worst, abs(prod - 1), abs(determinant(t) - 1))
    elapsed = time.perf_counter() - start
    report("determinant identity", worst <= 1e-8 and elapsed <= 10.0,
           f"max rel err {worst:.2e} (tol 1e-8), {elapsed:.2f}s (limit 10s)")


# 2 ----------------------------------------------------------------------------------

def test_steady_state_gain_agreement():
    rng = np.random.default_rng(1002)
    worst_spec, worst_sim, done, skipped = 0.0, 0.0, 0, 0
    types = []
    while done < 200:
        n = int(rng.integers(3, 11))
        g = PlatoonGraph(n, rng.uniform(0.0, 1.5, n - 2))
        k = rng.uniform(0.5, 3.0)
        if done % 2 == 0:
            m = open_loop([1], [0, 5, 1], [k, k], [0, 1])          # theta = 2
        else:
            m = open_loop([1], [0, 0.5, 1], [k, 2.4 * k], [1, 0.125])  # theta = 1
        if not formation_stability(m, reduced_spectrum(g)).all_stable:
            skipped += 1
            continue
        c, o = (int(v) for v in rng.integers(2, n + 1, 2))
        closed = dc_gain_closed(g, c, o)
        worst_spec = max(worst_spec, abs(dc_gain_spectral(g, c, o) - closed) / max(1.0, abs(closed)))
        p = assemble_platoon(g, realize(m), EXOGENOUS)
        x = final_value(p, InputSpec("input-step", 1.0, c), 40 / slowest_rate(p))
        worst_sim = max(worst_sim, abs(x[o - 1] - closed) / max(1.0, abs(closed)))
        types.append(m.type_number)
        done += 1
    sym = PlatoonGraph.uniform(20, 1.0)
    pf = PlatoonGraph.uniform(20, 0.0)
    exact = all(dc_gain_closed(sym, c, o) == c - 1 for c in range(2, 21) for o in range(c, 21)) and \
        all(dc_gain_closed(pf, c, o) == 1 for c in range(2, 21) for o in range(c, 21))
    ok = worst_spec <= 1e-9 and worst_sim <= 1e-3 and exact and set(types) == {1, 2}
    report("steady-state gain agreement", ok,
           f"spectral-vs-closed {worst_spec:.1e} (tol 1e-9), simulated {worst_sim:.1e} (tol 1e-3), "
           f"exact symmetric/PF values {exact}, {skipped} unstable draws redrawn")


# 3 ----------------------------------------------------------------------------------

def test_eps_max_gain_bound():
    rng = np.random.default_rng(1003)
    violations, largest = 0, {0.9: 0.0, 0.5: 0.0}
    for trial in range(1000):
        em = 0.9 if trial % 2 == 0 else 0.5
        n = int(rng.integers(3, 61))
        eps = rng.uniform(0.0, em, n - 2)
        eps[rng.integers(0, n - 2)] = em
        if trial % 10 < 2:
            eps[:] = em  # uniform eps_max drives the gain toward the bound
        g = PlatoonGraph(n, eps)
        bound = 1 / (1 - em)
        # the largest gain sits at o >= c = n with the longest run of eps_max; check it and random pairs
        pairs = [(n, n)] + [tuple(int(v) for v in rng.integers(2, n + 1, 2)) for _ in range(10)]
        for c, o in pairs:
            gain = dc_gain_closed(g, c, o)
            largest[em] = max(largest[em], gain)
            violations += gain > bound * (1 + 1e-12)
        c, o = pairs[1]
        violations += dc_gain_spectral(g, c, o) > bound * (1 + 1e-9)
    report("eps_max gain bound", violations == 0,
           f"{violations} violations; max gain {largest[0.9]:.4f} <= 10, {largest[0.5]:.4f} <= 2")


# 4 ----------------------------------------------------------------------------------

def test_eigenvalue_bounds_and_interlacing():
    rng = np.random.default_rng(1004)
    bound_fail = interlace_fail = 0
    for _ in range(1000):
        n = int(rng.integers(3, 201))
        em = rng.uniform(0.0, 0.99)
        g = PlatoonGraph(n, rng.uniform(0.0, em, n - 2))
        lo, hi = spectral_bounds(g)
        ev = spectrum(reduce_leader(build_laplacian(g))).eigenvalues
        bound_fail += not (ev.min() >= lo * (1 - 1e-12) and ev.max() <= hi * (1 + 1e-12))
    for _ in range(1000):
        n = int(rng.integers(3, 13))
        g = PlatoonGraph(n, rng.uniform(0.0, 1.5, n - 2))
        c, o = (int(v) for v in rng.integers(2, n + 1, 2))
        red = reduce_leader(build_laplacian(g))
        sub = delete_path(red, c, o)
        outer, inner = spectrum(red), spectrum(sub)
        ok = check_interlacing(outer, inner)
        # dense oracle: the same inequalities on independently computed spectra
        lam, mu = symmetric_oracle(red), symmetric_oracle(sub)
        k = lam.size - mu.size
        j = np.arange(mu.size)
        tol = 1e-9 * max(1.0, lam.max())
        oracle = bool(np.all(mu >= lam[j] - tol) and np.all(mu <= lam[np.minimum(j + 2 * k, lam.size - 1)] + tol))
        agree = np.allclose(outer.eigenvalues, lam, atol=1e-9) and np.allclose(inner.eigenvalues, mu, atol=1e-9)
        interlace_fail += not (ok and oracle and agree)
    report("eigenvalue bounds and interlacing", bound_fail == 0 and interlace_fail == 0,
           f"{bound_fail}/1000 bound failures (N <= 200), {interlace_fail}/1000 interlacing failures (N <= 12)")


# 5 ----------------------------------------------------------------------------------

def test_exponential_norm_growth():
    start = time.perf_counter()
    g = PlatoonGraph.random_range(40, 0.4, 0.6, 7)
    lo, hi = spectral_bounds(g)
    cert = scaling_certificate(pi_loop, lo, hi)
    d, norms, bound_ok = [], [], True
    for o in range(3, 41):
        t = assemble_transfer(g, pi_loop, 3, o)
        norm = hinf(t).norm
        d.append(t.distance)
        norms.append(norm)
        bound_ok &= norm >= cert.lower_bound(t.distance, t.dc_gain())
    d, norms = np.array(d), np.array(norms)
    elapsed = time.perf_counter() - start
    tail = norms[d >= 3]
    monotone = bool(np.all(np.diff(tail) > 0))
    slope = np.polyfit(d, np.log(norms), 1)[0]
    ok = cert.valid and monotone and slope >= math.log(cert.zeta) and bound_ok and elapsed <= 60
    report("exponential scaling (N=40)", ok,
           f"monotone beyond d=3 {monotone}, slope {slope:.4f} >= log zeta {math.log(cert.zeta):.4f}, "
           f"all norms above bound {bound_ok}, {elapsed:.1f}s (limit 60s)")


# 6 ----------------------------------------------------------------------------------

def test_string_stable_pf_design():
    pf = pf_check(lead)
    worst = 0.0
    for n in (3, 5, 10, 20, 40):
        g = PlatoonGraph.uniform(n, 0.0)
        for c in range(2, n + 1):
            for o in range(3, n + 1):
                worst = max(worst, hinf(neighbor_ratio(g, lead, c, o)).norm)
    ok = abs(pf.norm - 1) <= 1e-3 and pf.positivity_necessary and worst <= 1 + 1e-4
    report("string-stable PF design", ok,
           f"||M/(1+M)|| = {pf.norm:.6f}, positivity {pf.positivity_necessary}, max neighbour ratio {worst:.6f}")


# 7 ----------------------------------------------------------------------------------

def test_double_integrator_impossibility():
    rng = np.random.default_rng(1007)
    min_norm, condition_held = math.inf, 0
    for _ in range(50):
        k = rng.uniform(0.2, 5.0)
        z = rng.uniform(0.05, 2.0)
        p = z * rng.uniform(1.5, 20.0)
        m = open_loop([1], [0, 0, 1], [k * z, k], [p, 1])  # k (s + z)/(s + p)
        assert m.type_number == 2
        for lam in np.exp(rng.uniform(np.log(1e-2), np.log(10.0), 5)):
            min_norm = min(min_norm, hinf(closed_loop_block(m, lam)).norm)
        n = int(rng.integers(3, 12))
        g = PlatoonGraph(n, rng.uniform(0.0, 0.95, n - 2))
        condition_held += string_stability_check(g, m, 2).condition_holds
    ok = min_norm > 1 and condition_held == 0
    report("double-integrator impossibility", ok,
           f"min sampled ||T_lambda|| = {min_norm:.6f} > 1, condition held {condition_held}/50")


# 8 ----------------------------------------------------------------------------------

def test_product_form_vs_resolvent():
    rng = np.random.default_rng(1008)
    worst, entries = 0.0, 0
    for trial in range(100):
        n = int(rng.integers(2, 11))
        g = PlatoonGraph(n, rng.uniform(0.0, 1.2, n - 2))
        m = pi_loop if trial % 2 == 0 else lead
        p = assemble_platoon(g, realize(m), DRIVEN)
        w = 10 ** rng.uniform(-2, 2, 50)
        ref = np.array([freq_response_matrix(p, x) for x in w])
        for c in range(1, n + 1):
            for o in range(1, n + 1):
                if c >= 2 and o == 1:
                    assert np.max(np.abs(ref[:, 0, c - 1])) <= 1e-12  # the leader ignores followers
                    continue
                got = assemble_transfer(g, m, c, o, include_leader=True).eval(w)
                want = ref[:, o - 1, c - 1]
                worst = max(worst, float(np.max(np.abs(got - want) / np.abs(want))))
                entries += w.size
    report("product form vs resolvent", worst <= 1e-6,
           f"max rel err {worst:.2e} over {entries} entries (tol 1e-6)")


# 9 ----------------------------------------------------------------------------------

def test_leader_step_transients():
    n = 50
    c2 = open_loop([1], [0, 0.5, 1], [1.5], [1])
    runs = {}
    for name, eps, m in [("pf", 0.0, lead), ("asym", 0.9, c2)]:
        p = assemble_platoon(PlatoonGraph.uniform(n, eps), realize(m), EXOGENOUS)
        tr = simulate_step(p, 40 / slowest_rate(p), InputSpec("leader-step"), record_every=10)
        peaks = np.max(np.abs(tr.spacing), axis=0)
        effort = np.nanmax(np.abs(tr.efforts))
        runs[name] = (peaks, effort, tr.positions[-1])
    pf_peaks, pf_effort, pf_final = runs["pf"]
    growth = float(np.max(pf_peaks[1:] / pf_peaks[:-1]))
    settled = float(np.max(np.abs(pf_final - 1)))
    # equal maximal effort: scale each run's (linear) response so that max |u| = 1
    pf_norm = float(np.max(pf_peaks)) / pf_effort
    asym_norm = float(np.max(runs["asym"][0])) / runs["asym"][1]
    ok = growth <= 1.05 and settled <= 1e-2 and asym_norm > pf_norm
    report("leader-step transients (N=50)", ok,
           f"PF peak growth ratio {growth:.4f} (<= 1.05), PF settled to {settled:.1e}; "
           f"peak spacing per unit effort asym {asym_norm:.4f} > PF {pf_norm:.4f}")
