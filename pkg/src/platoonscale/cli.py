"""Command-line front end: ``platoonscale COMMAND SPEC.json [options]``.

Exit codes: 0 ok, 2 parse error, 3 validation error, 4 instability,
5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import analysis as an
from .graph import (
    GraphError,
    PlatoonGraph,
    build_laplacian,
    determinant,
    reduce_leader,
    spectral_bounds,
    spectrum,
)
from .model import MarginalEvaluationError, ModelError, OpenLoop, RationalFunction, compose_open_loop
from .simulate import DRIVEN, EXOGENOUS, InputSpec, SimulationError, assemble_platoon, realize, simulate_step

EXIT_PARSE, EXIT_VALIDATION, EXIT_INSTABILITY, EXIT_NUMERICAL = 2, 3, 4, 5
SCHEMA_VERSION = 1


class SpecParseError(ValueError):
    pass


class SpecValidationError(ValueError):
    pass


DEFAULT_OPTIONS = {
    "hinf_grid": 2000,
    "stability_grid": 64,
    "certificate_grid": 64,
    "string_tol": 1e-3,
    "leader_mode": EXOGENOUS,
}


@dataclass(frozen=True)
class PlatoonSpec:
    n: int
    epsilon: Any
    plant: RationalFunction
    controller: RationalFunction
    options: dict = field(default_factory=dict)

    def graph(self) -> PlatoonGraph:
        eps = self.epsilon
        if isinstance(eps, list):
            return PlatoonGraph(self.n, eps)
        if "uniform" in eps:
            return PlatoonGraph.uniform(self.n, float(eps["uniform"]))
        lo, hi = eps["range"]
        return PlatoonGraph.random_range(self.n, float(lo), float(hi), int(eps["seed"]))

    def open_loop(self) -> OpenLoop:
        return compose_open_loop(self.plant, self.controller)

    def option(self, key: str):
        return self.options.get(key, DEFAULT_OPTIONS[key])


def _rational(d, name: str) -> RationalFunction:
    if not isinstance(d, dict) or "num" not in d or "den" not in d:
        raise SpecParseError(f"{name} must be an object with 'num' and 'den' coefficient lists")
    try:
        return RationalFunction([float(x) for x in d["num"]], [float(x) for x in d["den"]])
    except (TypeError, ValueError) as exc:
        raise SpecValidationError(f"{name}: {exc}") from exc


def parse_spec(text: str) -> PlatoonSpec:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecParseError(f"spec is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SpecParseError("spec must be a JSON object")
    if raw.get("schema") != SCHEMA_VERSION:
        raise SpecParseError(f"unsupported or missing schema version (expected {SCHEMA_VERSION})")
    for key in ("n", "epsilon", "plant", "controller"):
        if key not in raw:
            raise SpecParseError(f"missing field {key!r}")
    n = raw["n"]
    if not isinstance(n, int) or isinstance(n, bool):
        raise SpecParseError("'n' must be an integer")
    eps = raw["epsilon"]
    if isinstance(eps, dict):
        if "uniform" in eps:
            pass
        elif "range" in eps and "seed" in eps:
            if not (isinstance(eps["range"], list) and len(eps["range"]) == 2):
                raise SpecParseError("epsilon.range must be [low, high]")
        else:
            raise SpecParseError("epsilon must be a list, {'uniform': v} or {'range': [lo, hi], 'seed': s}")
    elif not isinstance(eps, list):
        raise SpecParseError("epsilon must be a list, {'uniform': v} or {'range': [lo, hi], 'seed': s}")
    options = raw.get("options", {})
    if not isinstance(options, dict):
        raise SpecParseError("'options' must be an object")
    unknown = set(options) - set(DEFAULT_OPTIONS)
    if unknown:
        raise SpecValidationError(f"unknown options: {sorted(unknown)}")
    spec = PlatoonSpec(n, eps, _rational(raw["plant"], "plant"), _rational(raw["controller"], "controller"), options)
    try:
        spec.graph()
        spec.open_loop()
    except (GraphError, ModelError) as exc:
        raise SpecValidationError(str(exc)) from exc
    if spec.option("leader_mode") not in (DRIVEN, EXOGENOUS):
        raise SpecValidationError("leader_mode must be 'driven' or 'exogenous'")
    return spec


# --------------------------------------------------------------------------
# output helpers


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps(obj) -> str:
    # Python's float repr is the shortest string that round-trips (at most 17 digits)
    return json.dumps(_clean(obj), indent=2) + "\n"


def _fmt(v: float) -> str:
    return format(float(v), ".12g")


def _write(out: Path, name: str, text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _threads() -> int:
    v = int(os.environ.get("PLATOON_THREADS", "0") or 0)
    return v if v > 0 else (os.cpu_count() or 1)


# --------------------------------------------------------------------------
# commands


def cmd_gain(spec: PlatoonSpec, args) -> dict:
    g = spec.graph()
    c, o = args.from_, args.to
    return {
        "command": "gain",
        "control": c,
        "output": o,
        "distance": abs(c - o),
        "path_weight": an.path_weight(g, c, o),
        "dc_gain_spectral": an.dc_gain_spectral(g, c, o),
        "dc_gain_closed": an.dc_gain_closed(g, c, o),
        "dc_gain_distance": an.dc_gain_distance(g, c, o),
        "dc_gain_distance_closed": an.dc_gain_distance_closed(g, c, o),
        "eps_max_gain_bound": 1 / (1 - g.eps_max) if g.eps_max < 1 else None,
    }


def cmd_hinf(spec: PlatoonSpec, args) -> dict:
    g, m = spec.graph(), spec.open_loop()
    t = an.assemble_transfer(g, m, args.from_, args.to, stability_grid=spec.option("stability_grid"))
    h = an.hinf(t, n_grid=spec.option("hinf_grid"))
    csv_lines = ["omega,magnitude"] + [f"{_fmt(w)},{_fmt(v)}" for w, v in h.samples]
    _write(args.out, "hinf_response.csv", "\n".join(csv_lines) + "\n")
    return {"command": "hinf", "control": args.from_, "output": args.to, "distance": t.distance,
            "dc_gain": t.dc_gain(), **h.to_dict()}


def _parse_sweep(text: str) -> tuple[int, int]:
    try:
        a, b = text.split("..")
        return int(a), int(b)
    except ValueError as exc:
        raise SpecValidationError(f"--sweep-to expects o1..o2, got {text!r}") from exc


def cmd_scaling(spec: PlatoonSpec, args) -> dict:
    g, m = spec.graph(), spec.open_loop()
    c = args.from_
    o1, o2 = _parse_sweep(args.sweep_to)
    lower, upper = spectral_bounds(g)
    notes = []
    cert = None
    if lower is None:
        notes.append("eps_max >= 1: no uniform lower eigenvalue bound, no scaling certificate")
    else:
        cert = an.scaling_certificate(m, lower, upper, grid=spec.option("certificate_grid"))
    grid = spec.option("hinf_grid")

    def row(o):
        t = an.assemble_transfer(g, m, c, o, stability_grid=spec.option("stability_grid"))
        h = an.hinf(t, n_grid=grid)
        dc = t.dc_gain()
        bound = cert.lower_bound(t.distance, dc) if cert is not None and cert.valid else None
        return o, t.distance, h.norm, h.peak_frequency, dc, bound

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(row, range(o1, o2 + 1)))
    lines = ["o,distance,hinf_norm,peak_frequency,dc_gain,predicted_lower_bound"]
    for o, d, norm, wpk, dc, bound in rows:
        lines.append(",".join([str(o), str(d), _fmt(norm), _fmt(wpk), _fmt(dc), "" if bound is None else _fmt(bound)]))
    _write(args.out, "scaling.csv", "\n".join(lines) + "\n")
    return {
        "command": "scaling",
        "control": c,
        "sweep": [o1, o2],
        "certificate": cert.to_dict() if cert is not None else None,
        "notes": notes,
        "rows": [{"o": o, "distance": d, "hinf_norm": nm, "peak_frequency": wpk, "dc_gain": dc,
                  "predicted_lower_bound": b}
                 for o, d, nm, wpk, dc, b in rows],
    }


def cmd_stability(spec: PlatoonSpec, args) -> dict:
    g, m = spec.graph(), spec.open_loop()
    tol = args.tol if args.tol is not None else spec.option("string_tol")
    rep = an.string_stability_check(g, m, args.from_, tol, spec.option("stability_grid"))
    return {"command": "stability", "control": args.from_, **rep.to_dict()}


def cmd_spectrum(spec: PlatoonSpec, args) -> dict:
    g = spec.graph()
    L = build_laplacian(g)
    red = reduce_leader(L)
    lower, upper = spectral_bounds(g)
    ev = spectrum(red).eigenvalues
    return {
        "command": "spectrum",
        "n": g.n,
        "epsilon": list(g.epsilon),
        "laplacian_eigenvalues": spectrum(L).eigenvalues,
        "reduced_eigenvalues": ev,
        "fiedler": float(ev[0]),
        "lower_bound": lower,
        "upper_bound": upper,
        "reduced_determinant": determinant(red),
    }


def cmd_simulate(spec: PlatoonSpec, args) -> dict:
    g, m = spec.graph(), spec.open_loop()
    if args.mode == "leader-step":
        mode = EXOGENOUS
        inp = InputSpec("leader-step", args.amplitude)
    else:
        mode = spec.option("leader_mode")
        inp = InputSpec("input-step", args.amplitude, args.from_)
    p = assemble_platoon(g, realize(m), mode)
    tr = simulate_step(p, args.duration, inp, dt=args.dt, record_every=args.record_every)
    _write(args.out, "trajectory.csv", tr.to_csv())
    return {
        "command": "simulate",
        "mode": args.mode,
        "leader_mode": mode,
        "duration": float(tr.t[-1]),
        "dt": tr.dt,
        "samples": int(tr.t.size),
        "terminal_positions": tr.positions[-1],
        "max_abs_spacing_error": np.max(np.abs(tr.spacing), axis=0),
    }


def cmd_pf_check(spec: PlatoonSpec, args) -> dict:
    m = spec.open_loop()
    rep = an.pf_check(m, tol=args.tol if args.tol is not None else spec.option("string_tol"))
    return {"command": "pf-check", **rep.to_dict()}


COMMANDS = {
    "gain": cmd_gain,
    "hinf": cmd_hinf,
    "scaling": cmd_scaling,
    "stability": cmd_stability,
    "spectrum": cmd_spectrum,
    "simulate": cmd_simulate,
    "pf-check": cmd_pf_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="platoonscale", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("spec", type=Path, help="platoon spec JSON file")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default ./out)")
        return p

    p = add("gain", "steady-state gains from input c to vehicle o")
    p.add_argument("--from", dest="from_", type=int, required=True)
    p.add_argument("--to", type=int, required=True)
    p = add("hinf", "H-infinity norm of T_co and its magnitude response")
    p.add_argument("--from", dest="from_", type=int, required=True)
    p.add_argument("--to", type=int, required=True)
    p = add("scaling", "norm table over a range of output vehicles plus scaling certificate")
    p.add_argument("--from", dest="from_", type=int, required=True)
    p.add_argument("--sweep-to", dest="sweep_to", required=True, help="o1..o2")
    p = add("stability", "bidirectional string-stability report for input at c")
    p.add_argument("--from", dest="from_", type=int, required=True)
    p.add_argument("--tol", type=float, default=None)
    add("spectrum", "Laplacian eigenvalues and uniform bounds")
    p = add("simulate", "time response of the assembled platoon")
    p.add_argument("--mode", choices=["leader-step", "input-step"], default="leader-step")
    p.add_argument("--from", dest="from_", type=int, default=2, help="input vehicle for input-step")
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--record-every", dest="record_every", type=int, default=1)
    p = add("pf-check", "predecessor-following design checks for M/(1+M)")
    p.add_argument("--tol", type=float, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        try:
            text = args.spec.read_text()
        except OSError as exc:
            raise SpecParseError(f"cannot read spec: {exc}") from exc
        spec = parse_spec(text)
        result = COMMANDS[args.command](spec, args)
    except SpecParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (SpecValidationError, GraphError, ModelError, ValueError) as exc:
        if isinstance(exc, MarginalEvaluationError):
            print(f"instability: {exc}", file=sys.stderr)
            return EXIT_INSTABILITY
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (an.UnstableFormationError, an.MarginalStabilityError) as exc:
        print(f"instability: {exc}", file=sys.stderr)
        return EXIT_INSTABILITY
    except (SimulationError, np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    text = dumps(result)
    _write(args.out, f"{args.command}.json", text)
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
