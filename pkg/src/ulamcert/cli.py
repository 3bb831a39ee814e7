"""Command-line front end and JSON reports.

Subcommands: certify, decay, density, diffusion, mc.  Every interval in a
report is written as {"lo": "...", "hi": "..."} with the shortest decimal
strings that read back to the exact binary endpoints.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from . import __version__
from .decay import (
    CertificationError,
    ContractionResult,
    DecayCertificate,
    IMat2,
    NoSpectralGapError,
    certify_contraction,
    make_certificate,
)
from .density import DIRECT_LIMIT, certify_density
from .diffusion import (
    BudgetInputs,
    budget_assemble,
    certify_sigma2,
    density_inputs,
    select_truncation,
)
from .map_model import MapSpecError, UnsupportedMapError, registry_get
from .mc_check import McConfig, run_mc, write_blocks_csv, write_histogram_csv, write_normal_csv
from .rigor import Interval, parse_observable
from .ulam import AssemblyError, Mesh, cached_assemble

__all__ = ["main", "build_parser", "to_jsonable", "interval_from_json", "load_report"]

MAX_CERT_EXPONENT = 16
CACHE_ENV = "ULAMCERT_CACHE"


class UsageError(ValueError):
    """Invalid command-line configuration."""


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, Interval):
        return {"lo": repr(float(obj.lo)), "hi": repr(float(obj.hi))}
    if isinstance(obj, IMat2):
        return to_jsonable(obj.to_lists())
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, Fraction):
        return str(obj)
    return obj


def interval_from_json(obj: dict) -> Interval:
    return Interval(float(obj["lo"]), float(obj["hi"]))


def load_report(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_report(report: dict, path: str | None) -> None:
    text = json.dumps(to_jsonable(report), indent=2, sort_keys=True)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(str(text).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a rational number: {text!r}") from exc


def _positive_float(text: str) -> float:
    v = float(_fraction(text))
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _exponent_list(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(",", " ").split()]


def _common(p: argparse.ArgumentParser, obs: bool = True) -> None:
    p.add_argument("--config", help="YAML file whose keys provide option defaults")
    p.add_argument("--map", default="lanford", help="registry name or map config file")
    if obs:
        p.add_argument("--obs", default="x^2", help='observable, e.g. "x^2" or "x on [0,1/2]; x-1 on [1/2,1]"')
    p.add_argument("--ly-alpha", type=_fraction, default=None, help="override the Lasota-Yorke alpha")
    p.add_argument("--ly-b0", type=_fraction, default=None, help="override the Lasota-Yorke B0")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--cache-dir", default=os.environ.get(CACHE_ENV), help=f"operator cache (env {CACHE_ENV})")
    p.add_argument("--output", "-o", default=None, help="JSON report path")
    p.add_argument("--quiet", action="store_true")


def _cert_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-cert", type=int, default=None, help="certificate mesh exponent (default min(d, 14))")
    p.add_argument("--alpha2", type=_fraction, default=Fraction(1, 64))
    p.add_argument("--n-max", type=int, default=200)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ulamcert", description="Certified diffusion coefficients via Ulam's method")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("certify", help="full pipeline: certified enclosure of sigma^2")
    _common(p)
    _cert_options(p)
    p.add_argument("--d", type=int, required=True, help="mesh exponent: d = 2^D cells")
    p.add_argument("--tau", type=_positive_float, default=0.035)
    p.add_argument("--k-split", type=int, default=256)

    p = sub.add_parser("decay", help="decay certificate and truncation length")
    _common(p)
    _cert_options(p)
    p.add_argument("--tau-share", type=_positive_float, default=None, help="tail target (default tau/k-split)")
    p.add_argument("--tau", type=_positive_float, default=0.035)
    p.add_argument("--k-split", type=int, default=256)

    p = sub.add_parser("density", help="certified |h_eps - h|_1 for one or more meshes")
    _common(p, obs=False)
    _cert_options(p)
    p.add_argument("--d", type=_exponent_list, required=True, help="mesh exponents, e.g. 12 or 12,24")

    p = sub.add_parser("diffusion", help="error budget from a certify report")
    p.add_argument("--config", help="YAML file whose keys provide option defaults")
    p.add_argument("--report", required=True, help="report written by certify")
    p.add_argument("--l", type=int, default=None, help="truncation length (default from the report)")
    p.add_argument("--k-split", type=int, default=None)
    p.add_argument("--output", "-o", default=None)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("mc", help="high-precision Monte Carlo cross-check")
    _common(p)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--zeta", type=int, default=1024, help="mantissa bits")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=int, default=60)
    p.add_argument("--mu", type=_fraction, default=None, help="reference mean (default: sample mean)")
    p.add_argument("--sigma2", type=_fraction, default=None, help="variance for the normal overlay CSV")
    p.add_argument("--csv-dir", default=None, help="directory for blocks, histogram and normal CSVs")
    return parser


def _apply_config_defaults(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    import yaml

    try:
        with open(known.config, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {known.config}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a mapping")
    sub = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in data.items():
        dest = str(key).replace("-", "_")
        if dest not in actions or dest in ("help", "config"):
            raise UsageError(f"unknown config key: {key}")
        action = actions[dest]
        text = " ".join(map(str, value)) if isinstance(value, list) else str(value)
        defaults[dest] = action.type(text) if action.type is not None else value
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _load_map(args):
    return registry_get(args.map, args.ly_alpha, args.ly_b0)


def _alpha2(args) -> Interval:
    a = args.alpha2
    if a < 0:
        raise UsageError("alpha2 must be nonnegative")
    return Interval.exact(a)


def _cert_exponent(args, d_exp: int | None) -> int:
    e = args.d_cert if args.d_cert is not None else min(d_exp if d_exp is not None else 14, 14)
    if e > MAX_CERT_EXPONENT:
        raise UsageError(f"certificate mesh exponent must be at most {MAX_CERT_EXPONENT}")
    if e < 1:
        raise UsageError("certificate mesh exponent must be positive")
    return e


def _certificate(tmap, e: int, args) -> tuple[DecayCertificate, float]:
    t0 = time.perf_counter()
    P = cached_assemble(tmap, Mesh.from_exponent(e), args.cache_dir, args.threads)
    contraction = certify_contraction(P, _alpha2(args), args.n_max, workers=args.threads)
    return make_certificate(tmap, contraction), time.perf_counter() - t0


def _input_echo(args) -> dict:
    skip = {"threads", "cache_dir", "output", "quiet", "config"}
    return {k: (str(v) if isinstance(v, Fraction) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def _base_report(args) -> dict:
    return {"tool": "ulamcert", "version": __version__, "command": args.command, "input": _input_echo(args)}


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg, file=sys.stderr, flush=True)


def run_certify(args) -> dict:
    tmap = _load_map(args)
    psi = parse_observable(args.obs)
    if not 1 <= args.d <= 30:
        raise UsageError("mesh exponent must be between 1 and 30")
    if args.k_split < 1:
        raise UsageError("k-split must be positive")
    e_cert = _cert_exponent(args, args.d)
    cert, t_cert = _certificate(tmap, e_cert, args)
    res = certify_sigma2(
        tmap,
        psi,
        1 << args.d,
        1 << e_cert,
        args.tau,
        args.k_split,
        workers=args.threads,
        cache_dir=args.cache_dir,
        certificate=cert,
        log=lambda m: _say(args, m),
    )
    res.timings["certificate"] = t_cert
    report = _base_report(args)
    report.update(
        {
            "map": tmap.summary(),
            "certificate": {**cert.to_dict(), "l_star": res.l_star},
            "density": res.density.to_dict(),
            "budget_inputs": {
                "mu": res.mu_eps,
                "abs_dev": res.inputs.abs_dev,
                "q_minus_h_l1": res.density.error,
                "resolvent_bound": res.density.R,
            },
            "budget": res.budget.to_dict(),
            "sigma2_eps_l": res.sigma2_eps_l,
            "sigma2_enclosure": res.sigma2_enclosure,
            "mu_eps": res.mu_eps,
            "l_star": res.l_star,
            "tau": res.tau,
            "tau_met": res.tau_met,
            "tail_share_met": res.tail_share_met,
            "notes": res.notes,
            "run": {"timings": res.timings, "threads": args.threads},
        }
    )
    enc = res.sigma2_enclosure
    print(f"sigma^2 in [{enc.lo!r}, {enc.hi!r}] (budget tau' = {res.budget.total.hi!r})")
    return report


def run_decay(args) -> dict:
    tmap = _load_map(args)
    psi = parse_observable(args.obs)
    e_cert = _cert_exponent(args, None)
    t0 = time.perf_counter()
    P = cached_assemble(tmap, Mesh.from_exponent(e_cert), args.cache_dir, args.threads)
    contraction = certify_contraction(P, _alpha2(args), args.n_max, workers=args.threads)
    cert = make_certificate(tmap, contraction)
    t_cert = time.perf_counter() - t0
    share = args.tau_share if args.tau_share is not None else args.tau / args.k_split
    t0 = time.perf_counter()
    _, inputs, _ = density_inputs(tmap, P, cert, psi)
    l_generic = select_truncation(cert, psi, None, share)
    l_star = select_truncation(cert, psi, inputs, share)
    report = _base_report(args)
    report.update(
        {
            "map": tmap.summary(),
            "certificate": {**cert.to_dict(), "l_star": l_star, "l_star_generic_tail": l_generic, "tau_share": share},
            "run": {"timings": {"certificate": t_cert, "l_star": time.perf_counter() - t0}, "threads": args.threads},
        }
    )
    print(
        f"n1 = {cert.n1}, alpha2 <= {cert.alpha2.hi!r}, rho* <= {cert.rho_star.hi!r}, "
        f"b in [{cert.b.lo!r}, {cert.b.hi!r}], l* = {l_star}"
    )
    return report


def run_density(args) -> dict:
    tmap = _load_map(args)
    rows = []
    cert = None
    timings = {}
    for e in args.d:
        if not 1 <= e <= 30:
            raise UsageError("mesh exponent must be between 1 and 30")
        mesh = Mesh.from_exponent(e)
        if cert is None and mesh.d > DIRECT_LIMIT:
            cert, timings["certificate"] = _certificate(tmap, _cert_exponent(args, e), args)
        t0 = time.perf_counter()
        P = cached_assemble(tmap, mesh, args.cache_dir, args.threads)
        res = certify_density(tmap, P, cert)
        del P
        timings[f"d=2^{e}"] = time.perf_counter() - t0
        rows.append({"exponent": e, **res.to_dict()})
        print(f"d = 2^{e}: |h_eps - h|_1 <= {res.heps_error.hi!r}, |q - h|_1 <= {res.error.hi!r}")
    report = _base_report(args)
    report.update({"map": tmap.summary(), "density": rows, "run": {"timings": timings, "threads": args.threads}})
    if cert is not None:
        report["certificate"] = cert.to_dict()
    return report


def _certificate_from_report(block: dict, tmap) -> DecayCertificate:
    m = [[interval_from_json(x) for x in row] for row in block["M"]]
    M = IMat2(m[0][0], m[0][1], m[1][0], m[1][1])
    iv = interval_from_json
    step_norms = tuple(float(x) for x in block["step_norms"])
    contraction = ContractionResult(
        int(block["n1"]), iv(block["alpha2"]), iv(block["alpha2_target"]), step_norms, int(block["cert_mesh_d"])
    )
    cert = make_certificate(tmap, contraction)
    if cert.M != M:
        raise UsageError("report certificate does not match the map's norm system")
    return cert


def run_diffusion(args) -> dict:
    src = load_report(args.report)
    if src.get("command") != "certify":
        raise UsageError("diffusion needs a report written by certify")
    inp = src["input"]
    ly_a = _fraction(inp["ly_alpha"]) if inp.get("ly_alpha") else None
    ly_b = _fraction(inp["ly_b0"]) if inp.get("ly_b0") else None
    tmap = registry_get(inp["map"], ly_a, ly_b)
    psi = parse_observable(inp["obs"])
    cert = _certificate_from_report(src["certificate"], tmap)
    bi = src["budget_inputs"]
    mesh = Mesh.from_exponent(int(inp["d"]))
    inputs = BudgetInputs(
        interval_from_json(bi["mu"]),
        interval_from_json(bi["abs_dev"]),
        interval_from_json(bi["q_minus_h_l1"]),
        interval_from_json(bi["resolvent_bound"]),
        mesh.eps,
    )
    l_star = args.l if args.l is not None else int(src["l_star"])
    k = args.k_split if args.k_split is not None else int(inp["k_split"])
    budget = budget_assemble(tmap, mesh, cert, inputs.density_err, psi, l_star, k, inputs)
    report = {"tool": "ulamcert", "version": __version__, "command": "diffusion", "input": {"report": args.report}}
    report.update({"l_star": l_star, "budget": budget.to_dict()})
    if l_star == int(src["l_star"]):
        s2 = interval_from_json(src["sigma2_eps_l"])
        report["sigma2_eps_l"] = s2
        report["sigma2_enclosure"] = s2 + Interval(-budget.total.hi, budget.total.hi)
    print(f"budget total <= {budget.total.hi!r} at l = {l_star}")
    return report


def run_mc_cmd(args) -> dict:
    tmap = _load_map(args)
    psi = parse_observable(args.obs)
    mu_ref = Interval.exact(args.mu) if args.mu is not None else None
    cfg = McConfig(args.n, args.k, args.zeta, args.seed, mu_ref, args.bins)
    t0 = time.perf_counter()
    res = run_mc(tmap, psi, cfg, workers=args.threads)
    elapsed = time.perf_counter() - t0
    if args.csv_dir:
        os.makedirs(args.csv_dir, exist_ok=True)
        write_blocks_csv(os.path.join(args.csv_dir, "blocks.csv"), res)
        write_histogram_csv(os.path.join(args.csv_dir, "histogram.csv"), res)
        if args.sigma2 is not None:
            lo, hi = res.histogram[0][0], res.histogram[-1][1]
            write_normal_csv(os.path.join(args.csv_dir, "normal.csv"), res.mu_used, float(args.sigma2), args.k, lo, hi)
    report = _base_report(args)
    report.update({"mc": res.to_dict(), "run": {"timings": {"mc": elapsed}, "threads": args.threads}})
    print(f"mu~ = {res.mu_tilde!r}, sigma2~ = {res.sigma2_tilde!r}")
    return report


COMMANDS = {
    "certify": run_certify,
    "decay": run_decay,
    "density": run_density,
    "diffusion": run_diffusion,
    "mc": run_mc_cmd,
}


def _error(kind: str, exc: BaseException, path: str | None, code: int) -> int:
    obj = {"error": {"type": kind, "message": str(exc)}}
    if isinstance(exc, CertificationError) and exc.best_alpha2 is not None:
        obj["error"]["best_alpha2"] = exc.best_alpha2
    print(json.dumps(obj), file=sys.stderr)
    if path:
        _write_report(obj, path)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    path = None
    try:
        args = _apply_config_defaults(parser, argv)
        path = args.output
        report = COMMANDS[args.command](args)
    except (MapSpecError, UsageError, UnsupportedMapError) as exc:
        return _error(type(exc).__name__, exc, path, 2)
    except (CertificationError, NoSpectralGapError, AssemblyError) as exc:
        return _error(type(exc).__name__, exc, path, 1)
    except ValueError as exc:
        return _error("ValueError", exc, path, 2)
    _write_report(report, path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
