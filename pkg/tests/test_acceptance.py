"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (shown in the terminal summary) and
then asserts every sub-check at its stated tolerance.
"""

import os
import resource
import subprocess
import sys
import time
from fractions import Fraction

import pytest

from conftest import ACCEPTANCE_LINES, CACHE_DIR, get_contraction, get_map
from ulamcert.decay import make_certificate
from ulamcert.diffusion import certify_sigma2, density_inputs, kappa_bruteforce, kappa_closed_form, select_truncation
from ulamcert.mc_check import McConfig, run_mc
from ulamcert.rigor import Interval, parse_observable
from ulamcert.ulam import Mesh, cached_assemble

PUBLISHED_ALPHA, PUBLISHED_B0 = "0.66666667", "1.444444445"
PUBLISHED_M = ((1.18e-5, 4.3333334), (0.000306, 0.022208))
COBOUNDARY = "x on [0,1/2]; x - 1 on [1/2,1]"
GIB = 1 << 30


def peak_rss_bytes() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def record(n: int, checks: dict[str, bool], detail: str) -> None:
    failed = [name for name, ok in checks.items() if not ok]
    verdict = "PASS" if not failed else "FAIL (" + ", ".join(failed) + ")"
    line = f"criterion {n}: {verdict} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert not failed, line


def within(value: float, target: float, rel: float) -> bool:
    return abs(value - target) <= rel * abs(target)


def cache():
    os.makedirs(CACHE_DIR, exist_ok=True)
    return CACHE_DIR


@pytest.fixture(scope="module")
def lanford_24():
    """Headline run shared by the density and enclosure criteria."""
    t0 = time.perf_counter()
    r = certify_sigma2(get_map("lanford"), parse_observable("x^2"), 1 << 24, 1 << 14, tau=0.035, tau_split_k=256, cache_dir=cache())
    return r, time.perf_counter() - t0, peak_rss_bytes()


def test_criterion_1_doubling_oracle():
    t0 = time.perf_counter()
    r = certify_sigma2(get_map("doubling"), parse_observable("x"), 1 << 12, tau=0.05)
    dt = time.perf_counter() - t0
    enc = r.sigma2_enclosure
    checks = {"contains 1/4": enc.contains(Fraction(1, 4)), "width<=0.05": enc.width <= 0.05, "time<=30s": dt <= 30}
    record(1, checks, f"enclosure [{enc.lo:.6f}, {enc.hi:.6f}] width {enc.width:.4g}, {dt:.1f} s")


def test_criterion_2_coboundary():
    t0 = time.perf_counter()
    r = certify_sigma2(get_map("doubling"), parse_observable(COBOUNDARY), 1 << 12, tau=0.05)
    dt = time.perf_counter() - t0
    enc = r.sigma2_enclosure
    checks = {"contains 0": enc.contains(0), "time<=30s": dt <= 30}
    record(2, checks, f"enclosure [{enc.lo:.3g}, {enc.hi:.3g}], {dt:.1f} s")


def test_criterion_3_decay_certificate():
    t0 = time.perf_counter()
    tmap = get_map("lanford", PUBLISHED_ALPHA, PUBLISHED_B0)
    contraction = get_contraction("lanford", 14, 1 / 64)
    cert = make_certificate(tmap, contraction)
    psi = parse_observable("x^2")
    P = cached_assemble(get_map("lanford"), Mesh.from_exponent(14), cache())
    _, inputs, _ = density_inputs(tmap, P, cert, psi)
    l_star = select_truncation(cert, psi, inputs, 0.01 / 256)
    dt = time.perf_counter() - t0
    M = cert.M.entries()
    entry_ok = {
        f"M[{i + 1},{j + 1}]": within(M[i][j].hi, PUBLISHED_M[i][j], 0.10) for i in range(2) for j in range(2)
    }
    checks = {
        "n1<=32": cert.n1 <= 32,
        **entry_ok,
        "rho*<=0.055": cert.rho_star.hi <= 0.055,
        "l* in {112,140}": l_star in (112, 140),
        "time<=1h": dt <= 3600,
    }
    shown = ", ".join(f"{M[i][j].hi:.4g}" for i in range(2) for j in range(2))
    record(
        3,
        checks,
        f"n1={cert.n1} alpha2={cert.alpha2.hi:.4g} M=[{shown}] rho*={cert.rho_star.hi:.4g} l*={l_star}, {dt:.0f} s",
    )


def test_criterion_4_density_table(lanford_24):
    t0 = time.perf_counter()
    r12 = certify_sigma2(get_map("lanford"), parse_observable("x^2"), 1 << 12, tau=0.035)
    dt12 = time.perf_counter() - t0
    r24, dt24, rss = lanford_24
    e12, e24 = r12.density.error.hi, r24.density.error.hi
    checks = {
        "2^12 <= 0.032": e12 <= 0.032,
        "2^24 <= 6.4e-5": e24 <= 6.4e-5,
        "2^12 time<=5min": dt12 <= 300,
        "2^24 time<=2h": dt24 <= 7200,
        "memory<=8GB": rss <= 8 * GIB,
    }
    record(
        4,
        checks,
        f"|h_eps-h|_1 <= {e12:.3g} (2^12, {dt12:.0f} s), {e24:.3g} (2^24, {dt24:.0f} s), peak RSS {rss / GIB:.2f} GiB",
    )


def test_criterion_5_kappa_closed_form():
    tmap = get_map("lanford", PUBLISHED_ALPHA, PUBLISHED_B0)
    psi = parse_observable("x^2")
    gamma_eps = tmap.gamma_const * Interval(2.0**-25)
    args = (psi.sup_norm_bound, psi.var_bound, tmap.ly_alpha, tmap.ly_B0, gamma_eps, 112)
    closed, brute = kappa_closed_form(*args), kappa_bruteforce(*args)
    resolution = closed.width + brute.width + 1e-12 * brute.hi
    checks = {
        "within 10% of 0.00395": within(closed.hi, 0.00395, 0.10),
        "equals double loop": closed.intersects(brute) and abs(closed.mid - brute.mid) <= resolution,
    }
    record(5, checks, f"kappa closed {closed.hi:.6g}, double loop {brute.hi:.6g}")


def test_criterion_6_headline_enclosure(lanford_24):
    r, dt, rss = lanford_24
    s2, enc = r.sigma2_eps_l, r.sigma2_enclosure
    checks = {
        "sigma2_eps_l in [0.375,0.386]": Interval(0.375, 0.386).contains(s2),
        "enclosure in [0.34,0.42]": Interval(0.34, 0.42).contains(enc),
        "meets [0.3458,0.4152]": enc.intersects(Interval(0.3458, 0.4152)),
        "time<=4h": dt <= 4 * 3600,
        "memory<=8GB": rss <= 8 * GIB,
    }
    record(
        6,
        checks,
        f"sigma2_eps_l=[{s2.lo:.7f}, {s2.hi:.7f}] enclosure=[{enc.lo:.5f}, {enc.hi:.5f}] "
        f"budget {r.budget.total.hi:.3g} l*={r.l_star}, {dt:.0f} s, 2^25 not run (memory)",
    )


def test_criterion_7_monte_carlo():
    t0 = time.perf_counter()
    res = run_mc(get_map("lanford"), parse_observable("x^2"), McConfig(n=20000, k=100, precision_bits=1024))
    dt = time.perf_counter() - t0
    checks = {
        "mu in [0.382,0.385]": 0.382 <= res.mu_tilde <= 0.385,
        "sigma2 in [0.352,0.373]": 0.352 <= res.sigma2_tilde <= 0.373,
        "time<=30min": dt <= 1800,
    }
    record(7, checks, f"mu~={res.mu_tilde:.5f} sigma2~={res.sigma2_tilde:.5f}, {dt:.0f} s")


PROPERTY_SUITES = [
    "tests/test_rigor.py::test_sampled_points_stay_inside",
    "tests/test_rigor.py::test_containment_is_monotone",
    "tests/test_ulam.py::test_rows_are_stochastic",
    "tests/test_ulam.py::test_projection_does_not_increase_variation",
    "tests/test_ulam.py::test_projection_error_of_square",
    "tests/test_ulam.py::test_assembly_is_independent_of_workers",
    "tests/test_cli.py::test_reports_do_not_depend_on_threads",
]


def test_criterion_8_property_suites():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_SUITES],
        cwd=root,
        capture_output=True,
        text=True,
    )
    dt = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    record(8, {"property suites green": proc.returncode == 0}, f"{tail}, {dt:.0f} s")
