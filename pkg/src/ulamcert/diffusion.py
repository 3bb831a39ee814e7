"""Certified enclosure of the diffusion coefficient.

sigma^2_{eps,l} = int psi_hat^2 q + 2 sum_{i=1}^{l-1} int P_eps^i(psi_hat q) psi_hat

is computed in interval arithmetic with q the certified fixed vector, and
its distance to sigma^2 is split into three pieces:

    density  |sigma^2_l(q, P_eps) - sigma^2_l(h, P_eps)|
    kappa    |sigma^2_l(h, P_eps) - sigma^2_l(h, P)|
    tail     |sigma^2_l(h, P) - sigma^2|

Every piece has a generic a priori bound and a refined one that uses the
computed data; both bound the same quantity, so the smaller is taken.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .decay import (
    DecayCertificate,
    block_l1_tail,
    certify_contraction,
    closed_form_l_guess,
    lasota_yorke_B,
    make_certificate,
    select_l_star,
    tail_bound,
)
from .density import DensityResult, certify_density
from .map_model import PiecewiseMap
from .rigor import Interval, Observable, iv_pow, sum_upper, up, vmul, vsub
from .ulam import (
    BasisVector,
    Mesh,
    UlamOperator,
    apply_midrad,
    cached_assemble,
    integrate_product,
    integrate_product_midrad,
    project,
)

__all__ = [
    "ErrorBudget",
    "DiffusionResult",
    "BudgetInputs",
    "psi_hat_sup",
    "center_observable",
    "truncated_green_kubo",
    "kappa_closed_form",
    "kappa_bruteforce",
    "density_term_generic",
    "refined_tail",
    "budget_assemble",
    "density_inputs",
    "select_truncation",
    "certify_sigma2",
]

ZERO = Interval(0.0)
ONE = Interval(1.0)
TWO = Interval(2.0)


def psi_hat_sup(psi_sup: Interval) -> Interval:
    """|psi - mu|_inf <= 2 |psi|_inf: the constant used by every generic budget term."""
    return TWO * psi_sup


# ---------------------------------------------------------------------------
# Green-Kubo sum
# ---------------------------------------------------------------------------


def center_observable(psi_vec: BasisVector, h_eps: BasisVector, mesh: Mesh) -> tuple[BasisVector, Interval]:
    """Cell integrals of psi - mu and mu = int psi h_eps."""
    mu = integrate_product(psi_vec, h_eps, mesh)
    shift = mu * mesh.eps
    lo, hi = vsub(psi_vec.lo, psi_vec.hi, np.full(len(psi_vec), shift.lo), np.full(len(psi_vec), shift.hi))
    return BasisVector(lo, hi), mu


def truncated_green_kubo(
    P: UlamOperator,
    psi: Observable,
    h_eps: BasisVector,
    l_star: int,
    psi_vec: BasisVector | None = None,
    sq_vec: BasisVector | None = None,
) -> tuple[Interval, Interval, list[Interval]]:
    """(sigma^2_{eps,l}, mu_eps, correlation terms) in interval arithmetic.

    The products psi_hat * h_eps only enter through their cell integrals,
    since P_eps(phi h_eps) = P_eps(Pi(phi) h_eps) for step densities.
    """
    if l_star < 1:
        raise ValueError("l_star must be at least 1")
    mesh = P.mesh
    if psi_vec is None:
        psi_vec = project(psi, mesh)
    if sq_vec is None:
        sq_vec = project(psi.square(), mesh)
    psi_hat, mu = center_observable(psi_vec, h_eps, mesh)
    d = mesh.d
    # diag: sum_j q_j d (int psi^2 - 2 mu int psi + mu^2 eps) over I_j
    two_mu = TWO * mu
    mu2e = mu * mu * mesh.eps
    t_lo, t_hi = vmul(psi_vec.lo, psi_vec.hi, np.full(d, two_mu.lo), np.full(d, two_mu.hi))
    c_lo, c_hi = vsub(sq_vec.lo, sq_vec.hi, t_lo, t_hi)
    del t_lo, t_hi, sq_vec
    c_lo, c_hi = np.nextafter(c_lo + mu2e.lo, -np.inf), np.nextafter(c_hi + mu2e.hi, np.inf)
    diag = integrate_product(h_eps, BasisVector(c_lo, c_hi), mesh)
    diag = Interval(max(diag.lo, 0.0), diag.hi)
    del c_lo, c_hi
    u_lo, u_hi = vmul(h_eps.lo, h_eps.hi, psi_hat.lo, psi_hat.hi)
    um, ur = BasisVector(u_lo * d, u_hi * d).mid_rad()
    del u_lo, u_hi
    pm, pr = psi_hat.mid_rad()
    del psi_hat
    terms: list[Interval] = []
    acc = ZERO
    for _ in range(1, l_star):
        um, ur = apply_midrad(P, um, ur)
        t = integrate_product_midrad(um, ur, pm, pr, mesh)
        terms.append(t)
        acc = acc + t
    return diag + TWO * acc, mu, terms


# ---------------------------------------------------------------------------
# Generic a priori budget
# ---------------------------------------------------------------------------


def density_term_generic(psi_sup: Interval, l_star: int, density_err: Interval) -> Interval:
    """(16(l-1) + 8) |psi|^2 |q - h|_1."""
    return Interval(16.0 * (l_star - 1) + 8.0) * psi_sup * psi_sup * density_err


def _kappa_f(j: int, psi_sup: Interval, psi_var: Interval, alpha: Interval, B0: Interval) -> Interval:
    """Bound on |P^j(psi_hat h)|_BV."""
    s2 = psi_hat_sup(psi_sup)
    aj = iv_pow(alpha, j)
    return s2 * (lasota_yorke_B(alpha, B0, j) + ONE + aj * B0 / (ONE - alpha)) + aj * (
        B0 + ONE - alpha
    ) / (ONE - alpha) * psi_var


def kappa_bruteforce(
    psi_sup: Interval, psi_var: Interval, alpha: Interval, B0: Interval, gamma_eps: Interval, l_star: int
) -> Interval:
    """Direct double sum sum_{i=1}^{l-1} sum_{j<i} f(j), times 2|psi_hat| Gamma eps."""
    f = [_kappa_f(j, psi_sup, psi_var, alpha, B0) for j in range(max(l_star - 1, 0))]
    acc = ZERO
    for i in range(1, l_star):
        for j in range(i):
            acc = acc + f[j]
    return TWO * psi_hat_sup(psi_sup) * gamma_eps * acc


def kappa_closed_form(
    psi_sup: Interval, psi_var: Interval, alpha: Interval, B0: Interval, gamma_eps: Interval, l_star: int
) -> Interval:
    """The kappa double sum through geometric identities.

    With L = l - 1 the pair count for a given j is L - j, and
    f(j) = 2|psi| (1 + B0/(1 - alpha)) + alpha^j (B0 + 1 - alpha) V(psi)/(1 - alpha).
    """
    L = l_star - 1
    if L <= 0:
        return ZERO
    s2 = psi_hat_sup(psi_sup)
    one_a = ONE - alpha
    const = s2 * (ONE + B0 / one_a)
    geo = (B0 + ONE - alpha) / one_a * psi_var
    n_pairs = Interval(float(L) * (L + 1) / 2.0)
    weighted = (Interval(float(L)) - alpha * (ONE - iv_pow(alpha, L)) / one_a) / one_a
    return TWO * s2 * gamma_eps * (const * n_pairs + geo * weighted)


# ---------------------------------------------------------------------------
# Refined budget
# ---------------------------------------------------------------------------


@dataclass
class BudgetInputs:
    """Certified data of a run used by the refined budget."""

    mu: Interval
    abs_dev: Interval
    density_err: Interval
    R: Interval
    eps: Interval

    def centre(self) -> float:
        return self.mu.mid


def _sup_dev(psi: Observable, c_lo: float, c_hi: float) -> Interval:
    r = psi.range
    return Interval(0.0, max(up(r.hi - c_lo), up(c_hi - r.lo), 0.0))


def _refined_seeds(cert: DecayCertificate, psi: Observable, inp: BudgetInputs, count: int):
    """Bounds (V_j, L_j) on P^j((psi - mu_h) h), j < count."""
    alpha, B0 = cert.alpha, cert.B0
    c = inp.centre()
    s_c = _sup_dev(psi, c, c)
    D = _sup_dev(psi, inp.mu.lo, inp.mu.hi)
    dmu = s_c * inp.density_err
    vh = B0 / (ONE - alpha)
    L0 = Interval(0.0, min((inp.abs_dev + D * inp.density_err * Interval(0.5) + dmu).hi, (D + dmu).hi))
    V0 = (D + dmu) * vh + psi.var_bound * (ONE + vh)
    n1 = cert.n1
    seeds: list[tuple[Interval, Interval]] = []
    for j in range(count):
        v = iv_pow(alpha, j) * V0 + lasota_yorke_B(alpha, B0, j) * L0
        l1 = L0
        if j >= n1 and n1 > 0:
            pv, pl = seeds[j - n1]
            mv, ml = cert.M.apply(pv, pl)
            v = v if v.hi <= mv.hi else mv
            l1 = l1 if l1.hi <= ml.hi else ml
        seeds.append((Interval(0.0, v.hi), Interval(0.0, l1.hi)))
    return seeds, s_c, D, dmu


def refined_tail(cert: DecayCertificate, psi: Observable, inp: BudgetInputs, l_star: int) -> Interval:
    seeds, s_c, _, _ = _refined_seeds(cert, psi, inp, cert.n1)
    return TWO * s_c * block_l1_tail(cert, seeds, l_star)


def _refined_density_kappa(cert, psi, inp, l_star):
    seeds, s_c, D, dmu = _refined_seeds(cert, psi, inp, max(l_star - 1, cert.n1))
    E = inp.density_err
    diag = dmu * dmu + D * D * E * Interval(0.5)
    reach = Interval(min(float(l_star - 1), inp.R.hi))
    b1 = TWO * s_c * reach * (D * E + dmu)
    acc = ZERO
    for j in range(l_star - 1):
        v, l1 = seeds[j]
        acc = acc + Interval(float(l_star - 1 - j)) * ((ONE + cert.alpha) * v + cert.B0 * l1)
    b2 = TWO * s_c * inp.eps * acc
    return diag + b1, b2


# ---------------------------------------------------------------------------
# Budget assembly
# ---------------------------------------------------------------------------


@dataclass
class ErrorBudget:
    tail_term: Interval
    density_term: Interval
    kappa: Interval
    tau_split_k: int
    total: Interval
    generic: dict = field(default_factory=dict)
    refined: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tail_term": self.tail_term,
            "density_term": self.density_term,
            "kappa": self.kappa,
            "tau_split_k": self.tau_split_k,
            "total": self.total,
            "generic": self.generic,
            "refined": self.refined,
        }


def _upper(x: Interval) -> Interval:
    return Interval(0.0, max(x.hi, 0.0))


def budget_assemble(
    tmap: PiecewiseMap,
    mesh: Mesh,
    cert: DecayCertificate,
    density_err: Interval,
    psi: Observable,
    l_star: int,
    tau_split_k: int = 256,
    inputs: BudgetInputs | None = None,
) -> ErrorBudget:
    """Generic bounds, and the refined bounds when run data is supplied."""
    S, V = psi.sup_norm_bound, psi.var_bound
    ge = tmap.gamma_const * mesh.eps
    generic = {
        "tail": _upper(tail_bound(cert, S, V, l_star)),
        "density": _upper(density_term_generic(S, l_star, density_err)),
        "kappa": _upper(kappa_closed_form(S, V, tmap.ly_alpha, tmap.ly_B0, ge, l_star)),
    }
    tail, dens, kap = generic["tail"], generic["density"], generic["kappa"]
    refined: dict = {}
    if inputs is not None:
        refined = {"tail": _upper(refined_tail(cert, psi, inputs, l_star))}
        d_r, k_r = _refined_density_kappa(cert, psi, inputs, l_star)
        refined["density"], refined["kappa"] = _upper(d_r), _upper(k_r)
        tail = min(tail, refined["tail"], key=lambda x: x.hi)
        dens = min(dens, refined["density"], key=lambda x: x.hi)
        kap = min(kap, refined["kappa"], key=lambda x: x.hi)
    total = _upper(tail + dens + kap)
    return ErrorBudget(tail, dens, kap, tau_split_k, total, generic, refined)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class DiffusionResult:
    sigma2_eps_l: Interval
    sigma2_enclosure: Interval
    mu_eps: Interval
    budget: ErrorBudget
    l_star: int
    d: int
    d_cert: int
    tau: float
    tau_met: bool
    tail_share_met: bool
    certificate: DecayCertificate
    density: DensityResult
    timings: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    inputs: BudgetInputs | None = None

    def to_dict(self) -> dict:
        return {
            "sigma2_eps_l": self.sigma2_eps_l,
            "sigma2_enclosure": self.sigma2_enclosure,
            "mu_eps": self.mu_eps,
            "l_star": self.l_star,
            "d": self.d,
            "d_cert": self.d_cert,
            "tau": self.tau,
            "tau_met": self.tau_met,
            "tail_share_met": self.tail_share_met,
            "budget": self.budget.to_dict(),
            "notes": list(self.notes),
        }


def _abs_deviation(psi: Observable, psi_vec: BasisVector, q: BasisVector, mu: Interval, mesh: Mesh) -> Interval:
    """Upper bound on int |psi - mu| q.

    On each cell int |f| <= |int f| + eps V_cell(f), and the cell
    variations of psi add up to at most V(psi).
    """
    d = mesh.d
    sh = mu * mesh.eps
    lo, hi = vsub(psi_vec.lo, psi_vec.hi, np.full(d, sh.lo), np.full(d, sh.hi))
    mag = np.maximum(np.abs(lo), np.abs(hi))
    main = sum_upper(up(q.hi * mag)) * d
    qmax = float(np.max(q.hi)) * d
    extra = (Interval(up(qmax)) * mesh.eps * psi.var_bound).hi
    return Interval(0.0, float(up(up(main) + extra)))


def density_inputs(
    tmap: PiecewiseMap, P: UlamOperator, cert: DecayCertificate, psi: Observable
) -> tuple[DensityResult, BudgetInputs, BasisVector]:
    """Certified fixed vector on the mesh of P and the data the refined budget needs."""
    mesh = P.mesh
    dens = certify_density(tmap, P, cert)
    psi_vec = project(psi, mesh)
    mu = integrate_product(psi_vec, dens.h, mesh)
    inputs = BudgetInputs(mu, _abs_deviation(psi, psi_vec, dens.h, mu, mesh), dens.error, dens.R, mesh.eps)
    return dens, inputs, psi_vec


def select_truncation(cert: DecayCertificate, psi: Observable, inputs: BudgetInputs | None, share: float) -> int:
    """Smallest multiple of n1 whose tail bound, generic or refined, is at most share."""

    def tail_min(l: int) -> Interval:
        g = tail_bound(cert, psi.sup_norm_bound, psi.var_bound, l)
        if inputs is None:
            return g
        r = refined_tail(cert, psi, inputs, l)
        return g if g.hi <= r.hi else r

    return select_l_star(cert, tail_min, share)


def certify_sigma2(
    tmap: PiecewiseMap,
    psi: Observable,
    d: int,
    d_cert: int | None = None,
    tau: float = 0.035,
    tau_split_k: int = 256,
    alpha2_target: float = 1.0 / 64,
    n_max: int = 200,
    workers: int = 1,
    cache_dir: str | None = None,
    certificate: DecayCertificate | None = None,
    log=None,
) -> DiffusionResult:
    """The full pipeline: certificate, density, truncation length, Green-Kubo sum, budget."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not psi.is_polynomial:
        raise ValueError("the Green-Kubo sum needs polynomial observable pieces")
    say = log or (lambda msg: None)
    timings: dict = {}
    mesh = Mesh(d)
    if d_cert is None:
        d_cert = min(d, 1 << 14)
    t0 = time.perf_counter()
    if certificate is None:
        P_cert = cached_assemble(tmap, Mesh(d_cert), cache_dir, workers)
        contraction = certify_contraction(P_cert, alpha2_target, n_max, workers=workers)
        certificate = make_certificate(tmap, contraction)
        del P_cert
    timings["certificate"] = time.perf_counter() - t0
    say(f"certificate: n1={certificate.n1} alpha2={certificate.alpha2.hi:.3g} rho*={certificate.rho_star.hi:.4g}")

    t0 = time.perf_counter()
    P = cached_assemble(tmap, mesh, cache_dir, workers)
    timings["assembly"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    dens, inputs, psi_vec = density_inputs(tmap, P, certificate, psi)
    timings["density"] = time.perf_counter() - t0
    say(f"density: |q - h|_1 <= {dens.error.hi:.3g} (R <= {dens.R.hi:.3g}, {dens.R_method})")

    share = tau / tau_split_k
    l_star = select_truncation(certificate, psi, inputs, share)
    guess = closed_form_l_guess(certificate, psi.sup_norm_bound, psi.var_bound, tau)
    say(f"l* = {l_star} (closed-form guess {guess})")

    t0 = time.perf_counter()
    s2, mu_gk, _ = truncated_green_kubo(P, psi, dens.h, l_star, psi_vec)
    timings["green_kubo"] = time.perf_counter() - t0
    budget = budget_assemble(tmap, mesh, certificate, dens.error, psi, l_star, tau_split_k, inputs)
    enclosure = Interval(s2.lo, s2.hi) + Interval(-budget.total.hi, budget.total.hi)
    tail_ok = budget.tail_term.hi <= share
    notes = []
    if budget.total.hi > tau:
        notes.append("budget exceeds tau: a finer mesh is advised")
    if enclosure.lo <= 0:
        notes.append("enclosure reaches zero: the observable may be a coboundary")
    return DiffusionResult(
        s2,
        enclosure,
        mu_gk,
        budget,
        l_star,
        d,
        d_cert,
        tau,
        budget.total.hi <= tau and tail_ok,
        tail_ok,
        certificate,
        dens,
        timings,
        notes,
        inputs,
    )
