"""Certified decay of the transfer operator on zero-mean BV functions.

The contraction of the discretized operator on zero-mean step vectors is
measured rigorously, then transferred to the true operator through a 2x2
inequality system acting on (variation, L1) pairs:

    (V(P^n g), |P^n g|_1) <= M (V g, |g|_1)   componentwise, g in BV_0.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .map_model import PiecewiseMap
from .rigor import Interval, gamma, iv_pow, iv_sqrt, sum_upper, up
from .ulam import Mesh, UlamOperator

__all__ = [
    "CertificationError",
    "NoSpectralGapError",
    "ContractionResult",
    "IMat2",
    "NormPair",
    "DecayCertificate",
    "certify_contraction",
    "lasota_yorke_B",
    "lasota_yorke_B_sum",
    "perturbation_coefficients",
    "build_M",
    "dominant_eigen",
    "make_certificate",
    "tail_bound",
    "block_l1_tail",
    "select_l_star",
    "closed_form_l_guess",
]

ZERO = Interval(0.0)
ONE = Interval(1.0)


class CertificationError(RuntimeError):
    """Contraction could not be certified within the allowed iterations."""

    def __init__(self, message: str, best_alpha2: float | None = None):
        super().__init__(message)
        self.best_alpha2 = best_alpha2


class NoSpectralGapError(RuntimeError):
    """The norm system does not contract (spectral radius >= 1)."""


# ---------------------------------------------------------------------------
# Contraction of the discretized operator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContractionResult:
    n1: int
    alpha2: Interval
    alpha2_target: Interval
    step_norms: tuple[float, ...]
    mesh_d: int

    def as_tuple(self) -> tuple[int, Interval]:
        return self.n1, self.alpha2


def _batch_norms(P: UlamOperator, j0: int, j1: int, target: float, n_max: int) -> tuple[int | None, list[float]]:
    """Iterate the generators e_j - u, j in [j0, j1), with rigorous L1 bounds.

    Returns the first step at which every column is certified below target
    (None if n_max is reached) and the batch maxima of the running-minimum
    bounds for steps 0..stop.
    """
    d = P.d
    cols = j1 - j0
    W = np.full((d, cols), -1.0 / d)
    W[np.arange(j0, j1), np.arange(cols)] += 1.0
    err = np.zeros(cols)
    g_norm = gamma(max(d, 2))
    best = np.full(cols, np.inf)
    history: list[float] = []
    for n in range(n_max + 1):
        norms = np.abs(W).sum(axis=0)
        norms_up = up(norms * (1.0 + 2.0 * g_norm))
        bound = up(norms_up + err)
        best = np.minimum(best, bound)
        history.append(float(best.max()))
        if history[-1] <= target:
            return n, history
        if n == n_max:
            break
        err = up(err + P.step_error(norms_up))
        W = P.float_left_mul(W)
    return None, history


def certify_contraction(
    P: UlamOperator,
    alpha2_target: Interval | float,
    n_max: int = 200,
    batch: int | None = None,
    workers: int = 1,
) -> ContractionResult:
    """Smallest n1 <= n_max with |P^n1 v|_1 <= alpha2 |v|_1 on zero-mean vectors.

    Every zero-mean vector v equals sum_j v_j (e_j - u) with u uniform, so
    max_j |P^n (e_j - u)|_1 bounds the operator norm on that subspace.  Each
    generator is iterated in floating point with an accumulated rigorous
    bound on the deviation from the exact interval operator.  The returned
    alpha2 is the certified norm at n1, never above the target.
    """
    target = alpha2_target.hi if isinstance(alpha2_target, Interval) else float(alpha2_target)
    target_iv = alpha2_target if isinstance(alpha2_target, Interval) else Interval(target)
    if target >= 1.0 or n_max == 0:
        return ContractionResult(0, ONE, target_iv, (1.0,), P.d)
    d = P.d
    if batch is None:
        batch = max(1, min(d, (1 << 23) // d))
    spans = [(j, min(j + batch, d)) for j in range(0, d, batch)]

    def run(span):
        return _batch_norms(P, span[0], span[1], target, n_max)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, spans))
    else:
        results = [run(s) for s in spans]
    failed = [h for stop, h in results if stop is None]
    if failed:
        best = max(min(h) for h in failed)
        raise CertificationError(
            f"no n1 <= {n_max} certifies alpha2 <= {target} (best certified norm {best:.6g})", min(best, 1.0)
        )
    n1 = max(stop for stop, _ in results)
    norms = []
    for n in range(n1 + 1):
        # A batch that stopped early keeps its last bound: norms never grow.
        worst = max(h[min(n, len(h) - 1)] for _, h in results)
        norms.append(min(worst, 1.0))
    return ContractionResult(n1, Interval(norms[n1]), target_iv, tuple(norms), d)


# ---------------------------------------------------------------------------
# Lasota-Yorke bookkeeping
# ---------------------------------------------------------------------------


def lasota_yorke_B(alpha: Interval, B0: Interval, n: int) -> Interval:
    """B_n = B0 (1 + alpha + ... + alpha^(n-1)), so V(P^n f) <= alpha^n V f + B_n |f|_1."""
    return B0 * (ONE - iv_pow(alpha, n)) / (ONE - alpha)


def lasota_yorke_B_sum(alpha: Interval, B0: Interval, n: int) -> Interval:
    """Sum of B_j for j = 0..n-1."""
    an = iv_pow(alpha, n)
    geo = (ONE - an) / (ONE - alpha)
    return B0 / (ONE - alpha) * (Interval(float(n)) - geo).max0()


def perturbation_coefficients(alpha: Interval, B0: Interval, n: int) -> tuple[Interval, Interval]:
    """(c1, c2) with |(P^n - P_eps^n) f|_1 <= eps (c1 V f + c2 |f|_1).

    Telescoping P^n - P_eps^n = sum_j P_eps^(n-1-j) (P - P_eps) P^j with
    |(P - P_eps) g|_1 <= eps ((1 + alpha) V g + B0 |g|_1).
    """
    if n <= 0:
        return ZERO, ZERO
    c1 = (ONE + alpha) * (ONE - iv_pow(alpha, n)) / (ONE - alpha)
    c2 = B0 * Interval(float(n)) + (ONE + alpha) * lasota_yorke_B_sum(alpha, B0, n)
    return c1, c2


# ---------------------------------------------------------------------------
# 2x2 interval algebra
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IMat2:
    m11: Interval
    m12: Interval
    m21: Interval
    m22: Interval

    @classmethod
    def identity(cls) -> "IMat2":
        return cls(ONE, ZERO, ZERO, ONE)

    def entries(self) -> tuple[tuple[Interval, Interval], tuple[Interval, Interval]]:
        return ((self.m11, self.m12), (self.m21, self.m22))

    def __matmul__(self, other: "IMat2") -> "IMat2":
        return IMat2(
            self.m11 * other.m11 + self.m12 * other.m21,
            self.m11 * other.m12 + self.m12 * other.m22,
            self.m21 * other.m11 + self.m22 * other.m21,
            self.m21 * other.m12 + self.m22 * other.m22,
        )

    def apply(self, v: Interval, l: Interval) -> tuple[Interval, Interval]:
        return self.m11 * v + self.m12 * l, self.m21 * v + self.m22 * l

    def power(self, k: int) -> "IMat2":
        out = IMat2.identity()
        base = self
        while k:
            if k & 1:
                out = out @ base
            base = base @ base
            k >>= 1
        return out

    def resolvent(self) -> "IMat2":
        """(I - M)^-1 for a nonnegative matrix of spectral radius below one."""
        a, b, c, e = ONE - self.m11, self.m12, self.m21, ONE - self.m22
        det = a * e - b * c
        if det.lo <= 0 or a.lo <= 0 or e.lo <= 0:
            raise NoSpectralGapError("I - M is not certified invertible with a nonnegative inverse")
        return IMat2(e / det, b / det, c / det, a / det)

    def nonnegative(self) -> bool:
        return all(x.lo >= 0 for x in (self.m11, self.m12, self.m21, self.m22))

    def to_lists(self) -> list[list[Interval]]:
        return [[self.m11, self.m12], [self.m21, self.m22]]


@dataclass(frozen=True)
class NormPair:
    """Bounds on a (BV or variation, L1) pair of norms."""

    bv: Interval
    l1: Interval


def build_M(tmap: PiecewiseMap, cert: tuple[int, Interval] | ContractionResult, mesh: Mesh) -> IMat2:
    """Norm system for P^n1 on BV_0 in (variation, L1) coordinates.

    Row 1 is the iterated Lasota-Yorke inequality.  Row 2 combines the
    discrete contraction |P_eps^n1 g|_1 <= alpha2 |g|_1 with the bound on
    |(P^n1 - P_eps^n1) g|_1.
    """
    n1, alpha2 = cert.as_tuple() if isinstance(cert, ContractionResult) else cert
    alpha, B0 = tmap.ly_alpha, tmap.ly_B0
    eps = mesh.eps
    c1, c2 = perturbation_coefficients(alpha, B0, n1)
    return IMat2(
        iv_pow(alpha, n1),
        lasota_yorke_B(alpha, B0, n1),
        eps * c1,
        alpha2 + eps * c2,
    )


@dataclass(frozen=True)
class EigenData:
    rho: Interval
    a: Interval
    b: Interval
    a_cert: float
    b_cert: float
    rho_cert: float


def dominant_eigen(M: IMat2) -> EigenData:
    """Dominant eigenvalue and left eigenvector (a, b), a + b = 1.

    Besides the enclosures, a concrete vector (a_cert, b_cert) is chosen and
    rho_cert is certified so that (a_cert, b_cert) M <= rho_cert (a_cert, b_cert).
    """
    if not M.nonnegative():
        raise ValueError("norm system must be entrywise nonnegative")
    diff = M.m11 - M.m22
    disc = diff * diff + Interval(4.0) * M.m12 * M.m21
    rho = (M.m11 + M.m22 + iv_sqrt(disc.max0())) * Interval(0.5)
    if M.m21.lo > 0:
        t = (rho - M.m11).max0()
        den = t + M.m21
        a, b = M.m21 / den, t / den
    elif M.m12.lo > 0:
        t = (rho - M.m22).max0()
        den = t + M.m12
        a, b = t / den, M.m12 / den
    elif M.m11.lo >= M.m22.hi:
        a, b = ONE, ZERO
    elif M.m22.lo >= M.m11.hi:
        a, b = ZERO, ONE
    else:
        a, b = Interval(0.0, 1.0), Interval(0.0, 1.0)
    a = a.intersect(Interval(0.0, 1.0)) if a.intersects(Interval(0.0, 1.0)) else a
    b = b.intersect(Interval(0.0, 1.0)) if b.intersects(Interval(0.0, 1.0)) else b
    a0, b0 = a.mid, b.mid
    if a0 + b0 <= 0:
        a0, b0 = 0.5, 0.5
    ratios = []
    va, vb = Interval(a0), Interval(b0)
    col1 = va * M.m11 + vb * M.m21
    col2 = va * M.m12 + vb * M.m22
    for comp, w in ((col1, va), (col2, vb)):
        if w.lo > 0:
            ratios.append((comp / w).hi)
        elif comp.hi > 0:
            ratios.append(math.inf)
    rho_cert = max([rho.hi] + ratios)
    return EigenData(rho, a, b, a0, b0, rho_cert)


@dataclass
class DecayCertificate:
    n1: int
    alpha2: Interval
    alpha2_target: Interval
    cert_mesh_d: int
    M: IMat2
    rho_star: Interval
    a: Interval
    b: Interval
    C_star: Interval
    a_cert: float
    b_cert: float
    step_norms: tuple[float, ...]
    alpha: Interval
    B0: Interval
    eps: Interval
    extras: dict = field(default_factory=dict)

    @property
    def rho_hi(self) -> float:
        return self.rho_star.hi

    def to_dict(self) -> dict:
        return {
            "n1": self.n1,
            "alpha2": self.alpha2,
            "alpha2_target": self.alpha2_target,
            "cert_mesh_d": self.cert_mesh_d,
            "M": self.M.to_lists(),
            "rho_star": self.rho_star,
            "a": self.a,
            "b": self.b,
            "C_star": self.C_star,
            "step_norms": list(self.step_norms),
            "ly_alpha": self.alpha,
            "ly_B0": self.B0,
            **self.extras,
        }


def make_certificate(tmap: PiecewiseMap, contraction: ContractionResult) -> DecayCertificate:
    mesh = Mesh(contraction.mesh_d)
    M = build_M(tmap, contraction, mesh)
    eig = dominant_eigen(M)
    if eig.rho_cert >= 1.0 or eig.rho.hi >= 1.0:
        raise NoSpectralGapError(f"dominant eigenvalue of the norm system is not below 1 (<= {eig.rho_cert})")
    if eig.b_cert <= 0:
        raise NoSpectralGapError("left eigenvector has no L1 component")
    c_star = ONE / Interval(eig.b_cert)
    rho = Interval(eig.rho.lo, eig.rho_cert)
    return DecayCertificate(
        contraction.n1,
        contraction.alpha2,
        contraction.alpha2_target,
        contraction.mesh_d,
        M,
        rho,
        eig.a,
        eig.b,
        c_star,
        eig.a_cert,
        eig.b_cert,
        contraction.step_norms,
        tmap.ly_alpha,
        tmap.ly_B0,
        mesh.eps,
    )


# ---------------------------------------------------------------------------
# Tails and truncation length
# ---------------------------------------------------------------------------


def centered_product_bv(psi_sup: Interval, psi_var: Interval, alpha: Interval, B0: Interval) -> Interval:
    """A priori bound (2|psi| + V psi)(B0 + 1 - alpha)/(1 - alpha) on |psi_hat h|_BV.

    The same bound holds for every P^r(psi_hat h), since the Lasota-Yorke
    inequality keeps it invariant.
    """
    return (Interval(2.0) * psi_sup + psi_var) * (B0 + ONE - alpha) / (ONE - alpha)


def tail_bound(
    cert: DecayCertificate, psi_sup: Interval, psi_var: Interval, l: int
) -> Interval:
    """4|psi| |psi_hat h|_BV (1/b) n1 rho^k / (1 - rho), for l = k n1.

    l is rounded up to the next multiple of n1.
    """
    if cert.n1 == 0:
        raise ValueError("certificate with n1 = 0 has no decay")
    k = max(1, -(-l // cert.n1))
    bv = centered_product_bv(psi_sup, psi_var, cert.alpha, cert.B0)
    rho = Interval(0.0, cert.rho_star.hi)
    geo = iv_pow(rho, k) / (ONE - rho)
    return Interval(4.0) * psi_sup * bv * cert.C_star * Interval(float(cert.n1)) * geo


def block_l1_tail(cert: DecayCertificate, seeds: Sequence[tuple[Interval, Interval]], l: int) -> Interval:
    """Bound on sum_{i >= l} |P^i g|_1 from seeds (V, L) >= (V(P^r g), |P^r g|_1), r < n1.

    Writes i = q n1 + r and sums the powers M^q in closed form:
    sum_{q >= q0} M^q = M^q0 (I - M)^-1.
    """
    n1 = cert.n1
    if len(seeds) != n1:
        raise ValueError("one seed per residue class is required")
    res = cert.M.resolvent()
    total = ZERO
    for r, (v, l1) in enumerate(seeds):
        q0 = max(0, -(-(l - r) // n1))
        S = cert.M.power(q0) @ res
        total = total + S.apply(v, l1)[1]
    return total


def closed_form_l_guess(cert: DecayCertificate, psi_sup: Interval, psi_var: Interval, tau: float) -> int | None:
    """Closed-form estimate of the truncation length (a multiple of n1), for reporting only."""
    rho = cert.rho_star.hi
    if rho <= 0:
        return cert.n1
    a, b0 = cert.alpha.mid, cert.B0.mid
    s, v = psi_sup.hi, psi_var.hi
    num = 4 * s * (2 * s + v) * (b0 + 1 - a) / ((1 - a) * (1 - rho)) * cert.C_star.hi
    try:
        k = math.ceil((math.log(tau / 2) - math.log(num)) / math.log(rho))
        return max(1, k) * cert.n1
    except ValueError:
        return None


def select_l_star(
    cert: DecayCertificate,
    tail: Callable[[int], Interval],
    tau_share: Interval | float,
    k_max: int = 10_000,
) -> int:
    """Smallest multiple of n1 whose certified tail is at most tau_share."""
    share = tau_share.lo if isinstance(tau_share, Interval) else float(tau_share)
    if share <= 0:
        raise ValueError("tau share must be positive")
    for k in range(1, k_max + 1):
        l = k * cert.n1
        if tail(l).hi <= share:
            return l
    raise CertificationError(f"tail did not fall below {share} within {k_max} blocks")
