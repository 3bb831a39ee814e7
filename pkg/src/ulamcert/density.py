"""Certified invariant density of the Ulam operator and its distance to the true one.

A floating fixed vector q of P_eps is computed by power iteration.  Its
quality is certified from the residual |q - q P_eps|_1 alone, through a
resolvent bound R on zero-mean step vectors:

    |g|_1 <= R |g - g P_eps|_1   for every zero-mean step vector g.

With h the true invariant density, V(h) <= B0/(1 - alpha) and
|f - Pi f|_1 <= eps V(f), this yields

    |h_eps - h|_1 <= (1 + R) eps V(h),
    |q - h|_1     <= R |q - q P_eps|_1 + (1 + R) eps V(h).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .decay import (
    ContractionResult,
    DecayCertificate,
    IMat2,
    NoSpectralGapError,
    certify_contraction,
    lasota_yorke_B,
    perturbation_coefficients,
)
from .map_model import PiecewiseMap
from .rigor import Interval, iv_pow, sum_upper, up, vsum
from .ulam import BasisVector, Mesh, UlamOperator

__all__ = [
    "DensityResult",
    "PowerIteration",
    "power_iteration",
    "fixed_point",
    "fixpoint_residual",
    "perturbed_iterate_bound",
    "density_variation_bound",
    "resolvent_direct",
    "resolvent_fine",
    "certified_density_error",
    "certify_density",
]

ZERO = Interval(0.0)
ONE = Interval(1.0)

# Meshes up to this size get their own contraction certificate for R.
DIRECT_LIMIT = 1 << 14


@dataclass
class PowerIteration:
    w: np.ndarray
    iterations: int
    float_residual: float


def power_iteration(P: UlamOperator, tol: float = 1e-14, max_iter: int = 1000) -> PowerIteration:
    """Floating power iteration for the fixed vector, started at the uniform vector."""
    w = np.full(P.d, 1.0 / P.d)
    res = math.inf
    it = 0
    while it < max_iter:
        nxt = P.float_left_mul(w)
        nxt /= nxt.sum()
        res = float(np.abs(nxt - w).sum())
        w = nxt
        it += 1
        if res < tol:
            break
    return PowerIteration(w, it, res)


def fixed_point(P: UlamOperator, iters: int = 1000, tol: float = 1e-14) -> BasisVector:
    """Enclosure of q = w / sum(w) for the floating fixed vector w."""
    w = power_iteration(P, tol, iters).w
    return _normalized(w)


def _normalized(w: np.ndarray) -> BasisVector:
    s = vsum(w, w)
    if s.lo <= 0:
        raise ValueError("fixed vector has no positive mass")
    lo = np.nextafter(w / s.hi, -np.inf)
    hi = np.nextafter(w / s.lo, np.inf)
    return BasisVector(np.maximum(lo, 0.0), hi)


def fixpoint_residual(P: UlamOperator, w: np.ndarray) -> Interval:
    """Upper bound on |q - q P_eps|_1 for q = w / sum(w), any P in the enclosure."""
    if np.any(w < 0):
        raise ValueError("fixed vector must be nonnegative")
    s = vsum(w, w)
    diff = np.abs(P.float_left_mul(w) - w)
    raw = up(sum_upper(up(diff)) + P.step_error(sum_upper(w)))
    return Interval(0.0, float(up(raw / s.lo)))


def perturbed_iterate_bound(tmap: PiecewiseMap, mesh: Mesh, n: int, f_bv: Interval, f_l1: Interval) -> Interval:
    """Upper bound on |(P^n - P_eps^n) f|_1 given V(f) <= f_bv and |f|_1 <= f_l1."""
    if n < 1:
        raise ValueError("n must be at least 1")
    c1, c2 = perturbation_coefficients(tmap.ly_alpha, tmap.ly_B0, n)
    out = mesh.eps * (c1 * f_bv + c2 * f_l1)
    return Interval(0.0, out.hi)


def density_variation_bound(tmap: PiecewiseMap) -> Interval:
    """V(h) <= B0 / (1 - alpha) for the normalized invariant density h."""
    return tmap.ly_B0 / (ONE - tmap.ly_alpha)


def resolvent_direct(step_norms) -> tuple[Interval, int]:
    """min over n of sum_{i<n} C_i / (1 - C_n), with C_i certified norms of P_eps^i on BV_0."""
    best, best_n = None, 0
    acc = ZERO
    for n, c in enumerate(step_norms):
        if n >= 1 and c < 1.0:
            r = acc / (ONE - Interval(c))
            if best is None or r.hi < best.hi:
                best, best_n = r, n
        acc = acc + Interval(min(c, 1.0) if n else 1.0)
    if best is None:
        raise NoSpectralGapError("no step norm below one: resolvent bound unavailable")
    return Interval(0.0, best.hi), best_n


def _fine_system(cert: DecayCertificate, eps_f: Interval) -> IMat2:
    n1 = cert.n1
    c1, c2 = perturbation_coefficients(cert.alpha, cert.B0, n1)
    e = cert.eps + eps_f
    return IMat2(cert.M.m11, cert.M.m12, e * c1, cert.alpha2 + e * c2)


def _fine_R_float(alpha, B0, N21, N22, n1, two_d, m):
    total = float(m)
    for r in range(n1):
        j = m + r
        total += N21 * (alpha**j * two_d + B0 * (1 - alpha**j) / (1 - alpha)) + N22
    return total


def resolvent_fine(cert: DecayCertificate, mesh: Mesh, m_max: int | None = None) -> tuple[Interval, int]:
    """Resolvent bound for the Ulam operator on any mesh from the coarse certificate.

    For a zero-mean step vector g with |g|_1 = 1 the first m iterates cost at
    most m.  Beyond that, P_f^(m+r) g has variation at most
    alpha^(m+r) 2d + B_(m+r); the blocks of n1 steps are then summed with
    N = (I - M_f)^-1, where M_f is the norm system with the coarse
    contraction and the perturbation of both meshes.
    """
    if cert.n1 == 0:
        raise NoSpectralGapError("certificate has no contraction")
    Mf = _fine_system(cert, mesh.eps)
    N = Mf.resolvent()
    n1 = cert.n1
    two_d = Interval(2.0 * mesh.d)
    a_f, b_f = cert.alpha.hi, cert.B0.hi
    n21, n22 = N.m21.hi, N.m22.hi
    if m_max is None:
        m_max = 40 * n1 + int(math.log2(mesh.d) / max(-math.log2(a_f), 1e-3)) + 1
    best_m, best = 0, math.inf
    for m in range(0, m_max + 1):
        if m > best:
            break
        val = _fine_R_float(a_f, b_f, n21, n22, n1, 2.0 * mesh.d, m)
        if val < best:
            best, best_m = val, m
    total = Interval(float(best_m))
    for r in range(n1):
        j = best_m + r
        seed_v = iv_pow(cert.alpha, j) * two_d + lasota_yorke_B(cert.alpha, cert.B0, j)
        total = total + N.m21 * seed_v + N.m22
    return Interval(0.0, total.hi), best_m


@dataclass
class DensityResult:
    d: int
    h: BasisVector
    iterations: int
    float_residual: float
    residual: Interval
    R: Interval
    R_method: str
    V_h: Interval
    heps_error: Interval
    error: Interval
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "iterations": self.iterations,
            "float_residual": self.float_residual,
            "residual": self.residual,
            "resolvent_bound": self.R,
            "resolvent_method": self.R_method,
            "density_variation": self.V_h,
            "heps_minus_h_l1": self.heps_error,
            "q_minus_h_l1": self.error,
            "mass": self.h.total(),
            **self.extras,
        }


def certified_density_error(
    tmap: PiecewiseMap,
    mesh: Mesh,
    decay: DecayCertificate | None,
    residual: Interval,
    direct: ContractionResult | None = None,
) -> tuple[Interval, Interval, Interval, str]:
    """(|q - h|_1, |h_eps - h|_1, R, method) from the certified residual of q."""
    candidates = []
    if direct is not None:
        if direct.mesh_d != mesh.d:
            raise ValueError("direct contraction certificate belongs to another mesh")
        R, n = resolvent_direct(direct.step_norms)
        candidates.append((R, f"direct(n={n})"))
    if decay is not None:
        if decay.rho_star.hi >= 1:
            raise NoSpectralGapError("decay certificate is invalid: rho* >= 1")
        try:
            R, m = resolvent_fine(decay, mesh)
            candidates.append((R, f"norm-system(m={m})"))
        except NoSpectralGapError:
            pass
    if not candidates:
        raise NoSpectralGapError("no certificate available to bound the resolvent")
    R, method = min(candidates, key=lambda c: c[0].hi)
    vh = density_variation_bound(tmap)
    heps = (ONE + R) * mesh.eps * vh
    err = R * residual + heps
    return Interval(0.0, err.hi), Interval(0.0, heps.hi), R, method


def certify_density(
    tmap: PiecewiseMap,
    P: UlamOperator,
    decay: DecayCertificate | None,
    direct: ContractionResult | None = None,
    tol: float = 1e-14,
    max_iter: int | None = None,
    direct_target: float = 1.0 / 64,
) -> DensityResult:
    """Fixed vector, residual and certified L1 distance to the true density.

    When no direct certificate is given and the mesh is small enough, one is
    computed on the spot.
    """
    mesh = P.mesh
    if direct is None and mesh.d <= DIRECT_LIMIT:
        if decay is not None and decay.cert_mesh_d == mesh.d:
            direct = ContractionResult(decay.n1, decay.alpha2, decay.alpha2_target, decay.step_norms, mesh.d)
        else:
            direct = certify_contraction(P, direct_target, n_max=400)
    if max_iter is None:
        n1 = decay.n1 if decay is not None else (direct.n1 if direct is not None else 100)
        max_iter = max(10 * n1, 50)
    pi = power_iteration(P, tol, max_iter)
    residual = fixpoint_residual(P, pi.w)
    err, heps, R, method = certified_density_error(tmap, mesh, decay, residual, direct)
    return DensityResult(
        mesh.d,
        _normalized(pi.w),
        pi.iterations,
        pi.float_residual,
        residual,
        R,
        method,
        density_variation_bound(tmap),
        heps,
        err,
    )
