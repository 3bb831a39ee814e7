import functools
from fractions import Fraction

import numpy as np
import pytest

from conftest import get_map, get_operator
from ulamcert.decay import (
    CertificationError,
    IMat2,
    NoSpectralGapError,
    block_l1_tail,
    build_M,
    certify_contraction,
    dominant_eigen,
    lasota_yorke_B,
    lasota_yorke_B_sum,
    make_certificate,
    perturbation_coefficients,
    select_l_star,
    tail_bound,
)
from ulamcert.density import perturbed_iterate_bound
from ulamcert.rigor import Interval
from ulamcert.ulam import BasisVector, Mesh, apply


@functools.lru_cache(maxsize=None)
def certificate(name, exponent, target=1 / 64):
    P = get_operator(name, exponent)
    return make_certificate(get_map(name), certify_contraction(P, target))


def test_lanford_contraction_small_mesh():
    c = certify_contraction(get_operator("lanford", 10), 1 / 64)
    assert c.n1 == 21
    assert c.alpha2.hi <= 1 / 64
    assert c.step_norms[0] == 1.0
    assert all(a >= b for a, b in zip(c.step_norms, c.step_norms[1:]))


def test_doubling_contraction_reaches_uniform_spread():
    c = certify_contraction(get_operator("doubling", 10), 1e-12)
    assert c.n1 == 10
    assert c.alpha2.hi < 1e-12


@pytest.mark.parametrize("name", ["doubling", "lanford"])
def test_step_norms_bound_exact_norms(name):
    # Dense floating oracle on a small mesh for the generators e_j - u.
    P = get_operator(name, 5)
    d = P.d
    c = certify_contraction(P, 1 / 4, n_max=60)
    dense = np.zeros((d, d))
    for k in range(d):
        for j, iv in P.row(k):
            dense[k, j] += iv.mid
    W = np.eye(d) - 1.0 / d
    for n, bound in enumerate(c.step_norms):
        # P is an L1 contraction, so the certified norms are capped at 1.
        assert min(np.abs(W).sum(axis=1).max(), 1.0) <= bound * (1 + 1e-9) + 1e-12
        W = W @ dense


def test_contraction_is_independent_of_workers():
    P = get_operator("lanford", 10)
    a = certify_contraction(P, 1 / 64, batch=100)
    b = certify_contraction(P, 1 / 64, batch=100, workers=4)
    assert a == b
    # Another batching stops its batches elsewhere but certifies the same n1.
    c = certify_contraction(P, 1 / 64)
    assert c.n1 == a.n1 and c.alpha2.hi <= 1 / 64


def test_contraction_failure_reports_best():
    with pytest.raises(CertificationError) as err:
        certify_contraction(get_operator("lanford", 10), 1 / 64, n_max=5)
    assert err.value.best_alpha2 is not None and err.value.best_alpha2 > 1 / 64


def test_lasota_yorke_bookkeeping_matches_rationals():
    a, b0 = Fraction(2, 3), Fraction(4, 9)
    alpha, B0 = Interval.exact(a), Interval.exact(b0)
    for n in (1, 5, 28):
        Bn = b0 * sum(a**k for k in range(n))
        assert lasota_yorke_B(alpha, B0, n).contains(Bn)
        Bsum = sum(b0 * sum(a**k for k in range(j)) for j in range(n))
        assert lasota_yorke_B_sum(alpha, B0, n).contains(Bsum)
        c1, c2 = perturbation_coefficients(alpha, B0, n)
        assert c1.contains((1 + a) * sum(a**j for j in range(n)))
        assert c2.contains(n * b0 + (1 + a) * Bsum)


def test_norm_system_entries():
    tmap = get_map("lanford")
    M = build_M(tmap, (28, Interval(1 / 64)), Mesh(1 << 14))
    a = Fraction(2, 3)
    assert Fraction(M.m11.hi) >= a**28 and M.m11.hi / float(a**28) - 1 < 1e-12
    assert abs(M.m12.mid - float(Fraction(4, 3) * (1 - a**28))) < 1e-3
    assert M.m21.hi < 1e-3 and M.m22.lo > 1 / 64


def _charpoly(x: Fraction, entries) -> Fraction:
    m11, m12, m21, m22 = entries
    return x * x - (m11 + m22) * x + (m11 * m22 - m12 * m21)


@pytest.mark.parametrize(
    "entries",
    [
        (Fraction(1, 2), Fraction(1, 4), Fraction(1, 4), Fraction(1, 2)),  # rho = 3/4
        (Fraction(1, 10), Fraction(3, 1), Fraction(1, 50), Fraction(1, 5)),
        (Fraction(1, 1000), Fraction(13, 3), Fraction(3, 10000), Fraction(3, 100)),
        (Fraction(2, 5), Fraction(0), Fraction(1, 7), Fraction(1, 3)),
    ],
)
def test_dominant_eigen_against_rational_oracle(entries):
    M = IMat2(*(Interval.exact(e) for e in entries))
    eig = dominant_eigen(M)
    m11, m12, m21, m22 = entries
    # The dominant root is the larger zero of the characteristic polynomial.
    assert Fraction(eig.rho.lo) >= (m11 + m22) / 2
    assert _charpoly(Fraction(eig.rho.lo), entries) <= 0 <= _charpoly(Fraction(eig.rho.hi), entries)
    assert eig.rho.width < 1e-12
    if entries[0] == Fraction(1, 2):
        assert eig.rho.contains(Fraction(3, 4))
        assert eig.a.contains(Fraction(1, 2)) and eig.b.contains(Fraction(1, 2))
    a0, b0, r = Fraction(eig.a_cert), Fraction(eig.b_cert), Fraction(eig.rho_cert)
    assert a0 * m11 + b0 * m21 <= r * a0
    assert a0 * m12 + b0 * m22 <= r * b0


def test_resolvent_needs_a_gap():
    with pytest.raises(NoSpectralGapError):
        IMat2(Interval(0.5), Interval(1.0), Interval(1.0), Interval(0.5)).resolvent()
    R = IMat2(Interval(0.5), Interval(0.0), Interval(0.0), Interval(0.5)).resolvent()
    assert R.m11.contains(2) and R.m22.contains(2)


def test_power_matches_repeated_product():
    M = IMat2(Interval(0.1), Interval(2.0), Interval(0.01), Interval(0.2))
    P = IMat2.identity()
    for _ in range(7):
        P = P @ M
    Q = M.power(7)
    for x, y in zip((P.m11, P.m12, P.m21, P.m22), (Q.m11, Q.m12, Q.m21, Q.m22)):
        assert x.intersects(y)


def test_lanford_certificate_at_small_mesh():
    cert = certificate("lanford", 10)
    assert cert.rho_star.hi < 1
    assert cert.M.nonnegative()
    assert cert.C_star.lo >= 1


def _variation(v: BasisVector, d: int) -> float:
    dens_lo, dens_hi = v.lo * d, v.hi * d
    return float(np.maximum(np.abs(dens_hi[1:] - dens_lo[:-1]), np.abs(dens_lo[1:] - dens_hi[:-1])).sum())


@pytest.mark.parametrize("name,target", [("lanford", 1 / 64), ("doubling", 1e-12)])
def test_decay_inequality_spot_check(name, target):
    tmap = get_map(name)
    P = get_operator(name, 10)
    cert = certificate(name, 10, target)
    mesh = P.mesh
    d = P.d
    rng = np.random.default_rng(2024)
    for _ in range(20):
        cuts = np.sort(rng.choice(np.arange(1, d), size=int(rng.integers(1, 12)), replace=False))
        vals = rng.normal(size=cuts.size + 1)
        dens = np.repeat(vals, np.diff(np.concatenate(([0], cuts, [d]))))
        dens -= dens.mean()
        g = BasisVector(dens / d)
        bv = _variation(g, d) + g.l1_upper()
        v = g
        for k in (1, 2):
            for _ in range(cert.n1):
                v = apply(P, v)
            lhs = v.l1_upper()
            slack = perturbed_iterate_bound(tmap, mesh, k * cert.n1, Interval(bv), Interval(bv)).hi
            rhs = (cert.C_star * cert.rho_star**k * Interval(bv)).hi + slack
            assert lhs <= rhs


def test_l_star_is_post_verified():
    cert = certificate("lanford", 10)
    S, V = Interval(1.0), Interval(1.0)
    share = 0.035 / 256
    l_star = select_l_star(cert, lambda l: tail_bound(cert, S, V, l), share)
    assert l_star % cert.n1 == 0
    assert tail_bound(cert, S, V, l_star).hi <= share
    if l_star > cert.n1:
        assert tail_bound(cert, S, V, l_star - cert.n1).hi > share


def test_block_tail_decreases():
    cert = certificate("lanford", 10)
    seeds = [(Interval(1.0), Interval(1.0))] * cert.n1
    tails = [block_l1_tail(cert, seeds, l).hi for l in (0, cert.n1, 5 * cert.n1)]
    assert tails[0] > tails[1] > tails[2] > 0
