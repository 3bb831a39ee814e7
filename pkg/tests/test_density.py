from fractions import Fraction

import numpy as np
import pytest

from conftest import get_contraction, get_map, get_operator
from ulamcert.decay import NoSpectralGapError, make_certificate
from ulamcert.density import (
    certify_density,
    density_variation_bound,
    fixpoint_residual,
    perturbed_iterate_bound,
    power_iteration,
    resolvent_direct,
    resolvent_fine,
)
from ulamcert.rigor import Interval
from ulamcert.ulam import BasisVector, Mesh, apply


def _variation_upper(v: BasisVector, d: int) -> float:
    lo, hi = v.lo * d, v.hi * d
    return float(np.maximum(np.abs(hi[1:] - lo[:-1]), np.abs(lo[1:] - hi[:-1])).sum()) * (1 + 1e-12)


@pytest.mark.parametrize("name", ["lanford", "doubling"])
def test_discrete_lasota_yorke_step(name):
    tmap = get_map(name)
    P = get_operator(name, 10)
    d = P.d
    alpha, B0 = tmap.ly_alpha.hi, tmap.ly_B0.hi
    rng = np.random.default_rng(5)
    dens = np.repeat(rng.normal(size=16), d // 16)
    v = BasisVector(dens / d)
    for _ in range(15):
        V, L = _variation_upper(v, d), v.l1_upper()
        v = apply(P, v)
        assert _variation_upper(v, d) <= alpha * V + B0 * L + 1e-9


def test_resolvent_direct_small_case():
    R, n = resolvent_direct([1.0, 0.5, 0.25])
    assert R.contains(2.0) and n in (1, 2)
    with pytest.raises(NoSpectralGapError):
        resolvent_direct([1.0, 1.0])


def test_resolvent_bound_holds_on_random_vectors():
    tmap = get_map("lanford")
    P = get_operator("lanford", 10)
    c = get_contraction("lanford", 10)
    R_direct, _ = resolvent_direct(c.step_norms)
    R_fine, _ = resolvent_fine(make_certificate(tmap, c), P.mesh)
    rng = np.random.default_rng(8)
    for _ in range(10):
        g = rng.normal(size=P.d)
        g -= g.mean()
        gv = BasisVector(g)
        out = apply(P, gv)
        diff = BasisVector(np.nextafter(g - out.hi, -np.inf), np.nextafter(g - out.lo, np.inf))
        for R in (R_direct, R_fine):
            assert np.abs(g).sum() <= R.hi * diff.l1_upper() + 1e-9


def test_perturbation_bound_is_nonnegative_and_linear():
    tmap = get_map("lanford")
    mesh = Mesh(1 << 12)
    one = perturbed_iterate_bound(tmap, mesh, 28, Interval(1.0), Interval(1.0))
    two = perturbed_iterate_bound(tmap, mesh, 28, Interval(2.0), Interval(2.0))
    assert one.lo == 0 and 0 < one.hi < two.hi <= 2 * one.hi * (1 + 1e-12)
    with pytest.raises(ValueError):
        perturbed_iterate_bound(tmap, mesh, 0, Interval(1.0), Interval(1.0))


def test_density_variation_bound():
    tmap = get_map("lanford")
    vh = density_variation_bound(tmap)
    assert Fraction(vh.hi) >= Fraction(4, 3) and vh.hi - 4 / 3 < 1e-12


@pytest.mark.parametrize("name", ["lanford", "doubling"])
def test_density_error_decreases_with_mesh(name):
    tmap = get_map(name)
    target = 1 / 64 if name == "lanford" else 1e-12
    cert = make_certificate(tmap, get_contraction(name, 10, target))
    errors = []
    for e in (10, 12, 14):
        P = get_operator(name, e)
        direct = get_contraction(name, e, 1 / 64)
        res = certify_density(tmap, P, cert, direct=direct)
        assert res.h.total().contains(1)
        assert np.all(res.h.lo >= 0)
        errors.append(res.error.hi)
    if name == "doubling":
        # V(h) = 0: all that is left is rounding in the residual.
        assert max(errors) < 1e-13
    else:
        assert errors[0] > errors[1] > errors[2]


def test_doubling_density_is_uniform():
    tmap = get_map("doubling")
    P = get_operator("doubling", 8)
    res = certify_density(tmap, P, None)
    assert np.all(res.h.lo <= 1 / 256) and np.all(res.h.hi >= 1 / 256)
    assert res.residual.hi < 1e-12
    # B0 = 0 makes V(h) = 0, so the error is the residual term alone.
    assert res.heps_error.hi == 0


def test_power_iteration_and_residual():
    P = get_operator("lanford", 12)
    pi = power_iteration(P, 1e-14, 500)
    assert pi.float_residual < 1e-13
    res = fixpoint_residual(P, pi.w)
    assert res.hi < 64 * P.d * 2.0**-52
    with pytest.raises(ValueError):
        fixpoint_residual(P, -pi.w)
