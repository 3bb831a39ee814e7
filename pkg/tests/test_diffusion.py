import functools
from fractions import Fraction

import pytest

import ulamcert.diffusion as diffusion
from conftest import get_map
from ulamcert.diffusion import (
    BudgetInputs,
    budget_assemble,
    certify_sigma2,
    density_term_generic,
    kappa_bruteforce,
    kappa_closed_form,
    psi_hat_sup,
    truncated_green_kubo,
)
from ulamcert.rigor import Interval, parse_observable
from ulamcert.ulam import Mesh

COBOUNDARY = "x on [0,1/2]; x - 1 on [1/2,1]"


@functools.lru_cache(maxsize=None)
def doubling_run(exponent, obs="x"):
    return certify_sigma2(get_map("doubling"), parse_observable(obs), 1 << exponent, tau=0.05)


def test_psi_hat_constant_is_twice_sup():
    assert psi_hat_sup(Interval(0.7)) == Interval(0.7) * Interval(2.0)
    # kappa for l = 2 is a single term f(0) = 2|psi|(1 + B0/(1-a)) + (B0+1-a) V/(1-a).
    S, V, a, B0, ge = Interval(0.7), Interval(1.3), Interval(0.5), Interval(0.25), Interval(1e-3)
    s2 = Interval(1.4)
    f0 = s2 * (Interval(1.0) + B0 / (Interval(1.0) - a)) + (B0 + Interval(1.0) - a) / (Interval(1.0) - a) * V
    expect = Interval(2.0) * s2 * ge * f0
    assert kappa_closed_form(S, V, a, B0, ge, 2).intersects(expect)
    assert kappa_bruteforce(S, V, a, B0, ge, 2).intersects(expect)


def test_every_generic_term_uses_the_same_constant(monkeypatch):
    calls = []
    real = diffusion.psi_hat_sup

    def spy(s):
        calls.append(s)
        return real(s)

    monkeypatch.setattr(diffusion, "psi_hat_sup", spy)
    tmap = get_map("lanford")
    S, V = Interval(1.0), Interval(1.0)
    kappa_closed_form(S, V, tmap.ly_alpha, tmap.ly_B0, Interval(1e-3), 10)
    assert calls and all(c == S for c in calls)
    assert density_term_generic(S, 1, Interval(1.0)).contains(8)


@pytest.mark.parametrize("l_star", [2, 3, 28, 56, 112, 120])
@pytest.mark.parametrize("consts", [("2/3", "4/9"), ("0.66666667", "1.444444445"), ("1/2", "0")])
def test_kappa_closed_form_matches_double_loop(l_star, consts):
    a, b0 = (Interval.exact(Fraction(c)) for c in consts)
    S, V, ge = Interval(1.0), Interval(1.0), Interval.exact(Fraction(5, 3)) * Interval(2.0**-25)
    closed = kappa_closed_form(S, V, a, b0, ge, l_star)
    brute = kappa_bruteforce(S, V, a, b0, ge, l_star)
    assert closed.intersects(brute)
    assert abs(closed.mid - brute.mid) <= 1e-12 * brute.mid + closed.width + brute.width


def test_doubling_enclosures_overlap_and_contain_quarter():
    runs = [doubling_run(e) for e in (8, 10, 12)]
    for r in runs:
        assert r.sigma2_enclosure.contains(Fraction(1, 4))
    for r, s in zip(runs, runs[1:]):
        assert r.sigma2_enclosure.intersects(s.sigma2_enclosure)
    assert runs[-1].sigma2_enclosure.width < runs[0].sigma2_enclosure.width


def test_doubling_truncated_sum_is_close_to_quarter():
    r = doubling_run(12)
    assert abs(r.sigma2_eps_l.mid - 0.25) < 2e-4
    assert r.mu_eps.contains(Fraction(1, 2))


def test_tail_share_is_rechecked():
    r = doubling_run(10)
    share = r.tau / r.budget.tau_split_k
    assert r.tail_share_met == (r.budget.tail_term.hi <= share)
    assert r.tail_share_met
    assert r.budget.total.hi >= r.budget.tail_term.hi + r.budget.density_term.hi


def test_budget_takes_the_smaller_bound_per_term():
    r = doubling_run(10)
    b = r.budget
    for key, chosen in (("tail", b.tail_term), ("density", b.density_term), ("kappa", b.kappa)):
        assert chosen.hi == min(b.generic[key].hi, b.refined[key].hi)


def test_coboundary_enclosure_contains_zero():
    r = doubling_run(10, COBOUNDARY)
    assert r.sigma2_enclosure.contains(0)
    assert any("coboundary" in n for n in r.notes)


def test_green_kubo_terms_decay_for_doubling():
    from conftest import get_operator
    from ulamcert.density import certify_density

    P = get_operator("doubling", 10)
    dens = certify_density(get_map("doubling"), P, None)
    s2, mu, terms = truncated_green_kubo(P, parse_observable("x"), dens.h, 20)
    # Correlations of x under doubling are 2^-i / 12.
    for i, t in enumerate(terms[:6], start=1):
        assert abs(t.mid - 2.0**-i / 12) < 1e-3
    assert s2.width < 1e-9
    with pytest.raises(ValueError):
        truncated_green_kubo(P, parse_observable("x"), dens.h, 0)


def test_generic_budget_without_run_data():
    tmap = get_map("doubling")
    r = doubling_run(10)
    b = budget_assemble(tmap, Mesh(1 << 10), r.certificate, r.density.error, parse_observable("x"), r.l_star)
    assert b.refined == {}
    assert b.total.hi >= r.budget.total.hi


def test_invalid_inputs():
    with pytest.raises(ValueError):
        certify_sigma2(get_map("doubling"), parse_observable("x"), 1 << 8, tau=0)
    inp = BudgetInputs(Interval(0.5), Interval(0.25), Interval(0.0), Interval(1.0), Interval(2.0**-8))
    assert inp.centre() == 0.5
