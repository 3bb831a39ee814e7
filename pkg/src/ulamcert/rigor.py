"""Outward-rounded interval arithmetic and cell integrals of observables.

Scalar intervals use error-free transformations to decide the rounding
direction of each endpoint, so results are the tightest enclosures that
binary64 endpoints allow.  The array helpers used by the large vectorized
stages round by nudging one ulp outward, which is cheaper and still sound.
No global rounding mode is touched anywhere.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Interval",
    "Poly",
    "Observable",
    "iv_add",
    "iv_sub",
    "iv_mul",
    "iv_div",
    "iv_sqrt",
    "iv_pow",
    "iv_integrate_cell",
    "gamma",
    "down",
    "up",
    "vadd",
    "vsub",
    "vmul",
    "vsum",
    "sum_upper",
    "parse_polynomial",
    "parse_observable",
    "integrate_uniform_cells",
]

_INF = math.inf
_U = 2.0**-53
_SPLITTER = 134217729.0  # 2**27 + 1
# Error-free products are exact only away from overflow and gradual underflow.
_EFT_MIN = 2.0**-960
_EFT_MAX = 2.0**990


def _dn(x: float) -> float:
    return math.nextafter(x, -_INF)


def _upf(x: float) -> float:
    return math.nextafter(x, _INF)


def _two_sum(a: float, b: float) -> tuple[float, float]:
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a: float) -> tuple[float, float]:
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a: float, b: float) -> tuple[float, float]:
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _eft_safe(*xs: float) -> bool:
    return all(x == 0.0 or _EFT_MIN < abs(x) < _EFT_MAX for x in xs)


def _directed(value: float, err: float) -> tuple[float, float]:
    """Bracket value + err given the rounded value and the sign of err."""
    if err > 0:
        return value, _upf(value)
    if err < 0:
        return _dn(value), value
    return value, value


def _sum_bounds(a: float, b: float) -> tuple[float, float]:
    s, e = _two_sum(a, b)
    if math.isinf(s):
        return _dn(s), _upf(s)
    return _directed(s, e)


def _underflow_bounds(negative: bool) -> tuple[float, float]:
    # A nonzero exact result that rounded to zero; its sign is known.
    tiny = _upf(0.0)
    return (-tiny, 0.0) if negative else (0.0, tiny)


def _prod_bounds(a: float, b: float) -> tuple[float, float]:
    if a == 0.0 or b == 0.0:
        return 0.0, 0.0
    p = a * b
    if p == 0.0:
        return _underflow_bounds((a < 0) != (b < 0))
    if not _eft_safe(a, b, p):
        return _dn(p), _upf(p)
    p, e = _two_prod(a, b)
    return _directed(p, e)


def _quot_bounds(a: float, b: float) -> tuple[float, float]:
    if a == 0.0:
        return 0.0, 0.0
    q = a / b
    if q == 0.0:
        return _underflow_bounds((a < 0) != (b < 0))
    if not _eft_safe(a, b, q):
        return _dn(q), _upf(q)
    p, e = _two_prod(q, b)
    # a - q*b is exactly representable when q is the rounded quotient.
    r = (a - p) - e
    sign = (r > 0) - (r < 0)
    if b < 0:
        sign = -sign
    return _directed(q, float(sign))


def _to_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite value {value!r}")
        return Fraction(value)
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"cannot parse number {value!r}") from exc
    return Fraction(value)


def _float_bounds(value) -> tuple[float, float]:
    fr = _to_fraction(value)
    f = float(fr)
    exact = Fraction(f)
    if exact == fr:
        return f, f
    return (f, _upf(f)) if exact < fr else (_dn(f), f)


@dataclass(frozen=True, slots=True)
class Interval:
    """Closed interval [lo, hi] with binary64 endpoints."""

    lo: float
    hi: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        lo = float(self.lo)
        hi = lo if self.hi is None else float(self.hi)
        if math.isnan(lo) or math.isnan(hi):
            raise ValueError("interval endpoint is NaN")
        if lo > hi:
            raise ValueError(f"empty interval [{lo!r}, {hi!r}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def exact(cls, value) -> "Interval":
        """Tightest enclosure of a rational given as str, int, float or Fraction."""
        if isinstance(value, Interval):
            return value
        return cls(*_float_bounds(value))

    @classmethod
    def hull_of(cls, items: Sequence["Interval"]) -> "Interval":
        return cls(min(x.lo for x in items), max(x.hi for x in items))

    # -- queries ---------------------------------------------------------
    @property
    def mid(self) -> float:
        m = 0.5 * self.lo + 0.5 * self.hi
        return min(max(m, self.lo), self.hi)

    @property
    def rad(self) -> float:
        m = self.mid
        return max(_upf(self.hi - m), _upf(m - self.lo))

    @property
    def width(self) -> float:
        return _upf(self.hi - self.lo) if self.hi > self.lo else 0.0

    def mag(self) -> float:
        return max(abs(self.lo), abs(self.hi))

    def mig(self) -> float:
        if self.lo <= 0.0 <= self.hi:
            return 0.0
        return min(abs(self.lo), abs(self.hi))

    def contains(self, x) -> bool:
        if isinstance(x, Interval):
            return self.lo <= x.lo and x.hi <= self.hi
        if isinstance(x, (Fraction, int, str)):
            fr = _to_fraction(x)
            return Fraction(self.lo) <= fr <= Fraction(self.hi)
        return self.lo <= x <= self.hi

    __contains__ = contains

    def intersects(self, other: "Interval") -> bool:
        return self.lo <= other.hi and other.lo <= self.hi

    def intersect(self, other: "Interval") -> "Interval":
        if not self.intersects(other):
            raise ValueError("disjoint intervals")
        return Interval(max(self.lo, other.lo), min(self.hi, other.hi))

    def hull(self, other: "Interval") -> "Interval":
        return Interval(min(self.lo, other.lo), max(self.hi, other.hi))

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return iv_add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return iv_sub(self, _coerce(other))

    def __rsub__(self, other):
        return iv_sub(_coerce(other), self)

    def __mul__(self, other):
        return iv_mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return iv_div(self, _coerce(other))

    def __rtruediv__(self, other):
        return iv_div(_coerce(other), self)

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __abs__(self):
        if self.lo >= 0:
            return self
        if self.hi <= 0:
            return -self
        return Interval(0.0, self.mag())

    def __pow__(self, n: int):
        return iv_pow(self, n)

    def sqrt(self) -> "Interval":
        return iv_sqrt(self)

    def max0(self) -> "Interval":
        return Interval(max(self.lo, 0.0), max(self.hi, 0.0))

    def __repr__(self) -> str:
        return f"Interval({self.lo!r}, {self.hi!r})"


def _coerce(x) -> Interval:
    if isinstance(x, Interval):
        return x
    if isinstance(x, float):
        return Interval(x)
    return Interval.exact(x)


def iv_add(a: Interval, b: Interval) -> Interval:
    return Interval(_sum_bounds(a.lo, b.lo)[0], _sum_bounds(a.hi, b.hi)[1])


def iv_sub(a: Interval, b: Interval) -> Interval:
    return Interval(_sum_bounds(a.lo, -b.hi)[0], _sum_bounds(a.hi, -b.lo)[1])


def iv_mul(a: Interval, b: Interval) -> Interval:
    lo, hi = _INF, -_INF
    for x in (a.lo, a.hi):
        for y in (b.lo, b.hi):
            pl, ph = _prod_bounds(x, y)
            lo = min(lo, pl)
            hi = max(hi, ph)
    return Interval(lo, hi)


def iv_div(a: Interval, b: Interval) -> Interval:
    if b.lo <= 0.0 <= b.hi:
        raise ZeroDivisionError(f"divisor {b!r} contains zero")
    lo, hi = _INF, -_INF
    for x in (a.lo, a.hi):
        for y in (b.lo, b.hi):
            ql, qh = _quot_bounds(x, y)
            lo = min(lo, ql)
            hi = max(hi, qh)
    return Interval(lo, hi)


def _sqrt_bounds(x: float) -> tuple[float, float]:
    if x == 0.0:
        return 0.0, 0.0
    s = math.sqrt(x)
    if not _eft_safe(x, s * s):
        return _dn(s), _upf(s)
    p, e = _two_prod(s, s)
    r = (x - p) - e
    return _directed(s, r)


def iv_sqrt(a: Interval) -> Interval:
    if a.lo < 0.0:
        raise ValueError(f"square root of interval with negative part {a!r}")
    return Interval(_sqrt_bounds(a.lo)[0], _sqrt_bounds(a.hi)[1])


def iv_pow(a: Interval, n: int) -> Interval:
    if n < 0:
        return iv_div(Interval(1.0), iv_pow(a, -n))
    if n == 0:
        return Interval(1.0)
    base = abs(a) if n % 2 == 0 else a
    lo_acc, hi_acc = Interval(base.lo), Interval(base.hi)
    for _ in range(n - 1):
        lo_acc = iv_mul(lo_acc, Interval(base.lo))
        hi_acc = iv_mul(hi_acc, Interval(base.hi))
    return Interval(lo_acc.lo, hi_acc.hi)


# ---------------------------------------------------------------------------
# Array helpers: endpoint arrays (lo, hi), outward nudging after each op.
# ---------------------------------------------------------------------------


def down(x):
    return np.nextafter(x, -np.inf)


def up(x):
    return np.nextafter(x, np.inf)


def gamma(n: int) -> float:
    """Upper bound on n*u/(1 - n*u), the classical rounding-error factor."""
    nu = n * _U
    if nu >= 0.5:
        raise ValueError("gamma factor undefined for such long sums")
    return _upf(_upf(nu / (1.0 - nu)) * (1.0 + 4 * _U))


def vadd(alo, ahi, blo, bhi):
    return down(alo + blo), up(ahi + bhi)


def vsub(alo, ahi, blo, bhi):
    return down(alo - bhi), up(ahi - blo)


def vmul(alo, ahi, blo, bhi):
    p1, p2, p3, p4 = alo * blo, alo * bhi, ahi * blo, ahi * bhi
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
    # Products that underflow lose absolute accuracy up to one subnormal ulp.
    return down(down(lo)), up(up(hi))


def _vdirected(value, err):
    lo = np.where(err < 0, down(value), value)
    hi = np.where(err > 0, up(value), value)
    return lo, hi


def vadd_tight(a, b):
    """Directed bounds (lo, hi) on the exact sums a + b of float arrays."""
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return _vdirected(s, err)


def vmul_tight(a, b):
    """Directed bounds (lo, hi) on the exact products a * b of float arrays."""
    p = a * b
    ca = _SPLITTER * a
    ah = ca - (ca - a)
    al = a - ah
    cb = _SPLITTER * b
    bh = cb - (cb - b)
    bl = b - bh
    err = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    lo, hi = _vdirected(p, err)
    ap = np.abs(p)
    tiny = (ap < _EFT_MIN) & ((p != 0) | ((a != 0) & (b != 0)))
    risky = tiny | (np.abs(a) > _EFT_MAX) | (np.abs(b) > _EFT_MAX) | ~np.isfinite(p)
    if np.any(risky):
        neg = (a < 0) != (b < 0)
        under = (p == 0) & (a != 0) & (b != 0)
        lo = np.where(risky, np.where(under & ~neg, 0.0, down(p)), lo)
        hi = np.where(risky, np.where(under & neg, 0.0, up(p)), hi)
    return lo, hi


def sum_upper(x) -> float:
    """Upper bound on the exact sum of a nonnegative float array."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return 0.0
    s = float(np.sum(x))
    return _upf(s * (1.0 + 2.0 * gamma(max(x.size, 2))))


def vsum(lo, hi) -> Interval:
    """Enclosure of the sum of an interval array given by its endpoints."""
    lo = np.asarray(lo, dtype=np.float64).ravel()
    hi = np.asarray(hi, dtype=np.float64).ravel()
    if lo.size == 0:
        return Interval(0.0)
    g = gamma(max(lo.size, 2))
    slo = float(np.sum(lo))
    shi = float(np.sum(hi))
    elo = _upf(sum_upper(np.abs(lo)) * g)
    ehi = _upf(sum_upper(np.abs(hi)) * g)
    return Interval(_dn(slo - elo), _upf(shi + ehi))


def _scalar_exactly(x) -> Interval:
    return x if isinstance(x, Interval) else Interval.exact(x)


# ---------------------------------------------------------------------------
# Polynomials and observables
# ---------------------------------------------------------------------------


class Poly:
    """Polynomial c0 + c1 x + ... with interval coefficients.

    When built from rationals the exact coefficients are kept as well, so
    images of rational points and high-precision evaluation stay exact.
    """

    __slots__ = ("coeffs", "exact")

    def __init__(self, coeffs: Sequence, exact: Sequence[Fraction] | None = None):
        if exact is None and all(not isinstance(c, Interval) for c in coeffs):
            exact = [_to_fraction(c) for c in coeffs]
        if exact is not None:
            exact = list(exact)
            while len(exact) > 1 and exact[-1] == 0:
                exact.pop()
            self.exact: tuple[Fraction, ...] | None = tuple(exact)
            self.coeffs: tuple[Interval, ...] = tuple(Interval.exact(c) for c in exact)
        else:
            self.exact = None
            self.coeffs = tuple(_coerce(c) for c in coeffs) or (Interval(0.0),)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def derivative(self) -> "Poly":
        if self.exact is not None:
            return Poly([], exact=[k * c for k, c in enumerate(self.exact)][1:] or [Fraction(0)])
        cs = [c * k for k, c in enumerate(self.coeffs)][1:]
        return Poly(cs or [Interval(0.0)])

    def antiderivative(self) -> "Poly":
        if self.exact is not None:
            return Poly([], exact=[Fraction(0)] + [c / (k + 1) for k, c in enumerate(self.exact)])
        return Poly([Interval(0.0)] + [c / (k + 1) for k, c in enumerate(self.coeffs)])

    def eval_exact(self, x: Fraction) -> Fraction:
        if self.exact is None:
            raise ValueError("polynomial has no exact coefficients")
        acc = Fraction(0)
        for c in reversed(self.exact):
            acc = acc * x + c
        return acc

    def __call__(self, x) -> Interval:
        x = _coerce(x)
        acc = self.coeffs[-1]
        for c in reversed(self.coeffs[:-1]):
            acc = acc * x + c
        return acc

    def eval_arrays(self, lo, hi):
        """Interval Horner evaluation over endpoint arrays."""
        clo, chi = self.coeffs[-1].lo, self.coeffs[-1].hi
        acc_lo = np.full(np.shape(lo), clo)
        acc_hi = np.full(np.shape(lo), chi)
        for c in reversed(self.coeffs[:-1]):
            acc_lo, acc_hi = vmul(acc_lo, acc_hi, lo, hi)
            acc_lo, acc_hi = vadd(acc_lo, acc_hi, c.lo, c.hi)
        return acc_lo, acc_hi

    def eval_points(self, x):
        """Interval Horner evaluation at exact float points, tight rounding."""
        x = np.asarray(x, dtype=np.float64)
        acc_lo = np.full(x.shape, self.coeffs[-1].lo)
        acc_hi = np.full(x.shape, self.coeffs[-1].hi)
        for c in reversed(self.coeffs[:-1]):
            pos = x >= 0
            plo, _ = vmul_tight(np.where(pos, acc_lo, acc_hi), x)
            _, phi = vmul_tight(np.where(pos, acc_hi, acc_lo), x)
            acc_lo, _ = vadd_tight(plo, np.full(x.shape, c.lo))
            _, acc_hi = vadd_tight(phi, np.full(x.shape, c.hi))
        return acc_lo, acc_hi

    def __repr__(self) -> str:
        if self.exact is not None:
            return f"Poly({[str(c) for c in self.exact]})"
        return f"Poly({list(self.coeffs)})"


def _poly_shape(p: Poly, a: Interval, b: Interval, depth: int = 40):
    """Range enclosure and variation bound of p on [a, b].

    Subintervals where p' provably keeps a weak sign are monotone, so their
    variation is |p(right) - p(left)| from point evaluations.  Subintervals
    that may hold a critical point are bisected until tiny, then bounded
    crudely by sup|p'| times width.
    """
    dp = p.derivative()
    lo, hi = _INF, -_INF
    var = Interval(0.0)
    stack = [(a.lo, b.hi, 0)]
    span = b.hi - a.lo
    while stack:
        x0, x1, lev = stack.pop()
        box = Interval(x0, x1)
        d = dp(box)
        if d.lo >= 0 or d.hi <= 0:
            v0, v1 = p(Interval(x0)), p(Interval(x1))
            lo, hi = min(lo, v0.lo, v1.lo), max(hi, v0.hi, v1.hi)
            var = var + abs(v1 - v0)
        elif lev >= depth or x1 - x0 <= span * 2.0**-30:
            r = p(box)
            lo, hi = min(lo, r.lo), max(hi, r.hi)
            var = var + Interval(d.mag()) * Interval(x1 - x0)
        else:
            m = 0.5 * (x0 + x1)
            stack.append((m, x1, lev + 1))
            stack.append((x0, m, lev + 1))
    return Interval(lo, hi), Interval(0.0, var.hi)


IntervalFunction = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class Piece:
    left: Fraction
    right: Fraction
    poly: Poly | None = None
    func: IntervalFunction | None = None


class Observable:
    """Piecewise function on [0, 1] with certified sup and variation bounds.

    Pieces are polynomials on rational subintervals.  A piece may instead
    carry an interval extension ``func(lo, hi) -> (lo, hi)``; such pieces
    are integrated crudely and require user-supplied bounds.
    """

    def __init__(
        self,
        pieces: Sequence[tuple],
        sup_norm_bound: Interval | None = None,
        var_bound: Interval | None = None,
        text: str | None = None,
    ):
        parsed: list[Piece] = []
        for item in pieces:
            (left, right), body = item
            left, right = _to_fraction(left), _to_fraction(right)
            if isinstance(body, Poly):
                parsed.append(Piece(left, right, poly=body))
            elif callable(body):
                parsed.append(Piece(left, right, func=body))
            else:
                parsed.append(Piece(left, right, poly=Poly(body)))
        parsed.sort(key=lambda pc: pc.left)
        if not parsed or parsed[0].left != 0 or parsed[-1].right != 1:
            raise ValueError("observable pieces must cover [0, 1]")
        for a, b in zip(parsed, parsed[1:]):
            if a.right != b.left:
                raise ValueError("observable pieces must partition [0, 1]")
        for pc in parsed:
            if pc.left >= pc.right:
                raise ValueError("observable piece with empty domain")
        self.pieces = tuple(parsed)
        self.text = text
        has_func = any(pc.func is not None for pc in parsed)
        if has_func and (sup_norm_bound is None or var_bound is None):
            raise ValueError("non-polynomial pieces need explicit sup and variation bounds")
        if not has_func:
            rng, var = self._certify_bounds()
        else:
            rng, var = None, None
        self.range = rng
        self.sup_norm_bound = sup_norm_bound if sup_norm_bound is not None else Interval(0.0, abs(rng).hi)
        self.var_bound = var_bound if var_bound is not None else var
        if self.range is None:
            s = self.sup_norm_bound.hi
            self.range = Interval(-s, s)

    @classmethod
    def polynomial(cls, coeffs: Sequence, text: str | None = None) -> "Observable":
        return cls([((0, 1), Poly(coeffs))], text=text)

    @property
    def is_polynomial(self) -> bool:
        return all(pc.poly is not None for pc in self.pieces)

    def _certify_bounds(self) -> tuple[Interval, Interval]:
        rng = None
        var = Interval(0.0)
        for pc in self.pieces:
            r, v = _poly_shape(pc.poly, Interval.exact(pc.left), Interval.exact(pc.right))
            rng = r if rng is None else rng.hull(r)
            var = var + v
        for a, b in zip(self.pieces, self.pieces[1:]):
            t = Interval.exact(a.right)
            var = var + abs(b.poly(t) - a.poly(t))
        return rng, Interval(0.0, var.hi)

    def square(self) -> "Observable":
        """The pointwise square (polynomial pieces only)."""
        if not self.is_polynomial:
            raise ValueError("square is only available for polynomial observables")
        pieces = []
        for pc in self.pieces:
            e = pc.poly.exact
            if e is not None:
                sq = [Fraction(0)] * (2 * len(e) - 1)
                for i, x in enumerate(e):
                    for j, y in enumerate(e):
                        sq[i + j] += x * y
                poly = Poly(sq)
            else:
                cs = pc.poly.coeffs
                acc = [Interval(0.0)] * (2 * len(cs) - 1)
                for i, x in enumerate(cs):
                    for j, y in enumerate(cs):
                        acc[i + j] = acc[i + j] + x * y
                poly = Poly(acc)
            pieces.append(((pc.left, pc.right), poly))
        return Observable(pieces)

    def eval_piece_arrays(self, piece: Piece, lo, hi):
        if piece.poly is not None:
            return piece.poly.eval_arrays(lo, hi)
        return piece.func(lo, hi)

    def __repr__(self) -> str:
        return f"Observable({self.text or len(self.pieces)})"


def _integrate_poly(poly: Poly, a: Interval, b: Interval) -> Interval:
    anti = poly.antiderivative()
    return anti(b) - anti(a)


def iv_integrate_cell(phi: Observable, cell: Interval) -> Interval:
    """Enclosure of the integral of phi over the cell."""
    if cell.lo < 0.0 or cell.hi > 1.0:
        raise ValueError(f"cell {cell!r} outside [0, 1]")
    total = Interval(0.0)
    for pc in phi.pieces:
        left, right = Interval.exact(pc.left), Interval.exact(pc.right)
        if right.hi <= cell.lo or left.lo >= cell.hi:
            continue
        a = cell.lo if left.hi <= cell.lo else None
        b = cell.hi if right.lo >= cell.hi else None
        a_iv = Interval(a) if a is not None else Interval(max(left.lo, cell.lo), max(left.hi, cell.lo))
        b_iv = Interval(b) if b is not None else Interval(min(right.lo, cell.hi), min(right.hi, cell.hi))
        if pc.poly is not None:
            part = _integrate_poly(pc.poly, a_iv, b_iv)
        else:
            seg = Interval(a_iv.lo, b_iv.hi)
            flo, fhi = pc.func(np.array([seg.lo]), np.array([seg.hi]))
            length = Interval(0.0, (b_iv - a_iv).max0().hi)
            part = Interval(float(flo[0]), float(fhi[0])) * length
        total = total + part
    return total


def _taylor_cell_integrals(poly: Poly, centers: np.ndarray, half: float):
    """Enclose the integral of poly over [c - half, c + half] for each center.

    Uses the even-order Taylor expansion about the midpoint, which avoids the
    cancellation of F(b) - F(a) on short cells.  ``half`` must be a power of
    two so scaling by it is exact.
    """
    lo = np.zeros_like(centers)
    hi = np.zeros_like(centers)
    q = poly
    fact = 1
    k = 0
    while True:
        fact *= k + 1
        scale = 2.0 * half ** (k + 1)
        coeffs = [c / fact for c in q.coeffs]
        tlo, thi = Poly(coeffs).eval_arrays(centers, centers)
        tlo, thi = vmul(tlo, thi, scale, scale)
        lo, hi = vadd(lo, hi, tlo, thi)
        if q.degree < 2:
            break
        q = q.derivative().derivative()
        fact *= k + 2
        k += 2
    return lo, hi


def integrate_uniform_cells(phi: Observable, d: int):
    """Endpoint arrays enclosing the integrals of phi over the d uniform cells."""
    if d & (d - 1) or d < 2:
        raise ValueError("cell count must be a power of two")
    half = 0.5 / d
    lo = np.zeros(d)
    hi = np.zeros(d)
    for pc in phi.pieces:
        k0 = math.floor(pc.left * d)
        inner0 = math.ceil(pc.left * d)
        inner1 = math.floor(pc.right * d)
        if inner1 > inner0:
            ks = np.arange(inner0, inner1, dtype=np.float64)
            centers = (ks + 0.5) / d
            if pc.poly is not None:
                plo, phi_ = _taylor_cell_integrals(pc.poly, centers, half)
            else:
                flo, fhi = pc.func(ks / d, (ks + 1) / d)
                plo, phi_ = vmul(flo, fhi, 1.0 / d, 1.0 / d)
            sl = slice(inner0, inner1)
            lo[sl], hi[sl] = vadd(lo[sl], hi[sl], plo, phi_)
        # Cells cut by a piece boundary.
        for k in {k0, inner1} - set(range(inner0, inner1)):
            if k < 0 or k >= d:
                continue
            cell_lo = max(Fraction(k, d), pc.left)
            cell_hi = min(Fraction(k + 1, d), pc.right)
            if cell_lo >= cell_hi:
                continue
            a, b = Interval.exact(cell_lo), Interval.exact(cell_hi)
            if pc.poly is not None:
                part = _integrate_poly(pc.poly, a, b)
            else:
                flo, fhi = pc.func(np.array([a.lo]), np.array([b.hi]))
                part = Interval(float(flo[0]), float(fhi[0])) * (b - a).max0()
            lo[k], hi[k] = vadd(lo[k], hi[k], part.lo, part.hi)
    return lo, hi


# ---------------------------------------------------------------------------
# Observable mini-syntax
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\d+(?:\.\d*)?(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)|(x)|(\*\*|[-+*/^()]))")


def _poly_mul(a: list[Fraction], b: list[Fraction]) -> list[Fraction]:
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


def _poly_add(a: list[Fraction], b: list[Fraction], sign: int = 1) -> list[Fraction]:
    n = max(len(a), len(b))
    a = a + [Fraction(0)] * (n - len(a))
    b = b + [Fraction(0)] * (n - len(b))
    return [x + sign * y for x, y in zip(a, b)]


class _PolyParser:
    def __init__(self, text: str):
        self.text = text
        self.tokens: list[tuple[str, str]] = []
        pos = 0
        text = text.rstrip()
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                raise ValueError(f"unexpected character in {self.text!r} at {pos}")
            num, var, op = m.groups()
            if num is not None:
                self.tokens.append(("num", num))
            elif var is not None:
                self.tokens.append(("x", var))
            else:
                self.tokens.append(("op", "^" if op == "**" else op))
            pos = m.end()
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def parse(self) -> list[Fraction]:
        if not self.tokens:
            raise ValueError("empty polynomial expression")
        p = self.expr()
        if self.i != len(self.tokens):
            raise ValueError(f"trailing input in {self.text!r}")
        return p

    def expr(self):
        p = self.term()
        while self.peek() in (("op", "+"), ("op", "-")):
            _, op = self.take()
            p = _poly_add(p, self.term(), 1 if op == "+" else -1)
        return p

    def term(self):
        p = self.factor()
        while True:
            kind, val = self.peek()
            if kind == "op" and val == "*":
                self.take()
                p = _poly_mul(p, self.factor())
            elif kind == "op" and val == "/":
                self.take()
                q = self.factor()
                if len([c for c in q[1:] if c]) or q[0] == 0:
                    raise ValueError("division only by nonzero constants")
                p = [c / q[0] for c in p]
            elif kind in ("num", "x") or (kind, val) == ("op", "("):
                p = _poly_mul(p, self.factor())  # implicit product, e.g. 2x
            else:
                return p

    def factor(self):
        kind, val = self.peek()
        if (kind, val) in (("op", "-"), ("op", "+")):
            self.take()
            p = self.factor()
            return [-c for c in p] if val == "-" else p
        base = self.atom()
        if self.peek() == ("op", "^"):
            self.take()
            kind, val = self.take()
            if kind != "num" or not val.isdigit():
                raise ValueError("exponent must be a nonnegative integer")
            out = [Fraction(1)]
            for _ in range(int(val)):
                out = _poly_mul(out, base)
            return out
        return base

    def atom(self):
        kind, val = self.take()
        if kind == "num":
            return [Fraction(val)]
        if kind == "x":
            return [Fraction(0), Fraction(1)]
        if (kind, val) == ("op", "("):
            p = self.expr()
            if self.take() != ("op", ")"):
                raise ValueError(f"unbalanced parentheses in {self.text!r}")
            return p
        raise ValueError(f"unexpected token {val!r} in {self.text!r}")


def parse_polynomial(text: str) -> list[Fraction]:
    """Exact coefficients (constant first) of a polynomial in x."""
    return _PolyParser(text).parse()


_CLAUSE = re.compile(r"^(?P<body>.*?)\s+on\s+\[(?P<a>[^,\]]+),(?P<b>[^\]]+)\]$")


def parse_observable(text: str) -> Observable:
    """Parse ``"x^2"`` or piecewise ``"x on [0,1/2]; x - 1 on [1/2,1]"``."""
    pieces = []
    for clause in (c.strip() for c in text.split(";")):
        if not clause:
            continue
        m = _CLAUSE.match(clause)
        if m:
            body, dom = m.group("body"), (Fraction(m.group("a").strip()), Fraction(m.group("b").strip()))
        else:
            body, dom = clause, (Fraction(0), Fraction(1))
        pieces.append((dom, Poly(parse_polynomial(body))))
    if not pieces:
        raise ValueError("empty observable")
    return Observable(pieces, text=text)
