"""Piecewise expanding interval maps with certified branch data.

A map is described by a small config: for each branch, the polynomial
giving T on that branch (already reduced mod 1) and the two domain
endpoints.  An endpoint is either an exact rational or ``{"solve": v}``,
meaning the point of the domain where the branch polynomial equals v.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Mapping, Sequence

import numpy as np

from .rigor import Interval, Poly, _to_fraction

__all__ = [
    "MapSpecError",
    "UnsupportedMapError",
    "Branch",
    "PiecewiseMap",
    "branch_invert",
    "ly_constants_full_branch",
    "registry_get",
    "build_map",
    "REGISTRY",
]


class MapSpecError(ValueError):
    """Malformed or inconsistent map description."""


class UnsupportedMapError(ValueError):
    """The requested derivation does not apply to this map."""


REGISTRY: dict[str, dict[str, Any]] = {
    "lanford": {
        "name": "lanford",
        "branches": [
            {"poly": ["0", "5/2", "-1/2"], "domain": ["0", {"solve": "1"}]},
            {"poly": ["-1", "5/2", "-1/2"], "domain": [{"solve": "0"}, "1"]},
        ],
    },
    "doubling": {
        "name": "doubling",
        "branches": [
            {"poly": ["0", "2"], "domain": ["0", "1/2"]},
            {"poly": ["-1", "2"], "domain": ["1/2", "1"]},
        ],
    },
}

_SUBDIVISIONS = 256


def _enclose_root(poly: Poly, value: Fraction, lo: float, hi: float) -> Interval:
    """Certified enclosure of the unique root of poly(x) = value in [lo, hi]."""
    v = Interval.exact(value)
    f_lo, f_hi = poly(Interval(lo)) - v, poly(Interval(hi)) - v
    if f_lo.hi < 0 < f_hi.lo:
        sign = 1
    elif f_lo.lo > 0 > f_hi.hi:
        sign = -1
    else:
        raise MapSpecError(f"cannot bracket a root of {poly} = {value} in [{lo}, {hi}]")
    a, b = lo, hi
    while True:
        m = 0.5 * (a + b)
        if m <= a or m >= b:
            break
        fm = poly(Interval(m)) - v
        if sign * fm.hi < 0 and sign * fm.lo < 0:
            a = m
        elif sign * fm.lo > 0 and sign * fm.hi > 0:
            b = m
        else:
            # m is within rounding of the root; shrink from both sides.
            aa, bb = m, m
            while True:
                aa = math.nextafter(aa, -math.inf)
                fa = poly(Interval(aa)) - v
                if sign * fa.hi < 0 or aa <= a:
                    break
            while True:
                bb = math.nextafter(bb, math.inf)
                fb = poly(Interval(bb)) - v
                if sign * fb.lo > 0 or bb >= b:
                    break
            return Interval(max(a, aa), min(b, bb))
    return Interval(a, b)


@dataclass(frozen=True)
class Branch:
    """One monotone C2 branch of the map.

    ``left`` and ``right`` enclose the domain endpoints; ``image_exact`` holds
    the exact values of the branch at those endpoints.
    """

    left: Interval
    right: Interval
    forward: Poly
    derivative: Poly
    second: Poly
    image_exact: tuple[Fraction, Fraction]
    increasing: bool
    min_slope: float
    max_slope: float
    distortion: float

    @property
    def domain(self) -> Interval:
        return Interval(self.left.lo, self.right.hi)

    @property
    def image(self) -> Interval:
        a, b = sorted(self.image_exact)
        return Interval(Interval.exact(a).lo, Interval.exact(b).hi)

    @property
    def onto(self) -> bool:
        return sorted(self.image_exact) == [0, 1]

    def invert_values(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Enclosures of the clamped preimages of exact float values.

        For each v returns bounds on c(v), the point of the domain where the
        branch takes the value v, or the nearer domain endpoint when v lies
        outside the image.
        """
        values = np.asarray(values, dtype=np.float64)
        A, B = self.left.lo, self.right.hi
        x = _newton_guess(self, values, A, B)
        step = np.spacing(np.maximum(np.abs(x), 2.0**-1000))
        delta = np.zeros_like(x)
        p = np.empty_like(x)
        q = np.empty_like(x)
        todo_p = np.ones(x.shape, dtype=bool)
        todo_q = np.ones(x.shape, dtype=bool)
        for _ in range(2100):
            if not (todo_p.any() or todo_q.any()):
                break
            if todo_p.any():
                idx = np.nonzero(todo_p)[0]
                cand = np.maximum(A, x[idx] - delta[idx])
                flo, fhi = self.forward.eval_points(cand)
                if self.increasing:
                    ok = (fhi <= values[idx]) | (cand <= A)
                else:
                    ok = (flo >= values[idx]) | (cand <= A)
                p[idx[ok]] = cand[ok]
                todo_p[idx[ok]] = False
            if todo_q.any():
                idx = np.nonzero(todo_q)[0]
                cand = np.minimum(B, x[idx] + delta[idx])
                flo, fhi = self.forward.eval_points(cand)
                if self.increasing:
                    ok = (flo >= values[idx]) | (cand >= B)
                else:
                    ok = (fhi <= values[idx]) | (cand >= B)
                q[idx[ok]] = cand[ok]
                todo_q[idx[ok]] = False
            delta = np.where(delta == 0, step, delta * 2.0)
        else:
            raise RuntimeError("branch inversion failed to certify")
        lo = np.minimum(self.right.lo, np.maximum(self.left.lo, p))
        hi = np.minimum(self.right.hi, np.maximum(self.left.hi, q))
        return lo, hi


def _newton_guess(br: Branch, values: np.ndarray, A: float, B: float) -> np.ndarray:
    c = [x.mid for x in br.forward.coeffs]
    dc = [x.mid for x in br.derivative.coeffs]
    ya, yb = float(br.image_exact[0]), float(br.image_exact[1])
    t = (values - ya) / (yb - ya) if yb != ya else np.full_like(values, 0.5)
    x = A + np.clip(t, 0.0, 1.0) * (B - A)
    for _ in range(40):
        f = np.polynomial.polynomial.polyval(x, c) - values
        fp = np.polynomial.polynomial.polyval(x, dc)
        x_new = np.clip(x - f / fp, A, B)
        moved = np.max(np.abs(x_new - x)) if x.size else 0.0
        x = x_new
        if moved <= 4e-16:
            break
    return x


def branch_invert(branch: Branch, y: Interval) -> Interval | None:
    """Enclosure of every x in the domain with branch(x) in y.

    Returns None when y misses the branch image; the caller skips the branch.
    """
    if not y.intersects(branch.image):
        return None
    lo, hi = branch.invert_values(np.array([y.lo, y.hi]))
    if branch.increasing:
        return Interval(float(lo[0]), float(hi[1]))
    return Interval(float(lo[1]), float(hi[0]))


@dataclass(frozen=True)
class PiecewiseMap:
    name: str
    branches: tuple[Branch, ...]
    ly_alpha: Interval
    ly_B0: Interval
    gamma_const: Interval
    ly_source: str
    config: Mapping[str, Any]
    digest: str

    @property
    def min_slope(self) -> float:
        return min(b.min_slope for b in self.branches)

    @property
    def max_slope(self) -> float:
        return max(b.max_slope for b in self.branches)

    def summary(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "branches": len(self.branches),
            "ly_alpha": self.ly_alpha,
            "ly_B0": self.ly_B0,
            "ly_source": self.ly_source,
            "digest": self.digest,
        }


def _slope_data(forward: Poly, dom: Interval) -> tuple[float, float, float, bool]:
    """inf |T'|, sup |T'|, sup |T''|/T'^2 on dom and the orientation."""
    dp = forward.derivative()
    d2 = dp.derivative()
    edges = np.linspace(dom.lo, dom.hi, _SUBDIVISIONS + 1)
    edges[0], edges[-1] = dom.lo, dom.hi
    lam, smax, dist = math.inf, 0.0, 0.0
    signs = set()
    for x0, x1 in zip(edges[:-1], edges[1:]):
        box = Interval(float(x0), float(x1))
        slope = dp(box)
        curv = d2(box)
        if curv.lo > 0 or curv.hi < 0 or (curv.lo == curv.hi == 0):
            # T' is monotone here, so its range is spanned by the endpoints.
            ends = dp(Interval(float(x0))).hull(dp(Interval(float(x1))))
            slope = Interval(max(slope.lo, ends.lo), min(slope.hi, ends.hi))
        if slope.lo > 0:
            signs.add(1)
        elif slope.hi < 0:
            signs.add(-1)
        else:
            signs.add(0)
        mig = slope.mig()
        lam = min(lam, mig)
        smax = max(smax, slope.mag())
        if mig > 0:
            dist = max(dist, (Interval(curv.mag()) / (Interval(mig) * Interval(mig))).hi)
    if len(signs) != 1 or 0 in signs:
        raise MapSpecError("branch derivative is not certified to keep a constant sign")
    return lam, smax, dist, signs == {1}


def _parse_endpoint(spec, exact_poly: Poly, bracket: tuple[float, float]):
    if isinstance(spec, Mapping):
        if "solve" not in spec:
            raise MapSpecError(f"endpoint mapping needs a 'solve' key, got {dict(spec)}")
        value = _to_fraction(str(spec["solve"]))
        br = spec.get("bracket", bracket)
        enc = _enclose_root(exact_poly, value, float(_to_fraction(str(br[0]))), float(_to_fraction(str(br[1]))))
        return enc, None, value
    x = _to_fraction(str(spec))
    return Interval.exact(x), x, exact_poly.eval_exact(x)


def _canonical(config: Mapping[str, Any]) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)


def build_map(config: Mapping[str, Any], ly_alpha=None, ly_B0=None) -> PiecewiseMap:
    """Certify a map description and attach its Lasota-Yorke constants."""
    try:
        raw = config["branches"]
    except (KeyError, TypeError) as exc:
        raise MapSpecError("map config needs a 'branches' list") from exc
    if not isinstance(raw, Sequence) or not raw:
        raise MapSpecError("map config needs a non-empty 'branches' list")
    staged = []
    for i, b in enumerate(raw):
        try:
            coeffs = [_to_fraction(str(c)) for c in b["poly"]]
            dom = b["domain"]
            if len(dom) != 2:
                raise MapSpecError(f"branch {i}: domain needs two endpoints")
        except (KeyError, TypeError, ValueError) as exc:
            raise MapSpecError(f"branch {i}: {exc}") from exc
        poly = Poly(coeffs)
        left = _parse_endpoint(dom[0], poly, (0.0, 1.0))
        right = _parse_endpoint(dom[1], poly, (0.0, 1.0))
        staged.append([left, right, poly])
    staged.sort(key=lambda s: s[0][0].lo)
    if staged[0][0][1] != 0 or staged[-1][1][1] != 1:
        raise MapSpecError("branch domains must start at exactly 0 and end at exactly 1")
    for i, (a, b) in enumerate(zip(staged, staged[1:])):
        r_enc, r_x, _ = a[1]
        l_enc, l_x, _ = b[0]
        if r_x is not None and l_x is not None:
            if r_x != l_x:
                kind = "overlap" if r_x > l_x else "gap"
                raise MapSpecError(f"branch domains {i} and {i + 1} {kind} ({r_x} vs {l_x})")
        elif not r_enc.intersects(l_enc):
            raise MapSpecError(f"branch domains {i} and {i + 1} do not meet")
        else:
            common = r_enc.intersect(l_enc)
            a[1] = (common, r_x, a[1][2])
            b[0] = (common, l_x, b[0][2])
    branches = []
    for i, ((l_enc, lx, limg), (r_enc, rx, rimg), poly) in enumerate(staged):
        if l_enc.hi >= r_enc.lo and not (lx is not None and rx is not None and lx < rx):
            raise MapSpecError(f"branch {i} has an empty or inverted domain")
        if not (0 <= limg <= 1 and 0 <= rimg <= 1):
            raise MapSpecError(f"branch {i} image leaves [0, 1]")
        dom = Interval(l_enc.lo, r_enc.hi)
        lam, smax, dist, inc = _slope_data(poly, dom)
        if lam <= 1.0:
            raise MapSpecError(f"branch {i} is not certified expanding (inf |T'| >= {lam})")
        if inc != (rimg > limg):
            raise MapSpecError(f"branch {i} endpoint images contradict its orientation")
        dp = poly.derivative()
        branches.append(
            Branch(l_enc, r_enc, poly, dp, dp.derivative(), (limg, rimg), inc, lam, smax, dist)
        )
    digest = hashlib.sha256(_canonical({"branches": raw}).encode()).hexdigest()
    name = str(config.get("name", "custom"))
    alpha_in = ly_alpha if ly_alpha is not None else config.get("ly_alpha")
    b0_in = ly_B0 if ly_B0 is not None else config.get("ly_B0")
    proto = PiecewiseMap(name, tuple(branches), Interval(0.0), Interval(0.0), Interval(0.0), "", dict(config), digest)
    if alpha_in is None or b0_in is None:
        alpha, b0 = ly_constants_full_branch(proto)
    if alpha_in is not None:
        alpha = Interval.exact(str(alpha_in))
    if b0_in is not None:
        b0 = Interval.exact(str(b0_in))
    source = {0: "derived", 1: "mixed", 2: "user"}[(alpha_in is not None) + (b0_in is not None)]
    if alpha.hi >= 1.0:
        raise MapSpecError(f"Lasota-Yorke alpha {alpha.hi} is not below 1")
    if b0.lo < 0:
        raise MapSpecError("Lasota-Yorke B0 must be nonnegative")
    one = Interval(1.0)
    a1 = alpha + one
    gamma_const = Interval(max(a1.lo, b0.lo), max(a1.hi, b0.hi))
    return PiecewiseMap(name, tuple(branches), alpha, b0, gamma_const, source, dict(config), digest)


def ly_constants_full_branch(tmap: PiecewiseMap) -> tuple[Interval, Interval]:
    """(alpha, B0) for maps whose branches are all onto [0, 1].

    alpha = 1 / inf|T'| and B0 = sup |T''| / T'^2.
    """
    for i, b in enumerate(tmap.branches):
        if not b.onto:
            raise UnsupportedMapError(
                f"branch {i} is not onto [0, 1]; supply ly_alpha and ly_B0 (an iterate of the map may satisfy the inequality)"
            )
    lam = min(b.min_slope for b in tmap.branches)
    alpha = Interval(1.0) / Interval(lam)
    b0 = max(b.distortion for b in tmap.branches)
    return Interval(alpha.hi), Interval(b0)


def _load_config_file(path: str) -> dict[str, Any]:
    import yaml

    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise MapSpecError(f"map spec not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise MapSpecError(f"cannot parse map config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise MapSpecError(f"map config {path} must be a mapping")
    data.setdefault("name", os.path.splitext(os.path.basename(path))[0])
    return data


def registry_get(name: str, ly_alpha=None, ly_B0=None) -> PiecewiseMap:
    """A certified map by registry name or config-file path (YAML or JSON)."""
    if name in REGISTRY:
        return build_map(REGISTRY[name], ly_alpha, ly_B0)
    if os.path.sep in name or name.endswith((".yaml", ".yml", ".json")) or os.path.exists(name):
        return build_map(_load_config_file(name), ly_alpha, ly_B0)
    raise MapSpecError(f"map spec not found: {name!r} is neither a registry name ({', '.join(REGISTRY)}) nor a file")
