"""Non-rigorous Monte Carlo cross-check of mu and sigma^2 in high precision.

Orbits are iterated in zeta-bit binary floating point (gmpy2 mpfr) from
pseudo-random zeta-bit starting points.  For block length k the block
averages A_k(x_i) = (1/k) sum_{j<k} psi(T^j x_i) give

    mu~      = mean_i A_k(x_i)
    sigma2~  = mean_i (k A_k(x_i) - k mu)^2 / k.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import gmpy2
import numpy as np

from .map_model import PiecewiseMap
from .rigor import Interval, Observable

__all__ = [
    "McConfig",
    "McResult",
    "simulate_blocks",
    "estimate",
    "run_mc",
    "write_blocks_csv",
    "write_histogram_csv",
    "write_normal_csv",
]

CHUNK = 500


@dataclass(frozen=True)
class McConfig:
    n: int = 20000
    k: int = 100
    precision_bits: int = 1024
    seed: int = 0
    mu_reference: Interval | None = None
    bins: int = 60

    def __post_init__(self):
        if self.precision_bits < 64:
            raise ValueError("precision must be at least 64 bits")
        if self.n < 1 or self.k < 1:
            raise ValueError("n and k must be positive")
        if self.bins < 1:
            raise ValueError("bins must be positive")


@dataclass
class McResult:
    mu_tilde: float
    sigma2_tilde: float
    block_averages: list[float]
    histogram: list[tuple[float, float, int]]
    mu_used: float
    config: McConfig | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "mu_tilde": self.mu_tilde,
            "sigma2_tilde": self.sigma2_tilde,
            "mu_used": self.mu_used,
            "n": len(self.block_averages),
            "k": cfg.k if cfg else None,
            "precision_bits": cfg.precision_bits if cfg else None,
            "seed": cfg.seed if cfg else None,
        }


# ---------------------------------------------------------------------------
# High-precision map and observable
# ---------------------------------------------------------------------------


def _mpfr_poly(coeffs):
    cs = [gmpy2.mpfr(gmpy2.mpq(c.numerator, c.denominator)) for c in coeffs]

    def ev(x):
        acc = cs[-1]
        for c in reversed(cs[:-1]):
            acc = acc * x + c
        return acc

    return ev


def _exact_coeffs(poly) -> list[Fraction]:
    if poly.exact is None:
        raise ValueError("high-precision evaluation needs exact rational coefficients")
    return list(poly.exact)


def _endpoint(br, which: str):
    """The domain endpoint at the current precision, refined by Newton if not exact."""
    iv = br.left if which == "left" else br.right
    if iv.lo == iv.hi:
        return gmpy2.mpfr(iv.lo)
    images = br.image_exact if br.increasing else br.image_exact[::-1]
    target = images[0] if which == "left" else images[1]
    f = _mpfr_poly(_exact_coeffs(br.forward))
    df = _mpfr_poly(_exact_coeffs(br.derivative))
    t = gmpy2.mpfr(gmpy2.mpq(target.numerator, target.denominator))
    x = gmpy2.mpfr(iv.mid)
    for _ in range(2 * gmpy2.get_context().precision.bit_length() + 8):
        step = (f(x) - t) / df(x)
        x -= step
        if step == 0 or abs(step) <= abs(x) * gmpy2.mpfr(2) ** (-gmpy2.get_context().precision):
            break
    return x


class _HPMap:
    def __init__(self, tmap: PiecewiseMap):
        self.cuts = []
        self.funcs = []
        for br in tmap.branches:
            self.cuts.append(_endpoint(br, "right"))
            self.funcs.append(_mpfr_poly(_exact_coeffs(br.forward)))
        self.cuts[-1] = gmpy2.mpfr(1)
        self.zero, self.one = gmpy2.mpfr(0), gmpy2.mpfr(1)

    def __call__(self, x):
        for cut, f in zip(self.cuts, self.funcs):
            if x < cut:
                y = f(x)
                break
        else:
            y = self.funcs[-1](x)
        # Clamp rounding spill at the branch ends back into [0, 1).
        if y < self.zero:
            y = self.zero
        elif y >= self.one:
            y = y - self.one
        return y


class _HPObservable:
    def __init__(self, psi: Observable):
        if not psi.is_polynomial:
            raise ValueError("Monte Carlo needs polynomial observable pieces")
        self.cuts = [gmpy2.mpfr(gmpy2.mpq(pc.right.numerator, pc.right.denominator)) for pc in psi.pieces]
        self.funcs = [_mpfr_poly(_exact_coeffs(pc.poly)) for pc in psi.pieces]

    def __call__(self, x):
        for cut, f in zip(self.cuts, self.funcs):
            if x < cut:
                return f(x)
        return self.funcs[-1](x)


def _chunk_seeds(seed: int, n: int) -> list[int]:
    count = -(-n // CHUNK)
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, dtype=np.uint64)[0]) for s in ss.spawn(count)]


def _run_chunk(args) -> list[float]:
    tmap, psi, k, prec, chunk_seed, count = args
    with gmpy2.context(gmpy2.get_context(), precision=prec):
        T = _HPMap(tmap)
        f = _HPObservable(psi)
        state = gmpy2.random_state(chunk_seed)
        out = []
        for _ in range(count):
            x = gmpy2.mpfr_random(state)
            acc = gmpy2.mpfr(0)
            for _ in range(k):
                acc += f(x)
                x = T(x)
            out.append(float(acc / k))
    return out


def simulate_blocks(tmap: PiecewiseMap, psi: Observable, cfg: McConfig, workers: int = 1) -> list[float]:
    """Block averages A_k(x_i) for n starting points; independent of ``workers``."""
    seeds = _chunk_seeds(cfg.seed, cfg.n)
    jobs = []
    left = cfg.n
    for s in seeds:
        c = min(CHUNK, left)
        jobs.append((tmap, psi, cfg.k, cfg.precision_bits, s, c))
        left -= c
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(j) for j in jobs]
    return [v for part in parts for v in part]


def _histogram(values: np.ndarray, bins: int) -> list[tuple[float, float, int]]:
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return [(lo, hi, int(values.size))]
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return [(float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)]


def estimate(cfg: McConfig, blocks) -> McResult:
    """mu~, sigma2~ and the histogram of the block averages."""
    values = np.asarray(blocks, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no block averages")
    mu_tilde = math.fsum(values) / values.size
    mu = cfg.mu_reference.mid if cfg.mu_reference is not None else mu_tilde
    k = cfg.k
    sigma2 = math.fsum((k * values - k * mu) ** 2 / k) / values.size
    return McResult(mu_tilde, sigma2, values.tolist(), _histogram(values, cfg.bins), mu, cfg)


def run_mc(tmap: PiecewiseMap, psi: Observable, cfg: McConfig, workers: int = 1) -> McResult:
    return estimate(cfg, simulate_blocks(tmap, psi, cfg, workers))


def write_blocks_csv(path: str, result: McResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "block_average"])
        for i, v in enumerate(result.block_averages):
            w.writerow([i, repr(v)])


def write_histogram_csv(path: str, result: McResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for a, b, c in result.histogram:
            w.writerow([repr(a), repr(b), c])


def write_normal_csv(path: str, mu: float, sigma2: float, k: int, lo: float, hi: float, points: int = 200) -> None:
    """Density of N(mu, sigma2/k) on a grid, for overlay on the histogram."""
    var = sigma2 / k
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "density"])
        for x in np.linspace(lo, hi, points):
            dens = math.exp(-((x - mu) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)
            w.writerow([repr(float(x)), repr(dens)])
