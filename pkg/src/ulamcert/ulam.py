"""Ulam discretization on uniform dyadic meshes.

Vectors hold cell masses v_i = integral of f over I_i, so the function they
represent is sum v_i * d * 1_{I_i}.  The operator acts by left
multiplication, (vP)_j = sum_k v_k P_kj, which keeps mass and never grows
the L1 norm.  Entries are stored as midpoint/radius CSR arrays.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .map_model import Branch, PiecewiseMap
from .rigor import (
    Interval,
    Observable,
    down,
    gamma,
    integrate_uniform_cells,
    sum_upper,
    up,
    vadd_tight,
    vmul,
    vsum,
)

__all__ = [
    "Mesh",
    "BasisVector",
    "UlamOperator",
    "AssemblyError",
    "project",
    "assemble",
    "apply",
    "apply_midrad",
    "integrate_product_midrad",
    "pointwise_product_with_density",
    "integrate_product",
    "save_operator",
    "load_operator",
    "cached_assemble",
]

_TINY = 2.0**-1074
_CHUNK = 1 << 19
_IO_BLOCK = 1 << 22


class AssemblyError(RuntimeError):
    """An assembled operator failed its soundness checks."""


@dataclass(frozen=True)
class Mesh:
    d: int

    def __post_init__(self):
        if self.d < 2 or self.d & (self.d - 1):
            raise ValueError(f"mesh size must be a power of two >= 2, got {self.d}")

    @classmethod
    def from_exponent(cls, m: int) -> "Mesh":
        return cls(1 << m)

    @property
    def exponent(self) -> int:
        return self.d.bit_length() - 1

    @property
    def eps(self) -> Interval:
        return Interval(1.0 / self.d)

    def cell(self, k: int) -> Interval:
        return Interval(k / self.d, (k + 1) / self.d)


class BasisVector:
    """Enclosures [lo_i, hi_i] of the cell masses of a step function."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi=None):
        lo = np.asarray(lo, dtype=np.float64)
        hi = lo if hi is None else np.asarray(hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo and hi must be 1-d arrays of equal length")
        if np.any(lo > hi) or np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("invalid enclosure: lo > hi or NaN")
        self.lo = lo
        self.hi = hi

    @classmethod
    def uniform(cls, d: int) -> "BasisVector":
        return cls(np.full(d, 1.0 / d))

    def __len__(self) -> int:
        return self.lo.size

    def coeff(self, i: int) -> Interval:
        return Interval(float(self.lo[i]), float(self.hi[i]))

    def mid_rad(self) -> tuple[np.ndarray, np.ndarray]:
        m = 0.5 * self.lo + 0.5 * self.hi
        m = np.minimum(np.maximum(m, self.lo), self.hi)
        r = np.maximum(up(self.hi - m), up(m - self.lo))
        r = np.where(self.hi == self.lo, 0.0, r)
        return m, r

    def total(self) -> Interval:
        return vsum(self.lo, self.hi)

    def l1_upper(self) -> float:
        return sum_upper(np.maximum(np.abs(self.lo), np.abs(self.hi)))

    def max_width(self) -> float:
        return float(np.max(self.hi - self.lo)) if self.lo.size else 0.0


class UlamOperator:
    """Sparse interval matrix P_kj stored row-wise as midpoint and radius."""

    def __init__(self, mesh: Mesh, indptr, indices, mid, rad, verify: bool = True):
        self.mesh = mesh
        d = mesh.d
        mid = np.asarray(mid, dtype=np.float64)
        # int32 offsets let scipy share the arrays instead of copying them.
        index_dtype = np.int32 if mid.size < 2**31 else np.int64
        self.indptr = np.asarray(indptr, dtype=index_dtype)
        self.indices = np.asarray(indices, dtype=index_dtype)
        self.mid = mid
        self.rad = np.asarray(rad, dtype=np.float64)
        self._mid = sp.csr_matrix((self.mid, self.indices, self.indptr), shape=(d, d), copy=False)
        self._rad = sp.csr_matrix((self.rad, self.indices, self.indptr), shape=(d, d), copy=False)
        self._midT = self._mid.T
        self._radT = self._rad.T
        col_counts = np.bincount(self.indices, minlength=d)
        self.max_col_count = int(col_counts.max()) if col_counts.size else 0
        del col_counts
        row_counts = np.diff(self.indptr)
        self.max_row_count = int(row_counts.max()) if row_counts.size else 0
        del row_counts
        g = gamma(max(self.max_row_count, 2) + 2)
        row_mid, row_rad = self._row_totals()
        self.mid_row_max = float(up(np.max(row_mid) * (1 + 2 * g)))
        self.rad_row_max = float(up(np.max(row_rad) * (1 + 2 * g)))
        del row_mid, row_rad
        self._gm = gamma(max(self.max_col_count, 2))
        self._gsum = gamma(3 * max(self.max_col_count, 2) + 8)
        if verify:
            self.verify()

    def _row_totals(self) -> tuple[np.ndarray, np.ndarray]:
        ones = np.ones(self.d)
        return self._mid @ ones, self._rad @ ones

    @property
    def d(self) -> int:
        return self.mesh.d

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def row(self, k: int) -> list[tuple[int, Interval]]:
        s, e = self.indptr[k], self.indptr[k + 1]
        out = []
        for j, m, r in zip(self.indices[s:e], self.mid[s:e], self.rad[s:e]):
            if r == 0:
                iv = Interval(float(m))
            else:
                iv = Interval(float(max(down(m - r), 0.0)), float(min(up(m + r), 1.0)))
            out.append((int(j), iv))
        return out

    def entry(self, k: int, j: int) -> Interval:
        total = Interval(0.0)
        for jj, iv in self.row(k):
            if jj == j:
                total = total + iv
        return total

    def row_sums(self) -> tuple[np.ndarray, np.ndarray]:
        """Enclosures of every row sum."""
        g = gamma(max(self.max_row_count, 2) + 2)
        row_mid, row_rad = self._row_totals()
        err = up((row_mid + row_rad) * (2 * g))
        return down(row_mid - row_rad - err), up(row_mid + row_rad + err)

    def verify(self) -> None:
        if np.any(self.rad < 0) or np.any(self.mid < 0) or np.any(self.mid > 1):
            raise AssemblyError("entry enclosure outside [0, 1]")
        lo, hi = self.row_sums()
        bad = np.nonzero((lo > 1.0) | (hi < 1.0))[0]
        if bad.size:
            k = int(bad[0])
            raise AssemblyError(
                f"row sum of row {k} is [{lo[k]!r}, {hi[k]!r}] and does not contain 1 ({bad.size} bad rows)"
            )

    # -- floating products with rigorous error bounds ---------------------
    def float_left_mul(self, w: np.ndarray) -> np.ndarray:
        """fl(w P_mid) for a vector or for the columns of a (d, B) array."""
        return self._midT @ w

    def step_error(self, w_l1: np.ndarray | float) -> np.ndarray | float:
        """Bound on ||w P - fl(w P_mid)||_1 given ||w||_1 <= w_l1 (any exact P in the enclosure)."""
        slack = self.nnz * _TINY
        return up((self.rad_row_max + self._gm * self.mid_row_max) * np.asarray(w_l1)) + slack

    def tobytes_digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.indptr, self.indices, self.mid, self.rad):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Projection and vector identities
# ---------------------------------------------------------------------------


def project(phi: Observable, mesh: Mesh) -> BasisVector:
    lo, hi = integrate_uniform_cells(phi, mesh.d)
    return BasisVector(lo, hi)


def apply_midrad(P: UlamOperator, vm: np.ndarray, vr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint/radius enclosure of v P for every exact P and v = vm +- vr.

    The error splits as rounding of fl(vm P_mid), vr through P_mid and vm, vr
    through the entry radii; all bounding sums have nonnegative terms.
    """
    if vm.shape != (P.d,) or vr.shape != (P.d,):
        raise ValueError(f"dimension mismatch: vector {vm.shape} vs operator {P.d}")
    av = np.abs(vm)
    ym = P._midT @ vm
    spread = P._midT @ up(up(P._gm * av) + vr)
    spread += P._radT @ up(av + vr)
    del av
    radius = up(spread * (1.0 + 2.0 * P._gsum))
    radius += 4 * (P.max_col_count + 1) * _TINY
    return ym, up(radius)


def apply(P: UlamOperator, v: BasisVector) -> BasisVector:
    """Enclosure of v P for every exact P and v inside the enclosures."""
    if len(v) != P.d:
        raise ValueError(f"dimension mismatch: vector {len(v)} vs operator {P.d}")
    vm, vr = v.mid_rad()
    ym, radius = apply_midrad(P, vm, vr)
    return BasisVector(down(ym - radius), up(ym + radius))


def integrate_product_midrad(um, ur, wm, wr, mesh: Mesh) -> Interval:
    """Enclosure of sum u_i w_i d for u = um +- ur and w = wm +- wr."""
    n = um.size
    prod = um * wm
    s = float(np.sum(prod))
    err = sum_upper(np.abs(prod)) * (gamma(max(n, 2) + 1) * 2)
    del prod
    spread = sum_upper(up(up(np.abs(um) * wr) + up(ur * (np.abs(wm) + wr))))
    total = float(up(up(spread) + up(err))) + n * _TINY
    lo = float(down(s - total)) * mesh.d
    hi = float(up(s + total)) * mesh.d
    return Interval(float(down(lo)), float(up(hi)))


def pointwise_product_with_density(v: BasisVector, w: BasisVector, mesh: Mesh) -> BasisVector:
    """Masses of (step function of v) times (step function of w): v_i w_i d."""
    if len(v) != len(w) or len(v) != mesh.d:
        raise ValueError("dimension mismatch")
    lo, hi = vmul(v.lo, v.hi, w.lo, w.hi)
    return BasisVector(lo * mesh.d, hi * mesh.d)


def integrate_product(v: BasisVector, w: BasisVector, mesh: Mesh) -> Interval:
    """Integral of the product of the two represented step functions."""
    lo, hi = vmul(v.lo, v.hi, w.lo, w.hi)
    return vsum(lo * mesh.d, hi * mesh.d)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def _branch_segments(br: Branch, d: int):
    """Grid range and clamped preimage enclosures of the grid points g/d."""
    img_lo, img_hi = sorted(br.image_exact)
    g0 = math.floor(img_lo * d)
    g1 = min(math.ceil(img_hi * d), d)
    grid = np.arange(g0, g1 + 1, dtype=np.float64) / d
    xlo, xhi = br.invert_values(grid)
    return g0, g1, xlo, xhi


def _segment_entries(br: Branch, d: int, g0: int, j_lo: int, j_hi: int, xlo, xhi):
    """Entries (k, j, mid, rad) for target cells j in [j_lo, j_hi)."""
    idx = np.arange(j_lo - g0, j_hi - g0)
    if br.increasing:
        a_lo, a_hi, b_lo, b_hi = xlo[idx], xhi[idx], xlo[idx + 1], xhi[idx + 1]
    else:
        a_lo, a_hi, b_lo, b_hi = xlo[idx + 1], xhi[idx + 1], xlo[idx], xhi[idx]
    ks = np.floor(a_lo * d).astype(np.int64)
    ke = np.minimum(np.floor(b_hi * d).astype(np.int64), d - 1)
    ks = np.minimum(np.maximum(ks, 0), d - 1)
    span = int((ke - ks).max()) + 1 if ks.size else 0
    j = np.arange(j_lo, j_hi, dtype=np.int64)
    parts = []
    for c in range(max(span, 0)):
        k = ks + c
        valid = k <= ke
        if not valid.any():
            continue
        kv = k[valid]
        left = kv / d
        right = (kv + 1) / d
        _, ov_hi = vadd_tight(np.minimum(b_hi[valid], right), -np.maximum(a_lo[valid], left))
        ov_lo, _ = vadd_tight(np.minimum(b_lo[valid], right), -np.maximum(a_hi[valid], left))
        e_hi = np.minimum(np.maximum(ov_hi, 0.0) * d, 1.0)
        e_lo = np.minimum(np.maximum(ov_lo, 0.0) * d, e_hi)
        keep = e_hi > 0
        parts.append((kv[keep], j[valid][keep], e_lo[keep], e_hi[keep]))
    if not parts:
        empty = np.zeros(0)
        return empty.astype(np.int64), empty.astype(np.int32), empty, empty
    k = np.concatenate([p[0] for p in parts])
    jj = np.concatenate([p[1] for p in parts])
    lo = np.concatenate([p[2] for p in parts])
    hi = np.concatenate([p[3] for p in parts])
    order = np.lexsort((jj, k))
    k, jj, lo, hi = k[order], jj[order], lo[order], hi[order]
    mid = 0.5 * lo + 0.5 * hi
    mid = np.minimum(np.maximum(mid, lo), hi)
    rad = np.where(lo == hi, 0.0, np.maximum(up(hi - mid), up(mid - lo)))
    return k.astype(np.int64), jj.astype(np.int32), mid, rad


def _chunk_bounds(d: int, g0: int, g1: int, xlo, xhi) -> list[tuple[int, int]]:
    """Split target cells into chunks whose row ranges do not interleave.

    A seam at grid point j is clean when the enclosure of its preimage does
    not straddle a cell boundary; then the rows of the two sides can share at
    most one row and concatenation keeps rows sorted.
    """
    bounds = [g0]
    j = g0 + _CHUNK
    while j < g1:
        i = j - g0
        if math.floor(xhi[i] * d) == math.floor(xlo[i] * d):
            bounds.append(j)
            j += _CHUNK
        else:
            j += 1
    bounds.append(g1)
    return list(zip(bounds[:-1], bounds[1:]))


def assemble(tmap: PiecewiseMap, mesh: Mesh, workers: int = 1) -> UlamOperator:
    """Interval Ulam matrix P_kj = d * |I_k intersect T^-1 I_j|.

    Work is split into chunks of target cells; chunks are computed
    independently (optionally on several threads) and concatenated in a
    fixed order, so the result does not depend on the worker count.
    """
    d = mesh.d
    branches = sorted(tmap.branches, key=lambda b: b.left.lo)
    rows, cols, mids, rads = [], [], [], []
    for br in branches:
        g0, g1, xlo, xhi = _branch_segments(br, d)
        chunks = _chunk_bounds(d, g0, g1, xlo, xhi)

        def work(bounds, br=br, g0=g0, xlo=xlo, xhi=xhi):
            return _segment_entries(br, d, g0, bounds[0], bounds[1], xlo, xhi)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(work, chunks))
        else:
            results = [work(c) for c in chunks]
        if not br.increasing:
            results.reverse()
        for k, j, m, r in results:
            rows.append(k.astype(np.int32))
            cols.append(j)
            mids.append(m)
            rads.append(r)
        del xlo, xhi
    k = np.concatenate(rows)
    del rows
    j = np.concatenate(cols)
    del cols
    mid = np.concatenate(mids)
    del mids
    rad = np.concatenate(rads)
    del rads
    if k.size > 1 and np.any(k[1:] < k[:-1]):
        order = np.argsort(k, kind="stable")
        k, j, mid, rad = k[order], j[order], mid[order], rad[order]
        del order
    counts = np.bincount(k, minlength=d)
    del k
    indptr = np.zeros(d + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return UlamOperator(mesh, indptr, j, mid, rad)


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------

_MAGIC = b"ULAMOP01"
_VERSION = 1
_HEADER = struct.Struct("<8sIQQ32s")


def save_operator(P: UlamOperator, path: str, map_digest: str) -> None:
    """Binary little-endian layout: header, row counts, column indices, then
    interleaved (midpoint, radius) pairs, all in row order."""
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, P.d, P.nnz, bytes.fromhex(map_digest)))
        np.diff(P.indptr).astype("<u4").tofile(fh)
        P.indices.astype("<i4").tofile(fh)
        for s in range(0, P.nnz, _IO_BLOCK):
            e = min(s + _IO_BLOCK, P.nnz)
            pairs = np.empty((e - s, 2), dtype="<f8")
            pairs[:, 0] = P.mid[s:e]
            pairs[:, 1] = P.rad[s:e]
            pairs.tofile(fh)
    os.replace(tmp, path)


def load_operator(path: str, map_digest: str | None = None, d: int | None = None) -> UlamOperator:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise AssemblyError(f"truncated operator cache {path}")
        magic, version, dd, nnz, digest = _HEADER.unpack(header)
        if magic != _MAGIC or version != _VERSION:
            raise AssemblyError(f"{path} is not an operator cache of this version")
        if map_digest is not None and digest.hex() != map_digest:
            raise AssemblyError(f"{path} was built for a different map")
        if d is not None and dd != d:
            raise AssemblyError(f"{path} holds d={dd}, expected {d}")
        counts = np.fromfile(fh, dtype="<u4", count=dd)
        indices = np.fromfile(fh, dtype="<i4", count=nnz)
        if counts.size != dd or indices.size != nnz:
            raise AssemblyError(f"truncated operator cache {path}")
        mid = np.empty(nnz)
        rad = np.empty(nnz)
        for s in range(0, nnz, _IO_BLOCK):
            e = min(s + _IO_BLOCK, nnz)
            pairs = np.fromfile(fh, dtype="<f8", count=2 * (e - s))
            if pairs.size != 2 * (e - s):
                raise AssemblyError(f"truncated operator cache {path}")
            pairs = pairs.reshape(-1, 2)
            mid[s:e] = pairs[:, 0]
            rad[s:e] = pairs[:, 1]
    indptr = np.zeros(dd + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    if indptr[-1] != nnz:
        raise AssemblyError(f"row counts in {path} do not add up to the entry count")
    return UlamOperator(Mesh(int(dd)), indptr, indices, mid, rad, verify=True)


def cache_path(cache_dir: str, map_digest: str, d: int) -> str:
    return os.path.join(cache_dir, f"{map_digest[:16]}_d{d}.ulam")


def cached_assemble(tmap: PiecewiseMap, mesh: Mesh, cache_dir: str | None = None, workers: int = 1) -> UlamOperator:
    """Assemble, reading and writing the on-disk cache when a directory is given."""
    if not cache_dir:
        return assemble(tmap, mesh, workers)
    path = cache_path(cache_dir, tmap.digest, mesh.d)
    if os.path.exists(path):
        return load_operator(path, tmap.digest, mesh.d)
    P = assemble(tmap, mesh, workers)
    os.makedirs(cache_dir, exist_ok=True)
    save_operator(P, path, tmap.digest)
    return P
