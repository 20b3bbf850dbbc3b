"""Filter banks on the unit disk.

Two bank families:

* smooth Bessel-mode profiles ``J_m(lam * r) * cos(m phi)`` (and ``sin``
  for ``m >= 1``), supported on the unit disk and ordered by ascending
  eigenvalue ``lam`` with cosine before sine at equal eigenvalue, so low
  indices are low-frequency;
* the one-hot (Dirac) bank whose members pick out single kernel cells, in
  row-major order.  A weighted sum over the full Dirac bank reproduces an
  arbitrary dense kernel, which is how the layers degenerate to ordinary
  convolution.

Rasterization maps the kernel grid into the unit disk with radius
``rho = (k - 1) / 2 + 0.5`` and evaluates the analytic profile at warped
grid coordinates; no interpolation of a discrete raster is involved, so
transformed rasters carry a single discretization error.  Reference
(identity-transform) rasters are normalized to unit l2 norm once and the
same normalizer is reused for every transform.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .affine import TransformParams, transform_matrix

MAX_BESSEL_ORDER = 32
MAX_BESSEL_ARG = 1.0e3


def bessel_j(m: int, x):
    """Bessel function of the first kind J_m, for m in [0, 32], x >= 0."""
    if not 0 <= int(m) <= MAX_BESSEL_ORDER:
        raise ValueError(f"order m={m} outside supported range [0, {MAX_BESSEL_ORDER}]")
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0.0):
        raise ValueError("bessel_j is defined here for non-negative arguments only")
    if np.any(arr > MAX_BESSEL_ARG):
        raise ValueError(f"argument exceeds supported bound {MAX_BESSEL_ARG}")
    out = special.jv(int(m), arr)
    return float(out) if np.isscalar(x) else out


@functools.lru_cache(maxsize=None)
def _positive_roots(m: int, count: int) -> tuple[float, ...]:
    """First ``count`` positive roots of J_m via sign-scan plus bisection.

    Consecutive roots of J_m are at least ~pi apart, so a 0.1 scan step
    cannot straddle two of them.
    """
    step = 0.1
    lo = 1e-9
    roots: list[float] = []
    x0 = lo
    while len(roots) < count:
        grid = x0 + step * np.arange(0, 400)
        vals = special.jv(m, grid)
        signs = np.sign(vals)
        flips = np.nonzero(signs[:-1] * signs[1:] < 0)[0]
        for i in flips:
            a, b = grid[i], grid[i + 1]
            fa = special.jv(m, a)
            for _ in range(60):
                mid = 0.5 * (a + b)
                fm = special.jv(m, mid)
                if fa * fm <= 0.0:
                    b = mid
                else:
                    a, fa = mid, fm
                if b - a < 1e-13:
                    break
            roots.append(0.5 * (a + b))
            if len(roots) == count:
                break
        x0 = grid[-1]
    return tuple(roots)


class BesselTable:
    """Positive Bessel roots lam_{m,q}, q >= 1, bisected to ~1e-12."""

    def __init__(self, max_order: int, roots_per_order: int):
        if not 0 <= max_order <= MAX_BESSEL_ORDER:
            raise ValueError(f"max_order={max_order} outside [0, {MAX_BESSEL_ORDER}]")
        self.max_order = max_order
        self.roots_per_order = roots_per_order

    def root(self, m: int, q: int) -> float:
        if not 0 <= m <= self.max_order:
            raise ValueError(f"order m={m} outside table range")
        if not 1 <= q <= self.roots_per_order:
            raise ValueError(f"root index q={q} outside table range")
        return _positive_roots(m, self.roots_per_order)[q - 1]

    def roots(self, m: int) -> tuple[float, ...]:
        if not 0 <= m <= self.max_order:
            raise ValueError(f"order m={m} outside table range")
        return _positive_roots(m, self.roots_per_order)


KIND_FOURIER_BESSEL = "fourier_bessel"
KIND_DIRAC = "dirac"


@dataclass(frozen=True)
class BasisSpec:
    """Bank family, kernel grid size (odd) and number of members."""

    kind: str
    kernel_size: int
    num_basis: int

    def __post_init__(self):
        if self.kind not in (KIND_FOURIER_BESSEL, KIND_DIRAC):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        k = self.kernel_size
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {k}")
        if self.kind == KIND_FOURIER_BESSEL:
            if not 1 <= self.num_basis <= k * k:
                raise ValueError(
                    f"num_basis={self.num_basis} outside [1, {k * k}] for k={k}"
                )
        else:
            if self.num_basis != k * k:
                raise ValueError(
                    f"dirac bank requires num_basis == k*k == {k * k}, "
                    f"got {self.num_basis}"
                )


@dataclass(frozen=True)
class _Mode:
    m: int
    q: int
    lam: float
    trig: str  # "cos" | "sin"


def _enumerate_modes(num_basis: int) -> tuple[_Mode, ...]:
    roots_per_order = 24
    candidates: list[_Mode] = []
    for m in range(0, MAX_BESSEL_ORDER + 1):
        for q, lam in enumerate(_positive_roots(m, roots_per_order), start=1):
            candidates.append(_Mode(m, q, lam, "cos"))
            if m >= 1:
                candidates.append(_Mode(m, q, lam, "sin"))
    candidates.sort(key=lambda md: (md.lam, 0 if md.trig == "cos" else 1))
    if num_basis > len(candidates):
        raise ValueError(f"cannot enumerate {num_basis} disk modes")
    return tuple(candidates[:num_basis])


def _grid_offsets(k: int) -> np.ndarray:
    h = (k - 1) // 2
    return np.arange(-h, h + 1, dtype=np.float64)


class FilterBasis:
    """An immutable bank of analytic filters plus reference rasters."""

    def __init__(self, spec: BasisSpec):
        self.spec = spec
        k = spec.kernel_size
        self.kernel_size = k
        self.num_basis = spec.num_basis
        self.disk_radius = (k - 1) / 2.0 + 0.5
        if spec.kind == KIND_FOURIER_BESSEL:
            self.modes = _enumerate_modes(spec.num_basis)
        else:
            self.modes = ()
        eye = np.eye(2)
        raw = np.stack(
            [self._analytic_grid(j, eye) for j in range(self.num_basis)]
        )
        norms = np.sqrt(np.sum(raw * raw, axis=(1, 2)))
        if np.any(norms <= 0.0):
            bad = int(np.argmin(norms))
            raise ValueError(f"basis member {bad} rasterizes to zero on this grid")
        self.normalizers = norms
        self.normalizers.flags.writeable = False
        self.rasters = raw / norms[:, None, None]
        self.rasters.flags.writeable = False

    # -- analytic evaluation -------------------------------------------------

    def fb_function(self, j: int, r, phi):
        """Raw (unnormalized) Bessel-mode value at polar points, 0 off-disk."""
        if self.spec.kind != KIND_FOURIER_BESSEL:
            raise ValueError("fb_function is defined for the Bessel bank only")
        self._check_index(j)
        r = np.asarray(r, dtype=np.float64)
        if np.any(r < 0.0):
            raise ValueError("radius must be non-negative")
        phi = np.asarray(phi, dtype=np.float64)
        mode = self.modes[j]
        inside = r <= 1.0
        radial = special.jv(mode.m, mode.lam * np.minimum(r, 1.0))
        angular = np.cos(mode.m * phi) if mode.trig == "cos" else np.sin(mode.m * phi)
        out = np.where(inside, radial * angular, 0.0)
        return float(out) if out.ndim == 0 else out

    def _analytic_grid(self, j: int, warp: np.ndarray) -> np.ndarray:
        """Evaluate member ``j`` at warped grid offsets (raw scale)."""
        offs = _grid_offsets(self.kernel_size)
        px, py = np.meshgrid(offs, offs, indexing="xy")
        qx = warp[0, 0] * px + warp[0, 1] * py
        qy = warp[1, 0] * px + warp[1, 1] * py
        if self.spec.kind == KIND_FOURIER_BESSEL:
            r = np.hypot(qx, qy) / self.disk_radius
            phi = np.arctan2(qy, qx)
            return self.fb_function(j, r, phi)
        # one-hot cell as a bilinear hat so warped evaluation stays analytic
        self._check_index(j)
        row, col = divmod(j, self.kernel_size)
        h = (self.kernel_size - 1) // 2
        cx, cy = col - h, row - h
        hat_x = np.maximum(0.0, 1.0 - np.abs(qx - cx))
        hat_y = np.maximum(0.0, 1.0 - np.abs(qy - cy))
        return hat_x * hat_y

    def raster_with_matrix(self, j: int, warp: np.ndarray) -> np.ndarray:
        """Reference-normalized raster with grid offsets mapped through ``warp``."""
        self._check_index(j)
        return self._analytic_grid(j, np.asarray(warp, dtype=np.float64)) / float(
            self.normalizers[j]
        )

    def _check_index(self, j: int):
        if not 0 <= j < self.num_basis:
            raise IndexError(f"basis index {j} outside [0, {self.num_basis})")


@functools.lru_cache(maxsize=None)
def fourier_bessel_basis(kernel_size: int, num_basis: int) -> FilterBasis:
    return FilterBasis(BasisSpec(KIND_FOURIER_BESSEL, kernel_size, num_basis))


@functools.lru_cache(maxsize=None)
def dirac_basis(kernel_size: int) -> FilterBasis:
    return FilterBasis(BasisSpec(KIND_DIRAC, kernel_size, kernel_size * kernel_size))


def build_basis(spec: BasisSpec) -> FilterBasis:
    if spec.kind == KIND_DIRAC:
        return dirac_basis(spec.kernel_size)
    return fourier_bessel_basis(spec.kernel_size, spec.num_basis)


def rasterize(basis: FilterBasis, j: int, t: TransformParams) -> np.ndarray:
    """Raster of member ``j`` transformed by ``t``.

    Grid offsets are pulled back through the true matrix inverse of M(t)
    and the result carries the scale Jacobian 2**(-2 alpha); no
    re-normalization is applied after the warp.
    """
    warp = np.linalg.inv(transform_matrix(t))
    return basis.raster_with_matrix(j, warp) * 2.0 ** (-2.0 * t.alpha)


def gram_matrix(basis: FilterBasis) -> np.ndarray:
    """Pairwise inner products of the reference rasters."""
    flat = basis.rasters.reshape(basis.num_basis, -1)
    return flat @ flat.T
