"""Measurement harness: warps, equivariance error, MC convergence, metrics.

The equivariance gap of a map ``phi`` under a transform ``g`` compares
``phi(warp(f, g))`` against ``warp(phi(f), g)``.  Both operands (and the
normalizer ``phi(f)``) are centrally cropped by the layer's kernel size
before taking norms, which suppresses boundary artifacts from padding;
the crop is applied identically everywhere so the comparison stays fair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .affine import (
    GroupElement,
    SampleRanges,
    TransformParams,
    sample_transforms,
    transform_matrix,
)
from .basis import FilterBasis, rasterize

PSNR_CAP_DB = 99.0


def warp_image(image, g: GroupElement, mode: str = "zero") -> np.ndarray:
    """Inverse-mapped bilinear warp about the image center.

    ``output(p) = input(M(a)^-1 (p - center - x) + center)`` with zero fill
    outside the frame, or modular indexing when ``mode="wrap"``.  Accepts
    (h, w) or (c, h, w) arrays.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return _warp_single(img, g, mode)
    if img.ndim == 3:
        return np.stack([_warp_single(ch, g, mode) for ch in img])
    raise ValueError(f"expected (h, w) or (c, h, w), got {img.shape}")


def _warp_single(img: np.ndarray, g: GroupElement, mode: str) -> np.ndarray:
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    m_inv = np.linalg.inv(transform_matrix(g.a))
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64), indexing="xy")
    vx = xs - cx - g.x[0]
    vy = ys - cy - g.x[1]
    sx = m_inv[0, 0] * vx + m_inv[0, 1] * vy + cx
    sy = m_inv[1, 0] * vx + m_inv[1, 1] * vy + cy
    return _bilinear(img, sx, sy, mode)


def _bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, mode: str) -> np.ndarray:
    h, w = img.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    def fetch(yy, xx):
        if mode == "wrap":
            return img[yy % h, xx % w]
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        out = np.zeros(yy.shape)
        out[valid] = img[yy[valid], xx[valid]]
        return out

    v00 = fetch(y0, x0)
    v01 = fetch(y0, x0 + 1)
    v10 = fetch(y0 + 1, x0)
    v11 = fetch(y0 + 1, x0 + 1)
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


@dataclass(frozen=True)
class MGEConfig:
    """Transform ranges and sampling setup for the equivariance-error study.

    Scale bounds are plain factors (converted to log2 internally); angles
    are radians.
    """

    shear_max: float
    scale_lo: float
    scale_hi: float
    theta_max: float
    num_samples: int = 1
    seed: int = 0

    def ranges(self) -> SampleRanges:
        return SampleRanges.from_scale_factors(
            self.scale_lo, self.scale_hi, self.theta_max, self.shear_max
        )


def equivariance_gap(layer_fn, image, g: GroupElement, crop: int,
                     warp_mode: str = "zero"):
    """(raw, normalized) gap of one image under one transform.

    ``layer_fn`` maps an (1, c, h, w) batch to an (1, c', h, w) batch with
    matching spatial dims.
    """
    img = np.asarray(image, dtype=np.float64)
    warped_in = warp_image(img, g, warp_mode)
    out_plain = layer_fn(img[None])[0]
    out_of_warped = layer_fn(warped_in[None])[0]
    warped_out = warp_image(out_plain, g, warp_mode)
    a = _central_crop(out_of_warped, crop)
    b = _central_crop(warped_out, crop)
    base = _central_crop(out_plain, crop)
    raw = float(np.sqrt(np.sum((a - b) ** 2)))
    denom = float(np.sqrt(np.sum(base**2)))
    return raw, raw / denom if denom > 0.0 else math.inf


def _central_crop(x: np.ndarray, crop: int) -> np.ndarray:
    if crop == 0:
        return x
    if 2 * crop >= min(x.shape[-2], x.shape[-1]):
        raise ValueError(f"crop {crop} swallows the whole {x.shape[-2:]} map")
    return x[..., crop:-crop, crop:-crop]


def mge(layer_fn, images, config: MGEConfig, crop: int, warp_mode: str = "zero"):
    """Mean equivariance gap over a batch, one random transform per image.

    Returns ``(mean_raw, mean_norm, rows)`` with one ``(index, raw, norm)``
    row per image.
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 4:
        raise ValueError(f"expected (n, c, h, w) images, got {imgs.shape}")
    draws = sample_transforms(config.ranges(), imgs.shape[0], config.seed)
    rows = []
    for i, params in enumerate(draws):
        raw, norm = equivariance_gap(
            layer_fn, imgs[i], GroupElement(a=params), crop, warp_mode
        )
        rows.append((i, raw, norm))
    raws = np.array([r[1] for r in rows])
    norms = np.array([r[2] for r in rows])
    return float(raws.mean()), float(norms.mean()), rows


# -- Monte Carlo convergence ---------------------------------------------------


def make_filter_patch_integrand(bank: FilterBasis, j: int, patch=None):
    """Inner product of a transformed bank raster with a fixed smooth patch.

    A smooth scalar function of the transform parameters, used as the
    default integrand for the convergence study.
    """
    k = bank.kernel_size
    if patch is None:
        offs = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
        px, py = np.meshgrid(offs, offs, indexing="xy")
        # off-center bump so rotations and shears actually move the value
        patch = np.exp(-((px - 0.8) ** 2 + (py + 0.5) ** 2) / (0.35 * k))
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (k, k):
        raise ValueError(f"patch shape {patch.shape} != ({k}, {k})")

    def integrand(t: TransformParams) -> float:
        return float(np.sum(rasterize(bank, j, t) * patch))

    return integrand


def trapezoid_reference(fn, ranges: SampleRanges, points_per_axis: int) -> float:
    """Mean of ``fn`` over the parameter box by composite trapezoid quadrature.

    Zero-width axes collapse to a single node.  The shear axis is
    integrated in angle and mapped through tan, matching the sampler.
    """
    def axis(lo, hi):
        if hi == lo:
            return np.array([lo]), np.array([1.0])
        pts = np.linspace(lo, hi, points_per_axis)
        wts = np.full(points_per_axis, 1.0 / (points_per_axis - 1))
        wts[0] *= 0.5
        wts[-1] *= 0.5
        return pts, wts

    a_pts, a_wts = axis(ranges.alpha_lo, ranges.alpha_hi)
    t_pts, t_wts = axis(-ranges.theta_max, ranges.theta_max)
    s_pts, s_wts = axis(-ranges.shear_max, ranges.shear_max)
    total = 0.0
    for a, wa in zip(a_pts, a_wts):
        for th, wt in zip(t_pts, t_wts):
            for xi, ws in zip(s_pts, s_wts):
                total += wa * wt * ws * fn(
                    TransformParams(float(a), float(th), float(math.tan(xi)))
                )
    return total


@dataclass
class ConvergenceResult:
    rows: list  # (N, seed_index, abs_err)
    medians: list  # (N, median abs_err)
    slope: float | None  # fitted log-log slope, None when degenerate


def mc_convergence_study(fn, ranges: SampleRanges, n_list, num_seeds: int,
                         seed: int = 0, reference: float | None = None,
                         ref_points: int = 129) -> ConvergenceResult:
    """Median Monte Carlo error versus sample count, with log-log slope.

    For each N and seed, the estimate is the plain average of ``fn`` over N
    i.i.d. transform draws; the error is measured against a dense trapezoid
    reference.  A zero-variance integrand is flagged with ``slope=None``.
    """
    if reference is None:
        reference = trapezoid_reference(fn, ranges, ref_points)
    rows = []
    for n in n_list:
        for s in range(num_seeds):
            draw_seed = int(
                np.random.SeedSequence((int(seed), int(n), int(s))).generate_state(1)[0]
            )
            draws = sample_transforms(ranges, int(n), draw_seed)
            estimate = float(np.mean([fn(t) for t in draws]))
            rows.append((int(n), s, abs(estimate - reference)))
    medians = []
    for n in n_list:
        errs = [r[2] for r in rows if r[0] == n]
        medians.append((int(n), float(np.median(errs))))
    med_vals = np.array([m[1] for m in medians])
    if np.any(med_vals <= 0.0):
        return ConvergenceResult(rows, medians, None)
    slope = float(np.polyfit(np.log([m[0] for m in medians]), np.log(med_vals), 1)[0])
    return ConvergenceResult(rows, medians, slope)


# -- scalar metrics --------------------------------------------------------------


def psnr(pred, target, peak: float) -> float:
    """10 log10(peak^2 / MSE) in dB, capped at 99 (exact match included)."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if peak <= 0.0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


def classification_error(logits, labels, top_k: int = 1) -> float:
    """Top-k prediction error in percent."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ValueError(f"bad shapes: logits {z.shape}, labels {y.shape}")
    top = np.argsort(-z, axis=1)[:, :top_k]
    hit = np.any(top == y[:, None], axis=1)
    return 100.0 * (1.0 - float(np.mean(hit)))
