"""Direct 2D cross-correlation on NCHW float64 tensors, with gradients.

Forward windows are gathered with a strided view and contracted via
tensordot, which keeps the hot path inside BLAS without any FFT or
im2col staging buffers beyond the contraction itself.  ``pad_mode`` is
``"zero"`` (default) or ``"wrap"``; wrap padding makes stride-1
convolution exactly translation-equivariant under circular shifts.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PAD_MODES = ("zero", "wrap")


def as_tensor4(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be 4-axis (n, c, h, w), got shape {arr.shape}")
    return arr


def check_finite(x, name: str = "tensor"):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")


def _pad(x: np.ndarray, padding: int, pad_mode: str) -> np.ndarray:
    if pad_mode not in PAD_MODES:
        raise ValueError(f"pad_mode must be one of {PAD_MODES}, got {pad_mode!r}")
    if padding == 0:
        return x
    widths = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    return np.pad(x, widths, mode="constant" if pad_mode == "zero" else "wrap")


def out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _validate(x, kernels, stride, padding):
    x = as_tensor4(x)
    kern = np.asarray(kernels, dtype=np.float64)
    if kern.ndim != 4:
        raise ValueError(f"kernels must be (c_out, c_in, k, k), got {kern.shape}")
    if kern.shape[2] != kern.shape[3]:
        raise ValueError(f"kernels must be square, got {kern.shape[2:]};")
    if kern.shape[1] != x.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]}, kernels expect {kern.shape[1]}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    k = kern.shape[2]
    ho = out_size(x.shape[2], k, stride, padding)
    wo = out_size(x.shape[3], k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"kernel {k}x{k} does not fit input {x.shape[2]}x{x.shape[3]} "
            f"with padding {padding}"
        )
    return x, kern, ho, wo


def conv2d_forward(x, kernels, stride: int = 1, padding: int = 0,
                   pad_mode: str = "zero") -> np.ndarray:
    """Cross-correlate ``x`` (n, c_in, h, w) with ``kernels`` (c_out, c_in, k, k)."""
    x, kern, ho, wo = _validate(x, kernels, stride, padding)
    k = kern.shape[2]
    xp = _pad(x, padding, pad_mode)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, kern, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, kernels, stride: int = 1, padding: int = 0,
                    pad_mode: str = "zero"):
    """Gradients of ``sum(grad_out * conv2d_forward(x, kernels))``.

    Returns ``(grad_input, grad_kernels)``.
    """
    x, kern, ho, wo = _validate(x, kernels, stride, padding)
    k = kern.shape[2]
    g = as_tensor4(grad_out, "grad_out")
    expected = (x.shape[0], kern.shape[0], ho, wo)
    if g.shape != expected:
        raise ValueError(f"grad_out shape {g.shape} does not match output {expected}")

    xp = _pad(x, padding, pad_mode)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    grad_kernels = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))

    gpad = np.zeros_like(xp)
    for ky in range(k):
        for kx in range(k):
            # (n, ho, wo, c_in) contribution of a single kernel tap
            contrib = np.tensordot(g, kern[:, :, ky, kx], axes=(1, 0))
            gpad[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    grad_input = _unpad_adjoint(gpad, padding, pad_mode, x.shape[2], x.shape[3])
    return grad_input, grad_kernels


def _unpad_adjoint(gpad: np.ndarray, padding: int, pad_mode: str,
                   h: int, w: int) -> np.ndarray:
    if padding == 0:
        return gpad
    if pad_mode == "zero":
        return np.ascontiguousarray(gpad[:, :, padding:padding + h, padding:padding + w])
    # wrap: fold each padded cell back onto its source pixel
    n, c, hp, wp = gpad.shape
    rows = (np.arange(hp) - padding) % h
    cols = (np.arange(wp) - padding) % w
    flat_idx = (rows[:, None] * w + cols[None, :]).ravel()
    acc = np.zeros((h * w, n * c))
    np.add.at(acc, flat_idx, gpad.transpose(2, 3, 0, 1).reshape(hp * wp, n * c))
    return np.ascontiguousarray(
        acc.reshape(h, w, n, c).transpose(2, 3, 0, 1)
    )
