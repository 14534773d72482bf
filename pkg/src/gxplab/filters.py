"""Per-channel spatial low-pass filters (mean, median, gaussian) for feature maps."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, depthwise_conv2d, median_filter2d

FILTER_KINDS = ("gaussian", "mean", "median")


def sigma_for_kernel(kernel_size: int) -> float:
    """Default gaussian width from the kernel size: 0.3*((k-1)*0.5 - 1) + 0.8.

    Gives 0.8 for the default 3x3 kernel. Callers may override sigma directly.
    """
    return 0.3 * ((kernel_size - 1) * 0.5 - 1.0) + 0.8


def gaussian_kernel(kernel_size: int, sigma: float | None = None) -> np.ndarray:
    """Discretized isotropic gaussian, normalized to sum exactly 1."""
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"kernel_size must be odd, got {kernel_size}")
    if sigma is None:
        sigma = sigma_for_kernel(kernel_size)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    half = (kernel_size - 1) // 2
    u = np.arange(-half, half + 1, dtype=np.float64)
    g2 = np.exp(-(u[:, None] ** 2 + u[None, :] ** 2) / (2.0 * sigma * sigma))
    return g2 / g2.sum()


def mean_kernel(kernel_size: int) -> np.ndarray:
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"kernel_size must be odd, got {kernel_size}")
    return np.full((kernel_size, kernel_size), 1.0 / (kernel_size * kernel_size))


def apply_filter(A, kind: str, kernel_size: int = 3, sigma: float | None = None):
    """Filter a feature map per channel with zero padding (shape preserved).

    A may be a Tensor or ndarray, shaped (C, H, W) or (B, C, H, W); the result
    has the same type and shape. The gaussian/mean paths are differentiable;
    the median path is differentiable via its selection subgradient.
    """
    if kind not in FILTER_KINDS:
        raise ValueError(f"unknown filter kind {kind!r}; expected one of {FILTER_KINDS}")
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"kernel_size must be odd, got {kernel_size}")
    is_tensor = isinstance(A, Tensor)
    t = A if is_tensor else Tensor(np.asarray(A))
    squeeze = t.data.ndim == 3
    if squeeze:
        t = t.reshape((1,) + t.data.shape)

    pad = (kernel_size - 1) // 2
    if kind == "median":
        out = median_filter2d(t, kernel_size)
    else:
        k2 = gaussian_kernel(kernel_size, sigma) if kind == "gaussian" else mean_kernel(kernel_size)
        channels = t.data.shape[1]
        w = Tensor(np.broadcast_to(k2, (channels,) + k2.shape).astype(t.data.dtype).copy())
        out = depthwise_conv2d(t, w, padding=pad)

    if squeeze:
        out = out.reshape(out.data.shape[1:])
    return out if is_tensor else out.data
