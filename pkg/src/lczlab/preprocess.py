"""Multi-scale Gaussian smoothing of SAR and MSI patches."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError
from .tensor import Tensor


@dataclass(frozen=True)
class ScaleSpec:
    """Window side lengths of the scale set; sigma is ``size / 2``."""

    kernel_sizes: tuple[int, ...] = (2, 4, 6, 8)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.kernel_sizes)
        object.__setattr__(self, "kernel_sizes", sizes)
        if not sizes:
            raise ParameterError("scale spec needs at least one kernel size")
        if any(s < 1 for s in sizes):
            raise ParameterError(f"kernel sizes must be >= 1, got {sizes}")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ParameterError(f"kernel sizes must be strictly increasing, got {sizes}")

    @staticmethod
    def sigma(size: int) -> float:
        return size / 2.0


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Sampled 2-D Gaussian on a ``size`` x ``size`` window, normalised to sum 1.

    Samples sit at offsets ``i - (size-1)/2`` from the window centre, so even
    windows are sampled at half-integer positions.
    """
    if size < 1:
        raise ParameterError(f"kernel size must be >= 1, got {size}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_smooth(image, kernel: np.ndarray) -> np.ndarray:
    """Correlate every channel of ``image`` ([..., H, W]) with a 2-D kernel.

    Borders use half-sample symmetric reflection (edge pixel repeated).  Even
    kernels are anchored on the top-left cell of their central 2x2 block.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    if kh == 1 and kw == 1:
        return (arr * kernel[0, 0]).astype(arr.dtype, copy=False)
    top, left = (kh - 1) // 2, (kw - 1) // 2
    pad = [(0, 0)] * (arr.ndim - 2) + [(top, kh - 1 - top), (left, kw - 1 - left)]
    padded = np.pad(arr.astype(np.float64), pad, mode="symmetric")
    windows = sliding_window_view(padded, (kh, kw), axis=(-2, -1))
    out = np.tensordot(windows, kernel, axes=([-2, -1], [0, 1]))
    return out.astype(arr.dtype if arr.dtype.kind == "f" else np.float64)


def scale_kernels(spec: ScaleSpec) -> list[np.ndarray]:
    return [gaussian_kernel(s, ScaleSpec.sigma(s)) for s in spec.kernel_sizes]


def multi_scale(x: np.ndarray, spec: ScaleSpec) -> np.ndarray:
    """Smooth ``x`` ([C,H,W] or [N,C,H,W]) at every scale; concatenate scale-major on the channel axis."""
    axis = x.ndim - 3
    return np.concatenate([gaussian_smooth(x, k) for k in scale_kernels(spec)], axis=axis)


def multi_scale_stack(patch, spec: ScaleSpec = ScaleSpec()) -> tuple[np.ndarray, np.ndarray]:
    """Scale-space stacks of one patch: SAR gets 8*|sizes| channels, MSI 10*|sizes|."""
    return multi_scale(patch.sar, spec), multi_scale(patch.msi, spec)
