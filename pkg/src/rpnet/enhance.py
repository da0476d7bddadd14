"""Region comparison, Gaussian smoothing and feature re-weighting."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .prototypes import NoValidPrototypes, PrototypeSet
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class GaussianKernel:
    sigma: float = 3.0

    @property
    def radius(self) -> int:
        return int(math.ceil(3 * self.sigma))

    def weights_1d(self) -> np.ndarray:
        r = self.radius
        x = np.arange(-r, r + 1, dtype=np.float64)
        w = np.exp(-(x * x) / (2 * self.sigma ** 2))
        return w / w.sum()

    @property
    def weights(self) -> np.ndarray:
        """Normalized (2r+1) x (2r+1) kernel.

        The truncated 2-D Gaussian separates, so its normalized form is the
        outer product of the normalized 1-D kernels.
        """
        w = self.weights_1d()
        return np.outer(w, w)


@dataclass
class ForegroundMap:
    raw: Tensor
    smoothed: Tensor | None = None
    image_index: int = 0
    similarities: Tensor | None = None


def reflect_index(i: int, n: int) -> int:
    """Mirror an out-of-range index into [0, n) without repeating the edge."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i >= n else i


@lru_cache(maxsize=64)
def _smoothing_operator(n: int, sigma: float) -> np.ndarray:
    """Dense (n, n) matrix applying the 1-D kernel with reflect padding."""
    k = GaussianKernel(sigma)
    w = k.weights_1d()
    r = k.radius
    op = np.zeros((n, n))
    for i in range(n):
        for t in range(-r, r + 1):
            op[i, reflect_index(i + t, n)] += w[t + r]
    op.setflags(write=False)
    return op


def similarity_maps(target: Tensor, prototypes: PrototypeSet) -> Tensor:
    """Cosine similarity of each target position to each prototype: (X, Y, K)."""
    if len(prototypes) == 0:
        raise NoValidPrototypes("similarity_maps needs at least one prototype")
    P = prototypes.matrix()
    if P.shape[1] != target.shape[-1]:
        raise ShapeError(f"prototype width {P.shape[1]} != target width {target.shape[-1]}")
    return T.cosine_similarity_map(target, P)


def foreground_map(sims) -> Tensor:
    """Pointwise max over similarity maps, (X, Y, 1).

    Accepts a stacked (X, Y, K) tensor or a list of (X, Y, 1) maps.
    """
    if isinstance(sims, (list, tuple)):
        if not sims:
            raise ValueError("foreground_map needs at least one similarity map")
        sims = T.concat_channels(list(sims))
    return T.channel_max(sims)


def gaussian_smooth(fmap: Tensor, kernel: GaussianKernel) -> Tensor:
    """2-D convolution with the normalized kernel, reflect padding."""
    if fmap.ndim != 3:
        raise ShapeError(f"gaussian_smooth expects (X, Y, 1), got {fmap.shape}")
    rows = _smoothing_operator(fmap.shape[0], float(kernel.sigma)).astype(fmap.dtype)
    cols = _smoothing_operator(fmap.shape[1], float(kernel.sigma)).astype(fmap.dtype)
    return T.linear_map2d(fmap, rows, cols, name="gaussian_smooth")


def enhance(f_last: Tensor, weight: Tensor) -> Tensor:
    """Re-weight every channel of ``f_last`` by the per-position ``weight``."""
    if f_last.shape[:-1] != weight.shape[:-1] or weight.shape[-1] != 1:
        raise ShapeError(f"enhance: extents {f_last.shape} vs weight {weight.shape}")
    return T.mul(weight, f_last)
