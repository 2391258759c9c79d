"""Orthonormal 2-D Haar decomposition and the recursive sub-band pyramid.

One decomposition step maps each 2x2 block [[a, b], [c, d]] of every
channel to four half-resolution coefficients

    ll = (a + b + c + d) / 2      low-pass
    lh = (a + b - c - d) / 2      vertical detail (row difference)
    hl = (a - b + c - d) / 2      horizontal detail (column difference)
    hh = (a - b - c + d) / 2      diagonal detail

The 1/2 scaling makes the transform orthonormal, so energy is conserved
exactly and the inverse uses the same coefficients.  Both directions are
differentiable; because the transform is orthogonal, the adjoint of the
decomposition is the reconstruction applied to the band gradients (and
vice versa), which keeps the taped closures cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from taskfuse import tensor as T
from taskfuse.tensor import DimensionError, Tensor

__all__ = [
    "SubBands",
    "WaveletPyramid",
    "haar_decompose",
    "haar_reconstruct",
    "pyramid_decompose",
    "pyramid_reconstruct",
]


@dataclass
class SubBands:
    """The four half-resolution outputs of one Haar step, all (C, H/2, W/2)."""

    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor


@dataclass
class WaveletPyramid:
    """Detail triples from shallow to deep plus the deepest low-pass band."""

    levels: list[tuple[Tensor, Tensor, Tensor]]
    base_ll: Tensor


def _forward_bands(x: np.ndarray):
    a = x[:, 0::2, 0::2]
    b = x[:, 0::2, 1::2]
    c = x[:, 1::2, 0::2]
    d = x[:, 1::2, 1::2]
    ll = (a + b + c + d) * np.float32(0.5)
    lh = (a + b - c - d) * np.float32(0.5)
    hl = (a - b + c - d) * np.float32(0.5)
    hh = (a - b - c + d) * np.float32(0.5)
    return ll, lh, hl, hh


def _inverse_bands(ll, lh, hl, hh):
    C, h, w = ll.shape
    y = np.empty((C, 2 * h, 2 * w), dtype=np.float32)
    y[:, 0::2, 0::2] = (ll + lh + hl + hh) * np.float32(0.5)
    y[:, 0::2, 1::2] = (ll + lh - hl - hh) * np.float32(0.5)
    y[:, 1::2, 0::2] = (ll - lh + hl - hh) * np.float32(0.5)
    y[:, 1::2, 1::2] = (ll - lh - hl + hh) * np.float32(0.5)
    return y


def haar_decompose(x: Tensor) -> SubBands:
    """One orthonormal Haar step on (C, H, W); H and W must be even."""
    if x.data.ndim != 3:
        raise DimensionError(f"haar_decompose: expected (C, H, W), got {x.shape}")
    _, H, W = x.data.shape
    if H % 2 or W % 2:
        raise DimensionError(f"haar_decompose: extents of {x.shape} must be even")
    ll, lh, hl, hh = _forward_bands(x.data)
    outs = [Tensor(v, requires_grad=x.requires_grad) for v in (ll, lh, hl, hh)]

    if x.requires_grad and T._ACTIVE_TAPE is not None:

        def bw():
            if all(o.grad is None for o in outs):
                return
            gs = [o.grad if o.grad is not None else np.zeros(o.shape, dtype=np.float32) for o in outs]
            T._accum(x, _inverse_bands(*gs))

        T._ACTIVE_TAPE._records.append(bw)
    return SubBands(*outs)


def haar_reconstruct(s: SubBands) -> Tensor:
    """Exact inverse of `haar_decompose`."""
    shape = s.ll.shape
    for t in (s.lh, s.hl, s.hh):
        if t.shape != shape:
            raise DimensionError(f"haar_reconstruct: band shapes {shape} and {t.shape} differ")
    bands = (s.ll, s.lh, s.hl, s.hh)
    y = _inverse_bands(*(t.data for t in bands))
    requires = any(t.requires_grad for t in bands)
    out = Tensor(y, requires_grad=requires)

    if requires and T._ACTIVE_TAPE is not None:

        def bw():
            g = out.grad
            if g is None:
                return
            parts = _forward_bands(g)
            for t, p in zip(bands, parts):
                if t.requires_grad:
                    T._accum(t, p)

        T._ACTIVE_TAPE._records.append(bw)
    return out


def pyramid_decompose(x: Tensor, depth: int) -> WaveletPyramid:
    """Recursively decompose the low-pass band `depth` times."""
    _, H, W = x.data.shape
    if depth < 0:
        raise DimensionError("pyramid_decompose: depth must be non-negative")
    if H % (1 << depth) or W % (1 << depth):
        raise DimensionError(
            f"pyramid_decompose: extents of {x.shape} are not divisible by 2^{depth}"
        )
    levels = []
    cur = x
    for _ in range(depth):
        bands = haar_decompose(cur)
        levels.append((bands.lh, bands.hl, bands.hh))
        cur = bands.ll
    return WaveletPyramid(levels=levels, base_ll=cur)


def pyramid_reconstruct(p: WaveletPyramid) -> Tensor:
    """Invert `pyramid_decompose`."""
    cur = p.base_ll
    for lh, hl, hh in reversed(p.levels):
        cur = haar_reconstruct(SubBands(ll=cur, lh=lh, hl=hl, hh=hh))
    return cur
