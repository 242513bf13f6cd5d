"""Image similarity: scalar NCC and patch-wise gradient NCC.

The patch score is returned in minimization form: -1 is a perfect match.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import Image2D, LabelImage2D, sobel_gradients

# relative threshold below which a patch is treated as having no variance
_DEGENERATE_REL = 1e-12


@dataclass(frozen=True)
class PatchParams:
    patch_radius: int = 5
    stride: int = 1

    def __post_init__(self):
        if self.patch_radius < 1 or self.stride < 1:
            raise ValueError("patch_radius and stride must be >= 1")

    @property
    def size(self) -> int:
        return 2 * self.patch_radius + 1


def _pixels(x) -> np.ndarray:
    return np.asarray(x.pixels if isinstance(x, Image2D) else x, dtype=float)


def ncc(a, b, *, with_flag: bool = False):
    """Normalized cross-correlation of two equally sized images.

    Returns 0 when either image has zero variance; with ``with_flag`` the
    result is ``(value, degenerate)``.
    """
    a, b = _pixels(a).ravel(), _pixels(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.mean(da * da)), np.sqrt(np.mean(db * db))
    degenerate = sa == 0.0 or sb == 0.0
    val = 0.0 if degenerate else float(np.sum(da * db) / (a.size * sa * sb))
    return (val, degenerate) if with_flag else val


def patch_centres(shape, p: PatchParams) -> tuple[np.ndarray, np.ndarray]:
    """Row and column coordinates of the patch centres whose patch fits in the image."""
    r = p.patch_radius
    rows = np.arange(r, shape[0] - r, p.stride)
    cols = np.arange(r, shape[1] - r, p.stride)
    return rows, cols


def _normalized_patches(g: np.ndarray, mask: np.ndarray, p: PatchParams):
    """Zero-mean, unit-norm patch vectors at the selected centres.

    ``mask`` is a boolean array over the stride grid of centres.  Rows of
    degenerate patches are all zero, which makes their correlation 0.
    """
    win = sliding_window_view(g, (p.size, p.size))[::p.stride, ::p.stride]
    v = win[mask].reshape(-1, p.size * p.size)
    v = v - v.mean(axis=1, keepdims=True)
    norm = np.sqrt(np.einsum("ij,ij->i", v, v))
    scale = np.abs(win[mask]).reshape(len(v), -1).max(axis=1)
    bad = norm <= _DEGENERATE_REL * scale * np.sqrt(v.shape[1])
    norm[bad] = 1.0
    v /= norm[:, None]
    v[bad] = 0.0
    return v


@numba.njit(cache=True, nogil=True, fastmath=True)
def _moving_scores(g, rows, cols, size, fixed_vecs, rel_tol, out):
    """Add the NCC of each moving patch with its normalized fixed vector to ``out``.

    Two passes per patch (mean, then centred sums) mirror the centred
    normalization used for the fixed image.
    """
    n = size * size
    for q in range(rows.shape[0]):
        r0, c0 = rows[q], cols[q]
        mean = 0.0
        amax = 0.0
        for i in range(size):
            row = g[r0 + i, c0:c0 + size]
            for j in range(size):
                mean += row[j]
                amax = max(amax, abs(row[j]))
        mean /= n
        ss = 0.0
        dot = 0.0
        for i in range(size):
            row = g[r0 + i, c0:c0 + size]
            fv = fixed_vecs[q, i * size:(i + 1) * size]
            for j in range(size):
                d = row[j] - mean
                ss += d * d
                dot += d * fv[j]
        norm = np.sqrt(ss)
        if norm > rel_tol * amax * np.sqrt(n):
            out[q] += dot / norm


class PatchGradNCC:
    """Patch gradient NCC against a fixed image, reusable across many moving images.

    The fixed image's gradient patches are normalized once; each call
    only differentiates and normalizes the moving image.
    """

    def __init__(self, fixed, weights=None, params: PatchParams = PatchParams()):
        fixed = _pixels(fixed)
        self.shape = fixed.shape
        self.params = params
        rows, cols = patch_centres(self.shape, params)
        if len(rows) == 0 or len(cols) == 0:
            raise ValueError(f"image {self.shape} too small for patch radius {params.patch_radius}")
        if weights is None:
            w = np.ones((len(rows), len(cols)))
        else:
            weights = np.asarray(weights, dtype=float)
            if weights.shape != self.shape:
                raise ValueError("weights must have the image shape")
            if np.any(weights < 0):
                raise ValueError("patch weights must be non-negative")
            w = weights[np.ix_(rows, cols)]
        self.mask = w > 0
        if not self.mask.any():
            raise ValueError("all patch weights are zero")
        self.w = w[self.mask]
        self.wsum = float(self.w.sum())
        gx, gy = sobel_gradients(fixed)
        self._fx = _normalized_patches(gx, self.mask, params)
        self._fy = _normalized_patches(gy, self.mask, params)
        # top-left corners of the selected patches
        ir, ic = np.nonzero(self.mask)
        r = params.patch_radius
        self._r0 = np.ascontiguousarray(rows[ir] - r)
        self._c0 = np.ascontiguousarray(cols[ic] - r)

    def patch_scores(self, moving) -> np.ndarray:
        moving = _pixels(moving)
        if moving.shape != self.shape:
            raise ValueError(f"shape mismatch {moving.shape} vs {self.shape}")
        gx, gy = sobel_gradients(moving)
        out = np.zeros(len(self._r0))
        size = self.params.size
        _moving_scores(np.ascontiguousarray(gx), self._r0, self._c0, size, self._fx, _DEGENERATE_REL, out)
        _moving_scores(np.ascontiguousarray(gy), self._r0, self._c0, size, self._fy, _DEGENERATE_REL, out)
        return 0.5 * out

    def __call__(self, moving) -> float:
        return -float(np.dot(self.w, self.patch_scores(moving)) / self.wsum)


def patch_grad_ncc(fixed, moving, w=None, p: PatchParams = PatchParams()) -> float:
    """Weighted mean of per-patch gradient NCC (x and y averaged), negated.

    Patch centres lie on a ``stride`` grid and only where the whole patch
    fits inside the image.  ``w`` is an image-sized weight map sampled at
    those centres; ``None`` means uniform.
    """
    return PatchGradNCC(fixed, w, p)(moving)


def patch_weights_from_labels(lbl, included: Iterable[int], p: PatchParams | None = None) -> np.ndarray:
    """Weight 1 at pixels whose label is in ``included``, else 0."""
    labels = lbl.labels if isinstance(lbl, LabelImage2D) else np.asarray(lbl)
    return np.isin(labels, list(included)).astype(float)
