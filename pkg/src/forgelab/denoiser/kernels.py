"""Patch gather/scatter kernels for 3x3 same-padding convolutions (NHWC).

Two interchangeable backends:

* numba ``@njit`` loops that fuse zero padding with the gather and the
  scatter-add with the crop, avoiding padded temporaries;
* a pure numpy path built from nine slice copies.

``FORGELAB_NUMBA=0`` in the environment forces the numpy path; numba is used
otherwise whenever it imports.  ``set_backend`` switches at runtime (tests and
the benchmark use it).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit, prange  # noqa: F401
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

KSIZE = 3
PAD = 1


def im2col_numpy(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((n, h, w, KSIZE * KSIZE * c), dtype=x.dtype)
    k = 0
    for dy in range(KSIZE):
        for dx in range(KSIZE):
            cols[..., k * c:(k + 1) * c] = xp[:, dy:dy + h, dx:dx + w, :]
            k += 1
    return cols


def col2im_numpy(cols: np.ndarray, c: int) -> np.ndarray:
    n, h, w, _ = cols.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=cols.dtype)
    k = 0
    for dy in range(KSIZE):
        for dx in range(KSIZE):
            xp[:, dy:dy + h, dx:dx + w, :] += cols[..., k * c:(k + 1) * c]
            k += 1
    return xp[:, 1:-1, 1:-1]


if HAVE_NUMBA:
    @njit(cache=True, nogil=True)
    def _im2col_nb(x, cols):
        n, h, w, c = x.shape
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    k = 0
                    for dy in range(KSIZE):
                        ii = i + dy - PAD
                        for dx in range(KSIZE):
                            jj = j + dx - PAD
                            base = k * c
                            if 0 <= ii < h and 0 <= jj < w:
                                for ch in range(c):
                                    cols[b, i, j, base + ch] = x[b, ii, jj, ch]
                            else:
                                for ch in range(c):
                                    cols[b, i, j, base + ch] = 0.0
                            k += 1

    @njit(cache=True, nogil=True)
    def _col2im_nb(cols, out):
        n, h, w, c = out.shape
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        out[b, i, j, ch] = 0.0
            for i in range(h):
                for j in range(w):
                    k = 0
                    for dy in range(KSIZE):
                        ii = i + dy - PAD
                        for dx in range(KSIZE):
                            jj = j + dx - PAD
                            if 0 <= ii < h and 0 <= jj < w:
                                base = k * c
                                for ch in range(c):
                                    out[b, ii, jj, ch] += cols[b, i, j, base + ch]
                            k += 1

    def im2col_numba(x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x)
        n, h, w, c = x.shape
        cols = np.empty((n, h, w, KSIZE * KSIZE * c), dtype=x.dtype)
        _im2col_nb(x, cols)
        return cols

    def col2im_numba(cols: np.ndarray, c: int) -> np.ndarray:
        cols = np.ascontiguousarray(cols)
        n, h, w, _ = cols.shape
        out = np.empty((n, h, w, c), dtype=cols.dtype)
        _col2im_nb(cols, out)
        return out


_BACKEND = "numpy"


def set_backend(name: str) -> None:
    global _BACKEND, im2col, col2im
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        im2col, col2im = im2col_numba, col2im_numba
    elif name == "numpy":
        im2col, col2im = im2col_numpy, col2im_numpy
    else:
        raise ValueError(f"unknown backend {name!r}")
    _BACKEND = name


def backend() -> str:
    return _BACKEND


im2col = im2col_numpy
col2im = col2im_numpy
set_backend("numba" if HAVE_NUMBA and os.environ.get("FORGELAB_NUMBA", "1") != "0" else "numpy")
