"""Procedural image corpus.

Images mix a low-pass Gaussian random field, a linear gradient and a few
soft-edged rectangles/ellipses, then are contrast-stretched so every image
spans at least [0.1, 0.9].

Two capture domains share the scene statistics.  "generated" images are the
clean renders.  "photo" images pass through a toy camera: a 2x2 colour-filter
site gain mismatch (a fixed checkerboard modulation of the scene, the classic
demosaicing trace) plus white sensor grain.  The checkerboard trace survives
averaging, so a mean computed over photographs carries it; that is the domain
gap a mean-residual watermark estimate suffers from.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from ..core import RngStream

DOMAINS = {
    # smooth renders, the distribution the provider watermarks
    "generated": {"grain": 0.0, "cfa": 0.0},
    # camera captures of the same kind of scene
    "photo": {"grain": 0.01, "cfa": 0.02},
}


def _soft_mask(dist: np.ndarray, width: float) -> np.ndarray:
    # dist < 0 inside; logistic edge of the given width in pixels
    return 1.0 / (1.0 + np.exp(np.clip(dist / width, -50, 50)))


def _domain(name: str) -> dict:
    try:
        return DOMAINS[name]
    except KeyError:
        raise ValueError(f"unknown image domain {name!r}; expected one of {sorted(DOMAINS)}") from None


def synth_image(size: int, rng: np.random.Generator, channels: int = 1, domain: str = "generated") -> np.ndarray:
    params = _domain(domain)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = gaussian_filter(rng.standard_normal((h, w)), sigma=rng.uniform(2.0, 5.0), mode="wrap")
    field /= field.std() + 1e-12
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * (xx - w / 2) + np.sin(theta) * (yy - h / 2)) / size
    img = rng.uniform(0.3, 1.0) * field + rng.uniform(0.5, 2.0) * ramp
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.1, 0.35) * h, rng.uniform(0.1, 0.35) * w
        if rng.random() < 0.5:
            dist = np.maximum(np.abs(yy - cy) - ry, np.abs(xx - cx) - rx)
        else:
            dist = (np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) - 1.0) * min(ry, rx)
        img += rng.uniform(-1.5, 1.5) * _soft_mask(dist, 1.0)
    img = gaussian_filter(img, sigma=1.2, mode="nearest")
    lo, hi = rng.uniform(0.03, 0.1), rng.uniform(0.9, 0.97)
    img = lo + (hi - lo) * (img - img.min()) / (np.ptp(img) + 1e-12)
    if channels == 3:
        tint = gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, 4, 4), mode="wrap")
        tint = 0.08 * tint / (tint.std() + 1e-12)
        out = np.clip(img[None] + tint, 0.0, 1.0).transpose(1, 2, 0)
    else:
        out = img[:, :, None]
    if params["cfa"] > 0:
        site = np.where((yy + xx) % 2 == 0, 1.0, -1.0)[:, :, None]
        out = out * (1.0 + params["cfa"] * site)
    if params["grain"] > 0:
        out = out + params["grain"] * rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0)


def synth_dataset(n: int, size: int, stream: RngStream, channels: int = 1,
                  domain: str = "generated") -> list:
    """``n`` procedural ``size x size`` images; image ``i`` depends only on ``stream.child(i)``."""
    if n <= 0:
        raise ValueError("n must be positive")
    if size < 16:
        raise ValueError("size must be >= 16")
    _domain(domain)
    return [synth_image(size, stream.child(i).generator(), channels, domain) for i in range(n)]


def image_source(size: int, stream: RngStream, channels: int = 1, domain: str = "generated"):
    """Callable ``index -> image`` for :func:`forgelab.watermark.build_corpus`."""
    _domain(domain)
    return lambda i: synth_image(size, stream.child(i).generator(), channels, domain)
