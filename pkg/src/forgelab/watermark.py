"""Classical watermark schemes with a shared embed/extract interface.

Two schemes are provided:

* ``DwtDctScheme``: one-level Haar DWT, 8x8 block DCT-II of the LL band and
  quantization index modulation on mid-band coefficients.  The perturbation
  depends on image content.
* ``SpreadSpectrumScheme``: an additive sum of keyed, orthonormal patterns
  concentrated near the Nyquist frequency, i.e. exactly the ``x + w`` watermark model.

Both operate on luminance; for RGB inputs the luminance change is added to
every channel, which leaves Cb/Cr untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Iterator, Optional, Union

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import gaussian_filter

from .core import RngStream, luminance
from .verify import bit_accuracy

DEFAULT_K = 32


class ImageTooSmallError(ValueError):
    pass


class CorpusExhaustedError(RuntimeError):
    pass


def random_message(K: int, stream: RngStream) -> np.ndarray:
    return stream.generator().integers(0, 2, size=K).astype(np.uint8)


def _check_bits(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 1 or m.size == 0:
        raise ValueError("a message is a non-empty 1-D bit vector")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("message bits must be 0 or 1")
    return m.astype(np.uint8)


def _add_luma(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.clip(x + delta[..., None], 0.0, 1.0)


# -- Haar DWT -----------------------------------------------------------------

def haar_forward(y: np.ndarray):
    """Orthonormal one-level Haar transform on the last two axes (even sizes)."""
    a = y[..., 0::2, 0::2]
    b = y[..., 0::2, 1::2]
    c = y[..., 1::2, 0::2]
    d = y[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, (lh, hl, hh)


def haar_inverse(ll: np.ndarray, bands) -> np.ndarray:
    lh, hl, hh = bands
    out = np.empty(ll.shape[:-2] + (2 * ll.shape[-2], 2 * ll.shape[-1]))
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[..., 0::2, 1::2] = (ll - lh + hl - hh) / 2.0
    out[..., 1::2, 0::2] = (ll + lh - hl - hh) / 2.0
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return out


def to_blocks(band: np.ndarray, size: int = 8) -> np.ndarray:
    """(..., H, W) -> (..., nby, nbx, size, size); H and W multiples of size."""
    *lead, h, w = band.shape
    r = band.reshape(*lead, h // size, size, w // size, size)
    return np.moveaxis(r, -3, -2)


def from_blocks(blocks: np.ndarray) -> np.ndarray:
    *lead, nby, nbx, s, _ = blocks.shape
    return np.moveaxis(blocks, -2, -3).reshape(*lead, nby * s, nbx * s)


# -- schemes ------------------------------------------------------------------

# mid-band DCT slots; the first is the (4, 3) coefficient
MID_BAND = ((4, 3), (3, 4), (5, 2), (2, 5), (3, 3), (4, 2), (2, 4), (5, 1))


@dataclass(frozen=True)
class DwtDctScheme:
    K: int = DEFAULT_K
    delta: float = 24.0 / 255.0
    slots: tuple = MID_BAND
    seed: int = 0
    identity: str = field(default="dwt-dct", init=False)

    def geometry(self, shape) -> dict:
        h, w = shape[-3], shape[-2]
        nby, nbx = (h // 2) // 8, (w // 2) // 8
        n_slots = nby * nbx * len(self.slots)
        return {"blocks": nby * nbx, "block_grid": (nby, nbx), "slots": n_slots,
                "repetitions": n_slots // self.K, "blocks_per_cycle": self.K / len(self.slots)}

    def _layout(self, shape):
        geo = self.geometry(shape)
        if geo["slots"] < self.K:
            raise ImageTooSmallError(
                f"{shape[-3]}x{shape[-2]} image has {geo['slots']} coefficient slots, "
                f"fewer than the {self.K} message bits"
            )
        h, w = shape[-3], shape[-2]
        crop = (2 * 8 * geo["block_grid"][0], 2 * 8 * geo["block_grid"][1])
        # bit index per (block, slot), round-robin over the flattened slot order
        bit_of = np.arange(geo["slots"]).reshape(geo["blocks"], len(self.slots)) % self.K
        return crop, geo, bit_of

    def _coeffs(self, y: np.ndarray, crop):
        ll, bands = haar_forward(y[..., :crop[0], :crop[1]])
        blocks = dctn(to_blocks(ll), axes=(-2, -1), norm="ortho")
        return blocks, bands

    def embed(self, x, m) -> np.ndarray:
        m = _check_bits(m)
        if m.size != self.K:
            raise ValueError(f"message length {m.size} != K={self.K}")
        x = np.asarray(x, dtype=np.float64)
        crop, geo, bit_of = self._layout(x.shape)
        y = luminance(x)
        blocks, bands = self._coeffs(y, crop)
        flat = blocks.reshape(blocks.shape[:-4] + (geo["blocks"], 8, 8))
        for s, (u, v) in enumerate(self.slots):
            bits = m[bit_of[:, s]]
            c = flat[..., u, v]
            q = np.round(c / self.delta)
            wrong = (np.mod(q, 2) != bits)
            # move to the nearest lattice point of the right parity
            step = np.where(c / self.delta >= q, 1.0, -1.0)
            q = np.where(wrong, q + step, q)
            flat[..., u, v] = q * self.delta
        blocks = flat.reshape(blocks.shape)
        ll = from_blocks(idctn(blocks, axes=(-2, -1), norm="ortho"))
        y_new = y.copy()
        y_new[..., :crop[0], :crop[1]] = haar_inverse(ll, bands)
        return _add_luma(x, y_new - y)

    def soft_votes(self, y) -> np.ndarray:
        """Per-bit mean of (+1 for odd, -1 for even) over repetitions; (..., K)."""
        y = np.asarray(y, dtype=np.float64)
        crop, geo, bit_of = self._layout(y.shape)
        blocks, _ = self._coeffs(luminance(y), crop)
        flat = blocks.reshape(blocks.shape[:-4] + (geo["blocks"], 8, 8))
        votes = np.zeros(y.shape[:-3] + (self.K,))
        counts = np.zeros(self.K)
        for s, (u, v) in enumerate(self.slots):
            q = np.round(flat[..., u, v] / self.delta)
            vote = np.where(np.mod(q, 2) == 1, 1.0, -1.0)
            idx = bit_of[:, s]
            np.add.at(counts, idx, 1.0)
            # add.at over the trailing bit axis, batch axes broadcast
            for j in range(idx.size):
                votes[..., idx[j]] += vote[..., j]
        return votes / counts

    def extract(self, y) -> np.ndarray:
        # majority vote; ties resolve to 0
        return (self.soft_votes(y) > 0).astype(np.uint8)

    def to_dict(self) -> dict:
        return {"identity": self.identity, "K": self.K, "delta": self.delta, "seed": self.seed,
                "slots": [list(s) for s in self.slots]}


@lru_cache(maxsize=32)
def _ss_patterns(seed: int, K: int, h: int, w: int) -> np.ndarray:
    n = h * w
    if K >= n // 8:
        raise ImageTooSmallError(f"{h}x{w} image cannot hold {K} orthogonal patterns")
    g = RngStream(seed).child("spread-spectrum").child(f"{h}x{w}").generator().standard_normal((K, h, w))
    # smooth noise modulated by a checkerboard: energy sits in a disc around
    # the (pi, pi) frequency, where natural-looking images carry almost none
    g = gaussian_filter(g, sigma=(0, 1.0, 1.0), mode="wrap")
    ii, jj = np.mgrid[0:h, 0:w]
    taper = np.outer(np.sin(np.pi * (np.arange(h) + 0.5) / h), np.sin(np.pi * (np.arange(w) + 0.5) / w))
    g = g * np.where((ii + jj) % 2 == 0, 1.0, -1.0) * taper
    basis = np.concatenate([np.full((1, n), 1.0 / np.sqrt(n)), g.reshape(K, n)], axis=0)
    q, _ = np.linalg.qr(basis.T)
    # orthonormalising after the constant vector leaves zero-mean columns
    p = q[:, 1:].T
    p = p * np.sign(np.einsum("ij,ij->i", p, g.reshape(K, n)))[:, None]
    p.setflags(write=False)
    return p.reshape(K, h, w)


@dataclass(frozen=True)
class SpreadSpectrumScheme:
    K: int = DEFAULT_K
    gamma: float = 0.015
    seed: int = 0
    identity: str = field(default="spread-spectrum", init=False)

    def patterns(self, shape) -> np.ndarray:
        """(K, H, W) zero-mean, unit-norm, mutually orthogonal patterns."""
        return _ss_patterns(self.seed, self.K, int(shape[-3]), int(shape[-2]))

    def perturbation(self, shape, m) -> np.ndarray:
        m = _check_bits(m)
        if m.size != self.K:
            raise ValueError(f"message length {m.size} != K={self.K}")
        sign = 2.0 * m.astype(np.float64) - 1.0
        return self.gamma * np.tensordot(sign, self.patterns(shape), axes=1)

    def embed(self, x, m) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return _add_luma(x, self.perturbation(x.shape, m))

    def correlations(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        p = self.patterns(y.shape)
        return np.tensordot(luminance(y) - 0.5, p, axes=([-2, -1], [1, 2]))

    def extract(self, y) -> np.ndarray:
        return (self.correlations(y) > 0).astype(np.uint8)

    def to_dict(self) -> dict:
        return {"identity": self.identity, "K": self.K, "gamma": self.gamma, "seed": self.seed}


Scheme = Union[DwtDctScheme, SpreadSpectrumScheme]


def scheme_from_dict(d: dict) -> Scheme:
    kind = d["identity"]
    if kind == "dwt-dct":
        slots = tuple(tuple(s) for s in d.get("slots", MID_BAND))
        return DwtDctScheme(K=int(d.get("K", DEFAULT_K)), delta=float(d.get("delta", 24.0 / 255.0)),
                            slots=slots, seed=int(d.get("seed", 0)))
    if kind == "spread-spectrum":
        return SpreadSpectrumScheme(K=int(d.get("K", DEFAULT_K)), gamma=float(d.get("gamma", 0.015)),
                                    seed=int(d.get("seed", 0)))
    raise ValueError(f"unknown scheme identity {kind!r}")


def save_scheme(scheme: Scheme, path) -> None:
    with open(path, "w") as fh:
        json.dump(scheme.to_dict(), fh, indent=2)


def load_scheme(path) -> Scheme:
    with open(path) as fh:
        return scheme_from_dict(json.load(fh))


def embed(scheme: Scheme, x, m) -> np.ndarray:
    return scheme.embed(x, m)


def extract(scheme: Scheme, y) -> np.ndarray:
    return scheme.extract(y)


# -- multi-message pool -------------------------------------------------------

@dataclass
class MessagePool:
    messages: np.ndarray
    stream: RngStream

    def __post_init__(self):
        self.messages = np.asarray(self.messages, dtype=np.uint8)
        if self.messages.ndim != 2 or len(self.messages) == 0:
            raise ValueError("pool needs a non-empty (pool_K, K) message array")
        if len({row.tobytes() for row in self.messages}) != len(self.messages):
            raise ValueError("pool messages must be pairwise distinct")
        self._rng = self.stream.generator()

    @classmethod
    def random(cls, pool_K: int, K: int, stream: RngStream) -> "MessagePool":
        rng = stream.child("messages").generator()
        seen, rows = set(), []
        while len(rows) < pool_K:
            row = rng.integers(0, 2, size=K).astype(np.uint8)
            if row.tobytes() not in seen:
                seen.add(row.tobytes())
                rows.append(row)
        return cls(np.stack(rows), stream.child("selection"))

    @property
    def size(self) -> int:
        return len(self.messages)

    def choose(self) -> int:
        return int(self._rng.integers(0, self.size))


def pool_embed(pool: MessagePool, scheme: Scheme, x) -> tuple[np.ndarray, int]:
    j = pool.choose()
    return scheme.embed(x, pool.messages[j]), j


# -- corpus -------------------------------------------------------------------

def build_corpus(generator: Union[Callable[[int], np.ndarray], Iterable[np.ndarray]],
                 scheme: Scheme, m: Union[np.ndarray, MessagePool], n: int,
                 filter_perfect: bool = True, stats: Optional[dict] = None) -> list:
    """Watermark ``n`` generated images, optionally keeping only perfect extractions.

    ``generator`` is either a callable ``index -> image`` or an iterable of
    images.  ``m`` may be a single message or a ``MessagePool``.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if callable(generator):
        source: Iterator = (generator(i) for i in range(10 * n))
    else:
        source = iter(generator)
    kept, attempts = [], 0
    for attempts, img in enumerate(source, start=1):
        if attempts > 10 * n:
            break
        if isinstance(m, MessagePool):
            xw, j = pool_embed(m, scheme, img)
            target = m.messages[j]
        else:
            xw, target = scheme.embed(img, m), m
        if not filter_perfect or bit_accuracy(target, scheme.extract(xw)) == 1.0:
            kept.append(xw)
            if len(kept) == n:
                break
    if stats is not None:
        stats["attempts"] = attempts
        stats["accepted"] = len(kept)
        stats["acceptance_rate"] = len(kept) / max(attempts, 1)
    if len(kept) < n:
        raise CorpusExhaustedError(f"only {len(kept)} of {n} images accepted after {attempts} attempts")
    return kept
