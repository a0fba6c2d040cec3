"""A small residual convolutional noise predictor with hand-written backprop.

Layout (NHWC, F feature channels, e = sinusoidal timestep embedding)::

    h1  = relu(conv1(x)  + dense1(e))
    h2  = h1 + relu(conv2(h1) + dense2(e))
    h3  = h2 + relu(conv3(h2) + dense3(e))
    out = conv4(h3) + dense4(e) + r(t) * (head(h3) + skip_e(x)) - g(t) * P
    g = sqrt(abar / (1 - abar)),  r = 1 / sqrt(1 - abar) = sqrt(1 + g^2)

``skip_e`` is a linear 3x3 convolution of the raw input whose taps are a
linear function of the embedding, restricted to the span of D2xD2, D2xD1 and
D1xD2 (outer products of first and second differences).  Scaled by ``r`` it
carries the noise-passing part of eps = (x_t - sqrt(abar) x0) / sqrt(1 - abar)
in the near-Nyquist band where the data has little energy, which the ReLU
trunk cannot do with the right gain at every step.  The basis annihilates
every polynomial of degree <= 2, so smooth image content barely leaks
through; at t = 1 whatever leaks is amplified ~23x.  ``head`` is a second
3x3 output convolution of the trunk features sharing the ``r`` gain, so the
trunk can make the small-t corrections of eps without 23x larger weights.

``P`` is a learned full-resolution offset in image space; ``g`` converts a
shift of the clean-image estimate into the matching shift of predicted noise.
Convolutions are translation equivariant, so a fixed spatial signal shared by
all training images (the watermark) can only be represented through ``P`` or
through border effects.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from ..core import RngStream
from ..diffusion import NoiseSchedule
from . import kernels

N_FREQ = 16
EMB_DIM = 2 * N_FREQ
MAGIC = b"WMF1"

_D1 = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0)
_D2 = np.array([1.0, -2.0, 1.0]) / np.sqrt(6.0)
# (3, 9) orthonormal basis of 3x3 kernels that annihilate degree <= 2 polynomials
SKIP_BASIS = np.stack([np.outer(_D2, _D2), np.outer(_D2, _D1), np.outer(_D1, _D2)]).reshape(3, 9)

CONVS = ("conv1", "conv2", "conv3", "conv4")
DENSES = ("dense1", "dense2", "dense3", "dense4")


def timestep_embedding(b) -> np.ndarray:
    """(N,) base-step indices -> (N, 32) sin/cos features at 16 geometric frequencies."""
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    freqs = np.exp(-np.log(10000.0) * np.arange(N_FREQ) / N_FREQ)
    ang = b[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def offset_gain(alpha_bar):
    """Noise-space response to a unit shift of the clean image, sqrt(abar / (1 - abar))."""
    a = np.asarray(alpha_bar, dtype=np.float64)
    return np.sqrt(a / (1.0 - a))


class TinyNet:
    def __init__(self, image_size: int, channels: int = 1, features: int = 32,
                 seed: int = 0, dtype=np.float32):
        if image_size < 8:
            raise ValueError("image_size must be >= 8")
        if channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        self.image_size = image_size
        self.channels = channels
        self.features = features
        self.dtype = np.dtype(dtype)
        self.params = self._init_params(RngStream(seed).child("tinynet").generator())

    # -- parameters -------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> "OrderedDict[str, np.ndarray]":
        p = OrderedDict()
        for name, shape in self.param_shapes().items():
            if name.startswith("conv"):
                fan_in = shape[0]
                scale = np.sqrt(2.0 / fan_in)
                if name == "conv4":
                    scale *= 0.1
                p[name] = rng.standard_normal(shape) * scale
            elif name.startswith("dense"):
                p[name] = rng.standard_normal(shape) * (0.1 / np.sqrt(EMB_DIM))
            else:
                p[name] = np.zeros(shape)
        return OrderedDict((k, v.astype(np.float32).astype(self.dtype)) for k, v in p.items())

    def param_shapes(self) -> "OrderedDict[str, tuple]":
        C, F, S = self.channels, self.features, self.image_size
        return OrderedDict([
            ("conv1", (9 * C, F)), ("conv2", (9 * F, F)), ("conv3", (9 * F, F)), ("conv4", (9 * F, C)),
            ("dense1", (EMB_DIM + 1, F)), ("dense2", (EMB_DIM + 1, F)), ("dense3", (EMB_DIM + 1, F)),
            ("dense4", (EMB_DIM + 1, C)),
            ("head", (9 * F, C)),
            ("skip", (EMB_DIM + 1, 3 * C * C)),
            ("posmap", (S, S, C)),
        ])

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def astype(self, dtype) -> "TinyNet":
        clone = object.__new__(TinyNet)
        clone.__dict__.update(self.__dict__)
        clone.dtype = np.dtype(dtype)
        clone.params = OrderedDict((k, v.astype(dtype)) for k, v in self.params.items())
        return clone

    def copy(self) -> "TinyNet":
        return self.astype(self.dtype)

    # -- forward / backward ----------------------------------------------------

    @staticmethod
    def _dense(e1: np.ndarray, W: np.ndarray) -> np.ndarray:
        return e1 @ W

    def _skip_taps(self, e1: np.ndarray) -> np.ndarray:
        C = self.channels
        coef = (e1 @ self.params["skip"]).reshape(len(e1), 3, C, C)
        basis = SKIP_BASIS.astype(self.dtype)
        return np.einsum("jk,njab->nkab", basis, coef).reshape(len(e1), 9 * C, C)

    def skip_kernels(self, b) -> np.ndarray:
        """(N, 9 * C, C) skip taps for base-step indices ``b``."""
        b = np.atleast_1d(b)
        e1 = np.concatenate([timestep_embedding(b), np.ones((len(b), 1))], axis=1).astype(self.dtype)
        return self._skip_taps(e1)

    def _conv(self, x: np.ndarray, W: np.ndarray):
        cols = kernels.im2col(x)
        n, h, w, k = cols.shape
        out = (cols.reshape(-1, k) @ W).reshape(n, h, w, W.shape[1])
        return out, cols

    def forward(self, x: np.ndarray, b, gain, keep: bool = False):
        """``x`` (N, H, W, C); ``b`` and ``gain`` scalars or (N,) arrays of
        base-step indices and offset gains (see :func:`offset_gain`)."""
        P = self.params
        x = np.asarray(x, dtype=self.dtype)
        n = x.shape[0]
        b = np.broadcast_to(np.asarray(b), (n,))
        g = np.broadcast_to(np.asarray(gain, dtype=self.dtype), (n,))
        e1 = np.concatenate([timestep_embedding(b), np.ones((n, 1))], axis=1).astype(self.dtype)
        c = {}
        a1, c["cols1"] = self._conv(x, P["conv1"])
        a1 += self._dense(e1, P["dense1"])[:, None, None, :]
        h1 = np.maximum(a1, 0)
        a2, c["cols2"] = self._conv(h1, P["conv2"])
        a2 += self._dense(e1, P["dense2"])[:, None, None, :]
        h2 = h1 + np.maximum(a2, 0)
        a3, c["cols3"] = self._conv(h2, P["conv3"])
        a3 += self._dense(e1, P["dense3"])[:, None, None, :]
        h3 = h2 + np.maximum(a3, 0)
        out, c["cols4"] = self._conv(h3, P["conv4"])
        out += self._dense(e1, P["dense4"])[:, None, None, :]
        r = np.sqrt(1.0 + g * g)
        scaled = np.einsum("nhwk,nkc->nhwc", c["cols1"], self._skip_taps(e1))
        scaled += (c["cols4"].reshape(-1, 9 * self.features) @ P["head"]).reshape(scaled.shape)
        out += r[:, None, None, None] * scaled
        out -= g[:, None, None, None] * P["posmap"][None]
        if not keep:
            return out
        c.update(e1=e1, m1=a1 > 0, m2=a2 > 0, m3=a3 > 0, g=g, r=r)
        return out, c

    def backward(self, c: dict, dout: np.ndarray) -> "OrderedDict[str, np.ndarray]":
        P = self.params
        F, C = self.features, self.channels
        grads = OrderedDict()
        e1 = c["e1"]
        dout = np.asarray(dout, dtype=self.dtype)
        # output head
        grads["posmap"] = -np.einsum("nhwc,n->hwc", dout, c["g"])
        dscaled = dout * c["r"][:, None, None, None]
        dK = np.einsum("nhwk,nhwc->nkc", c["cols1"], dscaled).reshape(len(e1), 9, C, C)
        dcoef = np.einsum("jk,nkab->njab", SKIP_BASIS.astype(self.dtype), dK)
        grads["skip"] = e1.T @ dcoef.reshape(len(e1), -1)
        grads["head"] = c["cols4"].reshape(-1, 9 * F).T @ dscaled.reshape(-1, C)
        grads["dense4"] = e1.T @ dout.sum(axis=(1, 2))
        grads["conv4"] = c["cols4"].reshape(-1, 9 * F).T @ dout.reshape(-1, C)
        dh3 = kernels.col2im(dout @ P["conv4"].T + dscaled @ P["head"].T, F)
        # residual block 3
        da3 = dh3 * c["m3"]
        grads["dense3"] = e1.T @ da3.sum(axis=(1, 2))
        grads["conv3"] = c["cols3"].reshape(-1, 9 * F).T @ da3.reshape(-1, F)
        dh2 = dh3 + kernels.col2im(da3 @ P["conv3"].T, F)
        # residual block 2
        da2 = dh2 * c["m2"]
        grads["dense2"] = e1.T @ da2.sum(axis=(1, 2))
        grads["conv2"] = c["cols2"].reshape(-1, 9 * F).T @ da2.reshape(-1, F)
        dh1 = dh2 + kernels.col2im(da2 @ P["conv2"].T, F)
        # stem
        da1 = dh1 * c["m1"]
        grads["dense1"] = e1.T @ da1.sum(axis=(1, 2))
        grads["conv1"] = c["cols1"].reshape(-1, 9 * C).T @ da1.reshape(-1, F)
        return OrderedDict((k, grads[k]) for k in P)

    def loss_and_grads(self, xt: np.ndarray, b, gain, eps: np.ndarray):
        """Mean squared error against ``eps`` and its parameter gradients."""
        out, cache = self.forward(xt, b, gain, keep=True)
        diff = out - np.asarray(eps, dtype=self.dtype)
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        grads = self.backward(cache, (2.0 / diff.size) * diff)
        return loss, grads

    # -- serialisation -----------------------------------------------------

    def to_bytes(self) -> bytes:
        header = MAGIC + struct.pack("<4I", 1, self.image_size, self.channels, self.features)
        body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in self.params.values())
        return header + body

    @classmethod
    def from_bytes(cls, buf: bytes, dtype=np.float32) -> "TinyNet":
        if buf[:4] != MAGIC:
            raise ValueError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
        version, size, channels, features = struct.unpack("<4I", buf[4:20])
        if version != 1:
            raise ValueError(f"unsupported architecture version {version}")
        net = cls(size, channels, features, dtype=dtype)
        off = 20
        for name, shape in net.param_shapes().items():
            count = int(np.prod(shape))
            need = off + 4 * count
            if need > len(buf):
                raise ValueError(f"truncated parameter file while reading {name} at byte {off}")
            net.params[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(dtype)
            off = need
        if off != len(buf):
            raise ValueError(f"{len(buf) - off} trailing bytes after parameters")
        return net

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "TinyNet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), dtype=dtype)


class NetworkPredictor:
    """Adapts a :class:`TinyNet` to the ``(x_t, t) -> eps`` sampler interface."""

    kind = "trained-network"

    def __init__(self, net: TinyNet, schedule: NoiseSchedule, batch_size: int = 256):
        self.net = net
        self.schedule = schedule
        self.batch_size = batch_size

    def __call__(self, xt, t: int) -> np.ndarray:
        x = np.asarray(xt)
        single = x.ndim == 3
        xb = x[None] if single else x.reshape((-1,) + x.shape[-3:])
        b = self.schedule.base_index(int(t))
        # t = 0 is never trained; reuse the gain of the first trained step
        g = offset_gain(self.schedule.base_alpha_bar[max(b, int(self.schedule.timestep_map[0]))])
        out = np.concatenate([self.net.forward(xb[i:i + self.batch_size], b, g)
                              for i in range(0, len(xb), self.batch_size)], axis=0)
        out = out.astype(np.float64)
        return out[0] if single else out.reshape(x.shape)


def build_tiny_network(image_size: int, channels: int, seed: int, schedule: NoiseSchedule,
                       features: int = 32, dtype=np.float32) -> NetworkPredictor:
    return NetworkPredictor(TinyNet(image_size, channels, features, seed, dtype), schedule)
