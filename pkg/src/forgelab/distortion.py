"""Image distortions for robustness evaluation and the robustness-gap classifier."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import correlate1d

from .core import RngStream

KINDS = ("none", "gaussian-noise", "jpeg", "blur", "brightness")

# ITU-T T.81 Annex K tables
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)

_RGB2YCC = np.array([[0.299, 0.587, 0.114],
                     [-0.168736, -0.331264, 0.5],
                     [0.5, -0.418688, -0.081312]])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


@dataclass(frozen=True)
class Distortion:
    kind: str
    parameter: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        p = self.parameter
        if self.kind == "jpeg" and not (1 <= p <= 100 and float(p).is_integer()):
            raise ValueError(f"jpeg quality must be an integer in [1, 100], got {p}")
        if self.kind in ("gaussian-noise", "blur", "brightness") and (p < 0 or not math.isfinite(p)):
            raise ValueError(f"{self.kind} parameter must be finite and >= 0, got {p}")

    @property
    def label(self) -> str:
        if self.kind == "none":
            return "none"
        return f"{self.kind}({self.parameter:g})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "parameter": self.parameter}

    @classmethod
    def from_dict(cls, d: dict) -> "Distortion":
        return cls(d["kind"], float(d.get("parameter", 0.0)))


# Table 3 settings
TABLE_DISTORTIONS = (
    Distortion("jpeg", 90),
    Distortion("blur", 1.0),
    Distortion("gaussian-noise", 0.05),
    Distortion("brightness", 6.0),
)


def scaled_table(table: np.ndarray, quality: int) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(np.floor((table * scale + 50.0) / 100.0), 1.0)


def _block_quantize(plane: np.ndarray, qtable: np.ndarray) -> np.ndarray:
    """Quantize one (..., H, W) plane in 0..255 units, H and W multiples of 8."""
    *lead, h, w = plane.shape
    blocks = plane.reshape(*lead, h // 8, 8, w // 8, 8).swapaxes(-3, -2) - 128.0
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / qtable) * qtable
    rec = idctn(coef, axes=(-2, -1), norm="ortho") + 128.0
    return rec.swapaxes(-3, -2).reshape(plane.shape)


def jpeg(x: np.ndarray, quality: int, requantize: bool = True) -> np.ndarray:
    """Quantization-only JPEG model (4:4:4, no entropy coding)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-3], x.shape[-2]
    ph, pw = (-h) % 8, (-w) % 8
    pad = [(0, 0)] * (x.ndim - 3) + [(0, ph), (0, pw), (0, 0)]
    xp = np.pad(x, pad, mode="edge") * 255.0
    if x.shape[-1] == 3:
        ycc = xp @ _RGB2YCC.T
        ycc[..., 1:] += 128.0
        planes = [_block_quantize(ycc[..., 0], scaled_table(LUMA_TABLE, quality))]
        planes += [_block_quantize(ycc[..., k], scaled_table(CHROMA_TABLE, quality)) for k in (1, 2)]
        rec = np.stack(planes, axis=-1)
        rec[..., 1:] -= 128.0
        out = rec @ _YCC2RGB.T
    else:
        out = _block_quantize(xp[..., 0], scaled_table(LUMA_TABLE, quality))[..., None]
    out = out[..., :h, :w, :]
    if requantize:
        out = np.round(out)
    return np.clip(out / 255.0, 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    return k / k.sum()


def blur(x: np.ndarray, radius: float) -> np.ndarray:
    """Separable Gaussian blur with sigma = radius and edge-replicate padding."""
    x = np.asarray(x, dtype=np.float64)
    if radius == 0:
        return x.copy()
    k = gaussian_kernel(radius)
    out = correlate1d(x, k, axis=-3, mode="nearest")
    out = correlate1d(out, k, axis=-2, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def apply(d: Distortion, x, stream: Optional[RngStream] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if d.kind == "none":
        return x.copy()
    if d.kind == "gaussian-noise":
        if d.parameter == 0:
            return x.copy()
        if stream is None:
            raise ValueError("gaussian-noise needs a random stream")
        return np.clip(x + d.parameter * stream.generator().standard_normal(x.shape), 0.0, 1.0)
    if d.kind == "jpeg":
        return jpeg(x, int(d.parameter))
    if d.kind == "blur":
        return blur(x, d.parameter)
    return np.clip(d.parameter * x, 0.0, 1.0)


def apply_each(d: Distortion, images, stream: RngStream) -> np.ndarray:
    """Distort a batch, image ``i`` drawing noise from ``stream.child(i)``."""
    images = np.asarray(images, dtype=np.float64)
    if d.kind != "gaussian-noise":
        return apply(d, images)
    return np.stack([apply(d, img, stream.child(i)) for i, img in enumerate(images)])


def per_image_accuracy(scheme, images, m) -> np.ndarray:
    return np.mean(scheme.extract(np.asarray(images)) == np.asarray(m), axis=-1)


def robustness_table(genuine_set, forged_set, scheme, m, distortions: Sequence[Distortion],
                     stream: RngStream) -> list:
    """Rows ``(label, genuine mean accuracy, forged mean accuracy)``; first row undistorted."""
    g = np.asarray(genuine_set, dtype=np.float64)
    f = np.asarray(forged_set, dtype=np.float64)
    if len(g) == 0 or len(f) == 0:
        raise ValueError("both sets must be non-empty")
    rows = [("none", float(per_image_accuracy(scheme, g, m).mean()), float(per_image_accuracy(scheme, f, m).mean()))]
    for d in distortions:
        if d.kind == "none":
            continue
        sg = stream.child(d.label).child("genuine")
        sf = stream.child(d.label).child("forged")
        rows.append((d.label,
                     float(per_image_accuracy(scheme, apply_each(d, g, sg), m).mean()),
                     float(per_image_accuracy(scheme, apply_each(d, f, sf), m).mean())))
    return rows


def write_table(rows, path, header=("distortion", "genuine_acc", "forged_acc")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def roc_curve(genuine_scores, forged_scores):
    """ROC of the rule "forged if score < kappa", sweeping kappa over all observed values.

    Returns ``(kappas, fpr, tpr)`` with forged samples as the positive class.
    """
    g = np.asarray(genuine_scores, dtype=np.float64)
    f = np.asarray(forged_scores, dtype=np.float64)
    values = np.unique(np.concatenate([g, f]))
    kappas = np.concatenate([[values[0]], values[1:], [np.inf]])
    tpr = np.array([np.mean(f < k) for k in kappas])
    fpr = np.array([np.mean(g < k) for k in kappas])
    return kappas, fpr, tpr


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def auc(fpr, tpr) -> float:
    return float(_trapezoid(tpr, fpr))


def robustness_gap_roc(genuine_set, forged_set, scheme, m, probe: Distortion, stream: RngStream,
                       genuine_pre: Optional[Distortion] = None) -> dict:
    """Forgery discrimination by bit accuracy after a probe distortion.

    ``genuine_pre`` models genuine images that were already mildly distorted
    before reaching the detector.
    """
    g = np.asarray(genuine_set, dtype=np.float64)
    f = np.asarray(forged_set, dtype=np.float64)
    if len(g) == 0 or len(f) == 0:
        raise ValueError("both sets must be non-empty")
    if genuine_pre is not None:
        g = apply_each(genuine_pre, g, stream.child("pre"))
    acc_g = per_image_accuracy(scheme, apply_each(probe, g, stream.child("probe-genuine")), m)
    acc_f = per_image_accuracy(scheme, apply_each(probe, f, stream.child("probe-forged")), m)
    kappas, fpr, tpr = roc_curve(acc_g, acc_f)
    return {"kappa": kappas, "fpr": fpr, "tpr": tpr, "auc": auc(fpr, tpr),
            "genuine_acc": acc_g, "forged_acc": acc_f}
