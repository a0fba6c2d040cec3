"""Shallow-inversion watermark forgery with score-based refinement, and the
mean-residual baseline.

All functions accept a single ``(H, W, C)`` image or a batch ``(N, H, W, C)``.
Refinement noise for image ``k`` of a batch comes from the substream
``RngStream(cfg.seed).child("refine").child(indices[k])``, so results do not
depend on how images are grouped into batches.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import MetricRecord, RngStream, psnr
from .diffusion import NoiseSchedule, Predictor, ddim_invert, ddim_sample
from .verify import WATERMARKED, VerificationPolicy, bit_accuracy, verify


class RefinementDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ForgeryConfig:
    T: int = 100
    T_S: int = 40
    L: int = 100
    t_l: int = 1
    eta: float = 1e-4
    lam: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.T_S <= self.T:
            raise ValueError("need 0 <= T_S <= T")
        if self.t_l < 1 or self.t_l > self.T:
            raise ValueError("t_l must lie in [1, T]")
        if self.eta < 0 or self.lam < 0 or self.L < 0:
            raise ValueError("eta, lam and L must be non-negative")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ForgeryResult:
    forged: np.ndarray
    pre_refinement: np.ndarray
    psnr_vs_clean: float
    trace: list = field(default_factory=list)

    def record(self, bit_acc: float, detected: bool, cfg: ForgeryConfig) -> dict:
        return {"psnr": self.psnr_vs_clean, "bit_accuracy": bit_acc, "detected": detected,
                "config_hash": cfg.digest()}


def inject(x, predictor: Predictor, schedule: NoiseSchedule, cfg: ForgeryConfig) -> np.ndarray:
    """Invert to the shallow step ``T_S`` and denoise back."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.T_S == 0:
        return x.copy()
    latent = ddim_invert(x, cfg.T_S, predictor, schedule)
    return ddim_sample(latent, cfg.T_S, predictor, schedule)


def refinement_terms(xf, x, eps, a_tl: float, lam: float):
    """(score term, fidelity term) of one refinement update before scaling by eta."""
    score = -eps / np.sqrt(1.0 - a_tl)
    fidelity = -2.0 * lam * (xf - x)
    return score, fidelity


def refine(x_f, x, predictor: Predictor, schedule: NoiseSchedule, cfg: ForgeryConfig,
           indices: Optional[Sequence[int]] = None) -> ForgeryResult:
    x_f = np.asarray(x_f, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_f.shape != x.shape:
        raise ValueError(f"shape mismatch: {x_f.shape} vs {x.shape}")
    single = x.ndim == 3
    xf_b = x_f[None] if single else x_f
    x_b = x[None] if single else x
    if indices is None:
        indices = range(len(x_b))
    root = RngStream(cfg.seed).child("refine")
    rngs = [root.child(int(i)).generator() for i in indices]
    a = schedule.alpha_bar[schedule.check_t(cfg.t_l, lo=1)]
    cur = xf_b.copy()
    trace = [float(np.mean((cur - x_b) ** 2))]
    for i in range(cfg.L):
        z = np.stack([g.standard_normal(x_b.shape[1:]) for g in rngs])
        noisy = np.sqrt(a) * cur + np.sqrt(1.0 - a) * z
        score, fid = refinement_terms(cur, x_b, predictor(noisy, cfg.t_l), a, cfg.lam)
        cur = cur + cfg.eta * (score + fid)
        if not np.all(np.isfinite(cur)):
            raise RefinementDivergedError(f"non-finite refinement update at iteration {i}")
        trace.append(float(np.mean((cur - x_b) ** 2)))
    # iterates stay unclamped inside the loop
    out = np.clip(cur, 0.0, 1.0)
    forged = out[0] if single else out
    return ForgeryResult(forged=forged, pre_refinement=x_f, psnr_vs_clean=psnr(x, forged), trace=trace)


def wmcopier_attack(x, predictor: Predictor, schedule: NoiseSchedule, scheme, m,
                    policy: VerificationPolicy, cfg: ForgeryConfig, index: int = 0):
    """Forge the watermark onto one clean image; returns ``(ForgeryResult, MetricRecord)``."""
    x = np.asarray(x, dtype=np.float64)
    x_f = inject(x, predictor, schedule, cfg)
    result = refine(x_f, x, predictor, schedule, cfg, indices=[index])
    extracted = scheme.extract(result.forged)
    acc = bit_accuracy(m, extracted)
    detected = verify(m, extracted, policy) == WATERMARKED
    return result, MetricRecord(psnr=result.psnr_vs_clean, bit_accuracy=acc, detected=detected)


def attack_batch(xs, predictor: Predictor, schedule: NoiseSchedule, cfg: ForgeryConfig,
                 indices: Optional[Sequence[int]] = None):
    """Batched inject + refine; returns ``(pre_refinement, forged)`` arrays."""
    xs = np.asarray(xs, dtype=np.float64)
    x_f = inject(xs, predictor, schedule, cfg)
    res = refine(x_f, xs, predictor, schedule, cfg, indices=indices)
    return x_f, res.forged


def yang_baseline(watermarked_set, reference_clean_set, x) -> np.ndarray:
    """Add the mean residual between watermarked and reference clean images."""
    wm = np.asarray(watermarked_set, dtype=np.float64)
    ref = np.asarray(reference_clean_set, dtype=np.float64)
    if len(wm) == 0 or len(ref) == 0:
        raise ValueError("both image sets must be non-empty")
    if wm.shape[1:] != ref.shape[1:] or np.shape(x)[-3:] != wm.shape[1:]:
        raise ValueError(f"shape mismatch: {wm.shape[1:]}, {ref.shape[1:]}, {np.shape(x)[-3:]}")
    pattern = wm.mean(axis=0) - ref.mean(axis=0)
    return np.clip(np.asarray(x, dtype=np.float64) + pattern, 0.0, 1.0)
