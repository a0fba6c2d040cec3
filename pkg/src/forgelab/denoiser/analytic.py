"""Exact noise predictor for Gaussian data ``x0 ~ N(mu + w, sigma0^2 I)``.

For this world the minimiser of the denoising objective is the conditional
mean E[eps | x_t], which is affine in x_t.  That makes every sampler
operation an explicit affine map, useful as a verification oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffusion import NoiseSchedule


@dataclass(frozen=True, eq=False)
class GaussianWorld:
    mu: np.ndarray
    sigma0: float
    w: np.ndarray

    def __post_init__(self):
        if np.shape(self.mu) != np.shape(self.w):
            raise ValueError("mu and w must have the same shape")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")

    @property
    def mean(self) -> np.ndarray:
        return np.asarray(self.mu) + np.asarray(self.w)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.sigma0 * rng.standard_normal((n,) + np.shape(self.mu))


class AnalyticPredictor:
    kind = "analytic-gaussian"

    def __init__(self, world: GaussianWorld, schedule: NoiseSchedule):
        self.world = world
        self.schedule = schedule

    def coefficients(self, t: int) -> tuple[float, float]:
        """(slope, offset scale) with eps = slope * x_t - offset * (mu + w)."""
        a = self.schedule.alpha_bar[t]
        denom = a * self.world.sigma0 ** 2 + 1.0 - a
        slope = np.sqrt(1.0 - a) / denom
        return slope, slope * np.sqrt(a)

    def __call__(self, xt, t: int) -> np.ndarray:
        slope, off = self.coefficients(t)
        return slope * np.asarray(xt) - off * self.world.mean


def analytic_predictor(world: GaussianWorld, schedule: NoiseSchedule) -> AnalyticPredictor:
    return AnalyticPredictor(world, schedule)


def prediction_bias(world: GaussianWorld, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """Shift in predicted noise caused by the additive watermark, constant in x_t."""
    a = schedule.alpha_bar[schedule.check_t(t)]
    return np.sqrt(1.0 - a) * np.sqrt(a) * np.asarray(world.w) / (a * world.sigma0 ** 2 + 1.0 - a)


class ZeroPredictor:
    """eps == 0 everywhere."""

    kind = "zero"

    def __call__(self, xt, t: int) -> np.ndarray:
        return np.zeros_like(np.asarray(xt, dtype=np.float64))
