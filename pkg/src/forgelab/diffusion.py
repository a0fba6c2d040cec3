"""Noise schedule, forward diffusion and deterministic DDIM sampling / inversion.

Time indices ``t`` always refer to the sampler grid ``0..T``; ``alpha_bar[0]``
is exactly 1.  A predictor is any callable ``(x_t, t) -> eps`` accepting
batched arrays ``(..., H, W, C)`` and an integer sampler step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import RngStream, gaussian_sample

Predictor = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    base_steps: int
    T: int
    alpha_bar: np.ndarray       # (T + 1,) on the sampler grid
    timestep_map: np.ndarray    # (T,) base index of sampler step t = 1..T
    base_alpha_bar: np.ndarray  # (base_steps + 1,)

    def check_t(self, t: int, lo: int = 0) -> int:
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return int(t)

    def base_index(self, t: int) -> int:
        return 0 if t == 0 else int(self.timestep_map[t - 1])


def make_schedule(base_steps: int = 1000, T: int = 100, beta_min: float = 1e-4,
                  beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta grid over ``base_steps`` strided evenly down to ``T`` sampler steps."""
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ValueError("need 0 < beta_min < beta_max < 1")
    if not 1 <= T <= base_steps:
        raise ValueError("need 1 <= T <= base_steps")
    if base_steps % T:
        raise ValueError("T must divide base_steps for an even stride")
    betas = np.linspace(beta_min, beta_max, base_steps)
    base = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    stride = base_steps // T
    tmap = np.arange(1, T + 1) * stride
    ab = np.concatenate([[1.0], base[tmap]])
    for arr in (ab, tmap, base):
        arr.setflags(write=False)
    return NoiseSchedule(base_steps, T, ab, tmap, base)


def forward_diffuse(x0, t: int, schedule: NoiseSchedule, eps) -> np.ndarray:
    t = schedule.check_t(t)
    a = schedule.alpha_bar[t]
    return np.sqrt(a) * np.asarray(x0) + np.sqrt(1.0 - a) * np.asarray(eps)


def step_with_eps(xt, eps, a_from: float, a_to: float) -> np.ndarray:
    """Deterministic DDIM move between cumulative levels given a noise estimate."""
    x0_hat = (xt - np.sqrt(1.0 - a_from) * eps) / np.sqrt(a_from)
    return np.sqrt(a_to) * x0_hat + np.sqrt(1.0 - a_to) * eps


def ddim_step(xt, t: int, predictor: Predictor, schedule: NoiseSchedule) -> np.ndarray:
    t = schedule.check_t(t, lo=1)
    eps = predictor(xt, t)
    return step_with_eps(xt, eps, schedule.alpha_bar[t], schedule.alpha_bar[t - 1])


def ddim_sample(xT, from_t: int, predictor: Predictor, schedule: NoiseSchedule,
                trajectory: Optional[list] = None) -> np.ndarray:
    """Denoise from sampler step ``from_t`` down to 0."""
    from_t = schedule.check_t(from_t, lo=1)
    x = np.asarray(xT, dtype=np.float64)
    if trajectory is not None:
        trajectory.append((from_t, x))
    for t in range(from_t, 0, -1):
        x = ddim_step(x, t, predictor, schedule)
        if trajectory is not None:
            trajectory.append((t - 1, x))
    return x


def ddim_invert(x0, to_t: int, predictor: Predictor, schedule: NoiseSchedule,
                trajectory: Optional[list] = None) -> np.ndarray:
    """Map an image to its latent at ``to_t``, reusing eps(x_t, t) for the step to t+1."""
    to_t = schedule.check_t(to_t)
    x = np.asarray(x0, dtype=np.float64)
    ab = schedule.alpha_bar
    if trajectory is not None:
        trajectory.append((0, x))
    for t in range(to_t):
        x = step_with_eps(x, predictor(x, t), ab[t], ab[t + 1])
        if trajectory is not None:
            trajectory.append((t + 1, x))
    return x


def detectability_curve(images, scheme, message, predictor: Predictor, schedule: NoiseSchedule,
                        stream: RngStream, t_grid: Optional[Sequence[int]] = None,
                        control_images=None) -> list:
    """Bit accuracy of noised and re-denoised watermarked images along the schedule.

    Each row is ``(t, acc_noised, acc_denoised, acc_control)``.  Noised latents
    are clamped to [0, 1] before extraction; ``acc_control`` is the accuracy of
    noised non-watermarked images against the same message.
    """
    x0 = np.asarray(images, dtype=np.float64)
    msg = np.asarray(message)
    if t_grid is None:
        t_grid = list(range(0, schedule.T + 1, max(schedule.T // 10, 1)))
    eps = gaussian_sample(x0.shape, stream.child("eps"))
    if control_images is not None:
        c0 = np.asarray(control_images, dtype=np.float64)
        eps_c = gaussian_sample(c0.shape, stream.child("eps-control"))
    rows = []
    for t in t_grid:
        xt = forward_diffuse(x0, t, schedule, eps)
        acc_noised = float(np.mean(scheme.extract(np.clip(xt, 0, 1)) == msg))
        den = xt if t == 0 else ddim_sample(xt, t, predictor, schedule)
        acc_denoised = float(np.mean(scheme.extract(np.clip(den, 0, 1)) == msg))
        acc_control = float("nan")
        if control_images is not None:
            ct = forward_diffuse(c0, t, schedule, eps_c)
            acc_control = float(np.mean(scheme.extract(np.clip(ct, 0, 1)) == msg))
        rows.append((int(t), acc_noised, acc_denoised, acc_control))
    return rows
