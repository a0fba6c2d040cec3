"""Independent closed-form oracles for the Gaussian world.

Everything here is recomputed from the schedule definition with plain Python
floats; nothing is imported from the code under test except the refinement
noise streams, whose derivation is part of the public contract.
"""

import math

import numpy as np

from forgelab.core import RngStream


def alpha_bar_grid(base_steps=1000, T=100, beta_min=1e-4, beta_max=0.02):
    betas = [beta_min + (beta_max - beta_min) * i / (base_steps - 1) for i in range(base_steps)]
    base = [1.0]
    for b in betas:
        base.append(base[-1] * (1.0 - b))
    stride = base_steps // T
    return [1.0] + [base[t * stride] for t in range(1, T + 1)]


def eps_coeffs(a, sigma0):
    """eps*(x) = s_x * x - s_m * M for data N(M, sigma0^2)."""
    d = a * sigma0 ** 2 + 1.0 - a
    s_x = math.sqrt(1.0 - a) / d
    return s_x, s_x * math.sqrt(a)


def step_coeffs(a_from, a_to, sigma0):
    """x_to = c_x * x_from + c_m * M for one deterministic move with the exact predictor."""
    s_x, s_m = eps_coeffs(a_from, sigma0)
    r = math.sqrt(a_to / a_from)
    k = math.sqrt(1.0 - a_to) - r * math.sqrt(1.0 - a_from)
    return r + k * s_x, -k * s_m


def compose(pairs):
    """Fold a list of (c_x, c_m) moves into one affine map x -> A x + B M."""
    A, B = 1.0, 0.0
    for c_x, c_m in pairs:
        A, B = c_x * A, c_x * B + c_m
    return A, B


def invert_map(ab, to_t, sigma0):
    return compose([step_coeffs(ab[t], ab[t + 1], sigma0) for t in range(to_t)])


def sample_map(ab, from_t, sigma0):
    return compose([step_coeffs(ab[t], ab[t - 1], sigma0) for t in range(from_t, 0, -1)])


def inject_map(ab, T_S, sigma0):
    A1, B1 = invert_map(ab, T_S, sigma0)
    A2, B2 = sample_map(ab, T_S, sigma0)
    return A2 * A1, A2 * B1 + B2


def refine_oracle(x_f, x, M, ab, sigma0, t_l, L, eta, lam, seed, indices):
    """Unrolled refinement as an explicit affine recursion in (x_f, x, z_i, M)."""
    a = ab[t_l]
    s_x, s_m = eps_coeffs(a, sigma0)
    sq = math.sqrt(1.0 - a)
    alpha = 1.0 - eta * s_x * math.sqrt(a) / sq - 2.0 * eta * lam
    beta_x, beta_z, beta_m = 2.0 * eta * lam, -eta * s_x, eta * s_m / sq
    out = []
    for k, idx in enumerate(indices):
        g = RngStream(seed).child("refine").child(int(idx)).generator()
        cur = np.array(x_f[k], dtype=np.float64)
        for _ in range(L):
            z = g.standard_normal(cur.shape)
            cur = alpha * cur + beta_x * x[k] + beta_z * z + beta_m * M
        out.append(np.clip(cur, 0.0, 1.0))
    return np.stack(out)


def bias_closed_form(a, sigma0, w):
    return math.sqrt(1.0 - a) * math.sqrt(a) * np.asarray(w) / (a * sigma0 ** 2 + 1.0 - a)
