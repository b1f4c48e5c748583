"""Noise schedule and the deterministic sampling/inversion updates.

Conventions: ``alpha_bar`` has length T_train + 1 with ``alpha_bar[0] = 1``
(so adding noise at t = 0 is the identity) and ``alpha_bar[t]`` the
cumulative product of the first t values of (1 - beta). Timesteps used
by inference lie in [0, T_train - 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import OrderingError, ParameterError, ShapeError

# Hook called before each sampling step with (t, x_t); a returned array
# replaces the latent. This is the single extension seam of the loop.
StepHook = Callable[[int, np.ndarray], Optional[np.ndarray]]


@dataclass(frozen=True)
class NoiseSchedule:
    num_train_steps: int
    beta: np.ndarray  # shape [T], entries in (0, 1)
    alpha_bar: np.ndarray  # shape [T + 1], alpha_bar[0] = 1, strictly decreasing
    inference_grid: np.ndarray  # strictly decreasing ints in [0, T - 1]


@dataclass
class Latent:
    """Image-shaped diffusion state [C, H, W] at an integer timestep."""

    data: np.ndarray
    t: int


def build_linear_schedule(
    T_train: int, beta_start: float, beta_end: float, inference_steps: int
) -> NoiseSchedule:
    """SD-style linear beta schedule with an evenly strided inference grid."""
    if not (T_train >= inference_steps >= 2):
        raise ParameterError(f"need T_train >= inference_steps >= 2, got {T_train}, {inference_steps}")
    if not (0 < beta_start <= beta_end < 1):
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    stride = T_train // inference_steps
    grid = (np.arange(inference_steps, dtype=np.int64) * stride)[::-1].copy()
    return NoiseSchedule(T_train, beta, alpha_bar, grid)


def add_noise(x0: Latent, t: int, eps: np.ndarray, sched: NoiseSchedule) -> Latent:
    """Forward map x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps."""
    if eps.shape != x0.data.shape:
        raise ShapeError(f"eps shape {eps.shape} != x0 shape {x0.data.shape}")
    ab = sched.alpha_bar[t]
    return Latent(np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * eps, t)


def ddim_step(
    x_t: Latent, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule
) -> Latent:
    """One deterministic denoising step from t down to t_prev."""
    if not t > t_prev >= 0:
        raise OrderingError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if eps_hat.shape != x_t.data.shape:
        raise ShapeError(f"eps_hat shape {eps_hat.shape} != x shape {x_t.data.shape}")
    ab_t = sched.alpha_bar[t]
    ab_p = sched.alpha_bar[t_prev]
    out = np.sqrt(ab_p / ab_t) * (x_t.data - np.sqrt(1.0 - ab_t) * eps_hat)
    out = out + np.sqrt(1.0 - ab_p) * eps_hat
    return Latent(out.astype(x_t.data.dtype), t_prev)


def ddim_inv_step(
    x_t: Latent, eps_hat: np.ndarray, t: int, t_next: int, sched: NoiseSchedule
) -> Latent:
    """One deterministic inversion step from t up to t_next."""
    if not t_next > t:
        raise OrderingError(f"need t_next > t, got t={t}, t_next={t_next}")
    if eps_hat.shape != x_t.data.shape:
        raise ShapeError(f"eps_hat shape {eps_hat.shape} != x shape {x_t.data.shape}")
    ab_t = sched.alpha_bar[t]
    ab_n = sched.alpha_bar[t_next]
    out = np.sqrt(ab_n / ab_t) * (x_t.data - np.sqrt(1.0 - ab_t) * eps_hat)
    out = out + np.sqrt(1.0 - ab_n) * eps_hat
    return Latent(out.astype(x_t.data.dtype), t_next)


def ddim_process(
    x_T: Latent,
    cond,
    model,
    sched: NoiseSchedule,
    guidance: float = 1.0,
    hook: StepHook | None = None,
) -> Latent:
    """Iterate ddim_step down the inference grid with guided predictions."""
    from .denoiser import guided_eps, null_prompt

    grid = sched.inference_grid
    null = null_prompt()
    x = Latent(np.array(x_T.data, copy=True), int(grid[0]))
    for i in range(len(grid) - 1):
        t, t_prev = int(grid[i]), int(grid[i + 1])
        if hook is not None:
            replacement = hook(t, x.data)
            if replacement is not None:
                x = Latent(replacement, t)
        eps_hat = guided_eps(model, x, t, cond, null, guidance, sched)
        x = ddim_step(x, eps_hat, t, t_prev, sched)
    return x


def ddim_inv_process(x_0: Latent, cond, model, sched: NoiseSchedule) -> Latent:
    """Iterate ddim_inv_step up the reversed grid; guidance fixed at 1."""
    from .denoiser import predict_eps

    grid = sched.inference_grid[::-1]
    x = Latent(np.array(x_0.data, copy=True), int(grid[0]))
    for i in range(len(grid) - 1):
        t, t_next = int(grid[i]), int(grid[i + 1])
        eps_hat = predict_eps(model, x, t, cond, sched)
        x = ddim_inv_step(x, eps_hat, t, t_next, sched)
    return x
