"""Diffusion prior over audio embeddings with x0-prediction.

The network predicts the clean embedding directly.  Classifier-free guidance
therefore mixes clean-embedding predictions:
``(1 - w) * pred_null + w * pred_cond``.

Unit-norm embeddings have per-coordinate scale ~1/sqrt(d), far below the
unit-variance noise the schedule is designed for.  The diffusion state is
therefore the embedding multiplied by ``config.diffusion_scale`` (sqrt(d) by
default); predictions and losses stay in embedding units.

Timesteps run over ``1..T``; the model's timestep table is indexed by
``t - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .embedding_io import l2_normalize
from .errors import ContractError, VariantError
from .models import MapperConfig, as_tensors, forward_diffusion


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal retention ``alpha_bar[0..T]`` with ``alpha_bar[0] == 1``."""

    alpha_bar: np.ndarray
    s: float = 0.008

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    @property
    def betas(self) -> np.ndarray:
        """Per-step betas for t = 1..T (index 0 is step 1)."""
        return np.minimum(1.0 - self.alpha_bar[1:] / self.alpha_bar[:-1], 0.999)


def cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    if T < 1 or s <= 0:
        raise ContractError(f"cosine schedule needs T >= 1 and s > 0, got T={T}, s={s}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1.0 + s) * (math.pi / 2)) ** 2
    return NoiseSchedule(f / f[0], s)


@dataclass(frozen=True)
class SamplerConfig:
    inference_steps: int = 200
    guidance_scale: float = 0.9
    stochastic: bool = False
    seed: int = 0
    renormalize: bool = True

    def __post_init__(self):
        if self.inference_steps < 1:
            raise ContractError("inference_steps must be >= 1")
        if self.guidance_scale < 0:
            raise ContractError("guidance_scale must be >= 0")


def _check_t(t, schedule: NoiseSchedule):
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise IndexError(f"timestep must lie in [1, {schedule.T}], got {t}")
    return t_arr


def q_sample(x0, t, schedule: NoiseSchedule, eps=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Noised embedding ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``t`` may be a scalar or one step per row of a batched ``x0``.
    """
    x0 = np.asarray(x0)
    t_arr = _check_t(t, schedule)
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t_arr]
    if np.ndim(ab) == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)


def diffusion_loss_fixed(params, config: MapperConfig, visual, audio, t, eps, keep, schedule: NoiseSchedule):
    """Batch loss for given steps ``t`` (1..T), noise and condition-keep mask."""
    audio = np.asarray(audio)
    x_t = q_sample(audio * config.diffusion_scale, t, schedule, eps=eps)
    pred = forward_diffusion(params, config, np.asarray(t) - 1, x_t, visual, keep=keep)
    err = ad.sub(pred, audio)
    return ad.mean(ad.sum_(ad.square(err), axis=-1))


def draw_training_noise(rng: np.random.Generator, batch: int, dim: int, schedule: NoiseSchedule, drop_rate: float, dtype=np.float64):
    """Per-sample step in [1, T], Gaussian noise and condition-keep mask."""
    t = rng.integers(1, schedule.T + 1, size=batch)
    eps = rng.standard_normal((batch, dim)).astype(dtype)
    keep = rng.random(batch) >= drop_rate
    return t, eps, keep


def diffusion_loss(params, config: MapperConfig, visual, audio, schedule: NoiseSchedule, drop_rate: float, rng: np.random.Generator):
    """Mean over the batch of the squared distance between target and prediction."""
    audio = np.asarray(audio)
    if audio.ndim != 2 or audio.shape[0] == 0:
        raise ContractError(f"diffusion_loss needs a non-empty batch, got shape {audio.shape}")
    if not 0 <= drop_rate < 1:
        raise ContractError(f"drop_rate must be in [0, 1), got {drop_rate}")
    t, eps, keep = draw_training_noise(rng, audio.shape[0], audio.shape[1], schedule, drop_rate, audio.dtype)
    return diffusion_loss_fixed(params, config, visual, audio, t, eps, keep, schedule)


def guided_predict(params, config: MapperConfig, x_t, t, visual, w: float) -> np.ndarray:
    """Guided clean-embedding estimate at step ``t`` (1..T)."""
    if w < 0:
        raise ContractError(f"guidance scale must be >= 0, got {w}")
    x_t = np.asarray(x_t)
    idx = np.asarray(t) - 1
    cond = forward_diffusion(params, config, idx, x_t, visual).data
    null = forward_diffusion(params, config, idx, x_t, None).data
    return combine_guidance(cond, null, w)


def combine_guidance(pred_cond, pred_null, w: float):
    # exact at both w = 0 and w = 1
    return (1.0 - w) * pred_null + w * pred_cond


def posterior_step(
    x_t,
    x0_hat,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator | None = None,
    stochastic: bool = False,
) -> np.ndarray:
    """Move from step ``t`` to ``t_prev`` (strided DDIM update, eta 0 or 1)."""
    if not 0 <= t_prev < t <= schedule.T:
        raise ContractError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    x_t = np.asarray(x_t)
    x0_hat = np.asarray(x0_hat)
    if t_prev == 0:
        return x0_hat
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t_prev]
    eps_hat = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    sigma = 0.0
    if stochastic:
        sigma = math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0:
        if rng is None:
            raise ContractError("stochastic step needs a random generator")
        out = out + sigma * rng.standard_normal(x_t.shape)
    return out


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending integer steps from T to 0 with ``steps`` evenly spaced moves."""
    if not 1 <= steps <= T:
        raise ContractError(f"inference steps must be in [1, {T}], got {steps}")
    return np.round(np.linspace(T, 0, steps + 1)).astype(int)


def sample(params, config: MapperConfig, visual, schedule: NoiseSchedule, sampler: SamplerConfig = SamplerConfig(), return_trajectory: bool = False):
    """Draw one pseudo audio embedding per row of ``visual``."""
    if not config.variant.is_diffusion:
        raise VariantError(f"sampling needs a diffusion mapper, got {config.variant.value}")
    params = as_tensors(params)
    visual = np.asarray(visual, dtype=np.float64)
    single = visual.ndim == 1
    visual = np.atleast_2d(visual)
    rng = np.random.default_rng(sampler.seed)
    c = config.diffusion_scale
    x = rng.standard_normal(visual.shape)
    trajectory = [x]
    steps = sampling_timesteps(schedule.T, sampler.inference_steps)
    for t, t_prev in zip(steps[:-1], steps[1:]):
        x0_hat = guided_predict(params, config, x, np.full(len(x), t), visual, sampler.guidance_scale)
        if t_prev == 0:
            x = x0_hat
        else:
            x = posterior_step(x, c * x0_hat, int(t), int(t_prev), schedule, rng, sampler.stochastic)
        trajectory.append(x)
    if sampler.renormalize:
        x = l2_normalize(x)
    out = x[0] if single else x
    return (out, trajectory) if return_trajectory else out
