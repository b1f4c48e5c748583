"""Inference-time concept masking: locate the target concept via
aggregated cross-attention, replace the masked latent region with
Gaussian noise at one intervention step, and resume denoising.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import AttentionMapSet
from .errors import ParameterError, ShapeError, UnavailableError
from .prompts import PromptEmbedding
from .rng import stream
from .schedule import Latent, NoiseSchedule, ddim_process

ACCESS_MODES = ("white_box", "black_box")


@dataclass(frozen=True)
class IreceConfig:
    tau: float = 0.4
    t_star: int = 781
    access: str = "white_box"
    seed: int = 0
    # optional: scale the injected noise to the marginal latent std at t*
    variance_matched: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ParameterError("threshold must lie in [0, 1]")
        if not 0 <= self.t_star < 1000:
            raise ParameterError("intervention timestep outside the training axis")
        if self.access not in ACCESS_MODES:
            raise ParameterError(f"access must be one of {ACCESS_MODES}")


@dataclass(frozen=True)
class ConceptMask:
    m: np.ndarray  # [H, W], entries in {0, 1}

    def __post_init__(self):
        if self.m.ndim != 2:
            raise ShapeError("mask must be two-dimensional")
        vals = np.unique(self.m)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ParameterError("mask entries must be 0 or 1")


def _nearest_upsample(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    qh, qw = a.shape
    ri = (np.arange(out_h) * qh) // out_h
    ci = (np.arange(out_w) * qw) // out_w
    return a[np.ix_(ri, ci)]


def aggregate_attention(maps: AttentionMapSet, target_pos: int, out_hw=(16, 16)) -> np.ndarray:
    """Sum the per-layer head-averaged attention for one key position,
    upsampled to the latent grid, then min-max normalize to [0, 1]."""
    if not maps.maps:
        raise UnavailableError("no attention maps to aggregate")
    h, w = out_hw
    total = np.zeros((h, w), dtype=np.float64)
    for m, (qh, qw) in zip(maps.maps, maps.spatial):
        if not 0 <= target_pos < m.shape[-1]:
            raise ParameterError(f"key position {target_pos} outside the prompt axis")
        col = m[:, :, target_pos].mean(axis=0).reshape(qh, qw)
        total += _nearest_upsample(col, h, w)
    lo, hi = total.min(), total.max()
    if hi - lo < 1e-12:
        return np.zeros((h, w), dtype=np.float64)
    return (total - lo) / (hi - lo)


def threshold_mask(a: np.ndarray, tau: float) -> ConceptMask:
    """Binary mask: 1 where the aggregated map is >= tau."""
    if not 0.0 <= tau <= 1.0:
        raise ParameterError("threshold must lie in [0, 1]")
    return ConceptMask((np.asarray(a) >= tau).astype(np.float32))


def inject_noise(x_t: Latent, mask: ConceptMask, seed: int, scale: float = 1.0) -> Latent:
    """Replace masked entries with N(0, scale^2) draws; unmasked entries
    are preserved bit-exactly."""
    if mask.m.shape != x_t.data.shape[-2:]:
        raise ShapeError(f"mask shape {mask.m.shape} != latent spatial {x_t.data.shape[-2:]}")
    rng = stream(seed, "irece")
    xi = (scale * rng.normal(0, 1, x_t.data.shape)).astype(x_t.data.dtype)
    sel = mask.m[None].astype(bool)
    out = np.where(sel, xi, x_t.data)
    return Latent(out, x_t.t)


def intervention_grid_point(sched: NoiseSchedule, t_star: int) -> int:
    """Inference-grid point nearest to t_star; ties go to the larger t."""
    grid = sched.inference_grid
    dist = np.abs(grid.astype(int) - int(t_star))
    best = dist.min()
    # grid is descending, so the first minimal-distance entry is the larger t
    return int(grid[int(np.argmax(dist == best))])


def irece_sample(
    x_T: Latent,
    c_sam: PromptEmbedding,
    c_tgt: PromptEmbedding,
    model_era,
    model_std,
    sched: NoiseSchedule,
    config: IreceConfig,
    guidance: float = 7.5,
) -> Latent:
    """Guided sampling with a single masking intervention.

    At the grid point nearest config.t_star the attention-source model
    (erased for white-box, standard for black-box) is probed with the
    target prompt; its aggregated attention is thresholded into a mask
    and the masked latent region is replaced with Gaussian noise.
    """
    source = model_era if config.access == "white_box" else model_std
    t_hit = intervention_grid_point(sched, config.t_star)
    pos = c_tgt.concept_position()
    if pos is None:
        raise ParameterError("target prompt does not contain a concept token")
    fired = {"done": False}

    def hook(t: int, data: np.ndarray):
        if t != t_hit or fired["done"]:
            return None
        fired["done"] = True
        source.predict_eps(Latent(data, t), t, c_tgt)
        a = aggregate_attention(source.attention_maps(), pos, data.shape[-2:])
        mask = threshold_mask(a, config.tau)
        scale = 1.0
        if config.variance_matched:
            ab = float(sched.alpha_bar[t])
            scale = float(np.sqrt(ab * np.var(data) + (1.0 - ab)))
        return inject_noise(Latent(data, t), mask, config.seed, scale=scale).data

    return ddim_process(x_T, c_sam, model_era, sched, guidance=guidance, hook=hook)
