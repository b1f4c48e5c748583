"""Procedural toy image domain: 16x16 renders of four shape concepts.

Pixels live in [-1, 1]: background -1, shape body +1. Each concept owns a
home quadrant of the canvas and is drawn there with a +/-1 pixel jitter.
Anchoring concepts to disjoint regions keeps the conditional distribution
near-unimodal — which a ~100k-parameter denoiser can actually learn — and
gives the attention-masking defense spatially separated concepts, so
masking one concept's region cannot collide with another's.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .prompts import CONCEPTS

SIZE = 16
LATENT_SHAPE = (1, SIZE, SIZE)

# home quadrant centers (row, col)
HOME = {
    "square": (4, 4),
    "disc": (4, 11),
    "cross": (11, 4),
    "bar": (11, 11),
}

_II, _JJ = np.meshgrid(np.arange(SIZE), np.arange(SIZE), indexing="ij")


def render(concept: str, rng: np.random.Generator) -> np.ndarray:
    """Render one [1, 16, 16] float32 image of the given concept."""
    if concept not in CONCEPTS:
        raise ParameterError(f"unknown concept {concept!r}")
    img = np.full((SIZE, SIZE), -1.0, dtype=np.float32)
    cy0, cx0 = HOME[concept]
    cy = cy0 + int(rng.integers(-1, 2))
    cx = cx0 + int(rng.integers(-1, 2))
    if concept == "square":
        half = 3  # 6x6 block
        img[cy - half : cy + half, cx - half : cx + half] = 1.0
    elif concept == "disc":
        r = 3.0
        mask = (_II - cy) ** 2 + (_JJ - cx) ** 2 <= r * r
        img[mask] = 1.0
    elif concept == "cross":
        arm, th = 3, 1
        img[cy - th : cy + th + 1, cx - arm : cx + arm + 1] = 1.0
        img[cy - arm : cy + arm + 1, cx - th : cx + th + 1] = 1.0
    else:  # horizontal bar
        half_len, half_th = 3, 1
        img[cy - half_th : cy + half_th + 1, cx - half_len : cx + half_len + 1] = 1.0
    return img[None, :, :]


def render_batch(concept: str, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([render(concept, rng) for _ in range(n)])


def blank() -> np.ndarray:
    return np.full(LATENT_SHAPE, -1.0, dtype=np.float32)
