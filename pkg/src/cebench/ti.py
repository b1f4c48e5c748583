"""Textual inversion against a frozen denoiser, plus the reference-image
perturbation used to stress embedding transfer.

The learned vector lives in the prompt's placeholder slot; gradients
reach it through the conditioning path only, and the model parameters
are hash-checked to be untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import ContractError, NumericError, ParameterError
from .prompts import TOKEN_IDS, make_prompt
from .rng import stream
from .schedule import build_linear_schedule

# paper-scale per-pixel budget of 8/255 mapped to the [-1, 1] pixel range
DEFAULT_BUDGET = 2 * 8 / 255

INIT_TOKEN = "object"


@dataclass(frozen=True)
class TiConfig:
    lr: float = 5e-3
    steps: int = 300
    batch_size: int = 8
    seed: int = 0
    template: str = "a photo of {}"

    def __post_init__(self):
        # lr = 0 is admitted as a degenerate diagnostic mode (the embedding
        # must then stay at its initialization exactly)
        if self.lr < 0:
            raise ParameterError("learning rate must be non-negative")
        if self.steps < 0:
            raise ParameterError("step count must be non-negative")
        if self.batch_size <= 0:
            raise ParameterError("batch size must be positive")
        if "{}" not in self.template:
            raise ContractError("template must contain the learned slot")


# the paper-scale schedule length preset
FULL_STEPS = 1500


def ti_learn(x0_refs: np.ndarray, template: str, model, config: TiConfig):
    """Learn an embedding for the template slot from reference images.

    x0_refs: [N, 1, H, W] in [-1, 1]. Returns (embedding, loss curve).
    The model is frozen: its parameter hash must be unchanged afterward.
    """
    if "{}" not in template:
        raise ContractError("template must contain the learned slot")
    x0_refs = np.asarray(x0_refs, dtype=np.float32)
    if x0_refs.ndim != 4:
        raise ParameterError("reference batch must be [N, C, H, W]")
    if np.abs(x0_refs).max() > 1.0 + 1e-6:
        raise ParameterError("reference images must lie in [-1, 1]")

    hash_before = model.param_hash()
    sched = build_linear_schedule(1000, 1e-4, 0.02, 50)
    T = sched.num_train_steps

    e = Tensor(model.params["tok_emb"].data[TOKEN_IDS[INIT_TOKEN]].copy())
    prompt = make_prompt(template, learned_e=e.data)
    opt = Adam([e], lr=config.lr)
    rng = stream(config.seed, "ti")
    n = len(x0_refs)
    curve = []
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        x0 = x0_refs[idx]
        t_arr = rng.integers(0, T, size=config.batch_size)
        eps = rng.normal(0, 1, x0.shape).astype(np.float32)
        ab = sched.alpha_bar[t_arr][:, None, None, None]
        x_t = (np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps).astype(np.float32)

        cond = model.cond_tensor(prompt, learned_override=e)
        pred = model.forward_batch(x_t, t_arr.astype(np.float64), cond)
        loss = ad.mse_loss(pred, Tensor(eps))
        opt.zero_grad()
        for p in model.params.values():
            p.grad = None
        try:
            ad.backward(loss)
        except NumericError:
            raise
        # only the embedding moves; model gradients are discarded
        for p in model.params.values():
            p.grad = None
        opt.step()
        curve.append((step, float(loss.data)))

    if model.param_hash() != hash_before:
        raise ContractError("model parameters changed during textual inversion")
    return e.data.copy(), curve


def perturb_references(x0_refs: np.ndarray, budget: float, seed: int) -> np.ndarray:
    """Add elementwise uniform noise in [-budget, budget], clip to [-1, 1]."""
    if budget < 0:
        raise ParameterError("perturbation budget must be non-negative")
    x0_refs = np.asarray(x0_refs, dtype=np.float32)
    if budget == 0:
        return x0_refs.copy()
    rng = stream(seed, "perturb")
    tau = rng.uniform(-budget, budget, x0_refs.shape).astype(np.float32)
    return np.clip(x0_refs + tau, -1.0, 1.0)


def save_embedding(path, concept: str, embedding: np.ndarray, model_hash: str, config: TiConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "concept": concept,
        "model_hash": model_hash,
        "seed": config.seed,
        "config": {
            "lr": config.lr,
            "steps": config.steps,
            "batch_size": config.batch_size,
            "template": config.template,
        },
        "vector": [float(v) for v in embedding.astype(np.float32)],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_embedding(path):
    doc = json.loads(Path(path).read_text())
    vec = np.asarray(doc["vector"], dtype=np.float32)
    return vec, doc
