"""Concept erasure: a closed-form token remap at the conditioning
boundary and a negative-guidance fine-tune of the cross-attention
parameters. Both return new models and never mutate their input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import NumericError, ParameterError, TrainingError
from .prompts import CONCEPT_IDS, TEMPLATES, TOKEN_IDS, make_prompt, null_prompt
from .rng import stream
from .schedule import build_linear_schedule
from .shapes import render_batch

METHODS = ("projection_edit", "negative_guidance_finetune")


@dataclass(frozen=True)
class ErasureSpec:
    method: str
    target: str
    anchor: str = "object"
    strength: float = 1.0
    epochs: int = 4
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown erasure method {self.method!r}")
        if self.target not in CONCEPT_IDS:
            raise ParameterError(f"target must be a concept token, got {self.target!r}")
        if self.target == self.anchor:
            raise ParameterError("target and anchor must differ")
        if self.anchor not in TOKEN_IDS:
            raise ParameterError(f"unknown anchor token {self.anchor!r}")


def erase_projection_edit(model, target_token: str, anchor_token: str):
    """Remap the target token's embedding row to the anchor's at the
    conditioning boundary. Exact substitution: prompts mentioning the
    target behave bit-identically to the same prompts with the anchor."""
    ErasureSpec("projection_edit", target_token, anchor_token)  # validate tokens
    out = model.copy()
    tgt = TOKEN_IDS[target_token]
    anchor = TOKEN_IDS[anchor_token]
    # resolve through an existing remap so a second application is a no-op
    out.cond_remap = dict(model.cond_remap)
    out.cond_remap[tgt] = out.cond_remap.get(anchor, anchor)
    out.metadata.update(
        {
            "erasure_method": "projection_edit",
            "erasure_target": target_token,
            "erasure_anchor": anchor_token,
            "base_model_hash": model.param_hash(),
        }
    )
    return out


def erase_negative_guidance_finetune(
    model,
    target_token: str,
    epochs: int = 4,
    strength: float = 1.0,
    lr: float = 1e-3,
    batch_size: int = 16,
    seed: int = 0,
):
    """Fine-tune cross-attention parameters so the student's conditional
    prediction on target prompts tracks the teacher's guided-away value
    eps_u - strength * (eps_c - eps_u). The teacher is a frozen copy of
    the input model."""
    spec = ErasureSpec(
        "negative_guidance_finetune",
        target_token,
        strength=strength,
        epochs=epochs,
        lr=lr,
        batch_size=batch_size,
        seed=seed,
    )
    teacher = model.copy()
    student = model.copy()
    if epochs == 0:
        student.metadata.update(_ng_meta(model, spec))
        return student

    trainable = [v for k, v in student.params.items() if "_ca_" in k]
    opt = Adam(trainable, lr=lr)
    sched = build_linear_schedule(1000, 1e-4, 0.02, 50)
    T = sched.num_train_steps
    rng = stream(seed, "erase")
    # full prompt surface for the target so every template path is erased
    prompts = [make_prompt(tpl, target_token) for tpl in TEMPLATES]
    null = null_prompt()
    # noised renders of the target keep the fine-tune on-manifold
    pool = render_batch(target_token, 64, stream(seed, "erase", 1))
    steps_per_epoch = 32
    step = 0
    try:
        for _ in range(epochs):
            for _ in range(steps_per_epoch):
                prompt = prompts[int(rng.integers(0, len(prompts)))]
                t_arr = rng.integers(0, T, size=batch_size)
                x0 = pool[rng.integers(0, len(pool), size=batch_size)]
                eps = rng.normal(0, 1, x0.shape).astype(np.float32)
                ab = sched.alpha_bar[t_arr][:, None, None, None]
                x_t = (np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps).astype(np.float32)
                with ad.no_grad():
                    eps_u = teacher.forward_batch(
                        x_t, t_arr.astype(np.float64), teacher.cond_tensor(null)
                    ).data
                    eps_c = teacher.forward_batch(
                        x_t, t_arr.astype(np.float64), teacher.cond_tensor(prompt)
                    ).data
                target = eps_u - strength * (eps_c - eps_u)
                pred = student.forward_batch(
                    x_t, t_arr.astype(np.float64), student.cond_tensor(prompt)
                )
                loss = ad.mse_loss(pred, Tensor(target))
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                step += 1
    except NumericError as e:
        raise TrainingError(f"non-finite erasure loss at step {step}") from e

    student.metadata.update(_ng_meta(model, spec))
    return student


def _ng_meta(model, spec: ErasureSpec) -> dict:
    return {
        "erasure_method": spec.method,
        "erasure_target": spec.target,
        "erasure_anchor": None,
        "erasure_strength": spec.strength,
        "base_model_hash": model.param_hash(),
    }


def erase(model, spec: ErasureSpec):
    if spec.method == "projection_edit":
        return erase_projection_edit(model, spec.target, spec.anchor)
    return erase_negative_guidance_finetune(
        model,
        spec.target,
        epochs=spec.epochs,
        strength=spec.strength,
        lr=spec.lr,
        batch_size=spec.batch_size,
        seed=spec.seed,
    )
