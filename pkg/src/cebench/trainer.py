"""Training loops: the toy denoiser (eps-prediction) and the dense
concept classifier that scores generated images.

Both loops draw every random choice from one named stream in a fixed
order, so identical configs reproduce checkpoints bit-exactly when run
single-threaded.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .denoiser import NeuralDenoiser, default_arch
from .errors import NumericError, ParameterError, TrainingError
from .modelio import load_checkpoint, params_hash, save_checkpoint
from .prompts import CONCEPTS, TEMPLATES, make_prompt, null_prompt
from .rng import stream
from .schedule import build_linear_schedule
from .shapes import LATENT_SHAPE, blank, render_batch

NONE_LABEL = len(CONCEPTS)  # classifier class index for "no concept"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    concepts: tuple = CONCEPTS
    samples_per_concept: int = 64
    width: int = 64
    heads: int = 4
    patch: int = 4
    blocks: int = 2
    num_train_steps: int = 1000
    ema_decay: float = 0.995  # 0 disables weight averaging
    cosine_lr: bool = True
    mixed_batches: bool = True  # per-sample prompts inside each batch

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.samples_per_concept <= 0:
            raise ParameterError("epochs, batch size, and dataset size must be positive")
        if self.lr < 0:
            raise ParameterError("learning rate must be non-negative")
        if not self.concepts:
            raise ParameterError("at least one concept required")


def write_loss_curve(path, curve) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for step, loss in curve:
            w.writerow([step, f"{loss:.8f}"])


def _training_prompt(concept: str, rng: np.random.Generator):
    """One shared prompt per batch: mostly templated concept prompts,
    with null conditioning and coarse words mixed in so guidance and
    coarse-prompt strategies have support at sampling time."""
    u = rng.uniform()
    if u < 0.10:
        return null_prompt()
    if u < 0.15:
        return make_prompt("object")
    if u < 0.20:
        return make_prompt("image")
    tpl = TEMPLATES[int(rng.integers(0, len(TEMPLATES)))]
    return make_prompt(tpl, concept)


def train_denoiser(config: TrainConfig, out_path=None):
    """Train the denoiser on rendered shapes; returns (model, loss curve).

    On NaN loss the last finite-loss parameters are written to
    ``out_path`` (when given) before a training error is raised.
    """
    arch = default_arch(
        width=config.width, heads=config.heads, patch=config.patch, blocks=config.blocks
    )
    sched = build_linear_schedule(config.num_train_steps, 1e-4, 0.02, 50)
    data_rng = stream(config.seed, "data")
    images = {c: render_batch(c, config.samples_per_concept, data_rng) for c in config.concepts}

    rng = stream(config.seed, "train")
    model = NeuralDenoiser.init(arch, rng, metadata={"seed": config.seed})
    # the token table is the shared frozen text encoder: it must stay
    # identical across independently seeded models so learned embeddings
    # transfer, so it is excluded from optimization
    opt = Adam([v for k, v in model.params.items() if k != "tok_emb"], lr=config.lr)

    steps_per_epoch = max(1, len(config.concepts) * config.samples_per_concept // config.batch_size)
    total = config.epochs * steps_per_epoch
    curve = []
    last_good = None
    ema = (
        {k: v.data.copy() for k, v in model.params.items()} if config.ema_decay > 0 else None
    )
    step = 0
    try:
        for _ in range(config.epochs):
            for _ in range(steps_per_epoch):
                if config.cosine_lr:
                    opt.lr = config.lr * 0.5 * (1.0 + np.cos(np.pi * step / max(total - 1, 1)))
                if config.mixed_batches:
                    # Per-sample concepts and prompts: the model cannot fit a
                    # mixed batch without routing information through the
                    # prompt, which keeps cross-attention load-bearing.
                    cidx = rng.integers(0, len(config.concepts), size=config.batch_size)
                    idx = rng.integers(0, config.samples_per_concept, size=config.batch_size)
                    x0 = np.stack([images[config.concepts[c]][i] for c, i in zip(cidx, idx)])
                    prompts = [_training_prompt(config.concepts[c], rng) for c in cidx]
                    cond = model.cond_tensor_batch(prompts)
                else:
                    concept = config.concepts[int(rng.integers(0, len(config.concepts)))]
                    idx = rng.integers(0, config.samples_per_concept, size=config.batch_size)
                    x0 = images[concept][idx]
                    cond = model.cond_tensor(_training_prompt(concept, rng))
                t_arr = rng.integers(0, config.num_train_steps, size=config.batch_size)
                eps = rng.normal(0, 1, x0.shape).astype(np.float32)
                ab = sched.alpha_bar[t_arr][:, None, None, None]
                x_t = (np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps).astype(np.float32)

                pred = model.forward_batch(x_t, t_arr.astype(np.float64), cond)
                loss = ad.mse_loss(pred, Tensor(eps))
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                curve.append((step, float(loss.data)))
                if ema is not None:
                    d = config.ema_decay
                    for k, v in model.params.items():
                        ema[k] *= d
                        ema[k] += (1.0 - d) * v.data
                last_good = {k: v.data.copy() for k, v in model.params.items()}
                step += 1
    except NumericError as e:
        if last_good is not None and out_path is not None:
            save_checkpoint(
                out_path,
                arch,
                {k: Tensor(v) for k, v in last_good.items()},
                {"seed": config.seed, "aborted_at_step": step, "arch": arch},
            )
        raise TrainingError(f"non-finite training loss at step {step}") from e

    if config.lr > 0 and total >= 20:
        k = min(10, total // 4)
        first = float(np.mean([l for _, l in curve[:k]]))
        last = float(np.mean([l for _, l in curve[-k:]]))
        if not last < 0.5 * first:
            raise TrainingError(
                f"training did not converge: final loss {last:.4f} vs initial {first:.4f}"
            )

    if ema is not None:
        for k, v in model.params.items():
            v.data[...] = ema[k].astype(np.float32)
    model.metadata.update(
        {
            "seed": config.seed,
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "lr": config.lr,
            "initial_loss": curve[0][1],
            "final_loss": curve[-1][1],
        }
    )
    if out_path is not None:
        model.save(out_path)
    return model, curve


# -- concept classifier ---------------------------------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    samples_per_concept: int = 1024
    holdout_per_concept: int = 64
    noise_std: float = 0.2
    hidden: int = 128

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.samples_per_concept, self.holdout_per_concept) <= 0:
            raise ParameterError("classifier config sizes must be positive")
        if self.lr < 0 or self.noise_std < 0:
            raise ParameterError("lr and noise std must be non-negative")


class Classifier:
    """Dense 256 -> hidden -> K+1 classifier over flattened images.

    Detection rule used by the bench: predicted class != "none" and
    softmax confidence >= 0.5; argmax ties resolve to the lowest index.
    """

    def __init__(self, arch: dict, params: dict, metadata: dict | None = None):
        self.arch = dict(arch)
        self.params = params
        self.metadata = dict(metadata or {})

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 64, metadata=None):
        n_in = int(np.prod(LATENT_SHAPE))
        n_out = len(CONCEPTS) + 1
        arch = {"kind": "classifier", "in": n_in, "hidden": hidden, "classes": n_out}
        params = {
            "w1": Tensor(rng.normal(0, 1 / np.sqrt(n_in), (n_in, hidden)).astype(np.float32)),
            "b1": Tensor(np.zeros(hidden, dtype=np.float32)),
            "w2": Tensor(rng.normal(0, 1 / np.sqrt(hidden), (hidden, n_out)).astype(np.float32)),
            "b2": Tensor(np.zeros(n_out, dtype=np.float32)),
        }
        return cls(arch, params, metadata)

    def logits(self, images: np.ndarray) -> Tensor:
        flat = Tensor(images.reshape(images.shape[0], -1).astype(np.float32))
        h = ad.relu(ad.matmul(flat, self.params["w1"]) + self.params["b1"])
        return ad.matmul(h, self.params["w2"]) + self.params["b2"]

    def predict_probs(self, images: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return ad.softmax(self.logits(images), axis=-1).data

    def classify(self, images: np.ndarray):
        """Return (labels, confidences); label K means "none"."""
        probs = self.predict_probs(images)
        labels = probs.argmax(axis=-1)
        return labels, probs[np.arange(len(labels)), labels]

    def param_hash(self) -> str:
        return params_hash(self.arch, self.params)

    def save(self, path):
        meta = dict(self.metadata)
        meta["arch"] = self.arch
        save_checkpoint(path, self.arch, self.params, meta)

    @classmethod
    def load(cls, path) -> "Classifier":
        _, meta, params = load_checkpoint(path)
        arch = meta["arch"]
        if arch.get("kind") != "classifier":
            raise ParameterError(f"{path} is not a classifier checkpoint")
        return cls(arch, params, meta)


def _none_class_images(n: int, rng: np.random.Generator) -> np.ndarray:
    """Backgrounds and structureless noise standing in for "no concept"."""
    out = []
    for _ in range(n):
        u = rng.uniform()
        if u < 0.4:
            img = blank()
        elif u < 0.7:
            img = np.clip(rng.normal(0, 1, LATENT_SHAPE), -1, 1).astype(np.float32)
        else:
            img = np.clip(blank() + rng.normal(0, 0.3, LATENT_SHAPE), -1, 1).astype(np.float32)
        out.append(img)
    return np.stack(out)


def train_classifier(config: ClassifierConfig, out_path=None) -> Classifier:
    """Train the oracle classifier; enforces >= 0.95 held-out accuracy on
    clean renders and records it in checkpoint metadata."""
    rng = stream(config.seed, "classifier")
    xs, ys = [], []
    for k, c in enumerate(CONCEPTS):
        xs.append(render_batch(c, config.samples_per_concept, rng))
        ys.append(np.full(config.samples_per_concept, k))
    xs.append(_none_class_images(config.samples_per_concept, rng))
    ys.append(np.full(config.samples_per_concept, NONE_LABEL))
    x = np.concatenate(xs)
    y = np.concatenate(ys)

    hold_x, hold_y = [], []
    for k, c in enumerate(CONCEPTS):
        hold_x.append(render_batch(c, config.holdout_per_concept, rng))
        hold_y.append(np.full(config.holdout_per_concept, k))
    hold_x.append(_none_class_images(config.holdout_per_concept, rng))
    hold_y.append(np.full(config.holdout_per_concept, NONE_LABEL))
    hold_x = np.concatenate(hold_x)
    hold_y = np.concatenate(hold_y)

    model = Classifier.init(rng, hidden=config.hidden, metadata={"seed": config.seed})
    opt = Adam(model.params.values(), lr=config.lr)
    n = len(x)
    onehot_eye = np.eye(len(CONCEPTS) + 1, dtype=np.float32)
    steps_per_epoch = max(1, n // config.batch_size)
    step = 0
    try:
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for s in range(steps_per_epoch):
                idx = order[s * config.batch_size : (s + 1) * config.batch_size]
                if len(idx) == 0:
                    continue
                batch = x[idx] + rng.normal(0, config.noise_std, x[idx].shape).astype(np.float32) * rng.uniform()
                probs = ad.softmax(model.logits(batch.astype(np.float32)), axis=-1)
                loss = -ad.mean(ad.tsum(ad.log(probs + 1e-8) * Tensor(onehot_eye[y[idx]]), axis=-1))
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                step += 1
    except NumericError as e:
        raise TrainingError(f"non-finite classifier loss at step {step}") from e

    labels, _ = model.classify(hold_x)
    acc = float(np.mean(labels == hold_y))
    if acc < 0.95:
        raise TrainingError(f"held-out clean accuracy {acc:.3f} below the 0.95 gate")
    model.metadata["holdout_accuracy"] = acc
    if out_path is not None:
        model.save(out_path)
    return model
