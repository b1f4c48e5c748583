"""Conditional noise predictors: an analytic mixture oracle and a tiny
cross-attention transformer, plus guidance combination and attention taps.

The neural backend works on 1x16x16 latents split into 16 4x4 patches;
two transformer blocks each carry one cross-attention site over the
prompt token sequence, giving two observation taps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError, UnavailableError
from .modelio import load_checkpoint, params_hash, save_checkpoint
from .rng import stream
from .prompts import (
    CONCEPT_IDS,
    TOKEN_DIM,
    PromptEmbedding,
    null_prompt,
)
from .schedule import Latent

__all__ = [
    "AttentionMapSet",
    "AnalyticDenoiser",
    "NeuralDenoiser",
    "predict_eps",
    "guided_eps",
    "attention_maps",
    "null_prompt",
]


@dataclass(frozen=True)
class AttentionMapSet:
    """Per-layer cross-attention maps: [heads, q_h * q_w, key_len] each."""

    maps: tuple  # tuple of np.ndarray
    spatial: tuple  # tuple of (q_h, q_w) per layer

    def __post_init__(self):
        for m, (qh, qw) in zip(self.maps, self.spatial):
            if m.shape[1] != qh * qw:
                raise ShapeError("attention map query axis does not match spatial size")


def _prompt_concept(cond: PromptEmbedding) -> str | None:
    for name, tid in CONCEPT_IDS.items():
        if tid in cond.token_ids:
            return name
    return None


class AnalyticDenoiser:
    """Closed-form posterior-mean noise predictor for a Gaussian-mixture
    data law. Components may be tagged with a concept; conditioning on a
    concept restricts the mixture, anything else uses all components.

    Exists as a math oracle for schedule tests; it exposes no attention
    taps and never feeds the masking defense.
    """

    backend = "analytic"

    def __init__(self, components, sigma: float, latent_shape=(1, 16, 16)):
        # components: iterable of (weight, mean array, concept tag or None)
        self.components = [
            (float(w), np.asarray(m, dtype=np.float64), tag) for w, m, tag in components
        ]
        if not self.components:
            raise ParameterError("mixture needs at least one component")
        total = sum(w for w, _, _ in self.components)
        self.components = [(w / total, m, tag) for w, m, tag in self.components]
        self.sigma = float(sigma)
        self.latent_shape = tuple(latent_shape)

    def predict_eps(self, x_t: Latent, t: int, cond: PromptEmbedding, sched) -> np.ndarray:
        if x_t.data.shape != self.latent_shape:
            raise ShapeError(f"latent shape {x_t.data.shape} != {self.latent_shape}")
        ab = float(sched.alpha_bar[t])
        v = 1.0 - ab
        if v < 1e-12:
            return np.zeros(self.latent_shape, dtype=np.float32)
        concept = _prompt_concept(cond)
        comps = [c for c in self.components if concept is None or c[2] is None or c[2] == concept]
        if concept is not None:
            tagged = [c for c in comps if c[2] == concept]
            if tagged:
                comps = tagged
        x = x_t.data.astype(np.float64)
        s = math.sqrt(ab)
        marg = ab * self.sigma**2 + v
        logw = np.array(
            [
                math.log(w) - 0.5 * np.sum((x - s * m) ** 2) / marg
                for w, m, _ in comps
            ]
        )
        logw -= logw.max()
        r = np.exp(logw)
        r /= r.sum()
        shrink = s * self.sigma**2 / marg
        ex0 = np.zeros_like(x)
        for rk, (_, m, _) in zip(r, comps):
            ex0 += rk * (m + shrink * (x - s * m))
        eps = (x - s * ex0) / math.sqrt(v)
        return eps.astype(np.float32)

    def attention_maps(self):
        raise UnavailableError("analytic backend exposes no attention taps")


def _sinusoid(t_arr: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t_arr, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def _patchify(x: np.ndarray, patch: int) -> np.ndarray:
    b, c, h, w = x.shape
    g = h // patch
    out = x[:, 0].reshape(b, g, patch, g, patch).transpose(0, 1, 3, 2, 4)
    return out.reshape(b, g * g, patch * patch)


def default_arch(width: int = 64, heads: int = 4, patch: int = 4, blocks: int = 2) -> dict:
    return {
        "kind": "neural_denoiser",
        "width": width,
        "heads": heads,
        "blocks": blocks,
        "patch": patch,
        "image": 16,
        "token_dim": TOKEN_DIM,
        "vocab": 16,
        "time_dim": 32,
    }


class NeuralDenoiser:
    """Patch-token transformer with per-block cross-attention taps.

    The tap registry is handle-local: it holds the cross-attention maps
    of the most recent single-sample ``predict_eps`` call.
    """

    backend = "neural"

    def __init__(self, arch: dict, params: dict, metadata: dict | None = None):
        self.arch = dict(arch)
        self.params = params
        self.metadata = dict(metadata or {})
        self.cond_remap: dict[int, int] = dict(self.metadata.get("cond_remap", {}))
        # json round-trips dict keys as strings
        self.cond_remap = {int(k): int(v) for k, v in self.cond_remap.items()}
        self.latent_shape = (1, arch["image"], arch["image"])
        self._taps: AttentionMapSet | None = None

    # -- construction ---------------------------------------------------
    @classmethod
    def init(cls, arch: dict, rng: np.random.Generator, metadata: dict | None = None):
        d = arch["width"]
        p2 = arch["patch"] ** 2
        td = arch["token_dim"]
        tq = (arch["image"] // arch["patch"]) ** 2
        tdim = arch["time_dim"]

        def w(*shape, scale=None):
            scale = scale if scale is not None else 1.0 / math.sqrt(shape[0])
            return Tensor(rng.normal(0.0, scale, size=shape).astype(np.float32))

        def zeros(*shape):
            return Tensor(np.zeros(shape, dtype=np.float32))

        def ones(*shape):
            return Tensor(np.ones(shape, dtype=np.float32))

        params = {
            # The token table is drawn from a fixed stream shared by every
            # model regardless of seed: it plays the role of the common
            # frozen text encoder, so embeddings learned against one model
            # are meaningful inputs to another (black-box transfer).
            "tok_emb": Tensor(
                stream(0, "tok_emb").normal(0.0, 0.5, (arch["vocab"], td)).astype(np.float32)
            ),
            "patch_w": w(p2, d),
            "patch_b": zeros(d),
            # Full-scale position rows: with a small init the patch tokens
            # are nearly position-blind, and samples degrade into collages
            # of locally plausible fragments at the wrong locations.
            "pos": w(tq, d, scale=1.0),
            "time_w1": w(tdim, d),
            "time_b1": zeros(d),
            "time_w2": w(d, d),
            "time_b2": zeros(d),
            "ln_f_g": ones(d),
            "ln_f_b": zeros(d),
            "head_w": zeros(d, p2),
            "head_b": zeros(p2),
        }
        for i in range(arch["blocks"]):
            pfx = f"b{i}_"
            params.update(
                {
                    pfx + "ln1_g": ones(d),
                    pfx + "ln1_b": zeros(d),
                    pfx + "sa_wq": w(d, d),
                    pfx + "sa_bq": zeros(d),
                    pfx + "sa_wk": w(d, d),
                    pfx + "sa_bk": zeros(d),
                    pfx + "sa_wv": w(d, d),
                    pfx + "sa_bv": zeros(d),
                    pfx + "sa_wo": w(d, d, scale=0.5 / math.sqrt(d)),
                    pfx + "sa_bo": zeros(d),
                    pfx + "ln2_g": ones(d),
                    pfx + "ln2_b": zeros(d),
                    pfx + "ca_wq": w(d, d),
                    pfx + "ca_bq": zeros(d),
                    pfx + "ca_wk": w(td, d),
                    pfx + "ca_bk": zeros(d),
                    pfx + "ca_wv": w(td, d),
                    pfx + "ca_bv": zeros(d),
                    pfx + "ca_wo": w(d, d, scale=0.5 / math.sqrt(d)),
                    pfx + "ca_bo": zeros(d),
                    pfx + "ln3_g": ones(d),
                    pfx + "ln3_b": zeros(d),
                    pfx + "mlp_w1": w(d, 4 * d),
                    pfx + "mlp_b1": zeros(4 * d),
                    pfx + "mlp_w2": w(4 * d, d),
                    pfx + "mlp_b2": zeros(d),
                }
            )
        return cls(arch, params, metadata)

    def copy(self) -> "NeuralDenoiser":
        params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        m = NeuralDenoiser(self.arch, params, dict(self.metadata))
        m.cond_remap = dict(self.cond_remap)
        return m

    def param_hash(self) -> str:
        h = params_hash(self.arch, self.params)
        if self.cond_remap:
            import hashlib

            h = hashlib.sha256(
                (h + repr(sorted(self.cond_remap.items()))).encode()
            ).hexdigest()
        return h

    # -- conditioning ---------------------------------------------------
    def cond_tensor(self, cond: PromptEmbedding, learned_override: Tensor | None = None) -> Tensor:
        """Prompt token rows with the learned slot substituted; the
        target-to-anchor remap of the projection eraser applies here."""
        emb = self.params["tok_emb"]
        ids = [self.cond_remap.get(i, i) for i in cond.token_ids]
        slot = cond.placeholder_pos
        if slot is None:
            return ad.gather_rows(emb, ids)
        learned = learned_override
        if learned is None:
            learned = Tensor(cond.learned)
        pieces = []
        for j, tid in enumerate(ids):
            if j == slot:
                pieces.append(ad.reshape(learned, (1, TOKEN_DIM)))
            else:
                pieces.append(ad.gather_rows(emb, [tid]))
        return ad.concat(pieces, axis=0)

    def cond_tensor_batch(self, conds) -> Tensor:
        """Stacked per-sample prompt rows, padded to a common length with
        the null token so one batch can mix concepts and templates."""
        from .prompts import NULL_ID

        s = max(len(c.token_ids) for c in conds)
        rows = []
        for c in conds:
            ids = [self.cond_remap.get(i, i) for i in c.token_ids]
            ids = ids + [NULL_ID] * (s - len(ids))
            rows.append(ad.reshape(ad.gather_rows(self.params["tok_emb"], ids), (1, s, TOKEN_DIM)))
        return ad.concat(rows, axis=0)

    # -- forward ----------------------------------------------------------
    def forward_batch(
        self,
        x: np.ndarray,
        t_arr: np.ndarray,
        cond: Tensor,
        record_taps: bool = False,
    ) -> Tensor:
        """Predict noise for a batch sharing one conditioning sequence.

        x: [B, 1, 16, 16] numpy (constant w.r.t. the graph); cond: [S, td].
        """
        arch = self.arch
        d, heads, patch = arch["width"], arch["heads"], arch["patch"]
        hd = d // heads
        b = x.shape[0]
        g = arch["image"] // patch
        tq = g * g
        P = self.params

        h = ad.matmul(Tensor(_patchify(x, patch)), P["patch_w"]) + P["patch_b"]
        h = h + P["pos"]
        temb = ad.gelu(ad.matmul(Tensor(_sinusoid(t_arr, arch["time_dim"])), P["time_w1"]) + P["time_b1"])
        temb = ad.matmul(temb, P["time_w2"]) + P["time_b2"]
        h = h + ad.reshape(temb, (b, 1, d))

        taps = []
        for i in range(arch["blocks"]):
            pfx = f"b{i}_"
            # self-attention
            a = ad.layer_norm(h, P[pfx + "ln1_g"], P[pfx + "ln1_b"])
            q = ad.transpose(ad.reshape(ad.matmul(a, P[pfx + "sa_wq"]) + P[pfx + "sa_bq"], (b, tq, heads, hd)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(ad.matmul(a, P[pfx + "sa_wk"]) + P[pfx + "sa_bk"], (b, tq, heads, hd)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(ad.matmul(a, P[pfx + "sa_wv"]) + P[pfx + "sa_bv"], (b, tq, heads, hd)), (0, 2, 1, 3))
            scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
            att = ad.matmul(ad.softmax(scores, axis=-1), v)
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, tq, d))
            h = h + (ad.matmul(att, P[pfx + "sa_wo"]) + P[pfx + "sa_bo"])

            # cross-attention over the prompt sequence
            a = ad.layer_norm(h, P[pfx + "ln2_g"], P[pfx + "ln2_b"])
            q = ad.transpose(ad.reshape(ad.matmul(a, P[pfx + "ca_wq"]) + P[pfx + "ca_bq"], (b, tq, heads, hd)), (0, 2, 1, 3))
            if len(cond.shape) == 3:  # per-sample prompts: [b, s, td]
                s = cond.shape[1]
                kc = ad.transpose(ad.reshape(ad.matmul(cond, P[pfx + "ca_wk"]) + P[pfx + "ca_bk"], (b, s, heads, hd)), (0, 2, 1, 3))
                vc = ad.transpose(ad.reshape(ad.matmul(cond, P[pfx + "ca_wv"]) + P[pfx + "ca_bv"], (b, s, heads, hd)), (0, 2, 1, 3))
                scores = ad.matmul(q, ad.transpose(kc, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
            else:  # one shared prompt: [s, td]
                s = cond.shape[0]
                kc = ad.transpose(ad.reshape(ad.matmul(cond, P[pfx + "ca_wk"]) + P[pfx + "ca_bk"], (s, heads, hd)), (1, 0, 2))
                vc = ad.transpose(ad.reshape(ad.matmul(cond, P[pfx + "ca_wv"]) + P[pfx + "ca_bv"], (s, heads, hd)), (1, 0, 2))
                scores = ad.matmul(q, ad.transpose(kc, (0, 2, 1))) * (1.0 / math.sqrt(hd))
            probs = ad.softmax(scores, axis=-1)  # [b, heads, tq, s]
            if record_taps and b == 1:
                taps.append(probs.data[0].copy())
            att = ad.matmul(probs, vc)
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, tq, d))
            h = h + (ad.matmul(att, P[pfx + "ca_wo"]) + P[pfx + "ca_bo"])

            # mlp
            a = ad.layer_norm(h, P[pfx + "ln3_g"], P[pfx + "ln3_b"])
            a = ad.gelu(ad.matmul(a, P[pfx + "mlp_w1"]) + P[pfx + "mlp_b1"])
            h = h + (ad.matmul(a, P[pfx + "mlp_w2"]) + P[pfx + "mlp_b2"])

        out = ad.layer_norm(h, P["ln_f_g"], P["ln_f_b"])
        out = ad.matmul(out, P["head_w"]) + P["head_b"]  # [b, tq, patch^2]
        out = ad.reshape(out, (b, g, g, patch, patch))
        out = ad.transpose(out, (0, 1, 3, 2, 4))
        out = ad.reshape(out, (b, 1, arch["image"], arch["image"]))
        if record_taps and b == 1:
            self._taps = AttentionMapSet(tuple(taps), tuple((g, g) for _ in taps))
        return out

    def predict_eps(self, x_t: Latent, t: int, cond: PromptEmbedding, sched=None) -> np.ndarray:
        if x_t.data.shape != self.latent_shape:
            raise ShapeError(f"latent shape {x_t.data.shape} != {self.latent_shape}")
        with ad.no_grad():
            ct = self.cond_tensor(cond)
            out = self.forward_batch(
                x_t.data[None].astype(np.float32),
                np.array([t], dtype=np.float64),
                ct,
                record_taps=True,
            )
        return out.data[0]

    def attention_maps(self) -> AttentionMapSet:
        if self._taps is None:
            raise UnavailableError("no forward pass has populated the tap registry")
        return self._taps

    # -- persistence ------------------------------------------------------
    def save(self, path):
        meta = dict(self.metadata)
        meta["arch"] = self.arch
        meta["cond_remap"] = {str(k): v for k, v in self.cond_remap.items()}
        meta["params_hash"] = self.param_hash()
        save_checkpoint(path, self.arch, self.params, meta)

    @classmethod
    def load(cls, path) -> "NeuralDenoiser":
        _, meta, params = load_checkpoint(path)
        arch = meta["arch"]
        if arch.get("kind") != "neural_denoiser":
            raise ParameterError(f"{path} is not a denoiser checkpoint")
        return cls(arch, params, meta)


# -- module-level operation surface -------------------------------------


def predict_eps(model, x_t: Latent, t: int, cond: PromptEmbedding, sched=None) -> np.ndarray:
    return model.predict_eps(x_t, t, cond, sched) if model.backend == "analytic" else model.predict_eps(x_t, t, cond)


def guided_eps(model, x_t: Latent, t: int, cond: PromptEmbedding, null_cond: PromptEmbedding, guidance: float, sched=None) -> np.ndarray:
    """Classifier-free combination eps_u + w (eps_c - eps_u)."""
    if guidance == 1.0:
        return predict_eps(model, x_t, t, cond, sched)
    eps_u = predict_eps(model, x_t, t, null_cond, sched)
    eps_c = predict_eps(model, x_t, t, cond, sched)
    return eps_u + guidance * (eps_c - eps_u)


def attention_maps(model) -> AttentionMapSet:
    return model.attention_maps()
