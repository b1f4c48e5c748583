"""Vocabulary, prompt templates, and prompt-embedding assembly.

The vocabulary has exactly 16 tokens: a null token, two coarse words
("image", "object"), the four concept names, a learned-slot placeholder,
and eight filler words used by the templates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

VOCAB = (
    "<null>",
    "image",
    "object",
    "square",
    "disc",
    "cross",
    "bar",
    "<concept>",
    "a",
    "an",
    "of",
    "painting",
    "picture",
    "photo",
    "the",
    "scene",
)
TOKEN_IDS = {w: i for i, w in enumerate(VOCAB)}
NULL_ID = 0
PLACEHOLDER_ID = TOKEN_IDS["<concept>"]
CONCEPTS = ("square", "disc", "cross", "bar")
CONCEPT_IDS = {c: TOKEN_IDS[c] for c in CONCEPTS}

TEMPLATES = (
    "an image of {}",
    "a painting of {}",
    "a picture of {}",
    "a photo of {}",
    "{}",
)

TOKEN_DIM = 16
MAX_PROMPT_LEN = 8


@dataclass(frozen=True)
class PromptEmbedding:
    """Token id sequence, optionally carrying a learned slot vector.

    The learned vector occupies the placeholder position; it is present
    iff the placeholder token appears in the sequence.
    """

    token_ids: tuple
    learned: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if not self.token_ids or len(self.token_ids) > MAX_PROMPT_LEN:
            raise ParameterError(f"prompt length must be in [1, {MAX_PROMPT_LEN}]")
        for i in self.token_ids:
            if not 0 <= i < len(VOCAB):
                raise ParameterError(f"token id {i} outside vocabulary")
        has_slot = PLACEHOLDER_ID in self.token_ids
        if has_slot != (self.learned is not None):
            raise ParameterError("placeholder present iff a learned vector is given")
        if self.learned is not None and self.learned.shape != (TOKEN_DIM,):
            raise ParameterError(f"learned vector must have shape ({TOKEN_DIM},)")

    @property
    def placeholder_pos(self) -> int | None:
        return self.token_ids.index(PLACEHOLDER_ID) if PLACEHOLDER_ID in self.token_ids else None

    def concept_position(self) -> int | None:
        """Index of the first concept token (or the learned slot)."""
        for i, tid in enumerate(self.token_ids):
            if tid in CONCEPT_IDS.values() or tid == PLACEHOLDER_ID:
                return i
        return None


def tokenize(text: str) -> tuple:
    words = text.lower().split()
    ids = []
    for w in words:
        if w not in TOKEN_IDS:
            raise ParameterError(f"unknown token {w!r}")
        ids.append(TOKEN_IDS[w])
    return tuple(ids)


def make_prompt(template: str, concept: str | None = None, learned_e: np.ndarray | None = None) -> PromptEmbedding:
    """Instantiate a template with a concept token or the learned slot.

    An empty template yields the null condition. Templates without a
    ``{}`` slot (e.g. "image", "object") are tokenized as-is.
    """
    if template == "":
        return PromptEmbedding((NULL_ID,))
    if "{}" in template:
        if learned_e is not None:
            text = template.format("<concept>")
        elif concept is not None:
            if concept not in CONCEPT_IDS and concept not in TOKEN_IDS:
                raise ParameterError(f"unknown concept token {concept!r}")
            text = template.format(concept)
        else:
            raise ParameterError("template has a slot but no concept or learned vector given")
    else:
        text = template
    return PromptEmbedding(tokenize(text), learned=learned_e)


def null_prompt() -> PromptEmbedding:
    return PromptEmbedding((NULL_ID,))
