"""Flat run configuration with strict keys and a content hash.

Every artifact and report embeds ``RunConfig.content_hash()`` so results
can be traced back to the exact effective configuration. Unknown keys are
rejected outright; silent typos in config files are how irreproducible
results happen.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .errors import ConfigError

ENV_OUT_ROOT = "CEBENCH_OUT_ROOT"

# Every knob the pipeline reads, with its default and therefore its type.
DEFAULTS = {
    # plumbing
    "root_seed": 0,
    "out_dir": "runs/default",
    "jobs": 1,
    # diffusion schedule
    "num_train_steps": 1000,
    "beta_start": 1e-4,
    "beta_end": 0.02,
    "inference_steps": 50,
    "guidance": 7.5,
    # denoiser training
    "train_epochs": 300,
    "train_batch_size": 16,
    "train_lr": 2e-3,
    "width": 64,
    "heads": 4,
    "patch": 4,
    "blocks": 2,
    "samples_per_concept": 64,
    "ema_decay": 0.995,
    # classifier training
    "classifier_epochs": 30,
    "classifier_samples": 1024,
    "classifier_hidden": 128,
    # erasure
    "eraser": "negative_guidance_finetune",
    "erase_target": "square",
    "erase_anchor": "object",
    "erase_strength": 2.0,
    "erase_epochs": 4,
    "erase_lr": 1e-3,
    # textual inversion
    "ti_lr": 5e-3,
    "ti_steps": 300,
    "ti_batch_size": 8,
    "ti_template": "a photo of {}",
    "n_refs": 8,
    # masking defense
    "tau": 0.4,
    "tstar": 781,
    "irece_access": "white_box",
    "variance_matched": False,
    # evaluation matrix
    "cell_seeds": 20,
    "concepts": "square,disc,cross,bar",
    "adversarial_prompt_file": "",
    "dataset_seeds": 30,
}


def _coerce(key: str, raw: str):
    """Parse a --set string override to the type of the key's default."""
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse {raw!r} as a boolean for {key}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"cannot parse {raw!r} as an integer for {key}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"cannot parse {raw!r} as a number for {key}") from e
    return raw


class RunConfig:
    """Immutable-ish flat mapping over DEFAULTS; access via attributes."""

    def __init__(self, values: dict | None = None):
        values = dict(values or {})
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        self._values = dict(DEFAULTS)
        for k, v in values.items():
            default = DEFAULTS[k]
            # JSON files carry typed values already; only check compatibility
            if isinstance(default, bool) != isinstance(v, bool) and isinstance(default, bool):
                raise ConfigError(f"key {k} expects a boolean, got {v!r}")
            if isinstance(default, (int, float)) and not isinstance(v, (int, float)):
                raise ConfigError(f"key {k} expects a number, got {v!r}")
            if isinstance(default, str) and not isinstance(v, str):
                raise ConfigError(f"key {k} expects a string, got {v!r}")
            self._values[k] = v

    # -- construction ------------------------------------------------
    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        """Build from an optional JSON file plus ``key=value`` overrides."""
        values = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            try:
                values = json.loads(p.read_text())
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
            if not isinstance(values, dict):
                raise ConfigError(f"config file {p} must hold a JSON object")
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration keys: {key}")
            values[key] = _coerce(key, raw)
        return cls(values)

    # -- access ------------------------------------------------------
    def __getattr__(self, key: str):
        try:
            return self._values[key]
        except KeyError as e:
            raise AttributeError(key) from e

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown configuration keys: {key}")
        return self._values[key]

    def as_dict(self) -> dict:
        return dict(self._values)

    def concept_list(self) -> tuple:
        return tuple(c for c in self.concepts.split(",") if c)

    def output_root(self) -> Path:
        """out_dir resolved under the environment output root, if set."""
        root = os.environ.get(ENV_OUT_ROOT)
        out = Path(self.out_dir)
        if root and not out.is_absolute():
            return Path(root) / out
        return out

    # -- identity ----------------------------------------------------
    def content_hash(self) -> str:
        """Hash over every effective value (defaults included), so two
        configs agree iff their pipelines see identical knobs."""
        blob = json.dumps(self._values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self._values, sort_keys=True, indent=2) + "\n")
