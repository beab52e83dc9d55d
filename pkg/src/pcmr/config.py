"""Pipeline configuration.

A flat key=value text file mirrors the dataclass fields; CLI flags override
the file, and environment variables (PCMR_<FIELD>) override path fields
only.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass


@dataclass
class PipelineConfig:
    # seeds and sizes
    seed: int = 0
    joint_count: int = 8
    n_points: int = 1024
    context: int = 30  # frames of temporal context (1 s at 30 fps)
    fps: int = 30
    # loss weights and optimization
    lambda_rot: float = 0.01
    lambda_smooth: float = 0.001
    learning_rate: float = 1e-4
    # stage budgets
    skr_steps: int = 800
    skr_batch: int = 6
    smrm_steps: int = 200
    smrm_batch: int = 4
    skin_steps: int = 3000
    skin_points: int = 256
    # architecture
    skr_trunk: str = "64,128,1024"
    skr_head: str = "512,256"
    smrm_hidden: int = 512
    smrm_layers: int = 2
    disc_hidden: int = 256
    skin_hidden: int = 256
    # dropout rates
    dropout_skr: float = 0.3
    dropout_smrm: float = 0.2
    dropout_skin: float = 0.2
    # behavior flags
    skin_feature_mode: str = "distance"
    procrustes: str = "similarity"
    condition_every_step: bool = True
    # synthetic data
    n_characters: int = 10
    motions_per_character: int = 2
    frames_per_motion: int = 60
    # paths (environment-overridable)
    out_dir: str = "out"
    checkpoint_dir: str = "checkpoints"

    def validate(self):
        if self.lambda_rot < 0 or self.lambda_smooth < 0:
            raise ValueError("loss weights must be non-negative")
        if self.context < 2:
            raise ValueError("context must be at least 2 frames")
        if self.joint_count < 2:
            raise ValueError("joint_count must be at least 2")
        if self.skin_feature_mode not in ("distance", "offset"):
            raise ValueError(f"unknown skin_feature_mode {self.skin_feature_mode!r}")
        if self.procrustes not in ("none", "rigid", "similarity"):
            raise ValueError(f"unknown procrustes mode {self.procrustes!r}")
        return self

    def ints(self, name):
        return tuple(int(tok) for tok in getattr(self, name).split(","))


_PATH_FIELDS = ("out_dir", "checkpoint_dir")


def _coerce(field_type, raw, key):
    if field_type is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key}: expected boolean, got {raw!r}")
    try:
        return field_type(raw)
    except ValueError:
        raise ValueError(f"config key {key}: cannot parse {raw!r} as {field_type.__name__}") from None


def parse_config_file(path) -> dict:
    """Flat key=value lines; blank lines and #-comments allowed."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, raw = stripped.split("=", 1)
            values[key.strip()] = raw.strip()
    return values


def load_config(path=None, overrides=None) -> PipelineConfig:
    """File < CLI overrides < environment (paths only)."""
    fields = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    types = {name: type(getattr(PipelineConfig(), name)) for name in fields}
    values = {}
    if path is not None:
        for key, raw in parse_config_file(path).items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _coerce(types[key], raw, key)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(types[key], str(val), key) if isinstance(val, str) else val
    for key in _PATH_FIELDS:
        env = os.environ.get(f"PCMR_{key.upper()}")
        if env:
            values[key] = env
    return PipelineConfig(**values).validate()
