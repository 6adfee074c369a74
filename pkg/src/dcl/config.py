"""Run configuration: model geometry, loss weights, data sizes, optimization.

A single dataclass holds every knob so that runs are reproducible from a JSON
snapshot. `tiny()` is the small float64-friendly geometry used by the gradient
checker, `desk()` is a reduced profile for quick CPU experiments and sweeps.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

QUESTION_TARGETS = ("material", "motion", "mixed")
MODES = ("baseline", "dse", "dse_a", "dse_a_c")


@dataclass
class Config:
    # sequence and feature geometry
    T: int = 8
    d: int = 256
    d_raw: int = 32
    d_s: int = 64
    d_z: int = 64
    hidden: int = 256
    fusion_width: int = 256

    # synthetic dataset
    n_materials: int = 6
    n_motions: int = 5
    n_question_templates: int = 12
    train_pairs: int = 512
    val_pairs: int = 64
    test_pairs: int = 64
    train_objects: int = 72
    val_objects: int = 18
    test_objects: int = 18
    frame_noise: float = 0.05
    audio_noise: float = 0.05
    appearance_jitter: float = 0.1
    motion_amplitude: float = 0.5

    # contrastive estimation and affinity graph
    tau_nce: float = 0.5
    tau_aff: float = 2.0
    k: int = 5
    n_max: int = 32
    blur_width: float = 1.0

    # loss weights (recon + gamma*KL - alpha*MI_zx - beta*MI_sx + theta*MI_zs)
    gamma: float = 1.0
    alpha: float = 0.1
    beta: float = 0.1
    theta: float = 0.1
    tie_loss_target: str = "tie"  # "tie" or "factual"

    # counterfactual sampling
    cf_samples_train: int = 1
    cf_samples_eval: int = 8

    # optimization
    batch: int = 64
    lr: float = 1e-3
    epochs: int = 20
    patience: int = 10
    seed: int = 0

    def validate(self) -> "Config":
        positive = [
            "T", "d", "d_raw", "d_s", "d_z", "hidden", "fusion_width",
            "n_question_templates", "train_pairs", "val_pairs", "test_pairs",
            "train_objects", "val_objects", "test_objects",
            "tau_nce", "tau_aff", "k", "n_max", "blur_width",
            "cf_samples_train", "cf_samples_eval", "batch", "lr", "epochs",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_materials < 2 or self.n_motions < 2:
            raise ConfigError("need at least 2 materials and 2 motion types")
        for name in ("gamma", "alpha", "beta", "theta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if self.theta > 0 and self.d_s != self.d_z:
            raise ConfigError(
                "the latent cross-MI term compares pooled dynamic factors with the "
                f"static factor, so d_s ({self.d_s}) must equal d_z ({self.d_z}) when theta > 0"
            )
        if self.tie_loss_target not in ("tie", "factual"):
            raise ConfigError(f"tie_loss_target must be 'tie' or 'factual', got {self.tie_loss_target!r}")
        if min(self.frame_noise, self.audio_noise, self.appearance_jitter, self.motion_amplitude) < 0:
            raise ConfigError("noise and jitter scales must be >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data).validate()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Config":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
        return cls.from_dict(data)

    @classmethod
    def tiny(cls) -> "Config":
        """Small geometry for float64 finite-difference checks (< 60 s CPU)."""
        return cls(
            T=4, d=8, d_raw=16, d_s=4, d_z=4, hidden=8, fusion_width=8,
            n_question_templates=6,
            train_pairs=12, val_pairs=6, test_pairs=6,
            train_objects=10, val_objects=6, test_objects=6,
            k=2, n_max=8, batch=6, epochs=2, theta=0.1,
        ).validate()

    @classmethod
    def desk(cls) -> "Config":
        """Reduced width for quick single-core sweeps on the default dataset."""
        return cls(
            d=64, d_s=16, d_z=16, hidden=64, fusion_width=64,
            batch=32, epochs=12, patience=6,
        ).validate()
