"""Trainable maps from raw clips into the shared d-dimensional feature spaces.

Video frames go through one affine map + tanh applied identically at every
time step, so encoding commutes with frame permutation. Audio uses the same
construction without the time axis; questions are an embedding lookup.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import Config
from .errors import NumericError


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


class Encoders(nn.Module):
    def __init__(self, config: Config):
        super().__init__()
        self.config = config
        self.video = nn.Linear(config.d_raw, config.d)
        self.audio = nn.Linear(config.d_raw, config.d)
        self.question = nn.Embedding(config.n_question_templates, config.d)

    def encode_video(self, frames: torch.Tensor) -> torch.Tensor:
        """(..., T, d_raw) -> (..., T, d), time-distributed."""
        _check_finite(frames, "video frames")
        return torch.tanh(self.video(frames))

    def encode_audio(self, audio: torch.Tensor) -> torch.Tensor:
        """(..., d_raw) -> (..., d)."""
        _check_finite(audio, "audio")
        return torch.tanh(self.audio(audio))

    def encode_question(self, question_id: torch.Tensor) -> torch.Tensor:
        """(N,) int ids -> (N, d)."""
        n = self.question.num_embeddings
        if question_id.numel() and (question_id.min() < 0 or question_id.max() >= n):
            bad = question_id[(question_id < 0) | (question_id >= n)][0].item()
            raise LookupError(f"question id {bad} outside embedding table of size {n}")
        return self.question(question_id)
