"""Checkpoint container: config snapshot, ablation mode, model state."""

from __future__ import annotations

from pathlib import Path

import torch

from .config import Config
from .errors import CheckpointError

FORMAT = "dcl-checkpoint"
VERSION = 1

# geometry fields that must agree between a checkpoint and a requested config
_GEOMETRY = ("T", "d", "d_raw", "d_s", "d_z", "hidden", "fusion_width",
             "n_question_templates")


def save_checkpoint(path, model, config: Config, extra: dict | None = None) -> None:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "mode": model.mode,
        "config": config.to_dict(),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, config: Config | None = None):
    """Rebuild the model; returns (model, config, extra).

    Raises CheckpointError for unreadable files, wrong container versions, or
    geometry mismatches against a caller-supplied config.
    """
    from .fusion import DCLModel

    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload.get('version')} != supported {VERSION}")
    stored = Config.from_dict(payload["config"])
    if config is not None:
        bad = [f for f in _GEOMETRY if getattr(config, f) != getattr(stored, f)]
        if bad:
            raise CheckpointError(
                f"{path}: checkpoint geometry differs from requested config on {bad}")
    model = DCLModel(stored, payload["mode"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model, stored, payload.get("extra", {})
