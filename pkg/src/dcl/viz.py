"""2-D projection of pooled dynamic factors, tagged by motion type."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from . import clm
from .config import Config
from .fusion import Batch, DCLModel, _batch_indices
from .synthdata import DatasetSplit


def dynamic_factor_embedding(model: DCLModel, data: DatasetSplit, config: Config,
                             split: str = "test"):
    """Project per-clip pooled dynamic posterior means to 2-D.

    Returns (coords (N, 2), motion labels (N,)). Uses a neighborhood-preserving
    projection seeded by the config, so repeated calls agree.
    """
    from sklearn.manifold import TSNE

    samples = data.samples(split)
    if not samples:
        raise ValueError(f"empty split {split!r}")
    feats, motions = [], []
    with torch.no_grad():
        for idx in _batch_indices(len(samples), config.batch, None):
            batch = Batch.from_samples([samples[i] for i in idx], data.precomputed)
            xv, _, _ = model.clip_features(batch)
            _, dynamics = model.vae.posterior(xv)
            feats.append(clm.pool_dynamic(dynamics.posteriors.mean))
            motions.append(batch.motion.reshape(-1))
    feats = torch.cat(feats).double().numpy()
    motions = torch.cat(motions).numpy()
    perplexity = min(30.0, max(5.0, len(feats) / 4))
    tsne = TSNE(n_components=2, random_state=config.seed, init="pca",
                perplexity=perplexity)
    coords = tsne.fit_transform(feats)
    return np.asarray(coords, dtype=np.float64), motions


def silhouette_gap(coords: np.ndarray, labels: np.ndarray, seed: int = 0):
    """(real silhouette, label-shuffled control) by cluster label."""
    from sklearn.metrics import silhouette_score

    real = float(silhouette_score(coords, labels))
    rng = np.random.default_rng(seed)
    control = float(silhouette_score(coords, rng.permutation(labels)))
    return real, control


def write_embedding(out_dir, coords: np.ndarray, motions: np.ndarray) -> None:
    """coords.csv plus a scatter image colored by motion type."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "coords.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "motion_type"])
        for (x, y), m in zip(coords, motions):
            writer.writerow([repr(float(x)), repr(float(y)), int(m)])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    scatter = ax.scatter(coords[:, 0], coords[:, 1], c=motions, cmap="tab10", s=18)
    ax.set_title("dynamic factors, 2-D projection")
    fig.colorbar(scatter, ax=ax, label="motion type")
    fig.tight_layout()
    fig.savefig(out_dir / "embedding.png", dpi=120)
    plt.close(fig)
