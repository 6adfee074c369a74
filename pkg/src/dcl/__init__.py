"""Static/dynamic sequence disentanglement with counterfactual affinity reasoning.

A sequence VAE splits clip features into a time-invariant static factor and
per-step dynamic factors, regularized by contrastive mutual-information terms.
A counterfactual stage passes messages over per-modality cross-sample affinity
graphs and trains on the total indirect effect of intervening on those graphs.
Includes a controllable synthetic paired-object QA dataset and a CLI.
"""

from .config import Config
from .synthdata import (
    DatasetSplit,
    ObjectSpec,
    QASample,
    RawClip,
    generate_dataset,
    ingest_precomputed_features,
    read_dataset,
    write_dataset,
)

__all__ = [
    "Config",
    "DatasetSplit",
    "ObjectSpec",
    "QASample",
    "RawClip",
    "generate_dataset",
    "ingest_precomputed_features",
    "read_dataset",
    "write_dataset",
]

__version__ = "0.1.0"
