"""Late-fusion classifier, composed forward pass, training loop, evaluation.

Ablation modes:
  baseline  pure late fusion of mean-pooled video and audio features
  dse       adds the sequence VAE; clips are represented by (audio, s, pooled z)
  dse_a     adds cross-sample affinity message passing on those blocks
  dse_a_c   adds counterfactual passes and trains on the total indirect effect

In dse_a_c the counterfactual pass rebuilds affinities from sampled surrogate
features while the real features stay fixed; predictions use the argmax of the
factual-minus-counterfactual logits, other modes use the factual logits.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import clm
from .config import MODES, Config
from .dse import DseNoise, LossBreakdown, SequenceVAE, dse_loss
from .encoders import Encoders
from .errors import ConfigError, TrainingDivergedError
from .synthdata import DatasetSplit


@dataclass
class Prediction:
    logits: torch.Tensor  # (2,) choice between clip1 and clip2
    probabilities: torch.Tensor

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "Prediction":
        return cls(logits=logits, probabilities=torch.softmax(logits, dim=-1))


@dataclass
class Metrics:
    accuracy_all: float
    accuracy_material: float  # nan when no material-target questions exist
    probe_static: float  # nan unless probes were requested and labels exist
    probe_dynamic: float
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "accuracy_all": self.accuracy_all,
            "accuracy_material": self.accuracy_material,
            "probe_static": self.probe_static,
            "probe_dynamic": self.probe_dynamic,
            "n_samples": self.n_samples,
        }


@dataclass
class Batch:
    """Stacked tensors for a list of QA samples; clip axis is sample-major."""

    frames: torch.Tensor  # (B, 2, T, d_raw) raw, or (B, 2, T, d) precomputed
    audio: torch.Tensor  # (B, 2, d_raw) or (B, 2, d)
    question_id: torch.Tensor  # (B,)
    label: torch.Tensor  # (B,)
    material: torch.Tensor  # (B, 2), -1 when unknown
    motion: torch.Tensor  # (B, 2), -1 when unknown
    is_material_question: torch.Tensor  # (B,) bool
    question_vec: torch.Tensor | None = None  # (B, d) for precomputed data
    precomputed: bool = False

    @classmethod
    def from_samples(cls, samples, precomputed: bool, dtype=torch.float32) -> "Batch":
        if not samples:
            raise ValueError("empty batch")
        frames = torch.tensor(np.stack([[s.clip1.frames, s.clip2.frames] for s in samples]), dtype=dtype)
        audio = torch.tensor(np.stack([[s.clip1.audio, s.clip2.audio] for s in samples]), dtype=dtype)
        qvec = None
        if precomputed:
            qvec = torch.tensor(np.stack([s.question_vec for s in samples]), dtype=dtype)
        return cls(
            frames=frames,
            audio=audio,
            question_id=torch.tensor([max(s.question_id, 0) for s in samples], dtype=torch.long),
            label=torch.tensor([s.label for s in samples], dtype=torch.long),
            material=torch.tensor([[s.clip1.object.material, s.clip2.object.material] for s in samples]),
            motion=torch.tensor([[s.clip1.object.motion_type, s.clip2.object.motion_type] for s in samples]),
            is_material_question=torch.tensor([s.question_target == "material" for s in samples]),
            question_vec=qvec,
            precomputed=precomputed,
        )

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class ForwardResult:
    logits_factual: torch.Tensor  # (B, 2)
    logits_tie: torch.Tensor | None  # (B, 2) in dse_a_c, else None
    breakdown: LossBreakdown
    latents: dict = field(default_factory=dict)

    @property
    def decision_logits(self) -> torch.Tensor:
        return self.logits_tie if self.logits_tie is not None else self.logits_factual


class FusionClassifier(nn.Module):
    """MLP(Concat(MLP(Concat(f1, f2)), x_t)) followed by a linear 2-way head."""

    def __init__(self, clip_dim: int, text_dim: int, width: int):
        super().__init__()
        self.pair_mlp = nn.Sequential(
            nn.Linear(2 * clip_dim, width), nn.Tanh(),
            nn.Linear(width, width), nn.Tanh(),
        )
        self.joint_mlp = nn.Sequential(
            nn.Linear(width + text_dim, width), nn.Tanh(),
            nn.Linear(width, width), nn.Tanh(),
        )
        self.head = nn.Linear(width, 2)

    def fuse(self, f1: torch.Tensor, f2: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
        pair = self.pair_mlp(torch.cat([f1, f2], dim=-1))
        return self.joint_mlp(torch.cat([pair, x_t], dim=-1))

    def classify(self, fused: torch.Tensor) -> Prediction:
        return Prediction.from_logits(self.head(fused))


class DCLModel(nn.Module):
    def __init__(self, config: Config, mode: str):
        super().__init__()
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        self.config = config
        self.mode = mode
        self.encoders = Encoders(config)
        clip_dim = 2 * config.d
        if mode != "baseline":
            self.vae = SequenceVAE(config)
            clip_dim = config.d + config.d_s + config.d_z
        if mode == "dse_a_c":
            self.intervention = clm.InterventionParams(config.d + config.d_s + config.d_z)
        self.fusion = FusionClassifier(clip_dim, config.d, config.fusion_width)

    def clip_features(self, batch: Batch):
        """Per-clip encoded features: video (2B, T, d), audio (2B, d), text (B, d)."""
        B, _, T, dr = batch.frames.shape
        frames = batch.frames.reshape(2 * B, T, dr)
        audio = batch.audio.reshape(2 * B, dr)
        if batch.precomputed:
            return frames, audio, batch.question_vec
        return (self.encoders.encode_video(frames),
                self.encoders.encode_audio(audio),
                self.encoders.encode_question(batch.question_id))

    def forward(self, batch: Batch, *, generator: torch.Generator | None = None,
                sample_latents: bool | None = None, n_cf: int | None = None,
                dse_noise: DseNoise | None = None, cf_noise: torch.Tensor | None = None,
                intervention_override=None, collect_latents: bool = False) -> ForwardResult:
        """One pass over a batch; all randomness comes from `generator` or the
        explicit noise arguments, so identical calls are identical.

        `intervention_override`, when given, maps the factual concatenated
        feature matrix to the surrogate matrix instead of the learned Gaussian
        sampler (used to probe the counterfactual path, e.g. identity
        interventions that must zero the total indirect effect).
        """
        cfg = self.config
        if sample_latents is None:
            sample_latents = self.training
        if n_cf is None:
            n_cf = cfg.cf_samples_train if self.training else cfg.cf_samples_eval
        xv, xa, xt = self.clip_features(batch)
        N = xv.shape[0]  # 2B clips
        zero = xv.new_zeros(())
        breakdown = LossBreakdown(*([zero] * 6), cls=zero, total=zero)
        latents = {}

        if self.mode == "baseline":
            rows = torch.cat([xa, xv.mean(1)], dim=-1)
            logits_tie = None
        else:
            if sample_latents:
                if dse_noise is None:
                    dse_noise = DseNoise.draw(N, xv.shape[1], cfg.d_s, cfg.d_z,
                                              generator, device=xv.device, dtype=xv.dtype)
                breakdown, latents = dse_loss(self.vae, xv, cfg, noise=dse_noise)
            else:
                static, dynamics = self.vae.posterior(xv)
                latents = {"static": static, "dynamics": dynamics}
            # downstream consumers read the posterior means; sampling stays
            # inside the VAE objective where the KL accounts for it
            static, dynamics = latents["static"], latents["dynamics"]
            s, z = static.posterior.mean, dynamics.posteriors.mean

            blocks = clm.ModalBlocks(audio=xa, static=s, dynamic=clm.pool_dynamic(z))
            k = min(cfg.k, N)
            if self.mode == "dse":
                rows = blocks.cat()
                logits_tie = None
            else:
                affinities = clm.build_affinities(blocks, cfg.tau_aff, k)
                rows = clm.transfer(affinities, blocks)
                logits_tie = None
                if self.mode == "dse_a_c":
                    if not bool(self.intervention.initialized):
                        self.intervention.initialize_from(blocks.cat().detach())
                    if intervention_override is not None:
                        surrogates = [intervention_override(blocks.cat())]
                    else:
                        dim = blocks.cat().shape[1]
                        if cf_noise is None:
                            cf_noise = torch.randn(n_cf, N, dim, generator=generator,
                                                   device=xv.device, dtype=xv.dtype)
                        surrogates = [self.intervention.sample(N, cf_noise[j])
                                      for j in range(cf_noise.shape[0])]
                    cf_logits = []
                    for surrogate in surrogates:
                        cf_affinities = clm.build_affinities(blocks.split_like(surrogate), cfg.tau_aff, k)
                        cf_rows = clm.transfer(cf_affinities, blocks)  # features stay factual
                        cf_logits.append(self.fusion.head(self.fusion.fuse(cf_rows[0::2], cf_rows[1::2], xt)))

        logits_factual = self.fusion.head(self.fusion.fuse(rows[0::2], rows[1::2], xt))
        if self.mode == "dse_a_c":
            logits_tie = clm.tie(logits_factual, cf_logits)

        target_logits = logits_factual
        if self.mode == "dse_a_c" and cfg.tie_loss_target == "tie":
            target_logits = logits_tie
        cls = F.cross_entropy(target_logits, batch.label.to(xv.device))
        breakdown.cls = cls
        breakdown.total = breakdown.total + cls
        return ForwardResult(logits_factual, logits_tie, breakdown,
                             latents if collect_latents else {})


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def _batch_indices(n: int, batch: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    chunks = [order[i:i + batch] for i in range(0, n, batch)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # contrastive terms and the affinity graph need >= 2 clips per batch
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def fit(data: DatasetSplit, config: Config, mode: str, log=None):
    """Train one model; returns (model, per-epoch history).

    Deterministic given (data, config, mode) in single-thread mode: parameter
    init, batch order and every noise draw derive from config.seed. Keeps the
    parameters of the best validation epoch.
    """
    config.validate()
    if not data.samples("train"):
        raise ValueError("empty training split")
    torch.manual_seed(config.seed)
    model = DCLModel(config, mode)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    generator = torch.Generator().manual_seed(config.seed * 9176 + 13)
    shuffle_rng = np.random.default_rng(config.seed)
    train = data.samples("train")

    history = []
    best = {"accuracy": -1.0, "state": None, "epoch": -1}
    stale = 0
    for epoch in range(config.epochs):
        model.train()
        sums, n_batches = {}, 0
        for idx in _batch_indices(len(train), config.batch, shuffle_rng):
            batch = Batch.from_samples([train[i] for i in idx], data.precomputed)
            optimizer.zero_grad()
            out = model(batch, generator=generator)
            if not torch.isfinite(out.breakdown.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: {out.breakdown.to_dict()}")
            out.breakdown.total.backward()
            optimizer.step()
            for key, value in out.breakdown.to_dict().items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1
        record = {"epoch": epoch}
        record.update({k: v / n_batches for k, v in sums.items()})
        record["val_accuracy"] = evaluate(model, data, "val", config).accuracy_all
        history.append(record)
        if log is not None:
            log(record)
        if record["val_accuracy"] > best["accuracy"]:
            best = {"accuracy": record["val_accuracy"],
                    "state": copy.deepcopy(model.state_dict()), "epoch": epoch}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best["state"] is not None:
        model.load_state_dict(best["state"])
    model.eval()
    return model, history


def _probe_features(model: DCLModel, data: DatasetSplit, split: str, config: Config):
    """Posterior-mean static and pooled dynamic factors plus material labels."""
    feats_s, feats_z, labels = [], [], []
    samples = data.samples(split)
    with torch.no_grad():
        for idx in _batch_indices(len(samples), config.batch, None):
            batch = Batch.from_samples([samples[i] for i in idx], data.precomputed)
            xv, _, _ = model.clip_features(batch)
            static, dynamics = model.vae.posterior(xv)
            feats_s.append(static.posterior.mean)
            feats_z.append(clm.pool_dynamic(dynamics.posteriors.mean))
            labels.append(batch.material.reshape(-1))
    labels = torch.cat(labels)
    keep = labels >= 0
    return (torch.cat(feats_s)[keep].double().numpy(),
            torch.cat(feats_z)[keep].double().numpy(),
            labels[keep].numpy())


def material_probes(model: DCLModel, data: DatasetSplit, config: Config,
                    train_split: str = "train", eval_split: str = "test"):
    """Linear-probe accuracy for material from static-only and dynamic-only factors."""
    from sklearn.linear_model import LogisticRegression

    s_tr, z_tr, y_tr = _probe_features(model, data, train_split, config)
    s_te, z_te, y_te = _probe_features(model, data, eval_split, config)
    if len(y_tr) == 0 or len(y_te) == 0 or len(np.unique(y_tr)) < 2:
        return float("nan"), float("nan")
    scores = []
    for tr, te in ((s_tr, s_te), (z_tr, z_te)):
        probe = LogisticRegression(max_iter=2000)
        probe.fit(tr, y_tr)
        scores.append(float(probe.score(te, y_te)))
    return scores[0], scores[1]


def evaluate(model: DCLModel, data: DatasetSplit, split: str, config: Config,
             probes: bool = False) -> Metrics:
    """Accuracy metrics on one split; deterministic (seeded eval-time noise)."""
    samples = data.samples(split)
    if not samples:
        raise ValueError(f"cannot evaluate empty split {split!r}")
    was_training = model.training
    model.eval()
    correct = torch.zeros(0, dtype=torch.bool)
    material_mask = torch.zeros(0, dtype=torch.bool)
    with torch.no_grad():
        for b, idx in enumerate(_batch_indices(len(samples), config.batch, None)):
            batch = Batch.from_samples([samples[i] for i in idx], data.precomputed)
            generator = torch.Generator().manual_seed(config.seed * 100003 + 7919 + b)
            out = model(batch, generator=generator, sample_latents=False,
                        n_cf=config.cf_samples_eval)
            pred = out.decision_logits.argmax(-1)
            correct = torch.cat([correct, pred == batch.label])
            material_mask = torch.cat([material_mask, batch.is_material_question])
    accuracy = float(correct.float().mean())
    accuracy_material = (float(correct[material_mask].float().mean())
                         if material_mask.any() else float("nan"))
    probe_static = probe_dynamic = float("nan")
    if probes and model.mode != "baseline":
        probe_static, probe_dynamic = material_probes(model, data, config,
                                                      eval_split=split)
    if was_training:
        model.train()
    return Metrics(accuracy, accuracy_material, probe_static, probe_dynamic, len(samples))
