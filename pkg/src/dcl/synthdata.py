"""Controllable synthetic paired-object audiovisual QA dataset.

Each object has a material (which fixes its appearance and timbre codes up to
bounded jitter) and a motion type drawn independently of material. A clip
renders the appearance code through a motion-specific temporal envelope plus
noise; audio is the timbre code plus noise. Questions compare two objects on a
material-derived score, a motion-derived score, or their sum, so ground-truth
labels are analytic. Material information therefore lives in the static
channel (appearance/timbre) and motion information in the frame dynamics.

Test objects never appear in train or val (zero-shot splits).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blobio import read_array, write_array
from .config import Config
from .errors import ConfigError, DataFormatError, ShapeError

SPLITS = ("train", "val", "test")

# seed-stream tags so parallel per-sample generation stays reproducible
_STREAM_PROTO = 0
_STREAM_TEMPLATES = 1
_STREAM_OBJECTS = 2
_STREAM_COMBOS = 3
_STREAM_CLIPS = 4
_STREAM_LABELS = 5


@dataclass(eq=False)
class ObjectSpec:
    object_id: int
    material: int
    motion_type: int
    appearance_code: np.ndarray  # (d_raw,)
    timbre_code: np.ndarray  # (d_raw,)

    def __eq__(self, other):
        return (
            isinstance(other, ObjectSpec)
            and self.object_id == other.object_id
            and self.material == other.material
            and self.motion_type == other.motion_type
            and np.array_equal(self.appearance_code, other.appearance_code)
            and np.array_equal(self.timbre_code, other.timbre_code)
        )


@dataclass(eq=False)
class RawClip:
    frames: np.ndarray  # (T, d_raw), or (T, d) for precomputed features
    audio: np.ndarray  # (d_raw,) or (d,)
    object: ObjectSpec

    def __eq__(self, other):
        return (
            isinstance(other, RawClip)
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.audio, other.audio)
            and self.object == other.object
        )


@dataclass(eq=False)
class QASample:
    clip1: RawClip
    clip2: RawClip
    question_id: int
    question_target: str  # "material" | "motion" | "mixed"
    label: int  # 0 selects clip1, 1 selects clip2
    question_vec: np.ndarray | None = None  # precomputed text feature, else None

    def __eq__(self, other):
        if not isinstance(other, QASample):
            return False
        vecs_equal = (self.question_vec is None) == (other.question_vec is None) and (
            self.question_vec is None or np.array_equal(self.question_vec, other.question_vec)
        )
        return (
            self.clip1 == other.clip1
            and self.clip2 == other.clip2
            and self.question_id == other.question_id
            and self.question_target == other.question_target
            and self.label == other.label
            and vecs_equal
        )


@dataclass(eq=False)
class DatasetSplit:
    train: list
    val: list
    test: list
    objects: dict  # split name -> list[ObjectSpec]
    T: int
    d_raw: int
    precomputed: bool = False

    def samples(self, split: str) -> list:
        if split not in SPLITS:
            raise KeyError(f"unknown split {split!r}")
        return getattr(self, split)

    def object_ids(self, split: str) -> set:
        return {o.object_id for o in self.objects[split]}

    def __eq__(self, other):
        return (
            isinstance(other, DatasetSplit)
            and self.T == other.T
            and self.d_raw == other.d_raw
            and self.precomputed == other.precomputed
            and all(self.objects[s] == other.objects[s] for s in SPLITS)
            and all(self.samples(s) == other.samples(s) for s in SPLITS)
        )


@dataclass
class QuestionBank:
    """Per-template score tables; ground-truth answers are argmax comparisons."""

    targets: list  # template index -> target kind
    material_scores: np.ndarray  # (n_templates, n_materials)
    motion_scores: np.ndarray  # (n_templates, n_motions)

    @classmethod
    def build(cls, config: Config, seed: int) -> "QuestionBank":
        rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_TEMPLATES]))
        pattern = ("material", "motion", "material", "motion", "mixed")
        targets = [pattern[i % len(pattern)] for i in range(config.n_question_templates)]
        return cls(
            targets=targets,
            material_scores=rng.standard_normal((config.n_question_templates, config.n_materials)),
            motion_scores=rng.standard_normal((config.n_question_templates, config.n_motions)),
        )

    def score(self, template: int, obj: ObjectSpec) -> float:
        target = self.targets[template]
        if target == "material":
            return float(self.material_scores[template, obj.material])
        if target == "motion":
            return float(self.motion_scores[template, obj.motion_type])
        return float(
            self.material_scores[template, obj.material]
            + self.motion_scores[template, obj.motion_type]
        )

    def eligible(self, template: int, a: ObjectSpec, b: ObjectSpec) -> bool:
        target = self.targets[template]
        if target == "material":
            return a.material != b.material
        if target == "motion":
            return a.motion_type != b.motion_type
        return self.score(template, a) != self.score(template, b)

    def answer(self, template: int, a: ObjectSpec, b: ObjectSpec) -> int:
        """0 if `a` is the better answer, 1 if `b` is."""
        return 0 if self.score(template, a) > self.score(template, b) else 1


# depth of the multiplicative time warp; the additive burst below carries
# the discriminative motion signal
_WARP_DEPTH = 0.1


def motion_profile(motion_type: int, T: int, amplitude: float):
    """(warp, streak): per-frame appearance scale and additive motion signal.

    Both average to zero modulation over the T frames, so the time-averaged
    frame carries no motion information. The streak is a raised-cosine burst
    whose onset time and amplitude depend on the motion type: burst timing
    survives recurrent time pooling, where pure sinusoids cancel.
    """
    t = np.arange(T)
    freq = 1 + motion_type % max(1, T - 1)
    warp = 1.0 + _WARP_DEPTH * np.cos(2 * np.pi * freq * t / T)

    width = max(2, T // 2)
    start = (motion_type * 3) % T
    offset = (t - start) % T
    bump = np.where(offset < width, np.sin(np.pi * offset / width) ** 2, 0.0)
    bump = bump - bump.mean()
    streak = amplitude * (0.8 + 0.15 * motion_type) * bump
    return warp, streak


def _material_prototypes(config: Config, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_PROTO]))
    appearance = rng.standard_normal((config.n_materials, config.d_raw))
    timbre = rng.standard_normal((config.n_materials, config.d_raw))
    return appearance, timbre


def _motion_direction(config: Config, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_PROTO, 1]))
    return rng.standard_normal(config.d_raw)


def sample_objects(config: Config, seed: int, count: int, split_index: int = 0,
                   first_id: int = 0) -> list:
    """Draw objects with material and motion type independent by construction."""
    appearance_proto, timbre_proto = _material_prototypes(config, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_OBJECTS, split_index]))
    objects = []
    for i in range(count):
        material = int(rng.integers(config.n_materials))
        motion = int(rng.integers(config.n_motions))
        jitter = rng.uniform(-config.appearance_jitter, config.appearance_jitter, config.d_raw)
        objects.append(ObjectSpec(
            object_id=first_id + i,
            material=material,
            motion_type=motion,
            appearance_code=(appearance_proto[material] + jitter).astype(np.float32),
            timbre_code=timbre_proto[material].astype(np.float32).copy(),
        ))
    return objects


def render_clip(obj: ObjectSpec, config: Config, rng: np.random.Generator,
                motion_direction: np.ndarray) -> RawClip:
    warp, streak = motion_profile(obj.motion_type, config.T, config.motion_amplitude)
    frames = (warp[:, None] * obj.appearance_code[None, :].astype(np.float64)
              + streak[:, None] * motion_direction[None, :]
              + config.frame_noise * rng.standard_normal((config.T, config.d_raw)))
    audio = obj.timbre_code.astype(np.float64) + config.audio_noise * rng.standard_normal(config.d_raw)
    return RawClip(frames=frames.astype(np.float32), audio=audio.astype(np.float32), object=obj)


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.array([0] * (n - n // 2) + [1] * (n // 2), dtype=np.int64)
    return labels[rng.permutation(n)]


def generate_dataset(config: Config, seed: int) -> DatasetSplit:
    """Fully deterministic in (config, seed); label mean lands in [0.45, 0.55]."""
    config.validate()
    bank = QuestionBank.build(config, seed)
    direction = _motion_direction(config, seed)
    counts = {"train": (config.train_objects, config.train_pairs),
              "val": (config.val_objects, config.val_pairs),
              "test": (config.test_objects, config.test_pairs)}
    objects = {}
    samples = {}
    next_id = 0
    for split_index, split in enumerate(SPLITS):
        n_objects, n_pairs = counts[split]
        objs = sample_objects(config, seed, n_objects, split_index, first_id=next_id)
        next_id += n_objects

        combos = [
            (i, j, t)
            for i in range(n_objects)
            for j in range(i + 1, n_objects)
            for t in range(config.n_question_templates)
            if bank.eligible(t, objs[i], objs[j])
        ]
        if n_pairs > len(combos):
            raise ConfigError(
                f"{split}: requested {n_pairs} samples but only {len(combos)} distinct "
                f"eligible (pair, template) combinations exist"
            )
        combo_rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_COMBOS, split_index]))
        chosen = [combos[i] for i in combo_rng.permutation(len(combos))[:n_pairs]]
        labels = _balanced_labels(
            n_pairs, np.random.default_rng(np.random.SeedSequence([seed, _STREAM_LABELS, split_index]))
        )

        split_samples = []
        for idx, ((i, j, t), label) in enumerate(zip(chosen, labels)):
            winner, loser = (objs[i], objs[j]) if bank.answer(t, objs[i], objs[j]) == 0 else (objs[j], objs[i])
            first, second = (winner, loser) if label == 0 else (loser, winner)
            clip_rng = [
                np.random.default_rng(np.random.SeedSequence([seed, _STREAM_CLIPS, split_index, idx, slot]))
                for slot in (0, 1)
            ]
            split_samples.append(QASample(
                clip1=render_clip(first, config, clip_rng[0], direction),
                clip2=render_clip(second, config, clip_rng[1], direction),
                question_id=t,
                question_target=bank.targets[t],
                label=int(label),
            ))
        objects[split] = objs
        samples[split] = split_samples

    return DatasetSplit(
        train=samples["train"], val=samples["val"], test=samples["test"],
        objects=objects, T=config.T, d_raw=config.d_raw,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_dataset(split: DatasetSplit, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "dcl-dataset",
        "version": 1,
        "dims": {"T": split.T, "d_raw": split.d_raw},
        "precomputed": split.precomputed,
        "splits": {},
    }
    for name in SPLITS:
        objs = split.objects[name]
        row_of = {o.object_id: r for r, o in enumerate(objs)}
        write_array(path / f"{name}_appearance.bin",
                    np.stack([o.appearance_code for o in objs]) if objs
                    else np.zeros((0, split.d_raw), np.float32))
        write_array(path / f"{name}_timbre.bin",
                    np.stack([o.timbre_code for o in objs]) if objs
                    else np.zeros((0, split.d_raw), np.float32))
        sams = split.samples(name)
        frames = (np.stack([[s.clip1.frames, s.clip2.frames] for s in sams])
                  if sams else np.zeros((0, 2, split.T, split.d_raw), np.float32))
        audio = (np.stack([[s.clip1.audio, s.clip2.audio] for s in sams])
                 if sams else np.zeros((0, 2, split.d_raw), np.float32))
        write_array(path / f"{name}_frames.bin", frames)
        write_array(path / f"{name}_audio.bin", audio)
        manifest["splits"][name] = {
            "objects": [
                {"object_id": o.object_id, "material": o.material, "motion_type": o.motion_type}
                for o in objs
            ],
            "samples": [
                {
                    "question_id": s.question_id,
                    "question_target": s.question_target,
                    "label": s.label,
                    "object_rows": [row_of[s.clip1.object.object_id], row_of[s.clip2.object.object_id]],
                }
                for s in sams
            ],
        }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_dataset(path) -> DatasetSplit:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"{path}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "dcl-dataset":
        raise DataFormatError(f"{manifest_path}: not a dataset manifest")
    if manifest.get("version") != 1:
        raise DataFormatError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    T = manifest["dims"]["T"]
    d_raw = manifest["dims"]["d_raw"]

    objects = {}
    samples = {}
    for name in SPLITS:
        entry = manifest["splits"][name]
        appearance = read_array(path / f"{name}_appearance.bin")
        timbre = read_array(path / f"{name}_timbre.bin")
        if len(entry["objects"]) != appearance.shape[0]:
            raise DataFormatError(f"{path}: object blob/manifest mismatch for split {name}")
        objs = [
            ObjectSpec(
                object_id=rec["object_id"], material=rec["material"],
                motion_type=rec["motion_type"],
                appearance_code=appearance[r], timbre_code=timbre[r],
            )
            for r, rec in enumerate(entry["objects"])
        ]
        frames = read_array(path / f"{name}_frames.bin")
        audio = read_array(path / f"{name}_audio.bin")
        if frames.shape[0] != len(entry["samples"]):
            raise DataFormatError(f"{path}: sample blob/manifest mismatch for split {name}")
        sams = []
        for r, rec in enumerate(entry["samples"]):
            r1, r2 = rec["object_rows"]
            sams.append(QASample(
                clip1=RawClip(frames=frames[r, 0], audio=audio[r, 0], object=objs[r1]),
                clip2=RawClip(frames=frames[r, 1], audio=audio[r, 1], object=objs[r2]),
                question_id=rec["question_id"],
                question_target=rec["question_target"],
                label=rec["label"],
            ))
        objects[name] = objs
        samples[name] = sams

    return DatasetSplit(
        train=samples["train"], val=samples["val"], test=samples["test"],
        objects=objects, T=T, d_raw=d_raw,
        precomputed=bool(manifest.get("precomputed", False)),
    )


def dataset_hash(path) -> str:
    """SHA-256 over the dataset manifest and every blob, in sorted name order.

    Only container files count; run metadata living alongside is ignored.
    """
    path = Path(path)
    h = hashlib.sha256()
    for f in sorted(path.iterdir()):
        if f.suffix == ".bin" or f.name == "manifest.json":
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# precomputed-feature ingestion (bypasses the trainable encoders)
# ---------------------------------------------------------------------------

def ingest_precomputed_features(manifest_path, config: Config) -> DatasetSplit:
    """Load already-encoded features listed in a JSON manifest.

    Each sample entry names two video blobs (T x d), two audio blobs (d,) and
    one text blob (d,), plus a label; splits default to "test". Arrays are
    used as-is downstream, so their dims must match the configured T and d.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataFormatError(f"feature manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    entries = manifest.get("samples", [])
    base = manifest_path.parent

    def load(rel, want_shape):
        f = base / rel
        arr = read_array(f)
        if arr.shape != want_shape:
            raise ShapeError(f"{f}: shape {arr.shape} does not match configured {want_shape}")
        return arr

    samples = {name: [] for name in SPLITS}
    used_ids = {name: {} for name in SPLITS}
    for n, rec in enumerate(entries):
        split = rec.get("split", "test")
        if split not in SPLITS:
            raise DataFormatError(f"sample {n}: unknown split {split!r}")
        if "label" not in rec:
            raise DataFormatError(f"sample {n}: missing label")
        clips = []
        for slot in (0, 1):
            frames = load(rec["video"][slot], (config.T, config.d))
            audio = load(rec["audio"][slot], (config.d,))
            obj_id = rec.get("object_ids", [-1, -1])[slot]
            material = rec.get("material", [-1, -1])[slot]
            motion = rec.get("motion", [-1, -1])[slot]
            obj = used_ids[split].get(obj_id) if obj_id >= 0 else None
            if obj is None:
                obj = ObjectSpec(
                    object_id=obj_id, material=material, motion_type=motion,
                    appearance_code=np.zeros(0, np.float32),
                    timbre_code=np.zeros(0, np.float32),
                )
                if obj_id >= 0:
                    used_ids[split][obj_id] = obj
            clips.append(RawClip(frames=frames, audio=audio, object=obj))
        text = load(rec["text"], (config.d,))
        samples[split].append(QASample(
            clip1=clips[0], clip2=clips[1],
            question_id=rec.get("question_id", -1),
            question_target=rec.get("question_target", "mixed"),
            label=int(rec["label"]),
            question_vec=text,
        ))

    return DatasetSplit(
        train=samples["train"], val=samples["val"], test=samples["test"],
        objects={name: sorted(used_ids[name].values(), key=lambda o: o.object_id) for name in SPLITS},
        T=config.T, d_raw=config.d, precomputed=True,
    )


def empirical_mutual_information(labels_a, labels_b) -> float:
    """Plug-in MI (nats) between two integer label arrays."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    joint = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(joint, (a, b), 1.0)
    joint /= joint.sum()
    pa = joint.sum(1, keepdims=True)
    pb = joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())
