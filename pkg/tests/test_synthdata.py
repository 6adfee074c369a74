import dataclasses
import json

import numpy as np
import pytest

from dcl.blobio import MAGIC, read_array, write_array
from dcl.config import Config
from dcl.errors import ConfigError, DataCorruptionError, DataFormatError, ShapeError
from dcl.synthdata import (
    QuestionBank,
    dataset_hash,
    empirical_mutual_information,
    generate_dataset,
    ingest_precomputed_features,
    motion_profile,
    read_dataset,
    sample_objects,
    write_dataset,
)


def test_blob_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_array(tmp_path / "a.bin", arr)
    back = read_array(tmp_path / "a.bin")
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_blob_wrong_magic(tmp_path):
    p = tmp_path / "bad.bin"
    write_array(p, np.zeros(3, np.float32))
    blob = bytearray(p.read_bytes())
    blob[:4] = b"XXXX"
    p.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError, match="magic"):
        read_array(p)


def test_blob_truncated(tmp_path):
    p = tmp_path / "short.bin"
    write_array(p, np.zeros((4, 4), np.float32))
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(DataCorruptionError):
        read_array(p)


def test_blob_header_declares_shape(tmp_path):
    write_array(tmp_path / "f.bin", np.zeros((8, 32), np.float32))
    assert read_array(tmp_path / "f.bin").shape == (8, 32)
    assert (tmp_path / "f.bin").read_bytes()[:4] == MAGIC


def test_generate_deterministic(tiny_config):
    a = generate_dataset(tiny_config, 7)
    b = generate_dataset(tiny_config, 7)
    assert a == b
    c = generate_dataset(tiny_config, 8)
    assert a != c


def test_zero_shot_split(tiny_data):
    test_ids = tiny_data.object_ids("test")
    assert not test_ids & tiny_data.object_ids("train")
    assert not test_ids & tiny_data.object_ids("val")


def test_label_balance_default_sizes():
    cfg = dataclasses.replace(Config.desk(), train_pairs=512, val_pairs=64, test_pairs=64)
    data = generate_dataset(cfg, 3)
    for split in ("train", "val", "test"):
        labels = [s.label for s in data.samples(split)]
        assert 0.45 <= np.mean(labels) <= 0.55


def test_labels_are_analytic(tiny_config, tiny_data):
    bank = QuestionBank.build(tiny_config, 7)
    for s in tiny_data.train:
        want = bank.answer(s.question_id, s.clip1.object, s.clip2.object)
        assert want == s.label
        assert s.clip1.object.object_id != s.clip2.object.object_id


def test_capacity_rejected(tiny_config):
    cfg = dataclasses.replace(tiny_config, train_pairs=10**6)
    with pytest.raises(ConfigError, match="combinations"):
        generate_dataset(cfg, 0)


def test_material_pins_codes(tiny_config):
    objs = sample_objects(tiny_config, 7, 200)
    by_material = {}
    for o in objs:
        by_material.setdefault(o.material, []).append(o)
    for group in by_material.values():
        ref = group[0]
        for o in group[1:]:
            assert np.array_equal(o.timbre_code, ref.timbre_code)
            assert np.abs(o.appearance_code - ref.appearance_code).max() <= 2 * tiny_config.appearance_jitter + 1e-6


def test_material_motion_independent(tiny_config):
    objs = sample_objects(tiny_config, 11, 10_000)
    mi = empirical_mutual_information([o.material for o in objs],
                                      [o.motion_type for o in objs])
    assert mi < 0.01


def test_motion_profile_zero_mean_modulation():
    for T in (4, 8, 16):
        for k in range(5):
            warp, streak = motion_profile(k, T, 0.5)
            assert abs(warp.mean() - 1.0) < 1e-12  # time-mean carries no motion
            assert abs(streak.mean()) < 1e-12


def test_round_trip(tmp_path, tiny_data):
    write_dataset(tiny_data, tmp_path / "ds")
    back = read_dataset(tmp_path / "ds")
    assert back == tiny_data


def test_round_trip_byte_identical(tmp_path, tiny_config):
    write_dataset(generate_dataset(tiny_config, 7), tmp_path / "a")
    write_dataset(generate_dataset(tiny_config, 7), tmp_path / "b")
    assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")


def _write_feature_manifest(tmp_path, cfg, n_samples, d_override=None):
    d = d_override or cfg.d
    rng = np.random.default_rng(0)
    samples = []
    for i in range(n_samples):
        rec = {"label": int(i % 2), "split": "test", "question_target": "mixed",
               "video": [], "audio": [], "text": f"t{i}.bin"}
        for slot in (0, 1):
            vf, af = f"v{i}_{slot}.bin", f"a{i}_{slot}.bin"
            write_array(tmp_path / vf, rng.standard_normal((cfg.T, d)))
            write_array(tmp_path / af, rng.standard_normal(d))
            rec["video"].append(vf)
            rec["audio"].append(af)
        write_array(tmp_path / f"t{i}.bin", rng.standard_normal(d))
        samples.append(rec)
    path = tmp_path / "features.json"
    path.write_text(json.dumps({"version": 1, "samples": samples}))
    return path


def test_ingest_default_dims(tmp_path):
    cfg = Config()  # d = 256
    manifest = _write_feature_manifest(tmp_path, cfg, 4)
    split = ingest_precomputed_features(manifest, cfg)
    assert len(split.test) == 4
    assert split.precomputed
    assert split.test[0].clip1.frames.shape == (cfg.T, 256)
    assert split.test[0].question_vec.shape == (256,)


def test_ingest_empty_manifest(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text(json.dumps({"version": 1, "samples": []}))
    split = ingest_precomputed_features(path, Config())
    assert split.test == [] and split.train == [] and split.val == []


def test_ingest_dimension_mismatch(tmp_path):
    cfg = Config()
    manifest = _write_feature_manifest(tmp_path, cfg, 1, d_override=128)
    with pytest.raises(ShapeError, match="v0_0.bin"):
        ingest_precomputed_features(manifest, cfg)
