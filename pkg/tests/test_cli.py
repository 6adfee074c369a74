import json

import pytest

from dcl.cli import main
from dcl.config import Config


@pytest.fixture(scope="module")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    Config.tiny().save(path)
    return str(path)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory, tiny_config_file):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen-data", "--config", tiny_config_file, "--out", str(out), "--seed", "7"]) == 0
    return str(out)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_config_file, data_dir):
    out = tmp_path_factory.mktemp("run") / "train"
    code = main(["train", "--config", tiny_config_file, "--data", data_dir,
                 "--mode", "dse_a_c", "--out", str(out)])
    assert code == 0
    return out


def test_gen_data_hash_reproducible(tmp_path, tiny_config_file, capsys):
    args = ["gen-data", "--config", tiny_config_file, "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    first = capsys.readouterr().out
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    second = capsys.readouterr().out
    digest = [l for l in first.splitlines() if l.startswith("dataset hash:")]
    assert digest and digest == [l for l in second.splitlines() if l.startswith("dataset hash:")]


def test_missing_config_exits_2(tmp_path, capsys):
    code = main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "nope.json" in capsys.readouterr().err


def test_run_manifest_reports_dims(tmp_path, data_dir):
    out = tmp_path / "gen"
    assert main(["gen-data", "--out", str(out)] ) == 0  # default config
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["T"] == 8
    assert manifest["config"]["d"] == 256
    assert manifest["command"] == "gen-data"


def test_train_writes_artifacts(trained):
    assert (trained / "checkpoint.pt").exists()
    assert (trained / "summary.json").exists()
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    records = [json.loads(l) for l in lines]
    epochs = [r for r in records if "epoch" in r]
    assert epochs and all("recon" in r and "val_accuracy" in r for r in epochs)


def test_train_eval_round_trip(trained, data_dir, capsys):
    summary = json.loads((trained / "summary.json").read_text())
    code = main(["eval", "--checkpoint", str(trained / "checkpoint.pt"),
                 "--data", data_dir, "--split", "test"])
    assert code == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    for key, want in summary["final"]["test"].items():
        got = printed[key]
        assert got == want or (got != got and want != want)  # nan-safe equality


def test_bad_mode_exits_2(tiny_config_file, data_dir, tmp_path):
    code = main(["train", "--config", tiny_config_file, "--data", data_dir,
                 "--mode", "bogus", "--out", str(tmp_path / "x")])
    assert code == 2


def test_corrupt_checkpoint_exits_1(tmp_path, data_dir, capsys):
    bad = tmp_path / "broken.pt"
    bad.write_bytes(b"\x00" * 64)
    code = main(["eval", "--checkpoint", str(bad), "--data", data_dir])
    assert code == 1
    assert "broken.pt" in capsys.readouterr().err


def test_ablate_table(tiny_config_file, data_dir, tmp_path, capsys):
    out = tmp_path / "ablate"
    code = main(["ablate", "--config", tiny_config_file, "--data", data_dir,
                 "--seeds", "1,2", "--out", str(out)])
    assert code == 0
    table = capsys.readouterr().out
    for mode in ("baseline", "dse", "dse_a", "dse_a_c"):
        assert mode in table
    assert "±" in table  # std dev shown when more than one seed
    payload = json.loads((out / "ablation.json").read_text())
    assert payload["seeds"] == [1, 2]
    assert len(payload["results"]["baseline"]["overall"]) == 2


def test_embed_viz_outputs(trained, data_dir, tmp_path, capsys):
    out = tmp_path / "viz"
    code = main(["embed-viz", "--checkpoint", str(trained / "checkpoint.pt"),
                 "--data", data_dir, "--out", str(out)])
    assert code == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    rows = (out / "coords.csv").read_text().splitlines()
    n_test_clips = 2 * 6  # tiny config: 6 test pairs, 2 clips each
    assert printed["points"] == n_test_clips
    assert len(rows) == 1 + n_test_clips
    import math

    for row in rows[1:]:
        x, y, _ = row.split(",")
        assert math.isfinite(float(x)) and math.isfinite(float(y))
    assert (out / "embedding.png").exists()


def test_gradcheck_cli_pass(tmp_path, capsys):
    cfg = Config(
        T=2, d=4, d_raw=4, d_s=2, d_z=2, hidden=4, fusion_width=4,
        n_question_templates=4, train_pairs=4, val_pairs=2, test_pairs=2,
        train_objects=6, val_objects=4, test_objects=4, k=1, n_max=4, batch=2,
    ).validate()
    path = tmp_path / "micro.json"
    cfg.save(path)
    assert main(["gradcheck", "--config", str(path)]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_cli_detects_broken_gradient(tmp_path, capsys, monkeypatch):
    import dcl.gradcheck as gc

    real = gc.analytic_gradients

    def corrupted(model, batch, dse_noise, cf_noise):
        grads = real(model, batch, dse_noise, cf_noise)
        name = next(iter(grads))
        grads[name] = grads[name] + 1.0
        return grads

    monkeypatch.setattr(gc, "analytic_gradients", corrupted)
    cfg = Config(
        T=2, d=4, d_raw=4, d_s=2, d_z=2, hidden=4, fusion_width=4,
        n_question_templates=4, train_pairs=4, val_pairs=2, test_pairs=2,
        train_objects=6, val_objects=4, test_objects=4, k=1, n_max=4, batch=2,
    ).validate()
    path = tmp_path / "micro.json"
    cfg.save(path)
    assert main(["gradcheck", "--config", str(path)]) == 1
    assert "FAIL" in capsys.readouterr().out
