"""Command-line interface.

Commands: gen-data, train, eval, ablate, embed-viz, gradcheck.
Exit codes: 0 success, 1 check/artifact failure, 2 usage or config error.
Set DCL_THREADS=1 for bit-exact reproducibility.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from .config import MODES, Config
from .errors import ConfigError, DataFormatError
from .synthdata import dataset_hash, generate_dataset, read_dataset, write_dataset


def _configure_threads() -> None:
    value = os.environ.get("DCL_THREADS")
    if value:
        import torch

        torch.set_num_threads(max(1, int(value)))


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def _load_config(args) -> Config:
    config = Config.load(args.config) if getattr(args, "config", None) else Config()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config.validate()


def write_run_manifest(out_dir, command: str, config: Config, data_dir=None) -> Path:
    """Reproduction record, written before any computation starts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config.to_dict(),
        "seed": config.seed,
        "dataset_hash": dataset_hash(data_dir) if data_dir else None,
        "git": _git_describe(),
        "outputs": str(out_dir),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    write_run_manifest(args.out, "gen-data", config)
    split = generate_dataset(config, config.seed)
    write_dataset(split, args.out)
    digest = dataset_hash(args.out)
    print(f"dataset written to {args.out}")
    print(f"dataset hash: {digest}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .fusion import evaluate, fit

    config = _load_config(args)
    data = read_dataset(args.data)
    out = Path(args.out)
    write_run_manifest(out, "train", config, data_dir=args.data)

    log_path = out / "metrics.jsonl"
    with open(log_path, "w") as log_file:
        def log(record):
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

        model, history = fit(data, config, args.mode, log=log)
        final = {}
        for split in ("val", "test"):
            metrics = evaluate(model, data, split, config, probes=args.mode != "baseline")
            final[split] = metrics.to_dict()
            log({"final": True, "split": split, **final[split]})

    ckpt = out / "checkpoint.pt"
    save_checkpoint(ckpt, model, config, extra={"mode": args.mode, "history_len": len(history)})
    (out / "summary.json").write_text(json.dumps(
        {"mode": args.mode, "epochs_run": len(history), "final": final}, indent=2) + "\n")
    print(f"checkpoint: {ckpt}")
    print(json.dumps({"mode": args.mode, **{f"{s}_{k}": v for s in final for k, v in final[s].items()}}))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .fusion import evaluate

    model, config, _ = load_checkpoint(args.checkpoint)
    data = read_dataset(args.data)
    metrics = evaluate(model, data, args.split, config, probes=model.mode != "baseline")
    print(json.dumps({"split": args.split, "mode": model.mode, **metrics.to_dict()}))
    return 0


def run_ablation(config: Config, data, seeds, modes=MODES):
    """All modes x seeds; returns {mode: {"overall": [...], "material": [...]}}."""
    from .fusion import evaluate, fit

    results = {}
    for mode in modes:
        overall, material = [], []
        for seed in seeds:
            run_config = dataclasses.replace(config, seed=seed)
            model, _ = fit(data, run_config, mode)
            metrics = evaluate(model, data, "test", run_config)
            overall.append(metrics.accuracy_all)
            material.append(metrics.accuracy_material)
        results[mode] = {"overall": overall, "material": material}
    return results


def format_ablation_table(results: dict) -> str:
    lines = [f"{'mode':<10} {'overall':>16} {'material':>16}"]
    for mode, cells in results.items():
        row = [f"{mode:<10}"]
        for key in ("overall", "material"):
            values = np.array(cells[key], dtype=float)
            cell = f"{values.mean():.3f}"
            if len(values) > 1:
                cell += f" ± {values.std(ddof=1):.3f}"
            row.append(f"{cell:>16}")
        lines.append(" ".join(row))
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    config = _load_config(args)
    data = read_dataset(args.data)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError("--seeds must list at least one integer")
    if args.out:
        write_run_manifest(args.out, "ablate", config, data_dir=args.data)
    results = run_ablation(config, data, seeds)
    table = format_ablation_table(results)
    print(table)
    if args.out:
        (Path(args.out) / "ablation.json").write_text(
            json.dumps({"seeds": seeds, "results": results}, indent=2) + "\n")
        (Path(args.out) / "ablation.txt").write_text(table + "\n")
    return 0


def cmd_embed_viz(args) -> int:
    from .checkpoint import load_checkpoint
    from .viz import dynamic_factor_embedding, silhouette_gap, write_embedding

    model, config, _ = load_checkpoint(args.checkpoint)
    if model.mode == "baseline":
        raise ConfigError("embed-viz needs a checkpoint with dynamic factors (mode != baseline)")
    data = read_dataset(args.data)
    write_run_manifest(args.out, "embed-viz", config, data_dir=args.data)
    coords, motions = dynamic_factor_embedding(model, data, config)
    write_embedding(args.out, coords, motions)
    real, control = silhouette_gap(coords, motions, seed=config.seed)
    print(json.dumps({"points": len(coords), "silhouette": real,
                      "silhouette_shuffled": control}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    config = Config.load(args.config) if args.config else Config.tiny()
    report = run_gradcheck(config)
    print(f"max relative gradient error: {report.max_rel_error:.3e} "
          f"(worst parameter: {report.worst_param}, {report.n_params} scalars)")
    if not report.passed(1e-4):
        print("FAIL: analytic and finite-difference gradients disagree")
        return 1
    print("PASS")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and persist a synthetic dataset")
    p.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write checkpoint + metrics")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MODES, default="dse_a_c")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run every mode over several seeds")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("embed-viz", help="2-D projection of dynamic factors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed_viz)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    _configure_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
