"""Command-line entry points: ``train``, ``eval``, ``gradcheck``, ``synth``.

Exit codes: 0 success, 1 gradient check failed, 2 invalid input or config,
3 training aborted.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, serialize_config
from .dataset import generate_synthetic, load_interactions, write_interactions
from .encoder import EmbeddingTable, encode, load_checkpoint, save_checkpoint
from .errors import ConfigError, ParseError, TrainingError, ValidationError
from .gradcheck import run_gradcheck
from .graph import build_normalized_adjacency
from .metrics import evaluate
from .trainer import HISTORY_HEADER, train

logger = logging.getLogger("mscl")

EXIT_OK, EXIT_GRADCHECK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4

CHECKPOINT_NAME = "embeddings.bin"
BASE_CHECKPOINT_NAME = "base_embeddings.bin"
HISTORY_NAME = "history.csv"
MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.txt"


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _resolve(config_path, out=None, seed=None) -> RunConfig:
    cfg = load_config(config_path)
    base = Path(config_path).parent
    for key in ("train_path", "test_path"):
        p = Path(getattr(cfg, key))
        if not p.is_absolute():
            setattr(cfg, key, str(base / p))
    if out is not None:
        cfg.output_dir = str(out)
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def cmd_train(config_path, out=None, seed=None) -> int:
    try:
        cfg = _resolve(config_path, out, seed)
        dataset = load_interactions(cfg.train_path, cfg.test_path, cfg.num_users, cfg.num_items)
    except (ConfigError, ValidationError, ParseError, OSError) as exc:
        return _fail(EXIT_INVALID, str(exc))
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = build_normalized_adjacency(dataset)
    enc = cfg.encoder_config()
    try:
        base, history = train(dataset, graph, enc, cfg.loss_config(), cfg.train_config())
    except TrainingError as exc:
        return _fail(EXIT_ABORT, f"training aborted: {exc}")
    final_user, final_item = encode(base, graph, enc)
    save_checkpoint(EmbeddingTable(final_user, final_item), out_dir / CHECKPOINT_NAME)
    save_checkpoint(base, out_dir / BASE_CHECKPOINT_NAME)
    (out_dir / HISTORY_NAME).write_text(history.to_csv(include_timing=cfg.record_timing),
                                        encoding="utf-8")
    (out_dir / CONFIG_NAME).write_text(serialize_config(cfg), encoding="utf-8")
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {
            "train": {"path": cfg.train_path, "git_blob_sha1": git_blob_hash(cfg.train_path)},
            "test": {"path": cfg.test_path, "git_blob_sha1": git_blob_hash(cfg.test_path)},
        },
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "num_train_interactions": dataset.num_train_interactions,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    if history.records:
        last = history.records[-1]
        print(f"epoch={last.epoch} recall={last.recall!r} ndcg={last.ndcg!r}")
    return EXIT_OK


def cmd_eval(checkpoint_path, train_path, test_path, k=20, out=None) -> int:
    try:
        table = load_checkpoint(checkpoint_path)
        dataset = load_interactions(train_path, test_path, table.num_users, table.num_items)
    except (ValidationError, ParseError, OSError) as exc:
        return _fail(EXIT_INVALID, str(exc))
    start = time.perf_counter()
    res = evaluate(dataset, table.user_emb, table.item_emb, k)
    seconds = time.perf_counter() - start
    print(f"recall={res.recall!r} ndcg={res.ndcg!r}")
    out_path = Path(out) if out is not None else Path(checkpoint_path).with_name("eval.csv")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(",".join(HISTORY_HEADER) + "\n"
                        + f"0,nan,{res.recall!r},{res.ndcg!r},{seconds!r}\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(config_path, num_trials=100, seed=None) -> int:
    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError) as exc:
        return _fail(EXIT_INVALID, str(exc))
    report = run_gradcheck(cfg.loss_config(), cfg.encoder_config(), num_trials,
                           seed=cfg.seed if seed is None else seed)
    print(f"max_rel_error={report.max_rel_error:.3e} trials={report.trials}")
    if report.max_rel_error > GRADCHECK_TOLERANCE:
        print(f"worst coordinate: {report.worst}")
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_synth(out, seed=0, num_blocks=4, users_per_block=50, items_per_block=40,
              in_block_density=0.3, noise_density=0.02, holdout_fraction=0.2) -> int:
    try:
        ds = generate_synthetic(num_blocks, users_per_block, items_per_block, in_block_density,
                                noise_density, holdout_fraction, rng=np.random.default_rng(seed))
    except (ConfigError, ValidationError) as exc:
        return _fail(EXIT_INVALID, str(exc))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(ds, out / "train.txt", out / "test.txt")
    print(f"users={ds.num_users} items={ds.num_items} interactions={ds.num_train_interactions}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mscl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint of final embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--out", help="CSV path (default: eval.csv next to the checkpoint)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the configured loss")
    p.add_argument("--config", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("synth", help="write a block-structured synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    defaults = {f.name: f.default for f in dataclasses.fields(_SynthDefaults)}
    for name, default in defaults.items():
        p.add_argument("--" + name.replace("_", "-"), type=type(default), default=default)
    return parser


@dataclasses.dataclass
class _SynthDefaults:
    num_blocks: int = 4
    users_per_block: int = 50
    items_per_block: int = 40
    in_block_density: float = 0.3
    noise_density: float = 0.02
    holdout_fraction: float = 0.2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train":
        return cmd_train(args.config, args.out, args.seed)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.train, args.test, args.k, args.out)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.config, args.trials, args.seed)
    return cmd_synth(args.out, args.seed, args.num_blocks, args.users_per_block,
                     args.items_per_block, args.in_block_density, args.noise_density,
                     args.holdout_fraction)


if __name__ == "__main__":
    sys.exit(main())
