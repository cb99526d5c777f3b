"""Command-line entry point: ``mmrec {datagen,train,eval,generate}``."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from .codec import TASKS
from .config import ConfigError, RunConfig, load_config
from .datagen import DataError, World, emit_world, generate_world, ingest_jsonl
from .decode import retrieve_then_generate
from .evaluate import evaluate
from .model import GROUPS, ModelError
from .quantizer import QuantizerError, fit_codebook, load_codebook, save_codebook
from .tensor import CheckpointError
from .train import CheckpointMismatch, load_checkpoint, prepare, train
from .vision import write_ppm

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4
DATA_FILES = ("items.jsonl", "queries.jsonl", "users.jsonl")

log = logging.getLogger("mmrec")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("--seed", type=int, help="seed for world, split, model and run")
    common.add_argument("--data", help="dataset directory (default paths.data)")
    common.add_argument("--run", help="run directory (default paths.run)")
    common.add_argument("-v", "--verbose", action="store_true")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--no-vision", action="store_true", help="text-only model")
    model_flags.add_argument("--fusion-mode", choices=("exclusive", "all_images", "early_concat", "late_pool", "text_only"))
    model_flags.add_argument("--no-context", action="store_true", help="drop the history reconstruction loss")
    model_flags.add_argument("--no-reweight", action="store_true", help="plain NLL instead of focal weighting")
    model_flags.add_argument("--freeze", help=f"comma list of {','.join(GROUPS)} or all-but:GROUP")

    eval_flags = argparse.ArgumentParser(add_help=False)
    eval_flags.add_argument("--task", default="all", choices=TASKS + ("all",))
    eval_flags.add_argument("--split", default="test", choices=("val", "test"))
    eval_flags.add_argument("--users", default="seen", choices=("seen", "new"))
    eval_flags.add_argument("--domain", default="seen", choices=("seen", "new"))
    eval_flags.add_argument("--checkpoint", default="best", help="checkpoint tag in the run directory")
    eval_flags.add_argument("--limit", type=int, default=0, help="evaluate at most this many instances per task")

    p = argparse.ArgumentParser(prog="mmrec", description="Multimodal personalisation model toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("datagen", parents=[common], help="generate the synthetic world and codebook")
    sub.add_parser("train", parents=[common, model_flags], help="train a model")
    sub.add_parser("eval", parents=[common, eval_flags], help="evaluate a checkpoint")
    g = sub.add_parser("generate", parents=[common], help="retrieve-then-generate an image for a user")
    g.add_argument("--user", required=True)
    g.add_argument("--query", required=True)
    g.add_argument("--checkpoint", default="best")
    g.add_argument("--out", help="output directory (default <run>/generated)")
    return p


def _overrides(args) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k] = v
    if args.data:
        pairs["paths.data"] = args.data
    if args.run:
        pairs["paths.run"] = args.run
    if getattr(args, "no_vision", False):
        pairs["model.fusion_mode"] = "text_only"
    elif getattr(args, "fusion_mode", None):
        pairs["model.fusion_mode"] = args.fusion_mode
    if getattr(args, "no_context", False):
        pairs["loss.context"] = "false"
    if getattr(args, "no_reweight", False):
        pairs["loss.reweight"] = "false"
    if getattr(args, "freeze", None):
        spec = args.freeze
        if spec.startswith("all-but:"):
            keep = spec.split(":", 1)[1]
            if keep not in GROUPS:
                raise ConfigError(f"--freeze: unknown parameter group {keep!r}")
            spec = ",".join(g for g in GROUPS if g != keep)
        pairs["model.freeze"] = spec
    return pairs


def _config(args) -> RunConfig:
    cfg = load_config(args.config, _overrides(args))
    return cfg.seeded(args.seed) if args.seed is not None else cfg


@contextlib.contextmanager
def run_lock(run_dir: Path):
    """One training process per run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(EXIT_CHECKPOINT, f"{run_dir} is locked by another training process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        yield
    finally:
        os.close(fd)
        lock.unlink(missing_ok=True)


def load_dataset(cfg: RunConfig):
    data_dir = Path(cfg.paths.data)
    missing = [f for f in DATA_FILES + ("codebook.umvq",) if not (data_dir / f).exists()]
    if missing:
        raise CliError(EXIT_DATA, f"dataset {data_dir} is missing {', '.join(missing)}; run `mmrec datagen` first")
    world = ingest_jsonl([data_dir / f for f in DATA_FILES], image_px=cfg.world.image_px)
    codebook = load_codebook(data_dir / "codebook.umvq")
    return prepare(cfg, world, codebook)


def cmd_datagen(cfg: RunConfig) -> dict:
    out = Path(cfg.paths.data)
    world = generate_world(cfg.world)
    manifest = emit_world(world, out)
    cb = fit_codebook(list(world.images.values()), cfg.num_codes, cfg.world.seed, cfg.model.patch_px)
    save_codebook(out / "codebook.umvq", cb)
    manifest["codebook"] = hashlib.sha256((out / "codebook.umvq").read_bytes()).hexdigest()
    manifest["run_config_hash"] = cfg.digest()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "config.txt").write_text(cfg.to_text())
    return manifest


def cmd_train(cfg: RunConfig) -> dict:
    data = load_dataset(cfg)
    run = Path(cfg.paths.run)
    with run_lock(run):
        (run / "config.txt").write_text(cfg.to_text())
        result = train(cfg, data, run, on_epoch=lambda e: log.info("epoch %s", e))
    summary = {"config_hash": cfg.digest(), "best_epoch": result.best_epoch, "best_score": result.best_score, "seconds": result.seconds, "history": result.history}
    (run / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_eval(cfg: RunConfig, tasks, split: str, users: str, domain: str, tag: str, limit: int = 0) -> dict:
    data = load_dataset(cfg)
    model, meta = load_checkpoint(Path(cfg.paths.run), tag, data.vocab)
    report = {
        "config_hash": cfg.digest(),
        "train_config_hash": meta.get("config_hash"),
        "checkpoint_hash": meta.get("checkpoint_hash"),
        "checkpoint": tag,
        "split": split,
        "users": users,
        "domain": domain,
        "tasks": evaluate(model, data, tasks, split, users, domain, limit),
    }
    name = f"report_{split}_{users}_{domain}.json"
    (Path(cfg.paths.run) / name).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def cmd_generate(cfg: RunConfig, user_id: str, query: str, tag: str, out_dir: str | None) -> dict:
    data = load_dataset(cfg)
    world: World = data.world
    if user_id not in world.user_by_id:
        raise CliError(EXIT_DATA, f"unknown user {user_id!r}")
    if not query.strip():
        raise CliError(EXIT_CONFIG, "query must be non-empty")
    model, meta = load_checkpoint(Path(cfg.paths.run), tag, data.vocab)
    history = [world.item_by_id[i] for i in world.user_by_id[user_id].history]
    res = retrieve_then_generate(
        model, data.vocab, data.codebook, history, query, world.item_by_id, data.image,
        cfg.decode.retrieved, cfg.decode.beam, cfg.value_tokens,
    )
    out = Path(out_dir) if out_dir else Path(cfg.paths.run) / "generated"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{user_id}_{hashlib.sha256(query.encode()).hexdigest()[:8]}"
    image_path = out / f"{stem}.ppm"
    write_ppm(image_path, res.image)
    record = {
        "user_id": user_id,
        "query": query,
        "retrieved": [{"item_id": i, "logprob": lp} for i, lp in res.retrieved],
        "image_tokens": res.image_tokens,
        "image_path": str(image_path),
        "config_hash": cfg.digest(),
        "checkpoint_hash": meta.get("checkpoint_hash"),
    }
    (out / f"{stem}.json").write_text(json.dumps(record, indent=2) + "\n")
    return record


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "datagen":
            result = cmd_datagen(cfg)
        elif args.command == "train":
            result = cmd_train(cfg)
        elif args.command == "eval":
            tasks = TASKS if args.task == "all" else (args.task,)
            result = cmd_eval(cfg, tasks, args.split, args.users, args.domain, args.checkpoint, args.limit)
        else:
            result = cmd_generate(cfg, args.user, args.query, args.checkpoint, args.out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, QuantizerError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, CheckpointMismatch, ModelError, FileNotFoundError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
