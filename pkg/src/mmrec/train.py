"""Data preparation, the optimisation loop and checkpoint IO."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .codec import TASKS, TaskInstance, Vocabulary
from .config import RunConfig
from .datagen import InstanceSpec, Splits, World, make_splits, materialize, world_vocabulary
from .loss import LossBreakdown, batch_objective
from .model import FusionLM, ModelConfig, collate
from .quantizer import Codebook, encode, fit_codebook

log = logging.getLogger(__name__)


class CheckpointMismatch(ValueError):
    pass


@dataclass
class Prepared:
    """Everything derived from the dataset that training and evaluation share."""

    world: World
    vocab: Vocabulary
    codebook: Codebook
    splits: Splits
    codes: dict[str, list[int]]
    cfg: RunConfig

    def image(self, ref: str) -> np.ndarray:
        return self.world.images[ref]

    def code_grid(self, item_id: str) -> list[int]:
        return self.codes[item_id]

    def instance(self, spec: InstanceSpec) -> TaskInstance:
        return materialize(spec, self.world, self.vocab, self.code_grid, self.cfg.value_tokens, self.cfg.history_items)


def prepare(cfg: RunConfig, world: World, codebook: Codebook | None = None) -> Prepared:
    if codebook is None:
        codebook = fit_codebook(list(world.images.values()), cfg.num_codes, cfg.seed, cfg.model.patch_px)
    vocab = world_vocabulary(world, codebook.k)
    codes = {it.item_id: encode(world.images[it.image_ref], codebook) for it in world.items if it.image_ref}
    spec = cfg.split
    spec.history_items = cfg.history_items
    splits = make_splits(world, spec)
    return Prepared(world, vocab, codebook, splits, codes, cfg)


def build_model(cfg: RunConfig, vocab: Vocabulary, fusion_mode: str | None = None) -> FusionLM:
    mc = ModelConfig(**{**cfg.model.__dict__, "vocab_size": len(vocab)})
    if fusion_mode is not None:
        mc.fusion_mode = fusion_mode
    return FusionLM(mc)


# -- epoch composition --------------------------------------------------------


def epoch_specs(splits: Splits, tasks: Sequence[str], rng: np.random.Generator, rec_per_user: int, aux_per_user: int) -> list[InstanceSpec]:
    """Rec instances per user (all positions when ``rec_per_user`` is 0) plus sampled auxiliary tasks."""
    by_user: dict[str, dict[str, list[InstanceSpec]]] = {}
    for task in tasks:
        for s in splits.train[task]:
            by_user.setdefault(s.user_id, {}).setdefault(task, []).append(s)
    out: list[InstanceSpec] = []
    aux = [t for t in tasks if t != "rec"]
    for user in sorted(by_user):
        specs = by_user[user]
        recs = specs.get("rec", [])
        if recs:
            if rec_per_user <= 0:
                out.extend(recs)
            else:
                out.extend(recs[j] for j in rng.choice(len(recs), size=min(rec_per_user, len(recs)), replace=False))
        have = [t for t in aux if specs.get(t)]
        n_aux = aux_per_user if "rec" in tasks else max(aux_per_user, 1)
        for _ in range(n_aux if have else 0):
            t = have[int(rng.integers(len(have)))]
            out.append(specs[t][int(rng.integers(len(specs[t])))])
    return out


def length_batches(lengths: Sequence[int], batch: int, rng: np.random.Generator, window: int = 8) -> list[np.ndarray]:
    """Shuffle, sort within windows of ``window`` batches by length, then shuffle batch order."""
    order = rng.permutation(len(lengths))
    chunks = []
    span = batch * window
    for s in range(0, len(order), span):
        part = order[s : s + span]
        part = part[np.argsort([lengths[i] for i in part], kind="stable")]
        chunks.extend(part[j : j + batch] for j in range(0, len(part), batch))
    return [chunks[i] for i in rng.permutation(len(chunks))]


def task_schedule(cfg: RunConfig) -> list[tuple[str, ...]]:
    """Tasks active in each epoch for the configured training mode."""
    tasks = tuple(cfg.train.tasks)
    e = cfg.train.epochs
    if cfg.train.mode == "multitask":
        return [tasks] * e
    if cfg.train.mode == "single":
        return [tasks[:1]] * e
    return [(tasks[min(len(tasks) - 1, i * len(tasks) // e)],) for i in range(e)]


# -- loss -------------------------------------------------------------------


def forward_loss(model: FusionLM, data: Prepared, insts: Sequence[TaskInstance], gamma: float, context: bool, weights) -> LossBreakdown:
    seqs = [x.training_sequence(data.vocab) for x in insts]
    batch = collate(seqs, data.image, model.cfg.fusion_mode, data.vocab.pad_id, model.cfg.image_px)
    logits = model(batch)
    return batch_objective(logits, batch.ids, batch.segments, [x.task for x in insts], weights, gamma, context)


def evaluate_loss(model: FusionLM, data: Prepared, specs: Sequence[InstanceSpec], batch: int = 24) -> dict[str, float]:
    """Plain NLL averaged over response tokens of each instance, then over instances."""
    totals: dict[str, list[float]] = {}
    with T.no_grad():
        for s in range(0, len(specs), batch):
            insts = [data.instance(x) for x in specs[s : s + batch]]
            bd = forward_loss(model, data, insts, 0.0, False, {t: 1.0 for t in TASKS})
            for a, n in bd.counts.items():
                if a in TASKS:
                    totals.setdefault(a, []).extend([bd.per_task[a]] * n)
    out = {a: float(np.mean(v)) for a, v in totals.items()}
    out["mean"] = float(np.mean([v for a, v in out.items()])) if out else float("nan")
    return out


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(model: FusionLM, run_dir: Path, tag: str, meta: dict) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / f"{tag}.umpt"
    T.save_tensors(path, model.state_dict())
    (run_dir / f"{tag}.model.txt").write_text(model.cfg.to_text())
    meta = dict(meta, checkpoint_hash=hashlib.sha256(path.read_bytes()).hexdigest())
    (run_dir / f"{tag}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(run_dir: Path, tag: str, vocab: Vocabulary | None = None) -> tuple[FusionLM, dict]:
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / f"{tag}.json").read_text())
    cfg = ModelConfig.from_text((run_dir / f"{tag}.model.txt").read_text())
    if vocab is not None and meta.get("vocab_digest") != vocab.digest():
        raise CheckpointMismatch("checkpoint vocabulary does not match the dataset vocabulary")
    model = FusionLM(cfg)
    model.load_state_dict(T.load_tensors(run_dir / f"{tag}.umpt"))
    return model, meta


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    model: FusionLM
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = -math.inf
    seconds: float = 0.0


def train(
    cfg: RunConfig,
    data: Prepared,
    run_dir: str | Path | None = None,
    model: FusionLM | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run the configured epochs; keep best-validation and last checkpoints when ``run_dir`` is set."""
    from .evaluate import evaluate_rec

    t0 = time.time()
    rng = np.random.default_rng([cfg.seed, 31337])
    model = model or build_model(cfg, data.vocab)
    tc, lc = cfg.train, cfg.loss
    gamma = lc.gamma if lc.reweight else 0.0
    micro = tc.batch // tc.accumulation
    schedule = task_schedule(cfg)
    plans = []
    for tasks in schedule:
        plans.append(epoch_specs(data.splits, tasks, rng, tc.rec_per_user, tc.aux_per_user))
    total_steps = sum(math.ceil(len(p) / tc.batch) for p in plans)
    state = T.AdamWState(lr=tc.lr, weight_decay=tc.weight_decay)
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
    log_fh = open(run / "train_log.jsonl", "w") if run is not None else None
    meta = {"config_hash": cfg.digest(), "vocab_digest": data.vocab.digest()}
    result = TrainResult(model)
    val_users = data.splits.val["rec"]
    if tc.eval_users:
        val_users = val_users[: tc.eval_users]
    step = 0
    try:
        for epoch, specs in enumerate(plans):
            insts = [data.instance(s) for s in specs]
            lengths = [len(x.input) + len(x.target) + 1 for x in insts]
            for group in length_batches(lengths, tc.batch, rng):
                params = model.trainable()
                grads: dict[str, np.ndarray] = {}
                parts = [group[j : j + micro] for j in range(0, len(group), micro)]
                logged = {"task": 0.0, "context": 0.0, "per_task": {}}
                for part in parts:
                    model.zero_grad()
                    bd = forward_loss(model, data, [insts[i] for i in part], gamma, lc.context, lc.weights)
                    loss = T.scale(bd.total_tensor, 1.0 / len(parts))
                    T.backward(loss)
                    for n, p in params.items():
                        if p.grad is not None:
                            grads[n] = grads[n] + p.grad if n in grads else p.grad.copy()
                    logged["task"] += bd.task / len(parts)
                    logged["context"] += bd.context / len(parts)
                    for a, v in bd.per_task.items():
                        logged["per_task"][a] = v
                norm = _clip(grads, tc.clip_norm)
                state.lr = T.lr_at(step, total_steps, tc.lr, tc.warmup)
                T.adamw_step(params, {n: grads.get(n) for n in params}, state)
                model.zero_grad()
                if log_fh is not None:
                    rec = {"step": step, "epoch": epoch, "lr": state.lr, "grad_norm": norm, **logged}
                    rec["total"] = rec["task"] + rec["context"]
                    log_fh.write(json.dumps(rec) + "\n")
                step += 1
            entry = {"epoch": epoch, "step": step, "instances": len(insts), "seconds": time.time() - t0}
            if "rec" in data.splits.val and val_users and "rec" in sum(schedule, ()):
                entry["val"] = evaluate_rec(model, data, val_users)
                score = entry["val"]["ndcg@5"]
            else:
                entry["val_loss"] = evaluate_loss(model, data, [s for t in schedule[epoch] for s in data.splits.val[t][:200]])
                score = -entry["val_loss"]["mean"]
            result.history.append(entry)
            log.info("epoch %d: %s", epoch, entry)
            if on_epoch:
                on_epoch(entry)
            if score > result.best_score:
                result.best_score, result.best_epoch = score, epoch
                if run is not None:
                    save_checkpoint(model, run, "best", {**meta, "epoch": epoch, "score": score})
        if run is not None:
            save_checkpoint(model, run, "last", {**meta, "epoch": len(plans) - 1})
    finally:
        if log_fh is not None:
            log_fh.close()
    result.seconds = time.time() - t0
    return result
