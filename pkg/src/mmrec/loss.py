"""Multi-task objective: response loss, context reconstruction, focal re-weighting.

Position ``t`` predicts token ``t + 1``; the segment label of the predicted
token decides whether that term counts toward the task loss (response),
the context loss (history item tokens) or nothing (instruction, padding).
Each segment is averaged over its own token count per instance, and
instances are averaged per task before the per-task weights are applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .codec import CONTEXT, RESPONSE, TaskInstance
from .tensor import Tensor

P_FLOOR = 1e-9
IGNORE = -1


class LossError(ValueError):
    pass


@dataclass
class LossBreakdown:
    task: float = 0.0
    context: float = 0.0
    per_task: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    total_tensor: Tensor | None = None

    @property
    def total(self) -> float:
        return self.task + self.context


def focal_token_loss(p: Tensor, gamma: float) -> Tensor:
    return T.focal_token_loss(p, gamma)


def token_losses(logits2d: Tensor, targets: np.ndarray, gamma: float) -> Tensor:
    """Per-row focal loss; rows with target ``IGNORE`` contribute exactly 0."""
    nll = T.cross_entropy_logits(logits2d, targets, ignore_index=IGNORE)
    if gamma == 0:
        return nll
    # ignored rows have nll 0, so p = 1 and the focal term vanishes
    p = T.clamp_min(T.exp(T.scale(nll, -1.0)), P_FLOOR)
    return T.focal_token_loss(p, gamma)


def shifted_targets(ids: np.ndarray, segments: np.ndarray, context: bool) -> tuple[np.ndarray, np.ndarray]:
    """Next-token targets and the segment each target belongs to (scored rows only)."""
    b, t = ids.shape
    tgt = np.full((b, t), IGNORE, dtype=np.int64)
    seg = np.full((b, t), -1, dtype=np.int64)
    nxt_seg = segments[:, 1:]
    scored = (nxt_seg == RESPONSE) | ((nxt_seg == CONTEXT) if context else False)
    tgt[:, :-1] = np.where(scored, ids[:, 1:], IGNORE)
    seg[:, :-1] = np.where(scored, nxt_seg, -1)
    return tgt, seg


def batch_objective(
    logits: Tensor,
    ids: np.ndarray,
    segments: np.ndarray,
    tasks: Sequence[str],
    weights: Mapping[str, float],
    gamma: float,
    context: bool = True,
) -> LossBreakdown:
    """``sum_a weight_a * mean_{i in a} (task_i + context_i)`` as one weighted token sum."""
    b, t, v = logits.shape
    missing = sorted(set(tasks) - set(weights))
    if missing:
        raise LossError(f"no loss weight for task(s) {missing}")
    tgt, seg = shifted_targets(ids, segments, context)
    n_resp = (seg == RESPONSE).sum(axis=1)
    n_ctx = (seg == CONTEXT).sum(axis=1)
    if np.any(n_resp == 0):
        raise LossError("instance without response tokens")
    per_tok = token_losses(T.reshape(logits, (b * t, v)), tgt.reshape(-1), gamma)
    per_tok = T.reshape(per_tok, (b, t))

    task_count = {a: sum(1 for x in tasks if x == a) for a in set(tasks)}
    w = np.zeros((b, t), dtype=np.float64)
    for i, a in enumerate(tasks):
        inst_w = weights[a] / task_count[a]
        w[i] += np.where(seg[i] == RESPONSE, inst_w / n_resp[i], 0.0)
        if n_ctx[i]:
            w[i] += np.where(seg[i] == CONTEXT, inst_w / n_ctx[i], 0.0)
    total = T.weighted_sum(per_tok, w)

    vals = per_tok.data.astype(np.float64)
    resp_mean = (vals * (seg == RESPONSE)).sum(axis=1) / n_resp
    ctx_mean = np.where(n_ctx > 0, (vals * (seg == CONTEXT)).sum(axis=1) / np.maximum(n_ctx, 1), 0.0)
    bd = LossBreakdown(total_tensor=total)
    for a in task_count:
        idx = [i for i, x in enumerate(tasks) if x == a]
        bd.task += weights[a] * float(resp_mean[idx].mean())
        bd.context += weights[a] * float(ctx_mean[idx].mean())
        bd.per_task[a] = float((resp_mean[idx] + ctx_mean[idx]).mean())
        bd.counts[a] = len(idx)
    bd.counts["response_tokens"] = int(n_resp.sum())
    bd.counts["context_tokens"] = int(n_ctx.sum())
    return bd


def instance_loss(logits: Tensor, instance: TaskInstance, vocab, gamma: float, context: bool = True) -> LossBreakdown:
    """Loss of one instance given its training-sequence logits ``(N, V)``."""
    seq = instance.training_sequence(vocab)
    if logits.shape[0] != len(seq):
        raise LossError(f"logits cover {logits.shape[0]} positions, sequence has {len(seq)}")
    ids = np.array([seq.token_ids])
    segs = np.array([seq.segment_labels])
    lg = T.reshape(logits, (1, *logits.shape))
    return batch_objective(lg, ids, segs, [instance.task], {instance.task: 1.0}, gamma, context)


def batch_loss(
    logits: Tensor,
    instances: Sequence[TaskInstance],
    vocab,
    weights: Mapping[str, float],
    gamma: float,
    context: bool = True,
) -> LossBreakdown:
    """Batch form over padded training-sequence logits ``(B, T, V)``."""
    seqs = [x.training_sequence(vocab) for x in instances]
    b, t, _ = logits.shape
    ids = np.full((b, t), vocab.pad_id, dtype=np.int64)
    segs = np.full((b, t), 3, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.token_ids
        segs[i, : len(s)] = s.segment_labels
    return batch_objective(logits, ids, segs, [x.task for x in instances], weights, gamma, context)
