"""Greedy and beam-search decoding with per-step vocabulary constraints.

Log-probabilities are always taken from the softmax over the full vocabulary;
constraints only restrict which tokens may be chosen. No length normalisation
is applied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .codec import (
    CLS,
    CONTEXT,
    EOC,
    RESPONSE,
    EncodedSequence,
    ItemRecord,
    Payload,
    Vocabulary,
    build_instruction,
    build_user_sentence,
)
from .model import FusionLM, collate
from .quantizer import Codebook, decode as decode_codes

log = logging.getLogger(__name__)

ImageLookup = Callable[[str], np.ndarray]


class DecodeError(ValueError):
    pass


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logprob: float
    finished: bool = False


@dataclass
class ConstraintSet:
    """Allowed tokens per decode position; ``length`` forces an exact output length."""

    allowed: Callable[[int], np.ndarray] | np.ndarray
    length: int | None = None

    def at(self, step: int) -> np.ndarray:
        ids = self.allowed(step) if callable(self.allowed) else self.allowed
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise DecodeError(f"constraint allows no token at step {step}")
        return ids

    @classmethod
    def items(cls, vocab: Vocabulary, exclude: Sequence[str] = ()) -> "ConstraintSet":
        drop = {vocab.item_token(i) for i in exclude}
        ids = np.array([t for t in vocab.item_token_range() if t not in drop], dtype=np.int64)
        return cls(ids, length=1)

    @classmethod
    def image_codes(cls, vocab: Vocabulary, length: int) -> "ConstraintSet":
        return cls(np.arange(vocab.code_offset, len(vocab), dtype=np.int64), length=length)

    @classmethod
    def free(cls, vocab: Vocabulary) -> "ConstraintSet":
        return cls(np.arange(len(vocab), dtype=np.int64))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def next_token_logprobs(
    model: FusionLM,
    seqs: Sequence[EncodedSequence],
    image_lookup: ImageLookup,
    temperature: float = 1.0,
) -> np.ndarray:
    """``(B, V)`` log-probabilities of the token following each sequence."""
    if temperature <= 0:
        raise DecodeError("temperature must be positive")
    batch = collate(seqs, image_lookup, model.cfg.fusion_mode, image_px=model.cfg.image_px)
    with T.no_grad():
        logits = model(batch).data
    last = logits[np.arange(len(seqs)), batch.lengths - 1]
    return _log_softmax(last / temperature)


def _extend(prompt: EncodedSequence, tokens: Sequence[int]) -> EncodedSequence:
    seq = prompt.copy()
    seq.append_tokens(list(tokens), RESPONSE)
    return seq


def _check_fits(model: FusionLM, prompt: EncodedSequence, max_len: int) -> None:
    if len(prompt) + max_len > model.cfg.max_len:
        raise DecodeError(f"prompt of {len(prompt)} tokens plus {max_len} new tokens exceeds max_len {model.cfg.max_len}")


def greedy_decode(
    model: FusionLM,
    prompt: EncodedSequence,
    image_lookup: ImageLookup,
    max_len: int,
    constraints: ConstraintSet,
    eoc_id: int | None = None,
) -> list[int]:
    """Argmax under constraints until ``[EOC]`` (kept in the output) or ``max_len``."""
    max_len = constraints.length or max_len
    _check_fits(model, prompt, max_len)
    out: list[int] = []
    for step in range(max_len):
        lp = next_token_logprobs(model, [_extend(prompt, out)], image_lookup)[0]
        allowed = constraints.at(step)
        tok = int(allowed[np.lexsort((allowed, -lp[allowed]))[0]])
        out.append(tok)
        if tok == eoc_id:
            break
    return out


def beam_search(
    model: FusionLM,
    prompt: EncodedSequence,
    image_lookup: ImageLookup,
    beam: int,
    max_len: int,
    constraints: ConstraintSet,
    num_return: int = 1,
    eoc_id: int | None = None,
    temperature: float = 1.0,
) -> list[BeamHypothesis]:
    """Length-unnormalised beam search; ties go to the lexicographically smaller token sequence."""
    if beam < 1:
        raise DecodeError("beam must be >= 1")
    if not 1 <= num_return <= beam:
        raise DecodeError(f"num_return must be in [1, {beam}], got {num_return}")
    max_len = constraints.length or max_len
    _check_fits(model, prompt, max_len)
    beams = [BeamHypothesis([], 0.0)]
    for step in range(max_len):
        live = [h for h in beams if not h.finished]
        if not live:
            break
        lp = next_token_logprobs(model, [_extend(prompt, h.tokens) for h in live], image_lookup, temperature)
        allowed = constraints.at(step)
        pool = [h for h in beams if h.finished]
        for h, row in zip(live, lp):
            for tok, v in zip(allowed.tolist(), row[allowed].tolist()):
                pool.append(BeamHypothesis(h.tokens + [tok], h.logprob + v, tok == eoc_id))
        pool.sort(key=lambda h: (-h.logprob, h.tokens))
        beams = pool[:beam]
    beams.sort(key=lambda h: (-h.logprob, h.tokens))
    return beams[:num_return]


def sequence_logprob(model: FusionLM, prompt: EncodedSequence, tokens: Sequence[int], image_lookup: ImageLookup) -> float:
    """Teacher-forced log-probability of ``tokens`` following ``prompt`` (one forward pass)."""
    seq = _extend(prompt, tokens)
    batch = collate([seq], image_lookup, model.cfg.fusion_mode, image_px=model.cfg.image_px)
    with T.no_grad():
        lp = _log_softmax(model(batch).data[0])
    start = len(prompt)
    return float(sum(lp[start - 1 + n, t] for n, t in enumerate(tokens)))


def rank_items(
    model: FusionLM,
    prompts: Sequence[EncodedSequence],
    vocab: Vocabulary,
    image_lookup: ImageLookup,
    k: int = 10,
    batch_size: int = 32,
    exclude: Sequence[Sequence[str]] | None = None,
) -> list[list[tuple[str, float]]]:
    """Top-``k`` item IDs per prompt; equals beam search on a one-token item constraint."""
    items = np.array(list(vocab.item_token_range()))
    out = []
    for s in range(0, len(prompts), batch_size):
        lp = next_token_logprobs(model, prompts[s : s + batch_size], image_lookup)[:, items]
        for n, row in enumerate(lp):
            if exclude is not None:
                for iid in exclude[s + n]:
                    row[vocab.item_token(iid) - vocab.item_offset] = -np.inf
            order = np.lexsort((items, -row))[:k]
            out.append([(vocab.item_of(int(items[j])), float(row[j])) for j in order])
    return out


# -- retrieve then generate ---------------------------------------------------


def history_prompt(history: Sequence[ItemRecord], vocab: Vocabulary, max_items: int = 5, c: int = 8) -> EncodedSequence:
    if history:
        return build_user_sentence(history, vocab, max_items, c)
    seq = EncodedSequence()
    seq.append_tokens([vocab.index[CLS]], CONTEXT)
    return seq


def task_prompt(history_seq: EncodedSequence, task: str, payload: Payload, vocab: Vocabulary, c: int = 8) -> EncodedSequence:
    seq = history_seq.copy()
    build_instruction(seq, task, payload, vocab, c)
    return seq


@dataclass
class GenerationResult:
    retrieved: list[tuple[str, float]]
    image_tokens: list[int]
    image: np.ndarray
    logprob: float
    skipped: list[str] = field(default_factory=list)


def retrieve_then_generate(
    model: FusionLM,
    vocab: Vocabulary,
    codebook: Codebook,
    history: Sequence[ItemRecord],
    query: str,
    catalog: dict[str, ItemRecord],
    image_lookup: ImageLookup,
    num_retrieved: int = 2,
    beam: int = 10,
    c: int = 8,
) -> GenerationResult:
    """Search for ``num_retrieved`` items, then beam-decode an image-code grid conditioned on them."""
    if not query.strip():
        raise DecodeError("query must be non-empty")
    hist = history_prompt(history, vocab, c=c)
    search = task_prompt(hist, "search", Payload(query=query), vocab, c)
    hyps = beam_search(model, search, image_lookup, max(beam, num_retrieved), 1, ConstraintSet.items(vocab), max(beam, num_retrieved))
    retrieved: list[tuple[str, float]] = []
    skipped: list[str] = []
    for h in hyps:
        iid = vocab.item_of(h.tokens[0])
        if catalog[iid].image_ref is None:
            log.warning("retrieved item %s has no image; skipping", iid)
            skipped.append(iid)
            continue
        retrieved.append((iid, h.logprob))
        if len(retrieved) == num_retrieved:
            break
    if not retrieved:
        raise DecodeError("no retrieved item has an image")
    grid = (model.cfg.image_px // codebook.patch_px) ** 2
    gen = task_prompt(hist, "imgen", Payload(query=query, retrieved=[catalog[i] for i, _ in retrieved]), vocab, c)
    best = beam_search(model, gen, image_lookup, beam, grid, ConstraintSet.image_codes(vocab, grid), 1)[0]
    codes = [t - vocab.code_offset for t in best.tokens]
    image = decode_codes(codes, codebook, model.cfg.image_px)
    return GenerationResult(retrieved, best.tokens, image, best.logprob, skipped)
