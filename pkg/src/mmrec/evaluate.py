"""Per-task evaluation on validation/test splits."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .codec import EOC, tokenize
from .datagen import InstanceSpec
from .decode import ConstraintSet, _extend, next_token_logprobs, rank_items
from .metrics import RankedList, bleu, mae, parse_rating, ranking_report, rmse, rouge_l, set_prf
from .model import FusionLM
from .quantizer import decode as decode_codes


def greedy_batch(
    model: FusionLM,
    prompts: Sequence,
    image_lookup,
    max_len: int,
    constraints: Sequence[ConstraintSet],
    eoc_id: int | None,
    batch_size: int = 32,
) -> list[list[int]]:
    """Greedy decoding of many prompts at once; identical to per-prompt ``greedy_decode``."""
    outs: list[list[int]] = [[] for _ in prompts]
    for s in range(0, len(prompts), batch_size):
        live = list(range(s, min(s + batch_size, len(prompts))))
        for step in range(max_len):
            if not live:
                break
            lp = next_token_logprobs(model, [_extend(prompts[i], outs[i]) for i in live], image_lookup)
            still = []
            for i, row in zip(live, lp):
                allowed = constraints[i].at(step)
                tok = int(allowed[np.lexsort((allowed, -row[allowed]))[0]])
                outs[i].append(tok)
                if tok != eoc_id and step + 1 < (constraints[i].length or max_len):
                    still.append(i)
            live = still
    return outs


def _prompts(data, specs: Sequence[InstanceSpec]):
    return [data.instance(s).input for s in specs]


def evaluate_rec(model: FusionLM, data, specs: Sequence[InstanceSpec], ks=(3, 5, 10)) -> dict[str, float]:
    filt = data.cfg.decode.filter_seen
    exclude = [list(s.history) for s in specs] if filt else None
    ranked = rank_items(model, _prompts(data, specs), data.vocab, data.image, k=max(ks), exclude=exclude)
    lists = [RankedList(tuple(i for i, _ in r), s.target) for r, s in zip(ranked, specs)]
    out = ranking_report(lists, ks)
    out["count"] = len(lists)
    return out


def evaluate_pref(model: FusionLM, data, specs: Sequence[InstanceSpec]) -> dict[str, float]:
    vocab = data.vocab
    eoc = vocab.index[EOC]
    gen = greedy_batch(model, _prompts(data, specs), data.image, 3, [ConstraintSet.free(vocab)] * len(specs), eoc)
    preds, parsed = [], 0
    for g in gen:
        r, ok = parse_rating(" ".join(vocab.tokens[t] for t in g))
        preds.append(r)
        parsed += ok
    truths = [s.rating for s in specs]
    return {"mae": mae(preds, truths), "rmse": rmse(preds, truths), "count": len(specs), "unparsed": len(specs) - parsed}


def evaluate_expl(model: FusionLM, data, specs: Sequence[InstanceSpec]) -> dict[str, float]:
    vocab = data.vocab
    eoc = vocab.index[EOC]
    n = data.cfg.decode.expl_max_len
    gen = greedy_batch(model, _prompts(data, specs), data.image, n, [ConstraintSet.free(vocab)] * len(specs), eoc)
    b, r = [], []
    for g, s in zip(gen, specs):
        words = [vocab.tokens[t] for t in g if t != eoc]
        ref = tokenize(s.explanation)
        b.append(bleu(words, [ref]))
        r.append(rouge_l(words, ref))
    return {"bleu": float(np.mean(b)), "rouge_l": float(np.mean(r)), "count": len(specs)}


def evaluate_select(model: FusionLM, data, specs: Sequence[InstanceSpec]) -> dict[str, float]:
    vocab = data.vocab
    eoc = vocab.index[EOC]
    cons = [ConstraintSet(np.array(sorted([vocab.item_token(i) for i in s.candidates] + [eoc]))) for s in specs]
    gen = greedy_batch(model, _prompts(data, specs), data.image, 4, cons, eoc)
    prf = [set_prf({vocab.item_of(t) for t in g if t != eoc}, set(s.positives)) for g, s in zip(gen, specs)]
    p, r, f = (float(np.mean(x)) for x in zip(*prf))
    return {"precision": p, "recall": r, "f1": f, "count": len(specs)}


def evaluate_imgen(model: FusionLM, data, specs: Sequence[InstanceSpec]) -> dict[str, float]:
    vocab = data.vocab
    grid = (model.cfg.image_px // data.codebook.patch_px) ** 2
    cons = [ConstraintSet.image_codes(vocab, grid)] * len(specs)
    gen = greedy_batch(model, _prompts(data, specs), data.image, grid, cons, None)
    acc, mse, cat_hit = [], [], []
    catalog = [(it.item_id, data.image(it.image_ref)) for it in data.world.items if it.image_ref]
    stack = np.stack([im for _, im in catalog]).astype(np.float64)
    for g, s in zip(gen, specs):
        codes = [t - vocab.code_offset for t in g]
        target = data.code_grid(s.target)
        acc.append(float(np.mean(np.array(codes) == np.array(target))))
        img = decode_codes(codes, data.codebook, model.cfg.image_px).astype(np.float64)
        ref = data.image(data.world.item_by_id[s.target].image_ref)
        mse.append(float(((img - ref) ** 2).mean()))
        nearest = catalog[int(((stack - img) ** 2).mean(axis=(1, 2, 3)).argmin())][0]
        cat_hit.append(float(data.world.category(nearest) == data.world.category(s.target)))
    return {"code_accuracy": float(np.mean(acc)), "pixel_mse": float(np.mean(mse)), "category_match": float(np.mean(cat_hit)), "count": len(specs)}


EVALUATORS = {
    "rec": evaluate_rec,
    "search": evaluate_rec,
    "pref": evaluate_pref,
    "expl": evaluate_expl,
    "select": evaluate_select,
    "imgen": evaluate_imgen,
}


def evaluate(model: FusionLM, data, tasks: Sequence[str], split: str = "test", users: str = "seen", domain: str = "seen", limit: int = 0) -> dict:
    sets = data.splits.get(split, users, domain)
    report: dict = {}
    for task in tasks:
        specs = sets.get(task, [])
        if limit:
            specs = specs[:limit]
        report[task] = EVALUATORS[task](model, data, specs) if specs else {"count": 0}
    return report



