"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

The training criteria (7-10, 12) take most of the wall time; deselect them
with ``-m "not slow"`` for a quick run.
"""

from __future__ import annotations

import contextlib
import math
import statistics
import time

import numpy as np
import pytest

from mmrec import tensor as T
from mmrec.codec import EOC, Payload, build_task_instance, build_user_sentence
from mmrec.config import load_config
from mmrec.datagen import WorldConfig, generate_world, world_vocabulary
from mmrec.decode import (
    ConstraintSet,
    beam_search,
    greedy_decode,
    history_prompt,
    retrieve_then_generate,
    sequence_logprob,
    task_prompt,
)
from mmrec.loss import batch_objective, token_losses
from mmrec.metrics import RankedList, bleu, hr_at_k, mae, mrr_at_k, ndcg_at_k, rmse, rouge_l, set_prf
from mmrec.model import FusionLM, ModelConfig, build_mask, collate, gated_cross_attention
from mmrec.quantizer import Codebook, decode, encode, fit_codebook
from mmrec.vision import encode_history_images

import experiments as X
from conftest import ACCEPTANCE, rec_sequences, tiny_model_config
from oracles import check_op, lcs_brute, numeric_grad, rel_err
from test_tensor import OPS, SEEDS, _cases

SEEDS3 = (0, 1, 2)


class Verdict:
    def __init__(self):
        self.ok = False
        self.detail = ""


@contextlib.contextmanager
def criterion(number: int, title: str, budget_s: float | None = None):
    v = Verdict()
    t0 = time.time()
    try:
        yield v
    except Exception as exc:  # recorded, then re-raised so pytest reports it
        v.ok, v.detail = False, f"{type(exc).__name__}: {exc}"
        raise
    finally:
        took = time.time() - t0
        over = budget_s is not None and took > budget_s
        status = "PASS" if v.ok and not over else "FAIL"
        budget = f" (budget {budget_s:.0f}s)" if budget_s is not None else ""
        ACCEPTANCE.append(f"criterion {number}: {status} {title}: {v.detail} [{took:.1f}s{budget}]")
    assert v.ok, v.detail
    assert not over, f"took {took:.1f}s, budget {budget_s:.0f}s"


def _open(model, value=1.0):
    for blk in model.blocks:
        if blk.cross is not None:
            blk.cross.alpha.data[:] = value
    return model


# ---------------------------------------------------------------------------


def test_criterion_01_gradients(tiny_world, tiny_vocab):
    with criterion(1, "finite-difference gradients", 60) as v:
        worst_prim = {}
        for name in OPS:
            worst_prim[name] = max(check_op(*_cases(np.random.default_rng(s))[name], np.random.default_rng(s)) for s in SEEDS)
        worst_model = 0.0
        for seed in SEEDS:
            model = _open(FusionLM(tiny_model_config(len(tiny_vocab), seed=seed)).astype(np.float64), 0.5)
            seqs = rec_sequences(tiny_world, tiny_vocab, 2, np.random.default_rng(seed))
            batch = collate(seqs, tiny_world.image, "exclusive", tiny_vocab.pad_id)

            def value():
                with T.no_grad():
                    return batch_objective(model(batch), batch.ids, batch.segments, ["rec"] * 2, {"rec": 1.0}, 2.0).total

            T.backward(batch_objective(model(batch), batch.ids, batch.segments, ["rec"] * 2, {"rec": 1.0}, 2.0).total_tensor)
            named = sorted(model.named_parameters())
            rng = np.random.default_rng(seed)
            ana, num = [], []
            for j in rng.choice(len(named), size=10, replace=False):
                _, p = named[j]
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                flat = int(np.argmax(np.abs(g).reshape(-1)))
                ana.append(g.reshape(-1)[flat])
                num.append(numeric_grad(value, p.data.reshape(-1)[flat : flat + 1], step=1e-4)[0])
            worst_model = max(worst_model, rel_err(np.array(ana), np.array(num)))
        bad = {k: e for k, e in worst_prim.items() if e > 1e-3}
        v.ok = not bad and worst_model <= 1e-2
        v.detail = f"{len(OPS)} primitives x {len(SEEDS)} seeds worst {max(worst_prim.values()):.1e} (<=1e-3); model worst {worst_model:.1e} over {len(SEEDS)} seeds (<=1e-2)"
        if bad:
            v.detail += f"; failing {bad}"


def test_criterion_02_gate_zero(tiny_world, tiny_vocab):
    with criterion(2, "gate-zero equivalence", 10) as v:
        model = FusionLM(ModelConfig(vocab_size=len(tiny_vocab), seed=5))
        rng = np.random.default_rng(0)
        worst = 0.0
        for start in range(0, 100, 10):
            seqs = [rec_sequences(tiny_world, tiny_vocab, 1, rng, int(rng.integers(1, 6)))[0] for _ in range(10)]
            batch = collate(seqs, tiny_world.image, "exclusive", tiny_vocab.pad_id)
            with T.no_grad():
                a = model(batch, "exclusive").data
                b = model(batch, "text_only").data
            worst = max(worst, float(np.abs(a - b).max()))
        v.ok = worst <= 1e-6
        v.detail = f"max |exclusive - text_only| = {worst:.1e} over 100 sequences (<=1e-6)"


def test_criterion_03_mask_exclusivity(tiny_world, tiny_vocab):
    with criterion(3, "cross-attention mask exclusivity", 10) as v:
        model = _open(FusionLM(tiny_model_config(len(tiny_vocab), d=32, heads=4)))
        items = [it for it in tiny_world.items if it.image_ref][:4]
        seq = build_task_instance(build_user_sentence(items[:3], tiny_vocab), "rec", Payload(target_item=items[3]), tiny_vocab).input
        mask = build_mask(seq, "exclusive")
        layer = next(b.cross for b in model.blocks if b.cross is not None)
        rng = np.random.default_rng(0)
        text = T.Tensor(rng.normal(size=(len(seq), 32)).astype(np.float32))
        vis = encode_history_images(model.vision, [tiny_world.image(ref) for _, ref in seq.image_slots])
        with T.no_grad():
            base = gated_cross_attention(layer, text, T.Tensor(vis), mask).data
        checks = 0
        ok = True
        for j in range(vis.shape[0]):
            for trial in range(5):
                pert = vis.copy()
                pert[j] += rng.normal(scale=10.0, size=pert[j].shape).astype(np.float32)
                with T.no_grad():
                    out = gated_cross_attention(layer, text, T.Tensor(pert), mask).data
                others = mask.allowed != j
                ok &= bool(np.array_equal(out[others], base[others]))
                ok &= not np.allclose(out[mask.allowed == j], base[mask.allowed == j])
                checks += 1
        v.ok = ok and vis.shape[0] == 3
        v.detail = f"{checks} perturbations of {vis.shape[0]} images; untouched rows bit-identical, own rows changed: {ok}"


def test_criterion_04_focal_reduction():
    with criterion(4, "focal reduction", 10) as v:
        rng = np.random.default_rng(0)
        logits = rng.normal(scale=3.0, size=(2000, 50))
        tgt = rng.integers(0, 50, size=2000)
        ours = token_losses(T.Tensor(logits), tgt, 0.0).data
        m = logits.max(1, keepdims=True)
        ref = -(logits[np.arange(2000), tgt] - m[:, 0] - np.log(np.exp(logits - m).sum(1)))
        nll_err = float(np.abs(ours - ref).max())
        violations, draws = 0, 0
        for g in rng.uniform(0, 5, size=1000):
            p = T.Tensor(rng.uniform(1e-9, 1.0, size=100))
            focal = T.focal_token_loss(p, float(g)).data
            nll = T.focal_token_loss(p, 0.0).data
            violations += int((focal > nll + 1e-12).sum())
            draws += 100
        v.ok = nll_err <= 1e-6 and violations == 0 and draws >= 100_000
        v.detail = f"gamma=0 vs NLL max err {nll_err:.1e} (<=1e-6); focal>NLL in {violations}/{draws} draws"


def test_criterion_05_beam(tiny_world, tiny_vocab):
    with criterion(5, "beam search correctness", 60) as v:
        model = _open(FusionLM(tiny_model_config(len(tiny_vocab))))
        rng = np.random.default_rng(0)
        eoc = tiny_vocab.index[EOC]
        free = ConstraintSet.free(tiny_vocab)
        same, lp_err, escapes = 0, 0.0, 0
        for n in range(50):
            user = tiny_world.users[int(rng.integers(len(tiny_world.users)))]
            hist = [tiny_world.item_by_id[i] for i in user.history[: int(rng.integers(1, 6))]]
            prompt = task_prompt(history_prompt(hist, tiny_vocab), "rec", Payload(), tiny_vocab)
            g = greedy_decode(model, prompt, tiny_world.image, 4, free, eoc)
            b = beam_search(model, prompt, tiny_world.image, 1, 4, free, 1, eoc)[0]
            same += b.tokens == g
            allowed = rng.choice(len(tiny_vocab), size=int(rng.integers(2, 20)), replace=False)
            cons = ConstraintSet(np.sort(allowed), length=3)
            for h in beam_search(model, prompt, tiny_world.image, 3, 3, cons, 3):
                lp_err = max(lp_err, abs(h.logprob - sequence_logprob(model, prompt, h.tokens, tiny_world.image)))
                escapes += sum(t not in allowed for t in h.tokens)
        v.ok = same == 50 and lp_err <= 1e-5 and escapes == 0
        v.detail = f"beam1==greedy {same}/50; logprob err {lp_err:.1e} (<=1e-5); constraint escapes {escapes}"


def test_criterion_06_metric_goldens():
    with criterion(6, "metric goldens", 5) as v:
        r1 = RankedList(["t", "a", "b"], "t")
        r3 = RankedList(["x", "y", "t", "z", "w"], "t")
        absent = RankedList(["x", "y"], "t")
        exact = [
            (hr_at_k(r1, 1), ndcg_at_k(r1, 1), mrr_at_k(r1, 1)) == (1.0, 1.0, 1.0),
            (hr_at_k(absent, 5), ndcg_at_k(absent, 5), mrr_at_k(absent, 5)) == (0.0, 0.0, 0.0),
            hr_at_k(r3, 5) == 1.0,
            set_prf({"a"}, {"a"}) == (1.0, 1.0, 1.0),
            set_prf({"a"}, {"b"}) == (0.0, 0.0, 0.0),
            set_prf({"a", "b"}, {"b", "c"}) == (0.5, 0.5, 0.5),
            mae([3, 4], [3, 4]) == 0.0 and rmse([3, 4], [3, 4]) == 0.0,
        ]
        ref = "a c".split()
        lcs = lcs_brute("a b c".split(), ref)
        p, r = lcs / 3, lcs / 2
        rouge_oracle = (1 + 1.44) * p * r / (r + 1.44 * p)
        real = [
            abs(ndcg_at_k(r3, 5) - 1 / math.log2(4)),
            abs(mrr_at_k(r3, 5) - 1 / 3),
            abs(mae([1, 5], [2, 3]) - 1.5),
            abs(rmse([1, 5], [2, 3]) - math.sqrt(2.5)),
            abs(mae([3] * 5, [1, 2, 3, 4, 5]) - 1.2),
            abs(bleu(ref, [ref]) - 1.0),
            abs(bleu("p q".split(), [ref]) - 0.0),
            abs(rouge_l("a b c".split(), ref) - rouge_oracle),
            abs(rouge_l(ref, ref) - 1.0),
            abs(rouge_l(["q"], ref) - 0.0),
        ]
        v.ok = all(exact) and max(real) <= 1e-6
        v.detail = f"{sum(exact)}/{len(exact)} exact goldens; worst real-valued error {max(real):.1e} (<=1e-6)"


# ---------------------------------------------------------------------------
# training criteria


def _default_runs():
    return [X.run({}, s) for s in SEEDS3]


@pytest.mark.slow
def test_criterion_07_learning_signal():
    with criterion(7, "learning signal at default config") as v:
        runs = _default_runs()
        hrs = [r.test["hr@5"] for r in runs]
        minutes = [r.train_seconds / 60 for r in runs]
        med = statistics.median(hrs)
        v.ok = med >= 0.083 and max(minutes) <= 20
        v.detail = (
            f"test HR@5 per seed {[round(h, 4) for h in hrs]}, median {med:.4f} (>=0.083 = 5x chance); "
            f"train minutes per seed {[round(m, 1) for m in minutes]} (<=20 each)"
        )


@pytest.mark.slow
def test_criterion_12_new_users():
    with criterion(12, "held-out new users above chance") as v:
        pvals, hrs = [], []
        for r in _default_runs():
            report, _, hit = X.rec_scores(r.model, r.data, r.data.splits.test_new_users["rec"])
            n_items = len(r.data.world.items)
            pvals.append(X.binomial_sf(int(hit.sum()), len(hit), 5 / n_items))
            hrs.append(report["hr@5"])
        v.ok = all(p < 0.01 for p in pvals)
        v.detail = f"new-user HR@5 per seed {[round(h, 4) for h in hrs]} vs chance {5 / 300:.4f}; binomial p {[f'{p:.1e}' for p in pvals]} (<0.01)"


def _gap_stats(a_runs, b_runs):
    """Per-seed NDCG@5 gaps (a - b) and the pooled per-user standard error of the mean gap."""
    gaps = [a.test["ndcg@5"] - b.test["ndcg@5"] for a, b in zip(a_runs, b_runs)]
    diffs = np.concatenate([a.ndcg5 - b.ndcg5 for a, b in zip(a_runs, b_runs)])
    return gaps, float(diffs.std(ddof=1) / math.sqrt(len(diffs)))


@pytest.mark.slow
def test_criterion_08_vision_ablation():
    with criterion(8, "vision ablation direction") as v:
        no_vis = {**X.ABLATION, "model.fusion_mode": "text_only"}
        flat = {"world.vision_informative": "false"}
        full = [X.run(X.ABLATION, s) for s in SEEDS3]
        text = [X.run(no_vis, s) for s in SEEDS3]
        full_u = [X.run({**X.ABLATION, **flat}, s) for s in SEEDS3]
        text_u = [X.run({**no_vis, **flat}, s) for s in SEEDS3]
        gaps, _ = _gap_stats(full, text)
        gaps_u, se_u = _gap_stats(full_u, text_u)
        wins = sum(g > 0 for g in gaps)
        mean_u = float(np.mean(gaps_u))
        vanishes = abs(mean_u) <= 2 * se_u
        minutes = sum(r.train_seconds for r in full + text + full_u + text_u) / 60
        v.ok = wins >= 2 and vanishes and minutes <= 40
        v.detail = (
            f"informative world gaps {[round(g, 4) for g in gaps]} (full > text-only in {wins}/3, need 2); "
            f"uninformative mean gap {mean_u:+.4f} vs 2 SE {2 * se_u:.4f}; {minutes:.1f} train minutes (<=40)"
        )


@pytest.mark.slow
def test_criterion_09_fusion_ablation():
    with criterion(9, "fusion ablation direction") as v:
        excl = [X.run(X.ABLATION, s) for s in SEEDS3]
        wins, used = {}, list(excl)
        for mode in ("all_images", "early_concat", "late_pool"):
            other = [X.run({**X.ABLATION, "model.fusion_mode": mode}, s) for s in SEEDS3]
            used += other
            wins[mode] = [round(a.test["ndcg@5"] - b.test["ndcg@5"], 4) for a, b in zip(excl, other)]
        counts = {m: sum(g >= 0 for g in gs) for m, gs in wins.items()}
        minutes = sum(r.train_seconds for r in used) / 60
        v.ok = all(c >= 2 for c in counts.values()) and minutes <= 60
        v.detail = f"exclusive minus mode NDCG@5 per seed {wins}; seeds with exclusive >= mode {counts} (need 2 each); {minutes:.1f} train minutes (<=60)"


@pytest.mark.slow
def test_criterion_10_loss_shaping():
    with criterion(10, "loss-shaping direction") as v:
        plain_cfg = {**X.ABLATION, "loss.context": "false", "loss.reweight": "false"}
        shaped = [X.run(X.ABLATION, s, val_loss=True) for s in SEEDS3]
        plain = [X.run(plain_cfg, s, val_loss=True) for s in SEEDS3]
        ratios = [a.val_loss["mean"] / b.val_loss["mean"] for a, b in zip(shaped, plain)]
        gains = [a.test["ndcg@5"] - b.test["ndcg@5"] for a, b in zip(shaped, plain)]
        wins = sum(g > 0 for g in gains)
        v.ok = all(r <= 1.02 for r in ratios) and wins >= 2
        v.detail = (
            f"val task loss ratio shaped/plain {[round(r, 4) for r in ratios]} (<=1.02 each); "
            f"NDCG@5 gains {[round(g, 4) for g in gains]} (positive in {wins}/3, need 2)"
        )


# ---------------------------------------------------------------------------


def test_criterion_11_vq_pipeline():
    with criterion(11, "VQ pipeline", 120) as v:
        cfg = load_config(None, {})
        notes, ok = [], True
        for seed in SEEDS3:
            world = generate_world(WorldConfig(seed=seed))
            images = [world.image(it.image_ref) for it in world.items]
            cb = fit_codebook(images, k=cfg.num_codes, seed=seed)
            rng = np.random.default_rng(seed)
            idem = all(encode(decode(t, cb), cb) == list(t) for t in rng.integers(0, cb.k, size=(200, 16)))

            def mse(book):
                return float(np.mean([((decode(encode(im, book), book) - im) ** 2).mean() for im in images]))

            fitted = mse(cb)
            chance = np.percentile([mse(Codebook(rng.random((cb.k, 192)), 8)) for _ in range(20)], 95)
            vocab = world_vocabulary(world, cfg.num_codes)
            model = FusionLM(ModelConfig(vocab_size=len(vocab), seed=seed))
            user = world.users[0]
            q = next(q for q in world.queries if q.user_id == user.user_id)
            res = retrieve_then_generate(
                model, vocab, cb, [world.item_by_id[i] for i in user.history], q.query,
                world.item_by_id, world.image, cfg.decode.retrieved, cfg.decode.beam,
            )
            valid = (
                len(res.image_tokens) == 16
                and all(vocab.is_code(t) for t in res.image_tokens)
                and res.image.shape == (32, 32, 3)
                and bool(np.all((res.image >= 0) & (res.image <= 1)))
                and len(res.retrieved) == 2
            )
            ok &= idem and fitted <= chance and valid
            notes.append(f"seed {seed}: idempotent {idem}, mse {fitted:.4f} vs random p95 {chance:.4f}, grid valid {valid}")
        v.ok = ok
        v.detail = "; ".join(notes)
