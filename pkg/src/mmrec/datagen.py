"""Planted-preference synthetic world, leave-one-out splits and JSONL IO.

Items carry latent vectors ``z``; their text attributes come from the
category/brand cluster ``z`` falls in, and (when vision is informative) their
images are colour blocks rendering the leading components of ``z``. Users
carry latent ``u``; histories are sampled without replacement with
probability proportional to ``exp(u.z / temperature)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import (
    TASKS,
    ItemRecord,
    Payload,
    TaskInstance,
    Vocabulary,
    build_task_instance,
    build_user_sentence,
    build_vocabulary,
)
from .vision import read_ppm, write_ppm

log = logging.getLogger(__name__)

CATEGORY_NAMES = ("shoes", "bags", "toys", "snacks", "beauty", "office", "garden", "sports", "kitchen", "music")
CATEGORY_NOUNS = {
    "shoes": ("sneaker", "boot", "sandal"),
    "bags": ("tote", "backpack", "clutch"),
    "toys": ("puzzle", "robot", "doll"),
    "snacks": ("cracker", "cookie", "chips"),
    "beauty": ("lotion", "serum", "balm"),
    "office": ("stapler", "notebook", "pen"),
    "garden": ("shovel", "planter", "hose"),
    "sports": ("racket", "ball", "glove"),
    "kitchen": ("pan", "kettle", "knife"),
    "music": ("guitar", "drum", "flute"),
}
_SYLLABLES = ("ka", "lo", "mi", "ra", "ve", "zu", "to", "ne", "sa", "qui", "bo", "di")
_ADJECTIVES = ("classic", "modern", "bold", "soft", "bright", "urban", "rustic", "sleek", "cozy", "vivid")
PRICE_WORDS = ("low", "mid", "high")


class DataError(ValueError):
    pass


@dataclass
class WorldConfig:
    seed: int = 0
    num_users: int = 2000
    num_items: int = 300
    latent_dim: int = 8
    num_categories: int = 6
    brands_per_category: int = 4
    rating_noise: float = 0.5
    min_history: int = 5
    max_history: int = 15
    vision_informative: bool = True
    temperature: float = 0.5
    category_scale: float = 1.0
    style_scale: float = 1.5
    queries_per_user: int = 3
    image_px: int = 32

    def __post_init__(self):
        if self.min_history < 5:
            raise DataError("min_history must be >= 5")
        if self.max_history < self.min_history:
            raise DataError("max_history must be >= min_history")
        if self.num_items < self.num_categories:
            raise DataError("num_items must be >= num_categories")
        if self.num_items < self.max_history + self.queries_per_user + 1:
            raise DataError("catalog too small for the requested history length")
        if self.image_px % 4:
            raise DataError("image_px must be divisible by 4")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class User:
    user_id: str
    history: list[str]
    ratings: list[int]
    explanations: list[str]


@dataclass
class Query:
    user_id: str
    query: str
    target: str


@dataclass
class World:
    items: list[ItemRecord]
    users: list[User]
    queries: list[Query]
    images: dict[str, np.ndarray]
    config: WorldConfig | None = None
    item_latent: np.ndarray | None = None
    user_latent: np.ndarray | None = None
    dropped: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.item_by_id = {it.item_id: it for it in self.items}
        self.user_by_id = {u.user_id: u for u in self.users}

    def image(self, ref: str) -> np.ndarray:
        return self.images[ref]

    def category(self, item_id: str) -> str:
        return self.item_by_id[item_id].attr("category")


# ---------------------------------------------------------------------------
# generation


def _brand_names(rng: np.random.Generator, n: int) -> list[str]:
    names: list[str] = []
    while len(names) < n:
        name = "".join(rng.choice(_SYLLABLES, size=3))
        if name not in names:
            names.append(name)
    return names


def render_image(z: np.ndarray, px: int) -> np.ndarray:
    """Four colour quadrants, each encoding one leading latent component.

    Values are snapped to 8-bit levels so PPM round trips are exact.
    """
    img = np.zeros((px, px, 3))
    h = px // 2
    for q in range(4):
        s = 1.0 / (1.0 + math.exp(-1.5 * z[q]))
        t = 1.0 / (1.0 + math.exp(-1.5 * z[(q + 4) % len(z)]))
        r, c = divmod(q, 2)
        img[r * h : (r + 1) * h, c * h : (c + 1) * h] = (s, 1.0 - s, 0.25 + 0.5 * t)
    return np.round(img * 255) / 255


def render_noise_image(rng: np.random.Generator, px: int) -> np.ndarray:
    img = np.zeros((px, px, 3))
    h = px // 2
    for q in range(4):
        r, c = divmod(q, 2)
        img[r * h : (r + 1) * h, c * h : (c + 1) * h] = rng.random(3)
    return np.round(img * 255) / 255


def rating_from_affinity(std_affinity: np.ndarray, noise: np.ndarray, sigma: float) -> np.ndarray:
    """Quantise a noisy standardised affinity into 1..5 via the normal CDF.

    sigma = 0 gives a deterministic function of affinity; sigma -> inf makes
    the five levels equally likely.
    """
    score = (np.asarray(std_affinity) + sigma * np.asarray(noise)) / math.sqrt(1 + sigma * sigma)
    cdf = 0.5 * (1 + np.vectorize(math.erf)(score / math.sqrt(2)))
    return np.clip(1 + np.floor(5 * cdf), 1, 5).astype(int)


def explanation_for(item: ItemRecord, rating: int) -> str:
    verb = "likes" if rating >= 4 else ("dislikes" if rating <= 2 else "may like")
    return f"the user {verb} {item.attr('brand')} {item.attr('category')} products"


def generate_world(cfg: WorldConfig) -> World:
    rng = np.random.default_rng(cfg.seed)
    f = cfg.latent_dim
    n_cat = cfg.num_categories
    cats = [CATEGORY_NAMES[k] if k < len(CATEGORY_NAMES) else f"cat{k}" for k in range(n_cat)]
    centers = rng.normal(size=(n_cat, f)) * cfg.category_scale
    brand_centers = centers[:, None, :] + rng.normal(size=(n_cat, cfg.brands_per_category, f)) * 0.7 * cfg.style_scale
    brand_names = _brand_names(rng, n_cat * cfg.brands_per_category)
    brand_adj = [str(rng.choice(_ADJECTIVES)) for _ in brand_names]

    cat_of = np.arange(cfg.num_items) % n_cat
    rng.shuffle(cat_of)
    z = centers[cat_of] + rng.normal(size=(cfg.num_items, f)) * cfg.style_scale
    price_cut = np.quantile(z[:, f - 1], [1 / 3, 2 / 3])
    items: list[ItemRecord] = []
    images: dict[str, np.ndarray] = {}
    noise_rng = np.random.default_rng([cfg.seed, 7919])
    for i in range(cfg.num_items):
        k = int(cat_of[i])
        b = int(np.argmin(((brand_centers[k] - z[i]) ** 2).sum(1)))
        bi = k * cfg.brands_per_category + b
        item_id = f"i{i:04d}"
        noun = CATEGORY_NOUNS.get(cats[k], ("item", "thing", "piece"))[int(rng.integers(3))]
        price = PRICE_WORDS[int(np.searchsorted(price_cut, z[i, f - 1]))]
        ref = f"images/{item_id}.ppm"
        attrs = (
            ("id", item_id),
            ("category", cats[k]),
            ("brand", brand_names[bi]),
            ("price", price),
            ("title", f"{brand_adj[bi]} {noun}"),
        )
        items.append(ItemRecord(item_id, attrs, ref))
        if cfg.vision_informative:
            images[ref] = render_image(z[i], cfg.image_px).astype(np.float32)
        else:
            images[ref] = render_noise_image(noise_rng, cfg.image_px).astype(np.float32)

    u = rng.normal(size=(cfg.num_users, f))
    aff = u @ z.T
    mu, sd = float(aff.mean()), float(aff.std())
    users: list[User] = []
    queries: list[Query] = []
    histories: list[list[int]] = []
    rating_noise: list[np.ndarray] = []
    for n in range(cfg.num_users):
        length = int(rng.integers(cfg.min_history, cfg.max_history + 1))
        logits = (aff[n] - mu) / (sd * cfg.temperature)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        # Gumbel top-k == sequential sampling without replacement
        keys = np.log(p + 1e-300) + rng.gumbel(size=p.shape)
        hist = list(np.argsort(-keys, kind="stable")[:length])
        rng.shuffle(hist)
        histories.append(hist)
        rating_noise.append(rng.normal(size=len(hist)))
    realised = np.concatenate([aff[n, h] for n, h in enumerate(histories)])
    r_mu, r_sd = float(realised.mean()), float(realised.std())
    for n, hist in enumerate(histories):
        ratings = rating_from_affinity((aff[n, hist] - r_mu) / r_sd, rating_noise[n], cfg.rating_noise)
        uid = f"u{n:05d}"
        hist_ids = [items[j].item_id for j in hist]
        expl = [explanation_for(items[j], int(r)) for j, r in zip(hist, ratings)]
        users.append(User(uid, hist_ids, [int(r) for r in ratings], expl))
        seen = set(hist)
        hist_cats = [int(cat_of[j]) for j in hist]
        used: set[int] = set()
        for _ in range(cfg.queries_per_user):
            k = hist_cats[int(rng.integers(len(hist_cats)))]
            pool = [j for j in np.where(cat_of == k)[0] if j not in seen and j not in used]
            if not pool:
                continue
            best = max(pool, key=lambda j: aff[n, j])
            used.add(best)
            queries.append(Query(uid, f"{rng.choice(('show me', 'looking for', 'need some'))} {cats[k]}", items[best].item_id))

    world = World(items, users, queries, images, cfg, z.astype(np.float32), u.astype(np.float32))
    return five_core(world)


def five_core(world: World, k: int = 5) -> World:
    """Drop items and users with fewer than ``k`` interactions until stable."""
    items = list(world.items)
    users = list(world.users)
    dropped_users = dropped_items = 0
    while True:
        counts: dict[str, int] = {}
        for u in users:
            for iid in u.history:
                counts[iid] = counts.get(iid, 0) + 1
        keep_items = {it.item_id for it in items if counts.get(it.item_id, 0) >= k}
        bad_items = len(items) - len(keep_items)
        new_users = []
        for u in users:
            if bad_items:
                idx = [n for n, iid in enumerate(u.history) if iid in keep_items]
                u = User(u.user_id, [u.history[n] for n in idx], [u.ratings[n] for n in idx], [u.explanations[n] for n in idx])
            if len(u.history) >= k:
                new_users.append(u)
        dropped_items += bad_items
        dropped_users += len(users) - len(new_users)
        items = [it for it in items if it.item_id in keep_items]
        users = new_users
        if not bad_items and len(users) == len(new_users):
            break
    keep_items = {it.item_id for it in items}
    keep_users = {u.user_id for u in users}
    queries = [q for q in world.queries if q.user_id in keep_users and q.target in keep_items]
    latent = world.item_latent
    if latent is not None and dropped_items:
        idx = [n for n, it in enumerate(world.items) if it.item_id in keep_items]
        latent = latent[idx]
    ulat = world.user_latent
    if ulat is not None and dropped_users:
        idx = [n for n, u in enumerate(world.users) if u.user_id in keep_users]
        ulat = ulat[idx]
    images = {it.image_ref: world.images[it.image_ref] for it in items if it.image_ref in world.images}
    out = World(items, users, queries, images, world.config, latent, ulat)
    out.dropped = {"items": dropped_items, "users": dropped_users}
    return out


# ---------------------------------------------------------------------------
# JSONL interface


def emit_world(world: World, out_dir: str | Path) -> dict:
    """Write items/users/queries JSONL, PPM images and a manifest; return the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "items.jsonl", "w", encoding="utf-8") as fh:
        for it in world.items:
            rec = {"item_id": it.item_id, "attributes": [list(a) for a in it.attributes]}
            if it.image_ref is not None:
                rec["image"] = it.image_ref
                write_ppm(out / it.image_ref, world.images[it.image_ref])
            fh.write(json.dumps(rec) + "\n")
    with open(out / "users.jsonl", "w", encoding="utf-8") as fh:
        for u in world.users:
            fh.write(json.dumps({"user_id": u.user_id, "history": u.history, "ratings": u.ratings, "explanations": u.explanations}) + "\n")
    with open(out / "queries.jsonl", "w", encoding="utf-8") as fh:
        for q in world.queries:
            fh.write(json.dumps({"user_id": q.user_id, "query": q.query, "target": q.target}) + "\n")
    files = {}
    for name in ("items.jsonl", "users.jsonl", "queries.jsonl"):
        files[name] = hashlib.sha256((out / name).read_bytes()).hexdigest()
    manifest = {
        "counts": {"items": len(world.items), "users": len(world.users), "queries": len(world.queries)},
        "seed": world.config.seed if world.config else None,
        "config": asdict(world.config) if world.config else None,
        "config_hash": world.config.digest() if world.config else None,
        "files": files,
        "dropped": world.dropped,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def ingest_jsonl(paths: Iterable[str | Path], image_px: int = 32, min_interactions: int = 5) -> World:
    """Read item/user/query records (merged in lexicographic path order)."""
    items: list[ItemRecord] = []
    users: list[User] = []
    queries: list[Query] = []
    images: dict[str, np.ndarray] = {}
    missing_images = 0
    for path in sorted(Path(p) for p in paths):
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    if not isinstance(rec, dict):
                        raise ValueError("record is not an object")
                    if "item_id" in rec:
                        ref = rec.get("image")
                        if ref is not None:
                            img_path = path.parent / ref
                            if img_path.exists():
                                img = read_ppm(img_path)
                                if img.shape != (image_px, image_px, 3):
                                    raise ValueError(f"image {ref} has shape {img.shape}")
                                images[ref] = img
                            else:
                                missing_images += 1
                                ref = None
                        attrs = tuple((str(k), str(v)) for k, v in rec.get("attributes", []))
                        items.append(ItemRecord(str(rec["item_id"]), attrs, ref))
                    elif "history" in rec:
                        hist = [str(x) for x in rec["history"]]
                        ratings = [int(r) for r in rec.get("ratings", [3] * len(hist))]
                        expl = [str(e) for e in rec.get("explanations", [""] * len(hist))]
                        if not (len(hist) == len(ratings) == len(expl)):
                            raise ValueError("history, ratings and explanations differ in length")
                        users.append(User(str(rec["user_id"]), hist, ratings, expl))
                    elif "query" in rec:
                        queries.append(Query(str(rec["user_id"]), str(rec["query"]), str(rec["target"])))
                    else:
                        raise ValueError("unrecognised record kind")
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    known = {it.item_id for it in items}
    for u in users:
        unknown = [i for i in u.history if i not in known]
        if unknown:
            raise DataError(f"user {u.user_id} references unknown item {unknown[0]!r}")
    world = five_core(World(items, users, queries, images), k=min_interactions)
    world.dropped["missing_images"] = missing_images
    if world.dropped["items"] or world.dropped["users"]:
        log.info("ingest dropped %d items and %d users below %d interactions", world.dropped["items"], world.dropped["users"], min_interactions)
    return world


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    seed: int = 0
    new_user_fraction: float = 0.1
    new_domains: tuple[str, ...] = ()
    history_items: int = 5
    select_candidates: int = 8
    retrieved: int = 2


@dataclass(frozen=True)
class InstanceSpec:
    """Lightweight description of one task instance (materialised on demand)."""

    task: str
    user_id: str
    history: tuple[str, ...]
    target: str | None = None
    probe: str | None = None
    rating: int | None = None
    explanation: str | None = None
    candidates: tuple[str, ...] = ()
    positives: tuple[str, ...] = ()
    query: str | None = None
    retrieved: tuple[str, ...] = ()

    def key_item(self) -> str | None:
        return self.target or self.probe


@dataclass
class Splits:
    train: dict[str, list[InstanceSpec]]
    val: dict[str, list[InstanceSpec]]
    test: dict[str, list[InstanceSpec]]
    test_new_users: dict[str, list[InstanceSpec]]
    test_new_domain: dict[str, list[InstanceSpec]]
    new_users: list[str]
    train_users: list[str]

    def get(self, split: str, users: str = "seen", domain: str = "seen") -> dict[str, list[InstanceSpec]]:
        if users == "new":
            return self.test_new_users
        if domain == "new":
            return self.test_new_domain
        return {"train": self.train, "val": self.val, "test": self.test}[split]


def make_splits(world: World, spec: SplitSpec) -> Splits:
    """Leave-one-out instances for all six tasks; pure function of (world, spec)."""
    rng = np.random.default_rng([spec.seed, 104729])
    user_ids = [u.user_id for u in world.users]
    n_new = int(round(spec.new_user_fraction * len(user_ids)))
    new_users = set(rng.choice(user_ids, size=n_new, replace=False).tolist()) if n_new else set()
    held = set(spec.new_domains)
    by_cat: dict[str, list[str]] = {}
    for it in world.items:
        by_cat.setdefault(it.attr("category"), []).append(it.item_id)
    queries: dict[str, list[Query]] = {}
    for q in world.queries:
        queries.setdefault(q.user_id, []).append(q)

    empty = lambda: {t: [] for t in TASKS}  # noqa: E731
    train, val, test, test_new, test_dom = empty(), empty(), empty(), empty(), empty()
    h = spec.history_items

    for u in world.users:
        hist, n = u.history, len(u.history)
        is_new = u.user_id in new_users
        uq = queries.get(u.user_id, [])
        # evaluation instances: val predicts position n-2, test position n-1
        evals = {"val": n - 2, "test": n - 1}
        for split, pos in evals.items():
            ctx = tuple(hist[max(0, pos - h) : pos])
            out = []
            out.append(InstanceSpec("rec", u.user_id, ctx, target=hist[pos]))
            out.append(InstanceSpec("pref", u.user_id, ctx, probe=hist[pos], rating=u.ratings[pos]))
            out.append(InstanceSpec("expl", u.user_id, ctx, probe=hist[pos], explanation=u.explanations[pos]))
            # held-out items only, so no selection target is also a training target
            held_out = [hist[pos]] if split == "val" else [hist[pos], hist[n - 2]][: int(rng.integers(1, 3))]
            sel_ctx = tuple([x for x in hist[:pos] if x not in held_out][-h:])
            out.append(_select_spec(rng, world, by_cat, u, sel_ctx, held_out, spec.select_candidates))
            qi = 1 if split == "val" else 2
            if len(uq) > qi:
                out.extend(_query_specs(rng, world, by_cat, u.user_id, ctx, uq[qi], spec.retrieved))
            for s in out:
                if is_new:
                    if split == "test":
                        test_new[s.task].append(s)
                    continue
                (val if split == "val" else test)[s.task].append(s)
                if split == "test" and held and _touches(world, s, held):
                    test_dom[s.task].append(s)
        if is_new:
            continue

        train_hist = hist[: n - 2]
        out = []
        for k in range(1, len(train_hist)):
            out.append(InstanceSpec("rec", u.user_id, tuple(train_hist[max(0, k - h) : k]), target=train_hist[k]))
        for k, iid in enumerate(train_hist):
            ctx = tuple(train_hist[max(0, k - h) : k] or train_hist[k + 1 : k + 1 + h])
            out.append(InstanceSpec("pref", u.user_id, ctx, probe=iid, rating=u.ratings[k]))
            out.append(InstanceSpec("expl", u.user_id, ctx, probe=iid, explanation=u.explanations[k]))
        npos = min(int(rng.integers(1, 4)), len(train_hist) - 1)
        chosen = set(rng.choice(len(train_hist), size=npos, replace=False).tolist())
        positives = [train_hist[j] for j in sorted(chosen)]
        rest = [x for j, x in enumerate(train_hist) if j not in chosen]
        out.append(_select_spec(rng, world, by_cat, u, tuple(rest[-h:]), positives, spec.select_candidates))
        if uq:
            out.extend(_query_specs(rng, world, by_cat, u.user_id, tuple(train_hist[-h:]), uq[0], spec.retrieved))
        for s in out:
            if held and _touches(world, s, held):
                continue
            train[s.task].append(s)

    seen = [u for u in user_ids if u not in new_users]
    return Splits(train, val, test, test_new, test_dom, sorted(new_users), seen)


def _touches(world: World, s: InstanceSpec, held: set[str]) -> bool:
    keys = [s.key_item()] + list(s.positives)
    return any(k is not None and world.category(k) in held for k in keys)


def _select_spec(rng, world: World, by_cat, user: User, ctx, positives: list[str], total: int) -> InstanceSpec:
    owned = set(user.history)
    cats = {world.category(p) for p in positives}
    same = [i for c in sorted(cats) for i in by_cat[c] if i not in owned]
    need = total - len(positives)
    negs = [str(x) for x in rng.permutation(same)[:need]] if same else []
    if len(negs) < need:
        pool = [it.item_id for it in world.items if it.item_id not in owned and it.item_id not in negs]
        negs += [str(x) for x in rng.permutation(pool)[: need - len(negs)]]
    cands = [str(x) for x in rng.permutation(list(positives) + negs)]
    return InstanceSpec("select", user.user_id, ctx, candidates=tuple(cands), positives=tuple(sorted(positives)))


def _query_specs(rng, world: World, by_cat, user_id: str, ctx, q: Query, r: int) -> list[InstanceSpec]:
    cat = world.category(q.target)
    others = [i for i in by_cat[cat] if i != q.target]
    extra = [str(x) for x in rng.permutation(others)[: r - 1]]
    retrieved = [str(x) for x in rng.permutation([q.target] + extra)]
    return [
        InstanceSpec("search", user_id, ctx, target=q.target, query=q.query),
        InstanceSpec("imgen", user_id, ctx, target=q.target, query=q.query, retrieved=tuple(retrieved)),
    ]


# ---------------------------------------------------------------------------
# materialisation


def world_vocabulary(world: World, num_codes: int = 64) -> Vocabulary:
    texts = [e for u in world.users for e in u.explanations] + [q.query for q in world.queries]
    return build_vocabulary(world.items, texts, num_codes)


def materialize(
    s: InstanceSpec,
    world: World,
    vocab: Vocabulary,
    code_grid=None,
    c: int = 8,
    max_items: int = 5,
    weight: float = 1.0,
) -> TaskInstance:
    """Build the token-level instance; ``code_grid(item_id)`` is needed for imgen."""
    get = world.item_by_id.__getitem__
    hist = [get(i) for i in s.history]
    from .codec import CLS, CONTEXT, EncodedSequence

    if hist:
        sentence = build_user_sentence(hist, vocab, max_items, c)
    else:
        sentence = EncodedSequence()
        sentence.append_tokens([vocab.index[CLS]], CONTEXT)
    p = Payload(
        target_item=get(s.target) if s.target else None,
        probe=get(s.probe) if s.probe else None,
        rating=s.rating,
        explanation=s.explanation,
        candidates=[get(i) for i in s.candidates],
        positives=list(s.positives),
        query=s.query,
        retrieved=[get(i) for i in s.retrieved],
        code_grid=list(code_grid(s.target)) if s.task == "imgen" and code_grid is not None else (),
    )
    inst = build_task_instance(sentence, s.task, p, vocab, c, weight, s.user_id)
    inst.meta["spec"] = s
    return inst
