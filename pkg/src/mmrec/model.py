"""Decoder-only language model with gated, item-exclusive cross-attention."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .codec import EOC, IMG, EncodedSequence, Vocabulary
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, causal_mask, param
from .tensor import Tensor
from .vision import VisionPath

FUSION_MODES = ("exclusive", "all_images", "early_concat", "late_pool", "text_only")
GROUPS = ("vision", "lm_blocks", "cross_attn", "embeddings", "output_head")
GROUP_PREFIX = {"vision": "vision", "lm_blocks": "lm", "cross_attn": "cross", "embeddings": "embed", "output_head": "head"}
ALL_IMAGES = -2
NO_IMAGE = -1


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 0
    d: int = 128
    heads: int = 4
    layers: int = 4
    cross_every: int = 2
    slots: int = 4
    gamma: float = 2.0
    max_len: int = 512
    fusion_mode: str = "exclusive"
    freeze: tuple[str, ...] = ()
    image_px: int = 32
    patch_px: int = 8
    d_v: int = 64
    vision_layers: int = 2
    vision_heads: int = 4
    resampler_layers: int = 1
    seed: int = 0

    def __post_init__(self):
        self.freeze = tuple(sorted(set(self.freeze)))
        if self.cross_every < 1:
            raise ModelError(f"cross_every must be >= 1, got {self.cross_every}")
        if self.fusion_mode not in FUSION_MODES:
            raise ModelError(f"unknown fusion mode {self.fusion_mode!r}")
        bad = set(self.freeze) - set(GROUPS)
        if bad:
            raise ModelError(f"unknown parameter group(s) {sorted(bad)}")

    @property
    def has_cross(self) -> bool:
        return self.fusion_mode in ("exclusive", "all_images")

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            if k not in types:
                raise ModelError(f"unknown model config key {k!r}")
            t = types[k]
            if k == "freeze":
                kw[k] = tuple(x for x in v.split(",") if x)
            elif t in ("int", int):
                kw[k] = int(v)
            elif t in ("float", float):
                kw[k] = float(v)
            else:
                kw[k] = v
        return cls(**kw)


@dataclass
class CrossMask:
    """Per-token allowed image slot: an index, ``NO_IMAGE`` or ``ALL_IMAGES``."""

    mode: str
    allowed: np.ndarray


def build_mask(seq: EncodedSequence, mode: str) -> CrossMask:
    seq.validate()
    n = len(seq)
    if mode == "all_images":
        return CrossMask(mode, np.full(n, ALL_IMAGES, dtype=np.int64))
    allowed = np.full(n, NO_IMAGE, dtype=np.int64)
    if mode == "exclusive":
        for start, end, slot in seq.item_spans:
            if slot is not None:
                allowed[start:end] = slot
    return CrossMask(mode, allowed)


def additive_cross_mask(allowed: np.ndarray, num_images: int, slots: int, dtype=np.float32) -> np.ndarray:
    """``(T,)`` allowed indices -> ``(T, H*C)`` additive {0, -inf} mask."""
    key_img = np.repeat(np.arange(num_images), slots)
    ok = (allowed[:, None] == key_img[None, :]) | (allowed[:, None] == ALL_IMAGES)
    return np.where(ok, 0.0, -np.inf).astype(dtype)


class GatedCrossAttention(Module):
    """Single-head cross-attention from text states to visual slots.

    ``out = x + tanh(alpha) * attend(LN(x), visuals)``; ``alpha`` starts at 0
    so a fresh layer is an exact identity. No projection biases, so tokens
    with no allowed image receive an exactly-zero update.
    """

    def __init__(self, rng, d: int):
        self.norm = LayerNorm(d)
        self.wq = Linear(rng, d, d, bias=False)
        self.wk = Linear(rng, d, d, bias=False)
        self.wv = Linear(rng, d, d, bias=False)
        self.wo = Linear(rng, d, d, bias=False, std=d**-0.5 * 0.5)
        self.alpha = param(None, (1,), value=0.0)

    def __call__(self, x: Tensor, kv: Tensor, mask: np.ndarray) -> Tensor:
        if kv.shape[1] == 0:
            return x
        d = x.shape[-1]
        q = self.wq(self.norm(x))
        k = self.wk(kv)
        v = self.wv(kv)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), d**-0.5)
        att = T.masked_softmax(scores, mask)
        attended = self.wo(T.matmul(att, v))
        return T.add(x, T.scale_by(attended, T.tanh(self.alpha)))


def gated_cross_attention(
    layer: GatedCrossAttention, text_states: Tensor, visuals: Tensor, mask: CrossMask
) -> Tensor:
    """Single-sequence form: ``(N, d)`` text, ``(H, C, d)`` visuals -> ``(N, d)``."""
    h, c, d = visuals.shape
    if h == 0:
        return text_states
    kv = T.reshape(visuals, (1, h * c, d))
    add_mask = additive_cross_mask(mask.allowed, h, c, text_states.dtype)[None]
    out = layer(T.reshape(text_states, (1, *text_states.shape)), kv, add_mask)
    return T.reshape(out, text_states.shape)


class Block(Module):
    def __init__(self, rng, d: int, heads: int, with_cross: bool):
        self.cross = GatedCrossAttention(rng, d) if with_cross else None
        self.attn = MultiHeadAttention(rng, d, heads)
        self.ff = FeedForward(rng, d)


@dataclass
class Batch:
    ids: np.ndarray  # (B, T)
    lengths: np.ndarray  # (B,)
    images: np.ndarray  # (N, H, W, 3)
    slot_image: np.ndarray  # (B, Hmax) global image index, -1 = pad
    allowed: list[np.ndarray]  # per sequence, (len,)
    img_rows: np.ndarray  # (K, 3) of (b, t, global image) at [IMG] tokens
    eoc_rows: np.ndarray  # (K, 3) of (b, t, global image) at chunk-closing [EOC]
    segments: np.ndarray  # (B, T)
    seqs: list[EncodedSequence] = field(default_factory=list)


def collate(
    seqs: Sequence[EncodedSequence],
    image_lookup: Callable[[str], np.ndarray],
    mode: str,
    pad_id: int = 0,
    image_px: int = 32,
) -> Batch:
    b = len(seqs)
    t = max(len(s) for s in seqs)
    ids = np.full((b, t), pad_id, dtype=np.int64)
    segments = np.full((b, t), 3, dtype=np.int64)
    hmax = max(len(s.image_slots) for s in seqs)
    slot_image = np.full((b, hmax), -1, dtype=np.int64)
    images: list[np.ndarray] = []
    cache: dict[str, int] = {}
    img_rows, eoc_rows, allowed = [], [], []
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.token_ids
        segments[i, : len(s)] = s.segment_labels
        allowed.append(build_mask(s, mode).allowed)
        for j, (pos, ref) in enumerate(s.image_slots):
            if ref not in cache:
                cache[ref] = len(images)
                images.append(image_lookup(ref))
            slot_image[i, j] = cache[ref]
            img_rows.append((i, pos, cache[ref]))
        for start, end, slot in s.item_spans:
            if slot is not None:
                eoc_rows.append((i, end - 1, slot_image[i, slot]))
    imgs = np.stack(images) if images else np.zeros((0, image_px, image_px, 3), dtype=np.float32)
    return Batch(
        ids,
        np.array([len(s) for s in seqs]),
        imgs,
        slot_image,
        allowed,
        np.array(img_rows, dtype=np.int64).reshape(-1, 3),
        np.array(eoc_rows, dtype=np.int64).reshape(-1, 3),
        segments,
        list(seqs),
    )


class FusionLM(Module):
    def __init__(self, cfg: ModelConfig):
        if cfg.vocab_size < 1:
            raise ModelError("vocab_size must be set")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d
        self.tok_emb = param(rng, (cfg.vocab_size, d), std=0.02)
        self.pos_emb = param(rng, (cfg.max_len, d), std=0.02)
        self.vision = VisionPath(
            rng,
            d,
            image_px=cfg.image_px,
            patch_px=cfg.patch_px,
            d_v=cfg.d_v,
            layers=cfg.vision_layers,
            heads=cfg.vision_heads,
            slots=cfg.slots,
            resampler_layers=cfg.resampler_layers,
        )
        self.blocks = [
            Block(rng, d, cfg.heads, cfg.has_cross and i % cfg.cross_every == 0) for i in range(cfg.layers)
        ]
        self.final_norm = LayerNorm(d)
        # small output weights so the initial next-token distribution is near uniform
        self.head = Linear(rng, d, cfg.vocab_size, std=0.02)
        self.freeze(cfg.freeze)

    # -- parameter groups -------------------------------------------------
    @staticmethod
    def group_of(name: str) -> str:
        if name.startswith("vision."):
            return "vision"
        if name.startswith(("tok_emb", "pos_emb")):
            return "embeddings"
        if name.startswith("head."):
            return "output_head"
        if name.startswith("blocks.") and ".cross." in name:
            return "cross_attn"
        return "lm_blocks"

    def checkpoint_name(self, name: str) -> str:
        return f"{GROUP_PREFIX[self.group_of(name)]}/{name}"

    def freeze(self, groups) -> None:
        groups = set(groups)
        bad = groups - set(GROUPS)
        if bad:
            raise ModelError(f"unknown parameter group(s) {sorted(bad)}")
        for name, p in self.named_parameters():
            p.requires_grad = self.group_of(name) not in groups
            if not p.requires_grad:
                p.grad = None
        self.cfg.freeze = tuple(sorted(groups))

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {self.checkpoint_name(n): p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        expected = {self.checkpoint_name(n) for n in own}
        if set(state) != expected:
            missing = sorted(expected - set(state))[:3]
            extra = sorted(set(state) - expected)[:3]
            raise ModelError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for n, p in own.items():
            arr = state[self.checkpoint_name(n)]
            if arr.shape != p.shape:
                raise ModelError(f"{n}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    # -- forward ------------------------------------------------------------
    def forward(self, batch: Batch, mode: str | None = None) -> Tensor:
        """Logits ``(B, T, V)``."""
        mode = mode or self.cfg.fusion_mode
        if mode not in FUSION_MODES:
            raise ModelError(f"unknown fusion mode {mode!r}")
        b, t = batch.ids.shape
        if t > self.cfg.max_len:
            raise ModelError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        d = self.cfg.d
        x = T.add(
            T.embedding(self.tok_emb, batch.ids.reshape(-1)),
            T.take_rows(self.pos_emb, np.tile(np.arange(t), b)),
        )  # (B*T, d)
        use_vision = mode != "text_only" and len(batch.images) > 0
        vis = self.vision(batch.images) if use_vision else None
        pooled = T.mean_axis(vis, 1) if use_vision and mode in ("early_concat", "late_pool") else None
        if mode == "early_concat" and len(batch.img_rows):
            r = batch.img_rows
            x = T.add_rows(x, r[:, 0] * t + r[:, 1], T.take_rows(pooled, r[:, 2]))
        x = T.reshape(x, (b, t, d))

        kv = mask = None
        if use_vision and mode in ("exclusive", "all_images"):
            kv, mask = self._cross_inputs(vis, batch, t, x.dtype)
        causal = causal_mask(t, x.dtype)
        for blk in self.blocks:
            if blk.cross is not None and kv is not None:
                x = blk.cross(x, kv, mask)
            x = blk.ff(blk.attn(x, causal))

        if mode == "late_pool" and use_vision and len(batch.eoc_rows):
            r = batch.eoc_rows
            flat = T.add_rows(T.reshape(x, (b * t, d)), r[:, 0] * t + r[:, 1], T.take_rows(pooled, r[:, 2]))
            x = T.reshape(flat, (b, t, d))
        return self.head(self.final_norm(x))

    def _cross_inputs(self, vis: Tensor, batch: Batch, t: int, dtype):
        n, c, d = vis.shape
        b, hmax = batch.slot_image.shape
        slot = np.maximum(batch.slot_image, 0)
        rows = (slot[:, :, None] * c + np.arange(c)[None, None, :]).reshape(-1)
        kv = T.reshape(T.take_rows(T.reshape(vis, (n * c, d)), rows), (b, hmax * c, d))
        mask = np.full((b, t, hmax * c), -np.inf, dtype=dtype)
        for i, allowed in enumerate(batch.allowed):
            h_i = int((batch.slot_image[i] >= 0).sum())
            mask[i, : len(allowed), : h_i * c] = additive_cross_mask(allowed, h_i, c, dtype)
        return kv, mask

    __call__ = forward
