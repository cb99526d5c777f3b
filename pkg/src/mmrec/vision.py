"""Image encoder and learned-query resampler.

Images are ``(H, W, 3)`` float arrays in [0, 1]. The encoder projects
non-overlapping patches, adds learned position embeddings and runs a few
bidirectional transformer blocks; the resampler lets ``C`` learned queries
cross-attend to the patch features and returns ``C`` vectors in the language
model's hidden size.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param
from .tensor import Tensor


def read_ppm(path: str | Path) -> np.ndarray:
    """Binary P6, 8-bit, returned as float32 in [0, 1]."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported, maxval {maxval}")
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return (data.reshape(h, w, 3).astype(np.float32) / 255.0)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    h, w, _ = img.shape
    pix = np.round(img * 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(N, H, W, 3)`` -> ``(N, P, patch*patch*3)`` in row-major patch order."""
    n, h, w, ch = images.shape
    if h % patch or w % patch:
        raise ValueError(f"patch size {patch} does not divide image {h}x{w}")
    gh, gw = h // patch, w // patch
    x = images.reshape(n, gh, patch, gw, patch, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, gh * gw, patch * patch * ch)


def unpatchify(patches: np.ndarray, patch: int, h: int, w: int) -> np.ndarray:
    n = patches.shape[0]
    gh, gw = h // patch, w // patch
    x = patches.reshape(n, gh, gw, patch, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, w, 3)


class CrossAttention(Module):
    """Pre-norm multi-head attention from ``q_dim`` queries to ``kv_dim`` keys."""

    def __init__(self, rng, q_dim: int, kv_dim: int, heads: int):
        self.heads = heads
        self.q_norm = LayerNorm(q_dim)
        self.kv_norm = LayerNorm(kv_dim)
        self.q = Linear(rng, q_dim, q_dim)
        self.kv = Linear(rng, kv_dim, 2 * q_dim)
        self.out = Linear(rng, q_dim, q_dim, std=q_dim**-0.5 * 0.5)

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        n, lq, d = x.shape
        lk = ctx.shape[1]
        h = self.heads
        dh = d // h
        q = T.transpose(T.reshape(self.q(self.q_norm(x)), (n, lq, h, dh)), (0, 2, 1, 3))
        kv = T.reshape(self.kv(self.kv_norm(ctx)), (n, lk, 2, h, dh))
        k, v = T.unbind(T.transpose(kv, (2, 0, 3, 1, 4)))
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), dh**-0.5))
        o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (n, lq, d))
        return T.add(x, self.out(o))


class EncoderBlock(Module):
    def __init__(self, rng, d: int, heads: int):
        self.attn = MultiHeadAttention(rng, d, heads)
        self.ff = FeedForward(rng, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.ff(self.attn(x, None))


class VisionPath(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        d: int,
        image_px: int = 32,
        patch_px: int = 8,
        d_v: int = 64,
        layers: int = 2,
        heads: int = 4,
        slots: int = 4,
        resampler_layers: int = 1,
    ):
        if image_px % patch_px:
            raise ValueError(f"patch size {patch_px} does not divide image size {image_px}")
        self.image_px = image_px
        self.patch_px = patch_px
        self.slots = slots
        self.num_patches = (image_px // patch_px) ** 2
        self.proj = Linear(rng, patch_px * patch_px * 3, d_v)
        self.pos = param(rng, (self.num_patches, d_v), std=0.02)
        self.blocks = [EncoderBlock(rng, d_v, heads) for _ in range(layers)]
        self.norm = LayerNorm(d_v)
        self.latents = param(rng, (slots, d), std=1.0)
        self.resampler = [CrossAttention(rng, d, d_v, heads) for _ in range(resampler_layers)]
        self.resampler_ff = [FeedForward(rng, d) for _ in range(resampler_layers)]
        self.out_norm = LayerNorm(d)
        self.use_pos = True

    def patch_encode(self, images: np.ndarray) -> Tensor:
        """``(N, H, W, 3)`` -> patch features ``(N, P, d_v)``."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (self.image_px, self.image_px, 3):
            raise ValueError(
                f"image shape {images.shape[1:]} does not match configured {self.image_px}x{self.image_px}x3"
            )
        x = self.proj(Tensor(patchify(np.clip(images, 0, 1), self.patch_px), dtype=self.pos.dtype))
        if self.use_pos:
            x = T.add(x, self.pos_rows(x.shape[0]))
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def pos_rows(self, n: int) -> Tensor:
        # (P, d_v) broadcast over images, gradient summed back
        return T.reshape(T.take_rows(self.pos, np.tile(np.arange(self.num_patches), n)), (n, self.num_patches, -1))

    def resample(self, patches: Tensor) -> Tensor:
        """``(N, P, d_v)`` -> ``(N, C, d)``."""
        n = patches.shape[0]
        x = T.reshape(T.take_rows(self.latents, np.tile(np.arange(self.slots), n)), (n, self.slots, -1))
        for attn, ff in zip(self.resampler, self.resampler_ff):
            x = ff(attn(x, patches))
        return self.out_norm(x)

    def __call__(self, images: np.ndarray) -> Tensor:
        if len(images) == 0:
            return Tensor(np.zeros((0, self.slots, self.latents.shape[1]), dtype=self.latents.dtype))
        return self.resample(self.patch_encode(images))


def encode_history_images(vision: VisionPath, images: Sequence[np.ndarray]) -> np.ndarray:
    """Stack per-image embeddings into an ``(H, C, d)`` array (no gradient)."""
    with T.no_grad():
        if len(images) == 0:
            return np.zeros((0, vision.slots, vision.latents.shape[1]), dtype=vision.latents.dtype)
        return vision(np.stack(images)).data.copy()
