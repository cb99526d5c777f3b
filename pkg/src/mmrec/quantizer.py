"""K-means patch codebook that turns images into code-token grids and back."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .vision import patchify, unpatchify

MAGIC = b"UMVQ"
VERSION = 1


class QuantizerError(ValueError):
    pass


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, patch*patch*3)
    patch_px: int
    trained: bool = True
    iterations: int = 0
    inertia: float = float("nan")
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise QuantizerError(f"codebook needs K >= 2 centroids, got shape {self.centroids.shape}")
        if self.centroids.shape[1] != self.patch_px * self.patch_px * 3:
            raise QuantizerError("centroid dimension does not match patch size")
        if not np.all(np.isfinite(self.centroids)):
            raise QuantizerError("non-finite centroid")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise QuantizerError("ran out of distinct patches during seeding")
        nxt = x[rng.choice(len(x), p=d2 / total)]
        centers.append(nxt)
        d2 = np.minimum(d2, ((x - nxt) ** 2).sum(1))
    return np.stack(centers)


def fit_codebook(
    images: Sequence[np.ndarray], k: int = 64, seed: int = 0, patch_px: int = 8, max_iter: int = 50, tol: float = 1e-6
) -> Codebook:
    """Seeded k-means++ followed by Lloyd iterations on all image patches."""
    x = patchify(np.stack([np.asarray(im, dtype=np.float64) for im in images]), patch_px)
    x = x.reshape(-1, x.shape[-1])
    if len(np.unique(x, axis=0)) < k:
        raise QuantizerError(f"fewer than {k} distinct patches available")
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, k, rng)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, c)
        lab = d.argmin(1)
        inertia = float(d[np.arange(len(x)), lab].sum())
        history.append(inertia)
        if len(history) > 1 and history[-2] - inertia <= tol * max(history[-2], 1e-12):
            break
        new_c = np.empty_like(c)
        counts = np.bincount(lab, minlength=k)
        for j in range(k):
            new_c[j] = x[lab == j].mean(0) if counts[j] else c[j]
        c = new_c
    d = _sq_dists(x, c)
    final = float(d.min(1).sum())
    if final < history[-1]:
        history.append(final)
    return Codebook(c.astype(np.float32), patch_px, True, it, min(final, history[-1]), history)


def encode(image: np.ndarray, cb: Codebook) -> list[int]:
    """Nearest-centroid index per patch, row-major; ties go to the lowest index."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] % cb.patch_px or image.shape[1] % cb.patch_px:
        raise QuantizerError(f"image shape {image.shape} not divisible into {cb.patch_px}px patches")
    p = patchify(image[None], cb.patch_px)[0]
    return [int(i) for i in _sq_dists(p, cb.centroids.astype(np.float64)).argmin(1)]


def decode(tokens: Sequence[int], cb: Codebook, image_px: int = 32) -> np.ndarray:
    grid = image_px // cb.patch_px
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape != (grid * grid,):
        raise QuantizerError(f"expected {grid * grid} tokens, got {tokens.shape[0] if tokens.ndim else 0}")
    if tokens.min() < 0 or tokens.max() >= cb.k:
        raise QuantizerError(f"code index outside [0, {cb.k})")
    return np.clip(unpatchify(cb.centroids[tokens][None], cb.patch_px, image_px, image_px)[0], 0, 1)


def save_codebook(path: str | Path, cb: Codebook) -> None:
    body = np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes()
    Path(path).write_bytes(MAGIC + struct.pack("<III", VERSION, cb.k, cb.patch_px) + body)


def load_codebook(path: str | Path) -> Codebook:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise QuantizerError(f"{path}: bad magic {raw[:4]!r}")
    version, k, patch = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise QuantizerError(f"{path}: unsupported codebook version {version}")
    dim = patch * patch * 3
    if len(raw) != 16 + 4 * k * dim:
        raise QuantizerError(f"{path}: size does not match K={k}, patch={patch}")
    c = np.frombuffer(raw, dtype="<f4", offset=16).reshape(k, dim)
    return Codebook(c.astype(np.float32), patch)
