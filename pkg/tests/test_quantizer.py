import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmrec.quantizer import Codebook, QuantizerError, decode, encode, fit_codebook, load_codebook, save_codebook
from mmrec.vision import patchify, unpatchify


def _tiled(patches, grid=4, px=8):
    """Image whose row-major patches are ``patches`` (flat patch vectors)."""
    return unpatchify(np.asarray(patches)[None], px, grid * px, grid * px)[0]


def _distinct_patches(k, seed=0):
    return np.random.default_rng(seed).random((k, 192)).astype(np.float32)


def test_exact_clustering_of_k_distinct_patches():
    base = _distinct_patches(4)
    rng = np.random.default_rng(1)
    images = [_tiled(base[rng.integers(0, 4, 16)]) for _ in range(6)]
    images.append(_tiled(np.repeat(base, 4, axis=0)))
    cb = fit_codebook(images, k=4, seed=0)
    assert cb.inertia == pytest.approx(0.0, abs=1e-6)
    got = sorted(map(tuple, np.round(cb.centroids, 5)))
    assert got == sorted(map(tuple, np.round(base, 5)))


def test_fit_deterministic_and_monotone():
    rng = np.random.default_rng(0)
    images = list(rng.random((6, 32, 32, 3)))
    a = fit_codebook(images, k=8, seed=3)
    b = fit_codebook(images, k=8, seed=3)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert all(y <= x + 1e-9 for x, y in zip(a.history, a.history[1:]))
    assert a.iterations <= 50


def test_too_few_patches_rejected():
    img = np.zeros((32, 32, 3))
    with pytest.raises(QuantizerError):
        fit_codebook([img], k=2)
    with pytest.raises(QuantizerError):
        Codebook(np.zeros((1, 192)), 8)


def test_encode_tiled_and_round_trip():
    cb = Codebook(_distinct_patches(6), 8)
    codes = list(np.random.default_rng(2).integers(0, 6, 16))
    img = _tiled(cb.centroids[codes])
    assert encode(img, cb) == codes
    np.testing.assert_array_equal(decode(codes, cb), img)
    with pytest.raises(QuantizerError):
        decode(codes[:-1], cb)
    with pytest.raises(QuantizerError):
        decode([6] * 16, cb)
    with pytest.raises(QuantizerError):
        encode(np.zeros((30, 32, 3)), cb)


def test_ties_go_to_lowest_index():
    c = np.zeros((3, 192), np.float32)
    c[1] = 1.0
    c[2] = 1.0
    assert encode(np.ones((32, 32, 3)), Codebook(c, 8)) == [1] * 16


def test_round_trip_is_nearest_projection():
    cb = Codebook(_distinct_patches(5), 8)
    img = np.random.default_rng(4).random((32, 32, 3))
    p = patchify(img[None], 8)[0]
    nearest = ((p[:, None, :] - cb.centroids[None].astype(np.float64)) ** 2).sum(-1).argmin(1)
    np.testing.assert_allclose(decode(encode(img, cb), cb), _tiled(cb.centroids[nearest]), atol=0)


def test_nearest_assignment_beats_every_relabeling():
    cb = Codebook(_distinct_patches(4, seed=5), 8)
    img = np.random.default_rng(6).random((32, 32, 3))
    codes = np.array(encode(img, cb))
    best = ((decode(codes, cb) - img) ** 2).mean()
    for perm in itertools.permutations(range(4)):
        alt = np.array(perm)[codes]
        assert best <= ((decode(alt, cb) - img) ** 2).mean() + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=16, max_size=16))
def test_encode_decode_idempotent(tokens):
    cb = Codebook(np.clip(_distinct_patches(8, seed=9), 0, 1), 8)
    assert encode(decode(tokens, cb), cb) == tokens


def test_fit_beats_random_codebooks(tiny_world):
    images = [tiny_world.image(it.image_ref) for it in tiny_world.items]
    cb = fit_codebook(images, k=16, seed=0)

    def mse(book):
        return float(np.mean([((decode(encode(im, book), book) - im) ** 2).mean() for im in images]))

    rng = np.random.default_rng(0)
    chance = [mse(Codebook(rng.random((16, 192)), 8)) for _ in range(20)]
    assert mse(cb) <= np.percentile(chance, 95)


def test_save_load(tmp_path):
    cb = Codebook(_distinct_patches(3), 8)
    save_codebook(tmp_path / "c.umvq", cb)
    back = load_codebook(tmp_path / "c.umvq")
    np.testing.assert_array_equal(back.centroids, cb.centroids)
    raw = (tmp_path / "c.umvq").read_bytes()
    (tmp_path / "bad.umvq").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(QuantizerError):
        load_codebook(tmp_path / "bad.umvq")
    (tmp_path / "short.umvq").write_bytes(raw[:-4])
    with pytest.raises(QuantizerError):
        load_codebook(tmp_path / "short.umvq")
