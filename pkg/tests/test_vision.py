import numpy as np
import pytest

from mmrec.vision import VisionPath, encode_history_images, patchify, read_ppm, unpatchify, write_ppm


def _vision(slots=4, seed=0, **kw):
    return VisionPath(np.random.default_rng(seed), d=16, d_v=8, layers=1, heads=2, slots=slots, **kw)


def _images(n, seed=0):
    return np.random.default_rng(seed).random((n, 32, 32, 3)).astype(np.float32)


def test_patch_count_and_shapes():
    v = _vision()
    assert v.patch_encode(_images(1)).shape == (1, 16, 8)
    assert v(_images(5)).shape == (5, 4, 16)
    assert encode_history_images(v, []).shape == (0, 4, 16)
    assert encode_history_images(v, list(_images(5))).shape == (5, 4, 16)
    with pytest.raises(ValueError):
        v.patch_encode(np.zeros((1, 16, 16, 3)))
    with pytest.raises(ValueError):
        VisionPath(np.random.default_rng(0), d=16, image_px=30, patch_px=8)


def test_patchify_round_trip():
    x = _images(2)
    p = patchify(x, 8)
    assert p.shape == (2, 16, 192)
    np.testing.assert_array_equal(p[0, 1], x[0, 0:8, 8:16].reshape(-1))
    np.testing.assert_array_equal(unpatchify(p, 8, 32, 32), x)


def test_zero_image_projects_to_zero():
    v = _vision()
    v.proj.b.data[:] = 0
    v.pos.data[:] = 0
    v.blocks = []
    proj = v.proj
    from mmrec import tensor as T

    with T.no_grad():
        out = proj(T.Tensor(patchify(np.zeros((1, 32, 32, 3), np.float32), 8)))
    assert np.all(out.data == 0)


def test_one_patch_change_moves_that_feature():
    v = _vision()
    from mmrec import tensor as T

    a = _images(1)
    b = a.copy()
    b[0, 8:16, 16:24] = 1 - b[0, 8:16, 16:24]
    with T.no_grad():
        pa = v.proj(T.Tensor(patchify(a, 8))).data[0]
        pb = v.proj(T.Tensor(patchify(b, 8))).data[0]
    changed = np.where(np.any(pa != pb, axis=1))[0]
    assert list(changed) == [1 * 4 + 2]


def test_permutation_invariance_without_positions():
    from mmrec import tensor as T

    v = _vision()
    v.use_pos = False
    x = _images(1)
    with T.no_grad():
        feats = v.patch_encode(x)
        perm = np.random.default_rng(1).permutation(16)
        permuted = T.Tensor(feats.data[:, perm])
        np.testing.assert_allclose(v.resample(permuted).data, v.resample(feats).data, atol=1e-6)
        # with positions on, patch order matters
        v.use_pos = True
        shuffled = unpatchify(patchify(x, 8)[:, perm], 8, 32, 32)
        assert not np.allclose(v(shuffled).data, v(x).data, atol=1e-6)


def test_single_slot():
    v = _vision(slots=1)
    assert encode_history_images(v, list(_images(3))).shape == (3, 1, 16)


def test_duplicates_and_joint_encoding():
    v = _vision()
    imgs = list(_images(4))
    imgs.append(imgs[1])
    joint = encode_history_images(v, imgs)
    np.testing.assert_array_equal(joint[1], joint[4])
    for i, img in enumerate(imgs):
        np.testing.assert_allclose(encode_history_images(v, [img])[0], joint[i], atol=1e-6)
    assert np.all(np.isfinite(joint))


def test_ppm_round_trip(tmp_path):
    img = np.round(_images(1)[0] * 255) / 255
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.dtype == np.float32 and back.shape == (32, 32, 3)
    np.testing.assert_allclose(back, img, atol=1e-6)
    (tmp_path / "b.ppm").write_bytes(b"P6\n# comment\n2 1\n255\n" + bytes([0, 128, 255, 255, 0, 0]))
    np.testing.assert_allclose(read_ppm(tmp_path / "b.ppm")[0, 0], [0, 128 / 255, 1], atol=1e-7)
    (tmp_path / "c.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "c.ppm")
