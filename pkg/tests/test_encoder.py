import numpy as np
import pytest

from tsdlab.encoder import EncoderConfig, ViTEncoder, encode, extract_patches
from tsdlab.gradcheck import gradcheck
from tsdlab.tensor import Tensor, concat


def tiny(**kw):
    base = dict(image_h=8, image_w=8, patch_size=4, stride=4, depth=1, heads=2, dim=8, ffn_dim=16)
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestGrid:
    def test_default_grid(self):
        cfg = EncoderConfig()
        assert cfg.grid == (16, 8) and cfg.num_patches == 128

    def test_overlapping_stride(self):
        cfg = EncoderConfig(stride=12)
        assert cfg.grid == (21, 10) and cfg.num_patches == 210

    def test_oversized_patch_rejected(self):
        with pytest.raises(ValueError):
            EncoderConfig(image_h=8, image_w=8, patch_size=16)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            EncoderConfig(dim=10, heads=4)

    def test_patches_row_major(self):
        cfg = tiny()
        img = np.arange(3 * 8 * 8, dtype=float).reshape(1, 3, 8, 8)
        patches = extract_patches(img, cfg)
        assert patches.shape == (1, 4, 48)
        # second patch is the top-right block of channel 0
        np.testing.assert_array_equal(patches[0, 1, :16].reshape(4, 4), img[0, 0, :4, 4:])

    def test_overlapping_patch_count(self, rng):
        cfg = tiny(image_h=16, image_w=10, patch_size=4, stride=3)
        assert extract_patches(rng.normal(size=(2, 3, 16, 10)), cfg).shape == (2, cfg.num_patches, 48)


class TestEncode:
    def test_shapes(self, rng):
        cfg = EncoderConfig(image_h=256, image_w=128, stride=12, depth=1, heads=2, dim=8, ffn_dim=8)
        out = ViTEncoder(cfg, rng)(np.zeros((3, 256, 128)))
        assert out.global_.shape == (8,)
        assert out.patches.shape == (210, 8)
        assert out.grid == (21, 10)

    def test_batched_shapes(self, rng):
        cfg = tiny()
        out = encode(rng.normal(size=(5, 3, 8, 8)), ViTEncoder(cfg, rng))
        assert out.global_.shape == (5, 8) and out.patches.shape == (5, 4, 8)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            ViTEncoder(tiny(), rng)(np.zeros((3, 8, 12)))

    def test_zero_image_propagates_position_embedding(self, rng):
        enc = ViTEncoder(tiny(), rng)
        enc.patch_embed.weight.data[...] = 0.0
        out = enc(np.zeros((1, 3, 8, 8)))
        x = concat([enc.cls_token, Tensor(np.zeros((1, 4, 8)))], axis=1) + enc.pos_embed
        for block in enc.blocks:
            x = block(x)
        expected = enc.norm(x).data
        assert expected.shape == (1, 5, 8)
        np.testing.assert_array_equal(out.global_.data, expected[:, 0])
        np.testing.assert_array_equal(out.patches.data, expected[:, 1:])

    def test_token_equivariance(self, rng):
        enc = ViTEncoder(tiny(depth=2), rng)
        vecs = rng.normal(size=(1, 4, 48))
        perm = np.array([0, 2, 1, 3])                 # swap patches 1 and 2
        pos_perm = enc.pos_embed.data[:, np.concatenate([[0], perm + 1])]
        base = enc.tokens(Tensor(vecs)).data
        swapped = enc.tokens(Tensor(vecs[:, perm]), Tensor(pos_perm)).data
        np.testing.assert_allclose(swapped[:, 1:], base[:, 1:][:, perm], atol=1e-12)
        np.testing.assert_allclose(swapped[:, 0], base[:, 0], atol=1e-12)

    def test_deterministic(self, rng):
        cfg = tiny()
        img = rng.normal(size=(2, 3, 8, 8))
        a = ViTEncoder(cfg, np.random.default_rng(3))(img).patches.data
        b = ViTEncoder(cfg, np.random.default_rng(3))(img).patches.data
        assert a.tobytes() == b.tobytes()

    def test_gradcheck_depth1_d8(self, rng):
        enc = ViTEncoder(tiny(), rng)
        img = rng.normal(size=(2, 3, 8, 8))
        wg, wp = rng.normal(size=(2, 8)), rng.normal(size=(2, 4, 8))

        def fn():
            out = enc(img)
            return (out.global_ * Tensor(wg)).sum() + (out.patches * Tensor(wp)).sum()
        for r in gradcheck(fn, list(enc.named_parameters())):
            assert r.rel_error < 1e-4, r
