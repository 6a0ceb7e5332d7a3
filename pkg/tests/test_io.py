import math

import numpy as np
import pytest

from tsdlab import checkpoint
from tsdlab.embeddings import load_embeddings, save_embeddings
from tsdlab.labels import Occlusion
from tsdlab.matching import EmbeddingSet
from tsdlab.model import RunConfig, TSDModel
from tsdlab.optim import SGD, cosine_lr, sgd_step
from tsdlab.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(9)


class TestCheckpoint:
    def test_round_trip(self, rng):
        tensors = {"a": rng.normal(size=(2, 3)), "b.c": np.arange(4.0), "scalar": np.array(1.5)}
        out = checkpoint.loads(checkpoint.dumps(tensors))
        assert list(out) == list(tensors)
        for k in tensors:
            assert out[k].shape == np.shape(tensors[k])
            np.testing.assert_array_equal(out[k], tensors[k])

    def test_header(self):
        blob = checkpoint.dumps({"x": np.ones(1)})
        assert blob[:8] == checkpoint.MAGIC
        assert int.from_bytes(blob[8:12], "little") == checkpoint.VERSION

    def test_bad_magic(self):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(b"NOTATENS" + bytes(8))

    def test_truncated(self):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(checkpoint.dumps({"x": np.ones(10)})[:-8])

    def test_model_state_round_trip(self, tmp_path):
        cfg = RunConfig.toy(parts=2)
        a, b = TSDModel(cfg, 4, np.random.default_rng(0)), TSDModel(cfg, 4, np.random.default_rng(1))
        a.head_global.running_mean[...] = 0.25
        checkpoint.save(tmp_path / "m.tsdt", a.state_dict())
        b.load_state_dict(checkpoint.load(tmp_path / "m.tsdt"))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)
        assert (b.head_global.running_mean == 0.25).all()
        assert all(k.startswith(("encoder.", "decoder.", "head_", "mask_generator.")) for k in a.state_dict())


class TestEmbeddings:
    def test_round_trip(self, tmp_path, rng):
        emb = EmbeddingSet(["a", "b"], np.array([1, 2]), np.array([0, 3]),
                           [Occlusion.NPO, Occlusion.HOLISTIC], rng.normal(size=(2, 4)),
                           rng.normal(size=(2, 3, 4)), rng.random((2, 3)))
        index = save_embeddings(tmp_path / "e.tsdt", emb)
        assert index.suffix == ".tsv"
        back = load_embeddings(tmp_path / "e.tsdt")
        assert back.image_ids == emb.image_ids and back.occlusion == emb.occlusion
        np.testing.assert_array_equal(back.parts, emb.parts)
        np.testing.assert_array_equal(back.visibility, emb.visibility)

    def test_global_only(self, tmp_path, rng):
        emb = EmbeddingSet(["a"], np.array([1]), np.array([0]), [Occlusion.NTP], rng.normal(size=(1, 4)))
        save_embeddings(tmp_path / "e.tsdt", emb)
        back = load_embeddings(tmp_path / "e.tsdt")
        assert back.parts is None and back.visibility is None

    def test_plain_checkpoint_rejected(self, tmp_path):
        checkpoint.save(tmp_path / "x.tsdt", {"global": np.ones((1, 2))})
        with pytest.raises(checkpoint.CheckpointError):
            load_embeddings(tmp_path / "x.tsdt")


class TestSGD:
    def test_vanilla_step(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        p.grad = np.array([0.5, 1.0])
        SGD([p], lr=0.1, momentum=0.0, weight_decay=0.0).step()
        np.testing.assert_allclose(p.data, [0.95, -2.1])

    def test_momentum_velocity(self):
        p = Tensor([0.0], requires_grad=True)
        opt = SGD([p], lr=1.0, momentum=0.9, weight_decay=0.0)
        for _ in range(2):
            p.grad = np.array([2.0])
            opt.step()
        np.testing.assert_allclose(opt.velocity(0), 1.9 * 2.0)
        np.testing.assert_allclose(p.data, -(2.0 + 3.8))

    def test_weight_decay_folded(self):
        p = Tensor([2.0], requires_grad=True)
        p.grad = np.array([0.0])
        SGD([p], lr=0.5, momentum=0.0, weight_decay=0.1).step()
        np.testing.assert_allclose(p.data, 2.0 - 0.5 * 0.2)

    def test_functional_matches_class(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=True)
        b = Tensor(a.data.copy(), requires_grad=True)
        opt = SGD([a])
        vel = [None]
        for _ in range(3):
            g = rng.normal(size=3)
            a.grad = g
            opt.step()
            sgd_step([b], [g], vel)
        np.testing.assert_allclose(a.data, b.data, rtol=1e-15)

    def test_defaults(self):
        opt = SGD([])
        assert (opt.lr, opt.momentum, opt.weight_decay) == (0.004, 0.9, 1e-4)

    def test_bad_lr(self):
        with pytest.raises(ValueError):
            SGD([], lr=0.0)


class TestCosineLR:
    @pytest.mark.parametrize("epoch", [0, 1, 30, 60, 119, 120])
    def test_formula(self, epoch):
        assert cosine_lr(0.004, epoch, 120) == pytest.approx(0.004 * 0.5 * (1 + math.cos(math.pi * epoch / 120)))

    def test_endpoints(self):
        assert cosine_lr(1.0, 0, 10) == 1.0 and cosine_lr(1.0, 10, 10) == pytest.approx(0.0, abs=1e-16)
        assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
