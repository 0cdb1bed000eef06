import numpy as np
import pytest

from kdlab import checkpoint
from kdlab.nets import (
    Dense,
    HeadRetiredError,
    Projector,
    VarianceHead,
    build_convnet,
    build_mlp,
)
from kdlab.tensor import ShapeError, Tensor, no_grad


def test_identity_dense_embedding():
    rng = np.random.default_rng(0)
    net = build_mlp(rng, in_dim=2, width=2, depth=1, num_classes=2)
    net.trunk[0][1].weight.data = np.eye(2)
    net.trunk[0][1].bias.data = np.zeros(2)
    out = net.forward(Tensor([[1.0, 2.0]]), train=False)
    np.testing.assert_array_equal(out.embedding.data, [[1.0, 2.0]])


def test_zero_classifier_gives_uniform_softmax():
    rng = np.random.default_rng(0)
    net = build_mlp(rng, in_dim=3, width=4, depth=2, num_classes=5)
    net.classifier.weight.data = np.zeros_like(net.classifier.weight.data)
    net.classifier.bias.data = np.zeros_like(net.classifier.bias.data)
    out = net.forward(Tensor(np.random.default_rng(1).normal(size=(3, 3))), train=False)
    np.testing.assert_array_equal(out.logits.data, np.zeros((3, 5)))


def test_logits_shape_contract_and_taps():
    rng = np.random.default_rng(2)
    net = build_mlp(rng, in_dim=6, width=8, depth=3, num_classes=4)
    out = net.forward(Tensor(rng.normal(size=(4, 6))), train=False)
    assert out.logits.shape == (4, 4)
    assert out.embedding.shape == (4, 8)
    assert set(out.taps) == {"hidden1", "hidden2", "hidden3"}


def test_input_shape_mismatch_rejected():
    net = build_mlp(np.random.default_rng(0), in_dim=6, width=8, depth=1, num_classes=2)
    with pytest.raises(ShapeError):
        net.forward(Tensor(np.zeros((4, 5))))


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    net = build_mlp(rng, in_dim=5, width=16, depth=2, num_classes=3, batchnorm=True)
    x = Tensor(np.random.default_rng(4).normal(size=(8, 5)))
    a = net.forward(x, train=False).logits.data
    b = net.forward(x, train=False).logits.data
    np.testing.assert_array_equal(a, b)


def test_student_smaller_than_teacher():
    rng = np.random.default_rng(5)
    teacher = build_mlp(rng, in_dim=8, width=256, depth=4, num_classes=6)
    student = build_mlp(rng, in_dim=8, width=64, depth=4, num_classes=6)
    assert student.param_count() < teacher.param_count()


def test_convnet_taps_and_shapes():
    rng = np.random.default_rng(6)
    net = build_convnet(rng, in_shape=(1, 8, 8), channels=(4, 8), embedding_dim=16, num_classes=3)
    out = net.forward(Tensor(rng.normal(size=(2, 1, 8, 8))), train=False)
    assert out.taps["conv1"].shape == (2, 4, 8, 8)
    assert out.taps["conv2"].shape == (2, 8, 4, 4)
    assert out.embedding.shape == (2, 16)
    assert out.logits.shape == (2, 3)


class TestVarianceHead:
    def test_zero_projection_gives_unit_variance(self):
        rng = np.random.default_rng(7)
        head = VarianceHead(rng, embedding_dim=4, variance_dim=3)
        head.proj.weight.data = np.zeros_like(head.proj.weight.data)
        head.proj.bias.data = np.zeros_like(head.proj.bias.data)
        s = head.predict_log_variance(Tensor(rng.normal(size=(5, 4))))
        np.testing.assert_allclose(s.data, np.zeros((5, 3)), atol=1e-12)
        np.testing.assert_allclose(np.exp(s.data), np.ones((5, 3)))

    def test_identical_embeddings_give_identical_rows(self):
        rng = np.random.default_rng(8)
        head = VarianceHead(rng, embedding_dim=4, variance_dim=2)
        emb = np.tile(rng.normal(size=4), (6, 1))
        s = head.predict_log_variance(Tensor(emb)).data
        for row in s[1:]:
            np.testing.assert_allclose(row, s[0], atol=1e-12)

    def test_retired_head_rejects_prediction(self):
        head = VarianceHead(np.random.default_rng(9), embedding_dim=4, variance_dim=2)
        head.retire()
        with pytest.raises(HeadRetiredError):
            head.predict_log_variance(Tensor(np.zeros((3, 4))))

    def test_head_removal_does_not_change_inference(self):
        rng = np.random.default_rng(10)
        net = build_mlp(rng, in_dim=5, width=8, depth=2, num_classes=3)
        head = VarianceHead(rng, embedding_dim=8, variance_dim=8)
        x = Tensor(np.random.default_rng(11).normal(size=(4, 5)))
        with no_grad():
            before = net.forward(x, train=False)
            head.predict_log_variance(before.embedding, batch_stats=False)
            after = net.forward(x, train=False)
        np.testing.assert_array_equal(before.logits.data, after.logits.data)
        np.testing.assert_array_equal(before.embedding.data, after.embedding.data)


class TestProjector:
    def test_identity_when_dims_match(self):
        p = Projector.for_vectors(np.random.default_rng(0), 8, 8)
        x = Tensor(np.random.default_rng(1).normal(size=(3, 8)))
        assert p(x) is x
        assert p.parameters() == []

    def test_dense_projection_shape(self):
        p = Projector.for_vectors(np.random.default_rng(0), 4, 9)
        out = p(Tensor(np.zeros((3, 4))))
        assert out.shape == (3, 9)

    def test_feature_map_projection_shape(self):
        p = Projector.for_feature_maps(np.random.default_rng(0), 2, 5)
        out = p(Tensor(np.zeros((3, 2, 4, 4))))
        assert out.shape == (3, 5, 4, 4)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(12)
        arrays = [rng.normal(size=(3, 4)), rng.normal(size=7), np.array(2.5)]
        path = tmp_path / "state.ckpt"
        checkpoint.save_arrays(path, arrays)
        loaded = checkpoint.load_arrays(path)
        assert len(loaded) == 3
        for a, b in zip(arrays, loaded):
            np.testing.assert_array_equal(a, b)

    def test_identical_bytes_for_identical_state(self, tmp_path):
        rng = np.random.default_rng(13)
        net = build_mlp(rng, in_dim=4, width=8, depth=2, num_classes=3, batchnorm=True)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint.save_arrays(p1, net.state_arrays())
        checkpoint.save_arrays(p2, net.state_arrays())
        assert p1.read_bytes() == p2.read_bytes()

    def test_network_state_roundtrip(self, tmp_path):
        rng = np.random.default_rng(14)
        net = build_mlp(rng, in_dim=4, width=8, depth=2, num_classes=3, batchnorm=True)
        x = Tensor(np.random.default_rng(15).normal(size=(5, 4)))
        ref = net.forward(x, train=False).logits.data.copy()
        path = tmp_path / "net.ckpt"
        checkpoint.save_arrays(path, net.state_arrays())

        other = build_mlp(np.random.default_rng(99), in_dim=4, width=8, depth=2, num_classes=3, batchnorm=True)
        other.load_state_arrays(checkpoint.load_arrays(path))
        np.testing.assert_array_equal(other.forward(x, train=False).logits.data, ref)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        checkpoint.save_arrays(path, [np.ones((2, 2))])
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load_arrays(path)
