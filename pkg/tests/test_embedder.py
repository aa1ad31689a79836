"""Tests for the two-layer normalized embedder and its hand-written gradients."""

import numpy as np
import pytest

from conftest import TINY_TRAIN
from xmodal_uap.core import SeededRng, finite_diff_input_grad
from xmodal_uap.embedder import (
    EMBEDDING_DIM,
    TrainConfig,
    forward,
    forward_batch,
    init_params,
    input_gradient,
    load_checkpoint,
    save_checkpoint,
    train,
)
from xmodal_uap.errors import ArgumentError, StorageError


SHAPE = (3, 12, 8)


def _params(seed=21, shape=SHAPE):
    return init_params(shape, seed)


def _image(seed=0, shape=SHAPE):
    return SeededRng(seed).uniform(0.0, 255.0, size=shape)


def _forward_oracle(p, img):
    """Re-derive the forward pass from the layer formulas in float64."""
    x = np.asarray(img, dtype=np.float64).reshape(-1) / 255.0
    z1 = x @ p.w1.astype(np.float64).T + p.b1.astype(np.float64)
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ p.w2.astype(np.float64).T + p.b2.astype(np.float64)
    norm = max(float(np.linalg.norm(z2)), 1e-12)
    return z2 / norm


class TestForward:
    def test_unit_norm_over_many_inputs(self):
        p = _params()
        rows = SeededRng(4).uniform(0.0, 255.0, size=(1000, int(np.prod(SHAPE))))
        y, _ = forward_batch(p, rows)
        norms = np.linalg.norm(y, axis=1)
        np.testing.assert_allclose(norms, np.ones(1000), atol=1e-12)

    def test_deterministic(self):
        p = _params()
        img = _image(1)
        np.testing.assert_array_equal(forward(p, img), forward(p, img))

    def test_sensitive_to_one_pixel(self):
        p = _params()
        img = _image(2)
        bumped = img.copy()
        bumped[0, 0, 0] = min(255.0, bumped[0, 0, 0] + 10.0)
        assert not np.array_equal(forward(p, img), forward(p, bumped))

    def test_matches_formula_oracle(self):
        p = _params()
        for seed in range(10):
            img = _image(seed)
            np.testing.assert_allclose(
                forward(p, img), _forward_oracle(p, img), atol=1e-12
            )

    def test_embedding_dim(self):
        p = _params()
        assert forward(p, _image()).shape == (EMBEDDING_DIM,)

    def test_shape_mismatch_rejected(self):
        p = _params()
        with pytest.raises(ArgumentError):
            forward(p, np.zeros((3, 5, 5)))

    def test_batch_shape_mismatch_rejected(self):
        p = _params()
        with pytest.raises(ArgumentError):
            forward_batch(p, np.zeros((4, 17)))


class TestInputGradient:
    def test_matches_finite_difference(self):
        p = _params()
        rng = SeededRng(31)
        checked = 0
        for case in range(20):
            img = rng.uniform(5.0, 250.0, size=SHAPE)
            u = rng.normal(size=EMBEDDING_DIM)
            grad = input_gradient(p, img, u)

            def scalar(t):
                return float(np.dot(u, forward(p, t)))

            fd = finite_diff_input_grad(scalar, img, h=1e-2)
            denom = max(float(np.linalg.norm(fd)), 1e-12)
            rel = float(np.linalg.norm(grad - fd)) / denom
            assert rel < 1e-3, f"case {case}: rel error {rel}"
            checked += 1
        assert checked == 20

    def test_zero_upstream_gives_zero(self):
        p = _params()
        grad = input_gradient(p, _image(3), np.zeros(EMBEDDING_DIM))
        np.testing.assert_array_equal(grad, np.zeros(SHAPE))

    def test_linear_in_upstream(self):
        p = _params()
        img = _image(5)
        rng = SeededRng(6)
        u = rng.normal(size=EMBEDDING_DIM)
        v = rng.normal(size=EMBEDDING_DIM)
        combined = input_gradient(p, img, 2.0 * u + 3.0 * v)
        separate = 2.0 * input_gradient(p, img, u) + 3.0 * input_gradient(p, img, v)
        np.testing.assert_allclose(combined, separate, atol=1e-6)

    def test_upstream_shape_checked(self):
        p = _params()
        with pytest.raises(ArgumentError):
            input_gradient(p, _image(), np.zeros(EMBEDDING_DIM + 1))


class TestTrain:
    def test_loss_decreases(self, tiny_ds, tiny_params):
        losses = tiny_params.train_losses
        assert len(losses) == TINY_TRAIN.epochs
        assert losses[-1] < losses[0]

    def test_deterministic(self, tiny_ds):
        a = train(tiny_ds, TINY_TRAIN)
        b = train(tiny_ds, TINY_TRAIN)
        assert a.fingerprint() == b.fingerprint()
        np.testing.assert_array_equal(a.w1, b.w1)
        np.testing.assert_array_equal(a.b2, b.b2)

    def test_seed_changes_weights(self, tiny_ds):
        from dataclasses import replace

        a = train(tiny_ds, TINY_TRAIN)
        b = train(tiny_ds, replace(TINY_TRAIN, seed=TINY_TRAIN.seed + 1))
        assert a.fingerprint() != b.fingerprint()

    def test_infeasible_batch_rejected(self, tiny_ds):
        cfg = TrainConfig(epochs=1, batch_identities=50, images_per_identity=2,
                          seed=1)
        with pytest.raises(ArgumentError):
            train(tiny_ds, cfg)

    def test_training_separates_identities(self, tiny_ds, tiny_params):
        """After training, same-identity cross-modality pairs should sit
        closer than different-identity pairs on average."""
        rows = np.stack([r.pixels.reshape(-1) for r in tiny_ds.records])
        y, _ = forward_batch(tiny_params, rows)
        ids = np.array([r.identity_id for r in tiny_ds.records])
        same, diff = [], []
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                d = float(np.linalg.norm(y[i] - y[j]))
                (same if ids[i] == ids[j] else diff).append(d)
        assert np.mean(same) < np.mean(diff)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_params, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(tiny_params, path)
        back = load_checkpoint(path)
        assert back.fingerprint() == tiny_params.fingerprint()
        assert back.input_shape == tiny_params.input_shape
        np.testing.assert_array_equal(back.w1, tiny_params.w1)
        np.testing.assert_array_equal(back.b1, tiny_params.b1)
        np.testing.assert_array_equal(back.w2, tiny_params.w2)
        np.testing.assert_array_equal(back.b2, tiny_params.b2)

    def test_truncated_rejected(self, tiny_params, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(tiny_params, path)
        with open(path, "rb") as fh:
            raw = fh.read()
        with open(path, "wb") as fh:
            fh.write(raw[:-10])
        with pytest.raises(StorageError):
            load_checkpoint(path)
