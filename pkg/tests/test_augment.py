"""Augmentation ops and worst-case variant selection."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fusionlab import augment as A
from fusionlab.models import MemlModel, MlpFeatures
from fusionlab.rng import seed_stream


def tiny_model(num_classes=3, seed=0):
    model = MemlModel(MlpFeatures(16, [6]), head_hidden=None)
    params = model.init_params(seed_stream(seed, "init"), num_classes)
    return model, params


class TestFlips:
    def test_horizontal_reverses_columns(self):
        img = np.array([[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]])
        np.testing.assert_array_equal(
            A.horizontal_flip(img), [[[3.0, 2.0, 1.0], [6.0, 5.0, 4.0]]]
        )

    def test_vertical_reverses_rows(self):
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_array_equal(A.vertical_flip(img), [[[3.0, 4.0], [1.0, 2.0]]])

    @given(st.integers(0, 2**32 - 1))
    def test_involution(self, seed):
        img = np.random.default_rng(seed).random((1, 4, 5))
        np.testing.assert_array_equal(A.horizontal_flip(A.horizontal_flip(img)), img)
        np.testing.assert_array_equal(A.vertical_flip(A.vertical_flip(img)), img)


class TestColorJitter:
    def test_identity(self):
        img = np.random.default_rng(0).random((1, 3, 3))
        np.testing.assert_allclose(A.color_jitter(img, 0.0, 1.0), img)

    def test_contrast_about_mean(self):
        img = np.array([[[0.0, 1.0]]])  # mean 0.5
        np.testing.assert_allclose(A.color_jitter(img, 0.0, 0.5), [[[0.25, 0.75]]])

    def test_brightness_shift(self):
        img = np.full((1, 2, 2), 0.5)
        np.testing.assert_allclose(A.color_jitter(img, 0.1, 1.0), np.full((1, 2, 2), 0.6))

    def test_clipped(self):
        img = np.array([[[0.0, 1.0]]])
        out = A.color_jitter(img, 0.5, 2.0)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestTranslate:
    def test_known_shift(self):
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_array_equal(
            A.translate_image(img, 1, 0), [[[0.0, 0.0], [1.0, 2.0]]]
        )
        np.testing.assert_array_equal(
            A.translate_image(img, 0, -1), [[[2.0, 0.0], [4.0, 0.0]]]
        )

    def test_shift_beyond_size_zeroes(self):
        img = np.ones((1, 2, 2))
        np.testing.assert_array_equal(A.translate_image(img, 5, 0), np.zeros((1, 2, 2)))

    def test_zero_shift_identity(self):
        img = np.random.default_rng(1).random((2, 3, 3))
        np.testing.assert_array_equal(A.translate_image(img, 0, 0), img)

    def test_random_crop_pad_bounded(self):
        rng = seed_stream(0, "shift")
        img = np.ones((1, 5, 5))
        out = A.random_crop_pad(img, 2, rng)
        assert out.shape == img.shape
        assert out.max() <= 1.0 and out.min() >= 0.0


class TestStrategies:
    def test_strategy_one_is_double_flip(self):
        batch = np.random.default_rng(2).random((3, 1, 4, 4))
        out = A.apply_strategy(batch, 1, seed_stream(0, "s"))
        np.testing.assert_array_equal(out, A.horizontal_flip(A.vertical_flip(batch)))

    def test_strategy_two_stays_in_range(self):
        batch = np.random.default_rng(3).random((4, 1, 4, 4))
        out = A.apply_strategy(batch, 2, seed_stream(1, "s"))
        assert out.shape == batch.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_strategy_three_preserves_shape(self):
        batch = np.random.default_rng(4).random((2, 1, 6, 6))
        out = A.apply_strategy(batch, 3, seed_stream(2, "s"))
        assert out.shape == batch.shape

    def test_unknown_strategy(self):
        with pytest.raises(ValueError, match="strategy"):
            A.apply_strategy(np.zeros((1, 1, 2, 2)), 4, seed_stream(0, "s"))

    def test_deterministic_given_stream(self):
        batch = np.random.default_rng(5).random((3, 1, 5, 5))
        a = A.apply_strategy(batch, 3, seed_stream(9, "s"))
        b = A.apply_strategy(batch, 3, seed_stream(9, "s"))
        np.testing.assert_array_equal(a, b)


class TestMemlxSelect:
    def episode(self, seed=0):
        rng = np.random.default_rng(seed)
        support = rng.random((5, 1, 4, 4))
        query = rng.random((7, 1, 4, 4))
        query_labels = rng.integers(0, 3, size=7)
        return support, query, query_labels

    def test_choices_attain_max_loss(self):
        model, params = tiny_model()
        support, query, qlabels = self.episode()
        sel = A.memlx_select(model, params, support, 1, query, qlabels, 3, seed_stream(0, "m"))
        assert sel.support_losses[sel.support_choice] == sel.support_losses.max()
        assert sel.query_losses[sel.query_choice] == sel.query_losses.max()
        # ties (and the argmax itself) resolve to the lowest index
        assert sel.support_choice == int(np.argmax(sel.support_losses))

    def test_returned_images_match_reported_loss(self):
        import fusionlab.tensor as T

        model, params = tiny_model(seed=3)
        support, query, qlabels = self.episode(seed=4)
        sel = A.memlx_select(model, params, support, 2, query, qlabels, 3, seed_stream(1, "m"))
        feats = model.features(params, sel.support_images)
        _, pooled = model.attention_pool(params, feats)
        loss = float(T.cross_entropy(model.head_logits(params, pooled), np.array([2])).data)
        np.testing.assert_allclose(loss, sel.support_losses[sel.support_choice], rtol=1e-12)

    def test_params_not_mutated(self):
        model, params = tiny_model(seed=5)
        before = {k: v.data.tobytes() for k, v in params.items()}
        support, query, qlabels = self.episode(seed=6)
        A.memlx_select(model, params, support, 0, query, qlabels, 3, seed_stream(2, "m"))
        after = {k: v.data.tobytes() for k, v in params.items()}
        assert before == after

    def test_m_one_uses_first_strategy(self):
        model, params = tiny_model(seed=7)
        support, query, qlabels = self.episode(seed=8)
        sel = A.memlx_select(model, params, support, 0, query, qlabels, 1, seed_stream(3, "m"))
        np.testing.assert_array_equal(
            sel.support_images, A.horizontal_flip(A.vertical_flip(support))
        )
        assert sel.support_choice == 0

    def test_m_must_be_positive(self):
        model, params = tiny_model()
        support, query, qlabels = self.episode()
        with pytest.raises(ValueError, match="m >= 1"):
            A.memlx_select(model, params, support, 0, query, qlabels, 0, seed_stream(0, "m"))

    def test_deterministic(self):
        model, params = tiny_model(seed=9)
        support, query, qlabels = self.episode(seed=10)
        a = A.memlx_select(model, params, support, 1, query, qlabels, 3, seed_stream(4, "m"))
        b = A.memlx_select(model, params, support, 1, query, qlabels, 3, seed_stream(4, "m"))
        np.testing.assert_array_equal(a.support_images, b.support_images)
        np.testing.assert_array_equal(a.support_losses, b.support_losses)


class TestSelectWorstBatch:
    def test_choice_attains_max(self):
        model, params = tiny_model(seed=11)
        rng = np.random.default_rng(12)
        images = rng.random((6, 1, 4, 4))
        labels = rng.integers(0, 3, size=6)
        sel = A.select_worst_batch(model, params, images, labels, 3, seed_stream(5, "b"))
        assert sel.losses[sel.choice] == sel.losses.max()
        assert sel.images.shape == images.shape
