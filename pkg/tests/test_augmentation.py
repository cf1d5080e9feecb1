import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volcon.augmentation import (
    AugmentationPolicy,
    apply_pipeline,
    color_jitter,
    denormalize,
    derive_rng,
    horizontal_flip,
    make_view_pair,
    normalize,
    random_resized_crop,
)
from volcon.errors import ConfigError, DataError
from volcon.volume_data import CrossLineSlice


def identity_policy(size=8):
    return AugmentationPolicy(
        crop_size=size,
        crop_scale=(1.0, 1.0),
        flip_probability=0.0,
        jitter_brightness=0.0,
        jitter_contrast=0.0,
        normalization=(0.0, 1.0),
        mode="contrastive",
    )


class TestRandomResizedCrop:
    def test_full_scale_crop_is_identity_on_matching_square(self):
        rng = np.random.default_rng(0)
        img = rng.normal(size=(16, 16))
        out = random_resized_crop(img, 16, (1.0, 1.0), np.random.default_rng(1))
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_output_shape_is_always_square(self):
        rng = np.random.default_rng(2)
        img = rng.normal(size=(40, 70))
        for _ in range(10):
            out = random_resized_crop(img, 224, (0.2, 1.0), rng)
            assert out.shape == (224, 224)

    def test_constant_input_stays_constant(self):
        img = np.full((10, 14), 3.25)
        out = random_resized_crop(img, 7, (0.3, 0.8), np.random.default_rng(3))
        np.testing.assert_allclose(out, 3.25, atol=1e-12)

    def test_values_stay_within_input_hull(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(-2.0, 5.0, size=(12, 20))
        out = random_resized_crop(img, 9, (0.2, 1.0), rng)
        assert out.min() >= img.min() - 1e-12
        assert out.max() <= img.max() + 1e-12

    def test_too_small_input_rejected(self):
        with pytest.raises(DataError):
            random_resized_crop(np.ones((1, 5)), 4, (0.5, 1.0), np.random.default_rng(0))

    def test_bad_scale_range_rejected(self):
        img = np.ones((4, 4))
        for bad in [(0.0, 1.0), (0.5, 0.2), (0.5, 1.5)]:
            with pytest.raises(ConfigError):
                random_resized_crop(img, 4, bad, np.random.default_rng(0))


class TestHorizontalFlip:
    def test_probability_zero_is_identity(self):
        img = np.arange(6.0).reshape(2, 3)
        out = horizontal_flip(img, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, img)

    def test_probability_one_twice_is_identity(self):
        img = np.arange(8.0).reshape(2, 4)
        rng = np.random.default_rng(1)
        out = horizontal_flip(horizontal_flip(img, 1.0, rng), 1.0, rng)
        np.testing.assert_array_equal(out, img)

    def test_flip_reverses_w_axis(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = horizontal_flip(img, 1.0, np.random.default_rng(2))
        np.testing.assert_array_equal(out, [[2.0, 1.0], [4.0, 3.0]])

    def test_bad_probability_rejected(self):
        with pytest.raises(ConfigError):
            horizontal_flip(np.ones((2, 2)), 1.5, np.random.default_rng(0))


class TestColorJitter:
    def test_zero_strengths_identity(self):
        img = np.linspace(-1.0, 1.0, 12).reshape(3, 4)
        out = color_jitter(img, 0.0, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, img)

    def test_contrast_scales_std_of_zero_mean_image(self):
        img = np.array([[-1.0, 1.0], [1.0, -1.0]])  # exactly zero mean
        seed = 5
        factor = np.random.default_rng(seed).uniform(1.0 - 0.5, 1.0 + 0.5)
        out = color_jitter(img, 0.0, 0.5, np.random.default_rng(seed))
        assert out.std() == pytest.approx(factor * img.std(), rel=1e-12)

    def test_jitter_then_renormalize_is_standardized(self):
        rng = np.random.default_rng(6)
        img = rng.normal(2.0, 3.0, size=(16, 16))
        jittered = color_jitter(img, 0.6, 0.6, rng)
        restandardized = normalize(jittered, jittered.mean(), jittered.std())
        assert restandardized.mean() == pytest.approx(0.0, abs=1e-12)
        assert restandardized.std() == pytest.approx(1.0, rel=1e-12)

    def test_negative_strengths_rejected(self):
        with pytest.raises(ConfigError):
            color_jitter(np.ones((2, 2)), -0.1, 0.0, np.random.default_rng(0))


class TestNormalize:
    def test_image_equal_to_mean_goes_to_zero(self):
        out = normalize(np.full((3, 3), 7.0), 7.0, 2.0)
        np.testing.assert_array_equal(out, 0.0)

    def test_mean_zero_std_one_is_identity(self):
        img = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(normalize(img, 0.0, 1.0), img)

    def test_normalize_inverts_denormalize(self):
        rng = np.random.default_rng(7)
        img = rng.normal(size=(6, 6))
        roundtrip = normalize(denormalize(img, 1.7, 0.4), 1.7, 0.4)
        np.testing.assert_allclose(roundtrip, img, atol=1e-6)

    @pytest.mark.parametrize("bad_std", [0.0, -1.0])
    def test_non_positive_std_rejected(self, bad_std):
        with pytest.raises(ConfigError):
            normalize(np.ones((2, 2)), 0.0, bad_std)


class TestViewPairs:
    def test_identity_policy_reproduces_input(self):
        img = np.random.default_rng(8).normal(size=(8, 8))
        slice_ = CrossLineSlice(image=img, crossline_index=3)
        pair = make_view_pair(slice_, identity_policy(8), np.random.default_rng(0))
        np.testing.assert_allclose(pair.view_a, img, atol=1e-12)
        np.testing.assert_allclose(pair.view_b, img, atol=1e-12)
        assert pair.source_slice_index == 3

    def test_same_seed_gives_identical_pairs(self):
        img = np.random.default_rng(9).normal(size=(12, 20))
        slice_ = CrossLineSlice(image=img, crossline_index=5)
        policy = AugmentationPolicy(crop_size=8, normalization=(0.0, 1.0))
        pair1 = make_view_pair(slice_, policy, derive_rng(123, 0, 5))
        pair2 = make_view_pair(slice_, policy, derive_rng(123, 0, 5))
        np.testing.assert_array_equal(pair1.view_a, pair2.view_a)
        np.testing.assert_array_equal(pair1.view_b, pair2.view_b)

    def test_views_differ_under_randomness(self):
        img = np.random.default_rng(10).normal(size=(16, 16))
        slice_ = CrossLineSlice(image=img, crossline_index=0)
        policy = AugmentationPolicy(crop_size=8, normalization=(0.0, 1.0))
        pair = make_view_pair(slice_, policy, np.random.default_rng(11))
        assert not np.array_equal(pair.view_a, pair.view_b)

    def test_wrong_mode_rejected(self):
        slice_ = CrossLineSlice(image=np.ones((4, 4)), crossline_index=0)
        policy = AugmentationPolicy(mode="eval")
        with pytest.raises(ConfigError):
            make_view_pair(slice_, policy, np.random.default_rng(0))


class TestPipelines:
    @given(seed=st.integers(0, 1_000_000))
    @settings(max_examples=30, deadline=None)
    def test_identically_seeded_pipelines_match(self, seed):
        img = np.random.default_rng(12).normal(size=(10, 18))
        policy = AugmentationPolicy(crop_size=6, normalization=(0.5, 2.0))
        out1 = apply_pipeline(img, policy, np.random.default_rng(seed))
        out2 = apply_pipeline(img, policy, np.random.default_rng(seed))
        np.testing.assert_array_equal(out1, out2)

    @pytest.mark.parametrize("mode", ["finetune", "eval"])
    def test_non_contrastive_modes_normalize_only(self, mode):
        img = np.random.default_rng(13).normal(size=(9, 11))
        policy = AugmentationPolicy(
            crop_size=4, flip_probability=1.0, normalization=(1.0, 2.0), mode=mode
        )
        out = apply_pipeline(img, policy)
        assert out.shape == img.shape
        np.testing.assert_allclose(out, (img - 1.0) / 2.0)

    def test_contrastive_output_shape_is_crop_size(self):
        img = np.random.default_rng(14).normal(size=(30, 50))
        policy = AugmentationPolicy(crop_size=24, normalization=(0.0, 1.0))
        out = apply_pipeline(img, policy, np.random.default_rng(0))
        assert out.shape == (24, 24)

    def test_mode_switch_helper(self):
        policy = AugmentationPolicy(crop_size=16, normalization=(0.1, 0.9))
        eval_policy = policy.for_mode("eval")
        assert eval_policy.mode == "eval"
        assert eval_policy.normalization == (0.1, 0.9)

    def test_invalid_policy_values_rejected(self):
        with pytest.raises(ConfigError):
            AugmentationPolicy(crop_size=0)
        with pytest.raises(ConfigError):
            AugmentationPolicy(normalization=(0.0, 0.0))
        with pytest.raises(ConfigError):
            AugmentationPolicy(mode="train")
        with pytest.raises(ConfigError):
            AugmentationPolicy(crop_scale=(0.9, 0.1))


class TestDerivedStreams:
    def test_distinct_keys_decorrelate(self):
        a = derive_rng(42, 0, 1).normal(size=4)
        b = derive_rng(42, 0, 2).normal(size=4)
        assert not np.array_equal(a, b)

    def test_same_keys_reproduce(self):
        np.testing.assert_array_equal(
            derive_rng(7, 3, 1).normal(size=4), derive_rng(7, 3, 1).normal(size=4)
        )
