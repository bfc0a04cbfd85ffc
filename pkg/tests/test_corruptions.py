import math

import numpy as np
import pytest

from poisonlab import corruptions as cor
from poisonlab.rng import stream


def random_image(seed, side=8):
    return stream(seed, "img").uniform(0, 1, size=(side, side, 1)).astype(np.float32)


class TestTables:
    def test_noise_sigma_at_severity_5(self):
        assert cor.NOISE_SIGMA[4] == 0.10

    def test_monotone_strength(self):
        assert list(cor.NOISE_SIGMA) == sorted(cor.NOISE_SIGMA)
        assert list(cor.BLUR_SIGMA) == sorted(cor.BLUR_SIGMA)
        assert list(cor.CONTRAST_FACTOR) == sorted(cor.CONTRAST_FACTOR, reverse=True)
        assert list(cor.PIXELATE_BLOCK) == sorted(cor.PIXELATE_BLOCK)
        assert all(c < 1.0 for c in cor.CONTRAST_FACTOR)  # identity is c=1

    def test_five_entries_each(self):
        for table in (cor.NOISE_SIGMA, cor.BLUR_SIGMA, cor.CONTRAST_FACTOR, cor.PIXELATE_BLOCK):
            assert len(table) == 5


class TestGaussianNoise:
    def test_clipping(self):
        img = np.full((8, 8, 1), 0.99, dtype=np.float32)
        out = cor.gaussian_noise(img, severity=5, rng_seed=1)
        assert out.max() <= 1.0 and out.min() >= 0.0

    def test_deterministic(self):
        img = random_image(3)
        a = cor.gaussian_noise(img, 4, rng_seed=9)
        b = cor.gaussian_noise(img, 4, rng_seed=9)
        assert a.tobytes() == b.tobytes()

    def test_severity_5_changes_nearly_all_pixels(self):
        img = random_image(4, side=16)
        out = cor.gaussian_noise(img, 5, rng_seed=2)
        assert (out != img).mean() >= 0.99


class TestGaussianBlur:
    def test_constant_image_unchanged(self):
        img = np.full((8, 8, 1), 0.37, dtype=np.float32)
        for severity in range(1, 6):
            assert np.abs(cor.gaussian_blur(img, severity) - img).max() < 1e-7

    def test_kernel_normalized(self):
        for sigma in cor.BLUR_SIGMA:
            assert abs(cor.blur_kernel_1d(sigma).sum() - 1.0) < 1e-9

    def test_impulse_center_equals_center_weight_squared(self):
        # independent 1-d kernel: exp(-x^2 / 2 sigma^2) over radius ceil(3 sigma)
        sigma = 0.4
        radius = math.ceil(3 * sigma)
        xs = np.arange(-radius, radius + 1, dtype=np.float64)
        weights = np.exp(-0.5 * (xs / sigma) ** 2)
        weights /= weights.sum()
        center_weight = weights[radius]
        img = np.zeros((9, 9, 1), dtype=np.float32)
        img[4, 4, 0] = 1.0
        out = cor.gaussian_blur(img, severity=1)
        assert out[4, 4, 0] == pytest.approx(center_weight ** 2, abs=1e-6)

    def test_rejects_tiny_image(self):
        with pytest.raises(ValueError, match="too small"):
            cor.gaussian_blur(np.zeros((1, 4, 1), dtype=np.float32), 1)


class TestContrast:
    def test_constant_unchanged(self):
        img = np.full((8, 8, 1), 0.6, dtype=np.float32)
        assert np.abs(cor.contrast(img, 3) - img).max() < 1e-7

    def test_arithmetic(self):
        img = np.array([[[1.0], [0.0]], [[0.5], [0.5]]], dtype=np.float32)  # mean 0.5
        out = cor.contrast(img, severity=2)  # factor 0.5
        assert out[0, 0, 0] == pytest.approx(0.75, abs=1e-7)

    def test_contrast_plus_shifts_severity(self):
        img = random_image(5)
        assert np.array_equal(cor.contrast_plus(img, 2), cor.contrast(img, 3))
        assert np.array_equal(cor.contrast_plus(img, 5), cor.contrast(img, 5))


class TestPixelate:
    def test_blockwise_constant_unchanged(self):
        img = np.kron(stream(0, "blocks").uniform(0, 1, (4, 4)), np.ones((2, 2)))
        img = img[:, :, None].astype(np.float32)
        out = cor.pixelate(img, severity=1)  # b=2 matches the block structure
        assert np.abs(out - img).max() < 1e-7

    def test_two_by_two_block_mean(self):
        img = np.array([[[0.0], [1.0]], [[0.0], [1.0]]], dtype=np.float32)
        out = cor.pixelate(img, severity=1)
        assert np.allclose(out, 0.5)

    def test_block_clamped_to_image_side(self):
        img = random_image(6, side=4)
        out = cor.pixelate(img, severity=5)  # b=8 clamps to 4: global mean
        assert np.allclose(out, img.mean(), atol=1e-6)


class TestApply:
    def test_blur_severity_1_on_constant(self):
        img = np.full((8, 8, 1), 0.2, dtype=np.float32)
        kind = cor.CorruptionKind(name="gaussian_blur", severity=1)
        assert np.abs(cor.apply(kind, img) - img).max() < 1e-7

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown corruption"):
            cor.CorruptionKind(name="jpeg_compression", severity=3)

    def test_range_preserved_everywhere(self):
        for i in range(1000):
            img = random_image(i)
            kind_name = cor.KINDS[i % len(cor.KINDS)]
            severity = (i % 5) + 1
            out = cor.apply(cor.CorruptionKind(kind_name, severity), img, rng_seed=i)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_distortion_nondecreasing_in_severity(self):
        # measured over >= 100 generated benchmark images
        from poisonlab.data import StreamSpec, synth_class_pool
        pool = synth_class_pool(StreamSpec(class_pool_size=8, task_class_counts=(8,),
                                           image_side=16, train_per_class=13, val_per_class=0,
                                           test_per_class=1, seed=0))
        images = [s.image for cls in range(8) for s in pool.train_pool[cls]]
        assert len(images) >= 100
        for name in cor.KINDS:
            means = []
            for severity in range(1, 6):
                kind = cor.CorruptionKind(name, severity)
                dist = [np.abs(cor.apply(kind, img, rng_seed=j) - img).mean()
                        for j, img in enumerate(images)]
                means.append(float(np.mean(dist)))
            for lo, hi in zip(means, means[1:]):
                assert hi >= lo - 1e-12, f"{name}: {means}"
