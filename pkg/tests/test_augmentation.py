import numpy as np
import pytest

from strokeseg.augmentation import (
    AugmentConfig,
    affine_matrix,
    apply_affine,
    augment,
    flip,
    random_affine,
    random_flip,
    random_intensity,
    sample_rng,
)


@pytest.fixture
def patch(rng):
    img = rng.normal(size=(2, 12, 10, 8)).astype(np.float32)
    mask = (rng.random((12, 10, 8)) > 0.7).astype(np.uint8)
    return img, mask


def test_flip_involution(patch):
    img, mask = patch
    rng_a, rng_b = np.random.default_rng(3), np.random.default_rng(3)
    i1, m1 = random_flip(img, mask, rng_a, 0.5)
    i2, m2 = random_flip(i1, m1, rng_b, 0.5)
    assert np.array_equal(i2, img) and np.array_equal(m2, mask)


def test_flip_prob_zero_identity(patch):
    img, mask = patch
    i, m = random_flip(img, mask, np.random.default_rng(0), 0.0)
    assert np.array_equal(i, img) and np.array_equal(m, mask)


def test_flip_index_reversal():
    a = np.arange(27, dtype=np.float32).reshape(1, 3, 3, 3)
    m = (np.arange(27).reshape(3, 3, 3) % 2).astype(np.uint8)
    fa, fm = flip(a, m, [0])
    for j in range(3):
        for k in range(3):
            assert fa[0, 0, j, k] == a[0, 2, j, k] and fa[0, 2, j, k] == a[0, 0, j, k]
            assert fm[0, j, k] == m[2, j, k]


def test_affine_identity(patch):
    img, mask = patch
    i, m = apply_affine(img, mask, affine_matrix((0, 0, 0), (1, 1, 1)))
    assert np.max(np.abs(i - img)) <= 1e-5 and np.array_equal(m, mask)


def test_affine_90_degrees_about_z_moves_marker():
    n = 9
    img = np.zeros((1, n, n, n), np.float32)
    mask = np.zeros((n, n, n), np.uint8)
    img[0, 7, 4, 2] = 1.0
    mask[7, 4, 2] = 1
    i, m = apply_affine(img, mask, affine_matrix((0, 0, 90), (1, 1, 1)))
    # Forward rotation by +90 deg about z around centre c=4: (x, y) -> (c - (y - c), c + (x - c))
    expected = (4 - (4 - 4), 4 + (7 - 4), 2)
    assert tuple(np.argwhere(m)[0]) == expected
    assert i[0][expected] == pytest.approx(1.0, abs=1e-6)
    assert i.sum() == pytest.approx(1.0, abs=1e-6)


def test_affine_masks_stay_binary(patch):
    img, mask = patch
    cfg = AugmentConfig(affine_prob=1.0, rot_range_deg=30, scale_range=0.2)
    for s in range(20):
        i, m = random_affine(img, mask, np.random.default_rng(s), cfg)
        assert set(np.unique(m)) <= {0, 1}
        assert i.shape == img.shape and m.shape == mask.shape


def test_affine_geometric_consistency(rng):
    # Warping a voxel-coordinate volume with nearest sampling tells us which
    # input voxel each output voxel came from; the warped mask must agree.
    shape = (14, 12, 10)
    coords = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")).astype(np.float32) + 1
    mask = (rng.random(shape) > 0.6).astype(np.uint8)
    for s in range(10):
        matrix = affine_matrix(rng.uniform(-20, 20, 3), 1 + rng.uniform(-0.1, 0.1, 3))
        warped_coords, warped_mask = apply_affine(coords, mask, matrix, order=0)
        src = warped_coords.astype(int) - 1
        valid = np.all(src >= 0, axis=0)
        expected = np.zeros(shape, np.uint8)
        expected[valid] = mask[src[0][valid], src[1][valid], src[2][valid]]
        np.testing.assert_array_equal(warped_mask, expected)


def test_intensity_all_probs_zero_identity(patch):
    img, _ = patch
    out = random_intensity(img, np.random.default_rng(0), AugmentConfig.disabled())
    assert np.array_equal(out, img)


def test_intensity_degenerate_parameters_identity(patch):
    img, _ = patch
    cfg = AugmentConfig(
        smooth_prob=1, smooth_sigma_range=(0, 0), noise_prob=1, noise_std_range=(0, 0),
        intensity_scale_prob=1, intensity_scale_range=(1, 1), intensity_shift_prob=1, intensity_shift_range=(0, 0),
    )
    out = random_intensity(img, np.random.default_rng(0), cfg)
    assert np.max(np.abs(out - img)) <= 1e-6


def test_intensity_shift_moves_mean(patch):
    img, _ = patch
    cfg = AugmentConfig.disabled().model_copy(update={"intensity_shift_prob": 1.0, "intensity_shift_range": (0.5, 0.5)})
    out = random_intensity(img, np.random.default_rng(0), cfg)
    assert out.astype(np.float64).mean() == pytest.approx(img.astype(np.float64).mean() + 0.5, abs=1e-6)


def test_intensity_does_not_touch_mask(patch):
    img, mask = patch
    before = mask.copy()
    random_intensity(img, np.random.default_rng(0), AugmentConfig(noise_prob=1, smooth_prob=1))
    assert np.array_equal(mask, before)


def test_augment_disabled_identity(patch):
    img, mask = patch
    i, m = augment(img, mask, AugmentConfig.disabled(), np.random.default_rng(0))
    assert np.array_equal(i, img) and np.array_equal(m, mask)


def test_augment_deterministic(patch):
    img, mask = patch
    cfg = AugmentConfig(affine_prob=1, noise_prob=1, smooth_prob=1)
    a = augment(img, mask, cfg, sample_rng(7, 0, 3, 1))
    b = augment(img, mask, cfg, sample_rng(7, 0, 3, 1))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = augment(img, mask, cfg, sample_rng(7, 0, 3, 2))
    assert not np.array_equal(a[0], c[0])


def test_augment_fuzz_shape_and_labels(patch):
    img, mask = patch
    cfg = AugmentConfig(affine_prob=0.8)
    for s in range(100):
        i, m = augment(img, mask, cfg, np.random.default_rng(s))
        assert i.shape == img.shape and m.shape == mask.shape
        assert set(np.unique(m)) <= {0, 1}


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(noise_std_range=(0.2, 0.1))
    with pytest.raises(ValueError):
        AugmentConfig(flip_prob_per_axis=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(unknown=1)
