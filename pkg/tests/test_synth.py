"""Synthetic generation, elastic distortion, degradation and histogram ops."""

import numpy as np
import pytest
from scipy import ndimage

from densefp import (
    DegradationRecipe,
    DensefpError,
    EmptyOverlap,
    GrayImage,
    RecipeError,
    SizeMismatch,
    apply_elastic_distortion,
    degrade,
    generate_synthetic_fingerprint,
    histogram_match,
    load_recipe,
    make_distortion_field,
    save_recipe,
    simulate_incomplete,
)


def blank(size=512, value=255):
    return GrayImage(np.full((size, size), value, np.uint8))


def measure_ridge_period(image, mask):
    """Band-limited spectral centroid; independent oracle for ridge spacing."""
    f = image.pixels.astype(np.float64)
    f = np.where(mask, f, f[mask].mean())
    f -= f.mean()
    power = np.abs(np.fft.fft2(f)) ** 2
    h, w = f.shape
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    r = np.hypot(ky[:, None], kx[None, :])
    band = (r >= h / 16) & (r <= h / 4)  # ridge periods 4..16 px
    centroid = (power[band] * r[band]).sum() / power[band].sum()
    return h / centroid


def ridge_band_energy(image, mask):
    f = image.pixels.astype(np.float64)
    f = np.where(mask, f, f[mask].mean())
    f -= f.mean()
    power = np.abs(np.fft.fft2(f)) ** 2
    h, w = f.shape
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    r = np.hypot(ky[:, None], kx[None, :])
    return power[(r >= h / 14) & (r <= h / 5)].sum()


class TestGenerator:
    def test_deterministic(self):
        a, pa, ma = generate_synthetic_fingerprint(42, 256)
        b, pb, mb = generate_synthetic_fingerprint(42, 256)
        assert np.array_equal(a.pixels, b.pixels)
        assert pa == pb
        assert np.array_equal(ma, mb)

    def test_seeds_differ(self):
        a, _, ma = generate_synthetic_fingerprint(1, 512)
        b, _, mb = generate_synthetic_fingerprint(2, 512)
        joint = ma & mb
        frac = ((a.pixels != b.pixels) & joint).sum() / joint.sum()
        assert frac > 0.10

    def test_foreground_fraction_bounds(self):
        for seed in range(100):
            _, _, mask = generate_synthetic_fingerprint(seed, 128)
            assert 0.2 <= mask.mean() <= 0.8, f"seed {seed}: {mask.mean():.3f}"

    def test_period_in_drawn_range(self):
        # centroid-measured spacing stays near the drawn 7..11 px range
        for seed in range(5):
            img, _, mask = generate_synthetic_fingerprint(seed, 512)
            assert 5.5 <= measure_ridge_period(img, mask) <= 12.5

    def test_too_small_rejected(self):
        with pytest.raises(DensefpError):
            generate_synthetic_fingerprint(0, 64)

    def test_pose_matches_ellipse(self):
        img, pose, mask = generate_synthetic_fingerprint(9, 512)
        ys, xs = np.nonzero(mask)
        assert pose.cx == pytest.approx(xs.mean(), abs=2.0)
        assert pose.cy == pytest.approx(ys.mean(), abs=2.0)


class TestElasticDistortion:
    def test_zero_magnitude_is_identity(self):
        img, _, _ = generate_synthetic_fingerprint(3, 256)
        out = apply_elastic_distortion(img, 77, 0.0)
        assert np.array_equal(out.pixels, img.pixels)

    def test_deterministic_and_nonzero(self):
        img, _, _ = generate_synthetic_fingerprint(3, 256)
        a = apply_elastic_distortion(img, 5, 3.0)
        b = apply_elastic_distortion(img, 5, 3.0)
        assert np.array_equal(a.pixels, b.pixels)
        assert np.abs(a.pixels.astype(int) - img.pixels.astype(int)).mean() > 0

    def test_period_stable_under_warp(self):
        for seed in (3, 5):
            img, _, mask = generate_synthetic_fingerprint(seed, 512)
            p0 = measure_ridge_period(img, mask)
            p1 = measure_ridge_period(apply_elastic_distortion(img, 123, 3.0), mask)
            assert abs(p1 - p0) / p0 < 0.15

    def test_zero_field_invariant(self):
        field = make_distortion_field((256, 256), 9, 0.0)
        assert (field.dx == 0).all() and (field.dy == 0).all()

    def test_field_rms_matches_magnitude(self):
        field = make_distortion_field((256, 256), 9, 2.5)
        dx, dy = field.as_dense((256, 256))
        rms = np.sqrt(np.mean(dx**2 + dy**2))
        assert rms == pytest.approx(2.5, rel=1e-9)


class TestDegrade:
    def test_identity_recipe(self):
        img, _, _ = generate_synthetic_fingerprint(4, 256)
        out = degrade(img, DegradationRecipe())
        assert np.array_equal(out.pixels, img.pixels)

    def test_blur_kills_ridge_band(self):
        img, _, mask = generate_synthetic_fingerprint(0, 512)
        clean = ridge_band_energy(img, mask)
        blurred = ridge_band_energy(degrade(img, DegradationRecipe(blur_sigma=4.0, seed=1)), mask)
        assert blurred < 0.5 * clean

    def test_exactly_five_line_segments(self):
        out = degrade(blank(), DegradationRecipe(n_lines=5, seed=0))
        diff = out.pixels != 255
        _, count = ndimage.label(diff, structure=np.ones((3, 3)))
        assert count == 5

    def test_deterministic(self):
        img, _, _ = generate_synthetic_fingerprint(4, 256)
        recipe = DegradationRecipe(blur_sigma=1.0, dryness=0.4, moisture=0.2, n_lines=3, n_digit_stamps=2, seed=11)
        assert np.array_equal(degrade(img, recipe).pixels, degrade(img, recipe).pixels)

    def test_dryness_darkens_moisture_lightens(self):
        img, _, mask = generate_synthetic_fingerprint(4, 256)
        dry = degrade(img, DegradationRecipe(dryness=0.8, seed=1))
        moist = degrade(img, DegradationRecipe(moisture=0.8, seed=1))
        base = img.pixels[mask].mean()
        assert dry.pixels[mask].mean() < base
        assert moist.pixels[mask].mean() > base

    def test_digit_stamps_draw_dark_strokes(self):
        out = degrade(blank(), DegradationRecipe(n_digit_stamps=3, seed=2))
        assert (out.pixels < 100).sum() > 50

    def test_overlay_mismatch_raises(self):
        img, _, _ = generate_synthetic_fingerprint(4, 256)
        small = blank(128)
        with pytest.raises(SizeMismatch):
            degrade(img, DegradationRecipe(overlay_path="x", overlay_alpha=0.5), overlay=small)

    def test_overlay_blend(self):
        img = blank(128, value=200)
        overlay = blank(128, value=0)
        out = degrade(img, DegradationRecipe(overlay_path="mem", overlay_alpha=0.5), overlay=overlay)
        assert (out.pixels == 100).all()


class TestRecipeFiles:
    def test_round_trip(self, tmp_path):
        recipe = DegradationRecipe(blur_sigma=1.5, dryness=0.3, n_lines=2, seed=99)
        path = tmp_path / "r.recipe"
        save_recipe(path, recipe)
        assert load_recipe(path) == recipe

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "r.recipe"
        path.write_text("blur_sigma = 1\nsharpen = 2\n")
        with pytest.raises(RecipeError):
            load_recipe(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "r.recipe"
        path.write_text("blur_sigma = soft\n")
        with pytest.raises(RecipeError):
            load_recipe(path)

    def test_out_of_range_rejected(self):
        with pytest.raises(RecipeError):
            DegradationRecipe(dryness=1.5)
        with pytest.raises(RecipeError):
            DegradationRecipe(blur_sigma=-1)
        with pytest.raises(RecipeError):
            DegradationRecipe(n_lines=-2)


class TestHistogramMatch:
    def test_self_match_is_identity(self):
        img, _, _ = generate_synthetic_fingerprint(5, 256)
        out = histogram_match(img, img)
        assert np.abs(out.pixels.astype(int) - img.pixels.astype(int)).max() <= 1

    def test_constant_reference(self):
        img, _, _ = generate_synthetic_fingerprint(5, 256)
        ref = blank(64, value=100)
        out = histogram_match(GrayImage(img.pixels), ref)
        assert (out.pixels == 100).all()

    def test_two_level_mapping(self):
        src = np.zeros((2, 2), np.uint8)
        src[:, 1] = 255
        ref = np.full((2, 2), 64, np.uint8)
        ref[:, 1] = 192
        out = histogram_match(GrayImage(src), GrayImage(ref))
        assert set(np.unique(out.pixels)) == {64, 192}
        assert (out.pixels[:, 0] == 64).all() and (out.pixels[:, 1] == 192).all()

    def test_ks_distance_small_on_smooth_images(self):
        rng = np.random.default_rng(8)
        for _ in range(3):
            a = ndimage.gaussian_filter(rng.normal(0, 1, (256, 256)), 4)
            b = ndimage.gaussian_filter(rng.normal(0, 1, (256, 256)), 6)
            to_u8 = lambda x: np.clip((x - x.min()) / (np.ptp(x) + 1e-12) * 255, 0, 255).astype(np.uint8)  # noqa: E731
            img, ref = GrayImage(to_u8(a)), GrayImage(to_u8(b))
            out = histogram_match(img, ref)
            cdf_out = np.cumsum(np.bincount(out.pixels.ravel(), minlength=256)) / out.pixels.size
            cdf_ref = np.cumsum(np.bincount(ref.pixels.ravel(), minlength=256)) / ref.pixels.size
            assert np.abs(cdf_out - cdf_ref).max() < 0.05

    def test_mapping_is_monotone(self):
        src = GrayImage(np.arange(256, dtype=np.uint8).reshape(16, 16))
        ref, _, _ = generate_synthetic_fingerprint(2, 256)
        out = histogram_match(src, GrayImage(ref.pixels))
        flat = out.pixels.ravel().astype(int)
        assert (np.diff(flat) >= 0).all()


class TestSimulateIncomplete:
    def test_full_mask_zero_magnitude_is_pure_shift(self):
        rolled, _, _ = generate_synthetic_fingerprint(6, 256)
        rolled = GrayImage(rolled.pixels)  # drop stored foreground
        full = np.ones((256, 256), bool)
        out, out_mask = simulate_incomplete(
            rolled, full, seed=3, magnitude_range=(0.0, 0.0), shift_range=(-20, 20)
        )
        rng = np.random.default_rng(3)
        rng.uniform(0.0, 0.0)
        rng.integers(0, 2**63 - 1)
        shift = int(rng.integers(-20, 21))
        expected = np.clip(rolled.pixels.astype(int) + shift, 0, 255)
        assert np.array_equal(out.pixels, expected.astype(np.uint8))
        assert out_mask.all()

    def test_left_half_mask_leaves_right_white(self):
        rolled, _, _ = generate_synthetic_fingerprint(6, 256)
        half = np.zeros((256, 256), bool)
        half[:, :128] = True
        out, _ = simulate_incomplete(rolled, half, seed=4)
        assert (out.pixels[:, 140:] == 255).all()

    def test_empty_overlap_raises(self):
        rolled, _, mask = generate_synthetic_fingerprint(6, 256)
        disjoint = np.zeros((256, 256), bool)
        disjoint[:4, :4] = ~mask[:4, :4]
        disjoint &= ~mask
        with pytest.raises(EmptyOverlap):
            simulate_incomplete(rolled, disjoint, seed=5)

    def test_mask_size_mismatch(self):
        rolled, _, _ = generate_synthetic_fingerprint(6, 256)
        with pytest.raises(SizeMismatch):
            simulate_incomplete(rolled, np.ones((128, 128), bool), seed=5)

    def test_warp_cannot_grow_foreground_beyond_tolerance(self):
        # area bound: the warped foreground never exceeds the plain mask
        # area plus a 2 px dilation allowance
        rolled, _, _ = generate_synthetic_fingerprint(6, 512)
        half = np.zeros((512, 512), bool)
        half[:, :256] = True
        budget = ndimage.binary_dilation(half, iterations=2).sum()
        for seed in range(50):
            _, out_mask = simulate_incomplete(rolled, half, seed=seed)
            assert out_mask.sum() <= budget
