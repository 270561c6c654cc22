"""Descriptor assembly, baseline extraction, embedding, loss, serialization."""

import numpy as np
import pytest

from densefp import (
    BranchFeatures,
    DenseDescriptor,
    FormatError,
    GrayImage,
    InvalidArgument,
    SizeMismatch,
    assemble_descriptor,
    deserialize,
    deserialize_many,
    extract_baseline,
    extract_descriptor,
    local_consistency_loss,
    positional_embedding_2d,
    serialize,
    serialize_many,
)
from densefp.descriptor import BRANCH_DIM, GRID, structure_tensor_cells


def random_branches(rng, grid=GRID):
    f_s = BranchFeatures(rng.normal(0, 1, (BRANCH_DIM, grid, grid)))
    f_m = BranchFeatures(rng.normal(0, 1, (BRANCH_DIM, grid, grid)), tag="minutiae-like")
    return f_s, f_m


def random_descriptor(rng, grid=GRID):
    f_s, f_m = random_branches(rng, grid)
    mask = rng.uniform(0, 1, (grid, grid))
    return assemble_descriptor(f_s, f_m, mask)


def sinusoid_image(period=8.0, size=256, vertical=True):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    coord = xs if vertical else ys
    vals = 127.5 + 120.0 * np.sin(2 * np.pi * coord / period)
    return GrayImage(np.clip(np.round(vals), 0, 255).astype(np.uint8))


class TestAssemble:
    def test_all_ones_mask_is_plain_concat(self):
        rng = np.random.default_rng(0)
        f_s, f_m = random_branches(rng)
        d = assemble_descriptor(f_s, f_m, np.ones((GRID, GRID)))
        expected = np.concatenate([f_s.values, f_m.values], axis=0)
        assert np.allclose(d.values, expected, atol=1e-6)

    def test_all_zero_mask_zeroes_values(self):
        rng = np.random.default_rng(1)
        f_s, f_m = random_branches(rng)
        d = assemble_descriptor(f_s, f_m, np.zeros((GRID, GRID)))
        assert (d.values == 0).all()

    def test_half_weight_cell(self):
        f_s = np.zeros((BRANCH_DIM, 2, 2))
        f_s[0, 0, 0] = 2.0
        mask = np.zeros((2, 2))
        mask[0, 0] = 0.5
        d = assemble_descriptor(
            BranchFeatures(f_s), BranchFeatures(np.zeros((BRANCH_DIM, 2, 2))), mask
        )
        assert d.values[0, 0, 0] == pytest.approx(1.0)

    def test_subthreshold_cells_are_exactly_zero(self):
        rng = np.random.default_rng(2)
        f_s, f_m = random_branches(rng)
        mask = np.full((GRID, GRID), 0.3)
        mask[0, 0] = 0.9
        d = assemble_descriptor(f_s, f_m, mask)
        assert (d.values[:, mask < 0.5] == 0).all()
        assert d.values[0, 0, 0] != 0

    def test_shape_mismatch(self):
        rng = np.random.default_rng(3)
        f_s, _ = random_branches(rng, grid=GRID)
        _, f_m = random_branches(rng, grid=8)
        with pytest.raises(SizeMismatch):
            assemble_descriptor(f_s, f_m, np.ones((GRID, GRID)))
        f_s2, f_m2 = random_branches(rng)
        with pytest.raises(SizeMismatch):
            assemble_descriptor(f_s2, f_m2, np.ones((4, 4)))

    def test_binary_mask_idempotent(self):
        rng = np.random.default_rng(4)
        f_s, f_m = random_branches(rng)
        mask = (rng.uniform(0, 1, (GRID, GRID)) > 0.5).astype(float)
        once = assemble_descriptor(f_s, f_m, mask)
        twice = assemble_descriptor(
            BranchFeatures(once.values[:BRANCH_DIM]),
            BranchFeatures(once.values[BRANCH_DIM:]),
            mask,
        )
        assert np.array_equal(once.values, twice.values)

    def test_mask_range_enforced(self):
        rng = np.random.default_rng(5)
        f_s, f_m = random_branches(rng)
        with pytest.raises(InvalidArgument):
            assemble_descriptor(f_s, f_m, np.full((GRID, GRID), 1.5))


class TestPositionalEmbedding:
    def test_channel_count_must_be_multiple_of_four(self):
        with pytest.raises(InvalidArgument):
            positional_embedding_2d(16, 16, 6)

    def test_values_bounded_and_origin_zero(self):
        emb = positional_embedding_2d(16, 16, 8)
        assert np.abs(emb).max() <= 1.0
        assert emb[0, 0, 0] == 0.0  # sin(0)

    def test_all_cells_distinct(self):
        emb = positional_embedding_2d(16, 16, 4)
        flat = emb.reshape(4, -1).T  # 256 cell vectors
        dists = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
        dists[np.diag_indices(256)] = np.inf
        assert dists.min() > 1e-4

    def test_row_channels_constant_along_rows(self):
        emb = positional_embedding_2d(16, 16, 8)
        row_half = emb[:4]
        assert np.allclose(row_half[:, :, 0], row_half[:, :, 7])
        col_half = emb[4:]
        assert np.allclose(col_half[:, 0, :], col_half[:, 11, :])


class TestExtractBaseline:
    def test_constant_image_gives_empty_mask(self):
        img = GrayImage(np.full((256, 256), 180, np.uint8))
        f_s, f_m, mask = extract_baseline(img)
        assert (mask < 0.5).all()
        d = assemble_descriptor(f_s, f_m, mask)
        assert (d.values == 0).all()

    def test_vertical_sinusoid_orientation(self):
        img = sinusoid_image(period=8.0)
        cos2t, sin2t, coherence = structure_tensor_cells(img.as_float() / 255.0)
        interior = (slice(2, 14), slice(2, 14))
        assert (coherence[interior] > 0.9).all()
        assert (cos2t[interior] > 0.9).all()
        assert (np.abs(sin2t[interior]) < 0.1).all()

    def test_deterministic(self):
        img = sinusoid_image(period=9.0)
        a = extract_descriptor(img)
        b = extract_descriptor(img)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.mask, b.mask)

    def test_wrong_size_rejected(self):
        with pytest.raises(SizeMismatch):
            extract_baseline(GrayImage(np.zeros((128, 128), np.uint8)))

    def test_shift_equivariance_one_column(self):
        # a 16 px x-shift moves cell features by exactly one column
        # (before the positional embedding is added)
        from densefp import generate_synthetic_fingerprint, align_to_canonical, downsample_half_half

        img, pose, _ = generate_synthetic_fingerprint(11, 512)
        small = downsample_half_half(align_to_canonical(img, pose))
        shifted_px = np.full_like(small.pixels, 255)
        shifted_px[:, 16:] = small.pixels[:, :-16]
        f_s0, f_m0, _ = extract_baseline(small, pos_weight=0.0)
        f_s1, f_m1, _ = extract_baseline(GrayImage(shifted_px), pos_weight=0.0)
        sl = (slice(None), slice(2, 14), slice(2, 13))
        for base, moved in ((f_s0, f_s1), (f_m0, f_m1)):
            diff = np.abs(moved.values[:, 2:14, 3:14] - base.values[sl])
            assert diff.mean() < 0.05

    def test_mask_in_unit_interval(self):
        img = sinusoid_image()
        _, _, mask = extract_baseline(img)
        assert mask.min() >= 0.0 and mask.max() <= 1.0

    def test_default_flat_length(self):
        # 2 branches x 6 channels over a 16x16 grid flatten to 3072 values
        d = extract_descriptor(sinusoid_image())
        assert d.flat_length == 3072
        assert d.channels == 2 * BRANCH_DIM


class TestLocalConsistencyLoss:
    def test_identical_descriptors_zero(self):
        rng = np.random.default_rng(6)
        d = random_descriptor(rng)
        loss, count = local_consistency_loss(d, d)
        assert loss == 0.0
        assert count > 0

    def test_unit_vector_pair(self):
        channels = 2 * BRANCH_DIM
        va = np.zeros((channels, 2, 2))
        vb = np.zeros((channels, 2, 2))
        va[0, 0, 0] = 1.0
        vb[1, 0, 0] = 1.0
        mask = np.zeros((2, 2))
        mask[0, 0] = 1.0
        a = DenseDescriptor(va, mask)
        b = DenseDescriptor(vb, mask)
        loss, count = local_consistency_loss(a, b)
        assert count == 1
        assert loss == pytest.approx(2.0)

    def test_disjoint_masks_flagged(self):
        channels = 2 * BRANCH_DIM
        mask_a = np.zeros((4, 4))
        mask_a[0, 0] = 1.0
        mask_b = np.zeros((4, 4))
        mask_b[3, 3] = 1.0
        a = DenseDescriptor(np.ones((channels, 4, 4)), mask_a)
        b = DenseDescriptor(np.ones((channels, 4, 4)), mask_b)
        loss, count = local_consistency_loss(a, b)
        assert loss == 0.0
        assert count == 0

    def test_symmetry_exact(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a = random_descriptor(rng)
            b = random_descriptor(rng)
            assert local_consistency_loss(a, b) == local_consistency_loss(b, a)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(8)
        with pytest.raises(SizeMismatch):
            local_consistency_loss(random_descriptor(rng, 16), random_descriptor(rng, 8))


class TestSerialization:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            d = random_descriptor(rng)
            out = deserialize(serialize(d))
            assert d.values.tobytes() == out.values.tobytes()
            assert d.mask.tobytes() == out.mask.tobytes()

    def test_multi_variant_round_trip(self):
        rng = np.random.default_rng(10)
        variants = [random_descriptor(rng) for _ in range(4)]
        out = deserialize_many(serialize_many(variants))
        assert len(out) == 4
        for a, b in zip(variants, out):
            assert np.array_equal(a.values, b.values)

    def test_bad_magic(self):
        rng = np.random.default_rng(11)
        data = bytearray(serialize(random_descriptor(rng)))
        data[0] ^= 0xFF
        with pytest.raises(FormatError):
            deserialize(bytes(data))

    def test_truncation(self):
        rng = np.random.default_rng(12)
        data = serialize(random_descriptor(rng))
        with pytest.raises(FormatError):
            deserialize(data[: len(data) // 2])

    def test_corrupt_payload_fails_checksum(self):
        rng = np.random.default_rng(13)
        data = bytearray(serialize(random_descriptor(rng)))
        data[200] ^= 0x01
        with pytest.raises(FormatError):
            deserialize(bytes(data))

    def test_byte_swapped_file_rejected(self):
        # simulate a big-endian producer: every u16/u32/f32 written swapped
        rng = np.random.default_rng(14)
        data = bytearray(serialize(random_descriptor(rng)))
        body = data[5:]  # past magic + count
        swapped = bytearray(data[:5])
        for i in range(0, len(body) - 1, 2):
            swapped += bytes([body[i + 1], body[i]])
        with pytest.raises(FormatError):
            deserialize(bytes(swapped))

    def test_dimension_overflow_rejected(self):
        import struct

        header = b"FDD1" + bytes([1]) + struct.pack("<HHHH", 0xFFFF, 0xFFFF, 0xFFFF, 0)
        with pytest.raises(FormatError):
            deserialize(header + b"\0" * 64)

    def test_trailing_garbage_rejected(self):
        rng = np.random.default_rng(15)
        data = serialize(random_descriptor(rng))
        with pytest.raises(FormatError):
            deserialize(data + b"\0")

    def test_zero_variant_count_rejected(self):
        with pytest.raises(FormatError):
            deserialize_many(b"FDD1" + bytes([0]))
