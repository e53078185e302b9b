"""Wavelet transform: reconstruction, linearity, volume, layout."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphforge import wavelet as wv


def transform_matrix_1d(n: int) -> np.ndarray:
    """Explicit matrix of the one-level 1-D transform, built from basis vectors."""
    mat = np.zeros((n, n))
    for i in range(n):
        e = torch.zeros(n, dtype=torch.float64)
        e[i] = 1.0
        mat[:, i] = wv.lift_forward_1d(e).numpy()
    return mat


def transform_matrix_2d(side: int, levels: int) -> np.ndarray:
    """Explicit matrix of the packed 2-D transform from basis images."""
    n = side * side
    mat = np.zeros((n, n))
    for i in range(n):
        e = torch.zeros(n, dtype=torch.float64)
        e[i] = 1.0
        mat[:, i] = wv.forward_packed(e.reshape(side, side), levels).reshape(-1).numpy()
    return mat


class TestForward:
    def test_zero_image_gives_zero_pyramid(self):
        pyr = wv.cdf97_forward(np.zeros((16, 16)))
        assert np.all(pyr.data == 0.0)

    def test_constant_image_full_depth(self):
        # stated oracle: transform the all-ones image and record the scalar
        side, levels = 64, 6
        pyr = wv.cdf97_forward(np.ones((side, side)), levels)
        flat = pyr.flatten()
        gain = flat[0]
        assert abs(gain - 2.0**levels) < 1e-9  # sqrt(2) per 1-D pass
        c = 0.37
        pyr_c = wv.cdf97_forward(np.full((side, side), c), levels)
        flat_c = pyr_c.flatten()
        assert abs(flat_c[0] - c * gain) < 1e-9
        assert np.abs(flat_c[1:]).max() < 1e-10

    def test_matches_basis_matrix_oracle_8x8(self):
        side, levels = 8, 3
        mat = transform_matrix_2d(side, levels)
        x = np.random.default_rng(0).standard_normal((side, side))
        direct = wv.cdf97_forward(x, levels).data.reshape(-1)
        via_matrix = mat @ x.reshape(-1)
        assert np.abs(direct - via_matrix).max() < 1e-10

    def test_levels_out_of_range(self):
        x = np.zeros((16, 16))
        with pytest.raises(ValueError):
            wv.cdf97_forward(x, 0)
        with pytest.raises(ValueError):
            wv.cdf97_forward(x, 5)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ValueError):
            wv.cdf97_forward(np.zeros((12, 12)))

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            wv.forward_packed(torch.zeros(8, 16), 2)


class TestInverse:
    def test_roundtrip_random_64(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.random((64, 64))
            back = wv.cdf97_inverse(wv.cdf97_forward(x))
            assert np.abs(back - x).max() < 1e-9

    def test_zero_pyramid_gives_zero_image(self):
        pyr = wv.WaveletPyramid(np.zeros((8, 8)), 8, 3)
        assert np.all(wv.cdf97_inverse(pyr) == 0.0)

    def test_coefficient_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            wv.WaveletPyramid(np.zeros((8, 4)), 8, 2)

    def test_one_level_determinant_is_one(self):
        mat = transform_matrix_1d(64)
        sign, logdet = np.linalg.slogdet(mat)
        assert abs(abs(np.exp(logdet)) - 1.0) < 1e-8


class TestProperties:
    @settings(max_examples=20, deadline=None)
    @given(
        st.integers(min_value=0, max_value=10_000),
        st.floats(min_value=-3, max_value=3),
        st.floats(min_value=-3, max_value=3),
    )
    def test_linearity(self, seed, a, b):
        rng = np.random.default_rng(seed)
        x = torch.from_numpy(rng.standard_normal((16, 16)))
        y = torch.from_numpy(rng.standard_normal((16, 16)))
        lhs = wv.forward_packed(a * x + b * y, 4)
        rhs = a * wv.forward_packed(x, 4) + b * wv.forward_packed(y, 4)
        assert (lhs - rhs).abs().max() < 1e-9

    def test_energy_ratio_within_singular_value_bounds(self):
        side, levels = 16, 4
        mat = transform_matrix_2d(side, levels)
        sv = np.linalg.svd(mat, compute_uv=False)
        lo, hi = sv.min() ** 2, sv.max() ** 2
        rng = np.random.default_rng(2)
        for _ in range(100):
            x = rng.random((side, side))
            ratio = float(
                (wv.forward_packed(torch.from_numpy(x), levels) ** 2).sum()
                / (x**2).sum()
            )
            assert lo - 1e-12 <= ratio <= hi + 1e-12
            # empirical regression bracket recorded from the basis oracle
            assert 0.75 <= ratio <= 1.35

    def test_batched_matches_per_image(self):
        rng = np.random.default_rng(3)
        batch = torch.from_numpy(rng.random((5, 32, 32)))
        stacked = wv.forward_packed(batch, 5)
        for i in range(5):
            single = wv.forward_packed(batch[i], 5)
            assert torch.equal(stacked[i], single)


class TestFlatten:
    def test_s2_order(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]])
        pyr = wv.cdf97_forward(x, 1)
        flat = pyr.flatten()
        assert flat.shape == (4,)
        assert flat[0] == pyr.band(1, "LL")[0, 0]
        assert flat[1] == pyr.band(1, "HL")[0, 0]
        assert flat[2] == pyr.band(1, "LH")[0, 0]
        assert flat[3] == pyr.band(1, "HH")[0, 0]

    def test_first_hh_index_s4_l2(self):
        # hand enumeration: LL(1) HL2(1) LH2(1) HH2(1) HL1(4) LH1(4) HH1(4)
        layout = wv.band_layout(4, 2)
        first_hh = next(off for band, lvl, off, _ in layout if band == "HH")
        assert first_hh == 3

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_roundtrip_identity(self, seed):
        rng = np.random.default_rng(seed)
        packed = rng.standard_normal((16, 16))
        flat = wv.flatten_pyramid(packed, 16, 3)
        back = wv.unflatten_pyramid(flat, 16, 3)
        assert np.array_equal(back, packed)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            wv.unflatten_pyramid(np.zeros(10), 4, 2)
        with pytest.raises(ValueError):
            wv.flatten_pyramid(np.zeros((4, 8)), 4, 2)

    def test_layout_covers_all_coefficients(self):
        for side, levels in ((8, 1), (8, 3), (64, 6)):
            perm = wv.flatten_permutation(side, levels)
            assert sorted(perm) == list(range(side * side))
