import math
from collections.abc import Callable

import numpy as np
import pytest
from numpy import testing

from hitok import grid


def _supersampled_area(plane: np.ndarray, rows: int, cols: int) -> np.ndarray:
    # Split every source cell into rows×cols sub-cells, then average blocks of them.
    h, w = plane.shape
    fine = np.repeat(np.repeat(plane, rows, axis=0), cols, axis=1)
    return fine.reshape(rows, h, cols, w).mean(axis=(1, 3))


def _cubic(x: float, a: float = -0.75) -> float:
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


class TestLatentGrid:
    def test_rejects_non_finite(self) -> None:
        with pytest.raises(grid.NonFiniteGrid):
            grid.LatentGrid(np.array([[[1.0, math.nan]]]))

    @pytest.mark.parametrize(
        "shape",
        [(2, 2), (1, 0, 2), (1, 2, 2, 1)],
        ids=["two-dimensional", "empty", "four-dimensional"],
    )
    def test_rejects_bad_shape(self, shape: tuple[int, ...]) -> None:
        with pytest.raises(grid.ShapeMismatch):
            grid.LatentGrid(np.zeros(shape))

    def test_is_read_only(self) -> None:
        g = grid.LatentGrid(np.zeros((1, 2, 2)))
        with pytest.raises(ValueError):
            g.data[0, 0, 0] = 1.0

    def test_does_not_alias_input(self) -> None:
        source = np.zeros((1, 2, 2))
        g = grid.LatentGrid(source)
        source[0, 0, 0] = 5.0
        assert g.data[0, 0, 0] == 0.0

    def test_arithmetic(self) -> None:
        a = grid.LatentGrid(np.ones((2, 3, 3)))
        b = grid.LatentGrid(np.full((2, 3, 3), 2.0))
        testing.assert_array_equal((a + b).data, 3.0)
        testing.assert_array_equal((b - a).data, 1.0)
        assert a.scale(2.0).norm() == pytest.approx(math.sqrt(18) * 2)

    def test_arithmetic_shape_mismatch(self) -> None:
        with pytest.raises(grid.ShapeMismatch):
            grid.LatentGrid(np.ones((1, 2, 2))) + grid.LatentGrid(np.ones((1, 3, 3)))


class TestAreaDownsample:
    @pytest.mark.parametrize("target", [(1, 1), (2, 3), (5, 5)], ids=["1x1", "2x3", "5x5"])
    def test_constant(self, target: tuple[int, int]) -> None:
        g = grid.LatentGrid(np.full((3, 5, 5), 0.7))
        testing.assert_allclose(grid.area_downsample(g, target).data, 0.7, rtol=1e-12)

    def test_mean_of_two_by_two(self) -> None:
        g = grid.LatentGrid(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        testing.assert_allclose(grid.area_downsample(g, (1, 1)).data, [[[2.5]]])

    def test_row_index_values(self) -> None:
        rows = np.repeat(np.arange(4.0)[:, None], 4, axis=1)
        g = grid.LatentGrid(rows[None])
        testing.assert_allclose(
            grid.area_downsample(g, (2, 2)).data, [[[0.5, 0.5], [2.5, 2.5]]]
        )

    @pytest.mark.parametrize(
        "src, dst",
        [((3, 3), (2, 2)), ((7, 5), (3, 4)), ((32, 32), (6, 14))],
        ids=["3-to-2", "uneven", "schedule-sizes"],
    )
    def test_fractional_footprints_match_supersampling(
        self, src: tuple[int, int], dst: tuple[int, int], rng: np.random.Generator
    ) -> None:
        plane = rng.normal(size=src)
        result = grid.area_downsample(grid.LatentGrid(plane[None]), dst)
        testing.assert_allclose(result.data[0], _supersampled_area(plane, *dst), atol=1e-12)

    def test_preserves_global_mean(self, rng: np.random.Generator) -> None:
        g = grid.LatentGrid(rng.normal(size=(2, 32, 32)))
        down = grid.area_downsample(g, (10, 10))
        testing.assert_allclose(down.data.mean(axis=(1, 2)), g.data.mean(axis=(1, 2)), atol=1e-12)

    def test_same_size_is_identity(self, rng: np.random.Generator) -> None:
        g = grid.LatentGrid(rng.normal(size=(2, 4, 4)))
        assert grid.area_downsample(g, (4, 4)) is g

    def test_cannot_enlarge(self) -> None:
        with pytest.raises(grid.InvalidTarget):
            grid.area_downsample(grid.LatentGrid(np.zeros((1, 2, 2))), (3, 2))


class TestBicubicUpsample:
    def test_same_size_is_identity(self, rng: np.random.Generator) -> None:
        g = grid.LatentGrid(rng.normal(size=(2, 4, 4)))
        testing.assert_array_equal(grid.bicubic_upsample(g, (4, 4)).data, g.data)

    @pytest.mark.parametrize("target", [(2, 2), (3, 7), (32, 32)], ids=["2x2", "3x7", "32x32"])
    def test_constant(self, target: tuple[int, int]) -> None:
        g = grid.LatentGrid(np.full((2, 2, 2), -1.25))
        testing.assert_allclose(grid.bicubic_upsample(g, target).data, -1.25, rtol=1e-12)

    def test_matches_scalar_kernel(self) -> None:
        g = grid.LatentGrid(np.array([[[0.0, 1.0], [0.0, 1.0]]]))
        result = grid.bicubic_upsample(g, (2, 4)).data[0]

        source = [0.0, 1.0]
        expected = []
        for j in range(4):
            x = (j + 0.5) * 2 / 4 - 0.5
            base = math.floor(x)
            expected.append(
                sum(
                    source[min(max(k, 0), 1)] * _cubic(x - k)
                    for k in range(base - 1, base + 3)
                )
            )
        # Rows are unchanged, so every row equals the interpolated column profile.
        testing.assert_allclose(result, [expected, expected], atol=1e-12)

    @pytest.mark.parametrize(
        "source, target",
        [((2, 2), (8, 8)), ((3, 5), (7, 11)), ((4, 4), (32, 32))],
        ids=["2-to-8", "3x5-to-7x11", "4-to-32"],
    )
    def test_linear(
        self, source: tuple[int, int], target: tuple[int, int], rng: np.random.Generator
    ) -> None:
        x = grid.LatentGrid(rng.normal(size=(3, *source)))
        y = grid.LatentGrid(rng.normal(size=(3, *source)))
        combined = grid.bicubic_upsample(x.scale(0.3) + y.scale(-2.0), target)
        separate = grid.bicubic_upsample(x, target).scale(0.3) + grid.bicubic_upsample(y, target).scale(-2.0)
        testing.assert_allclose(combined.data, separate.data, atol=1e-12)

    def test_deterministic(self, rng: np.random.Generator) -> None:
        g = grid.LatentGrid(rng.normal(size=(4, 3, 3)))
        testing.assert_array_equal(
            grid.bicubic_upsample(g, (10, 10)).data, grid.bicubic_upsample(g, (10, 10)).data
        )

    @pytest.mark.parametrize(
        "source, target",
        [((1, 1), (4, 4)), ((2, 2), (8, 8)), ((4, 4), (6, 6)), ((8, 8), (32, 32))],
        ids=["1-to-4", "2-to-8", "4-to-6", "8-to-32"],
    )
    def test_area_downsample_recovers_a_constant(
        self, source: tuple[int, int], target: tuple[int, int]
    ) -> None:
        g = grid.LatentGrid(np.full((2, *source), 0.625))
        round_trip = grid.area_downsample(grid.bicubic_upsample(g, target), source)
        testing.assert_allclose(round_trip.data, 0.625, rtol=1e-12)

    def test_overshoots_at_edges(self) -> None:
        step = np.zeros((1, 1, 4))
        step[..., 2:] = 1.0
        result = grid.bicubic_upsample(grid.LatentGrid(step), (1, 16)).data
        assert result.min() < 0.0 and result.max() > 1.0

    def test_cannot_shrink(self) -> None:
        with pytest.raises(grid.InvalidTarget):
            grid.bicubic_upsample(grid.LatentGrid(np.zeros((1, 4, 4))), (2, 4))


class TestBilinearUpsample:
    def test_linear_ramp_interior(self) -> None:
        g = grid.LatentGrid(np.arange(4.0)[None, None, :])
        result = grid.bilinear_upsample(g, (1, 8)).data[0, 0]
        # Away from the clamped edges a ramp stays a ramp with half the slope.
        testing.assert_allclose(np.diff(result[1:-1]), 0.5, atol=1e-12)

    def test_cannot_shrink(self) -> None:
        with pytest.raises(grid.InvalidTarget):
            grid.bilinear_upsample(grid.LatentGrid(np.zeros((1, 4, 4))), (2, 2))


class TestResamplingMatrices:
    @pytest.mark.parametrize(
        "build",
        [grid.area_matrix, grid.bicubic_matrix, grid.bilinear_matrix],
        ids=["area", "bicubic", "bilinear"],
    )
    def test_rows_sum_to_one(self, build: Callable[[int, int], grid.FloatArray]) -> None:
        src, dst = (12, 5) if build is grid.area_matrix else (5, 12)
        testing.assert_allclose(build(src, dst).sum(axis=1), 1.0, atol=1e-12)

    def test_area_columns_share_weight_evenly(self) -> None:
        testing.assert_allclose(grid.area_matrix(10, 4).sum(axis=0), 4 / 10, atol=1e-12)

    def test_matrices_are_cached_read_only(self) -> None:
        assert grid.area_matrix(8, 4) is grid.area_matrix(8, 4)
        assert not grid.bicubic_matrix(4, 8).flags.writeable


class TestPhiRefine:
    def test_identity(self, rng: np.random.Generator) -> None:
        g = grid.LatentGrid(rng.normal(size=(3, 5, 5)))
        testing.assert_array_equal(grid.phi_refine(g, grid.PhiParams.identity(3)).data, g.data)

    def test_zeros(self, rng: np.random.Generator) -> None:
        g = grid.LatentGrid(rng.normal(size=(3, 5, 5)))
        testing.assert_array_equal(grid.phi_refine(g, grid.PhiParams.zeros(3)).data, 0.0)

    def test_averaging_spreads_a_delta(self) -> None:
        delta = np.zeros((1, 5, 5))
        delta[0, 2, 2] = 1.0
        result = grid.phi_refine(grid.LatentGrid(delta), grid.PhiParams.averaging(1)).data[0]
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = 1 / 9
        testing.assert_allclose(result, expected, atol=1e-15)

    def test_bias_is_added(self) -> None:
        phi = grid.PhiParams(grid.PhiParams.zeros(2).weight, np.array([1.0, -2.0]))
        result = grid.phi_refine(grid.LatentGrid(np.zeros((2, 3, 3))), phi).data
        testing.assert_array_equal(result[0], 1.0)
        testing.assert_array_equal(result[1], -2.0)

    def test_channel_mismatch(self) -> None:
        with pytest.raises(grid.ShapeMismatch):
            grid.phi_refine(grid.LatentGrid(np.zeros((2, 3, 3))), grid.PhiParams.identity(3))

    def test_rejects_non_square_kernel(self) -> None:
        with pytest.raises(grid.ShapeMismatch):
            grid.PhiParams(np.zeros((2, 3, 3, 3)), np.zeros(2))

    def test_per_level_selection(self) -> None:
        bank = (grid.PhiParams.identity(1), grid.PhiParams.zeros(1))
        assert grid.phi_for_level(bank, 1) is bank[1]
        shared = grid.PhiParams.identity(1)
        assert grid.phi_for_level(shared, 7) is shared
