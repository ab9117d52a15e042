import numpy as np
import pytest
from numpy import testing

from hitok import codebook, grid, msrq


class TestScaleSchedule:
    def test_default_constants(self) -> None:
        sched = msrq.DEFAULT_SCHEDULE
        assert sched.levels == 10
        assert sched.native == 32
        assert sched.scale_sizes == (8, 16, 32)
        assert sched.token_count == 3452
        assert sched.group_boundaries == (116, 668, 3452)
        assert sched.group_of_level == (0, 0, 0, 1, 1, 1, 2, 2, 2, 2)

    def test_toy_constants(self, toy_schedule: msrq.ScaleSchedule) -> None:
        assert toy_schedule.token_count == 85
        assert toy_schedule.group_boundaries == (5, 21, 85)
        assert toy_schedule.level_offsets == (0, 1, 5, 21, 85)
        assert list(toy_schedule.group_levels(0)) == [0, 1]
        assert toy_schedule.levels_through(1) == 3

    @pytest.mark.parametrize(
        "resolutions, scales",
        [
            ((1, 2, 3), (0.5, 1.0)),
            ((2, 4, 8), (0.75, 1.0)),
            ((2, 4, 8), (0.5,)),
            ((4, 2), (1.0,)),
            ((2, 2), (1.0,)),
            ((), (1.0,)),
            ((0, 2), (1.0,)),
            ((2, 4), (1.0, 0.5)),
            ((2, 4), ()),
        ],
        ids=[
            "fractional-side",
            "side-not-a-level",
            "last-scale-not-one",
            "decreasing",
            "repeated",
            "empty",
            "zero-side",
            "scales-decreasing",
            "no-scales",
        ],
    )
    def test_invalid(self, resolutions: tuple[int, ...], scales: tuple[float, ...]) -> None:
        with pytest.raises(msrq.InvalidSchedule):
            msrq.ScaleSchedule(resolutions, scales)

    def test_prefix(self) -> None:
        prefix = msrq.DEFAULT_SCHEDULE.prefix(1)
        assert prefix.resolutions == (4, 6, 8, 10, 14, 16)
        assert prefix.target_scales == (0.5, 1.0)
        assert prefix.group_boundaries == (116, 668)

    def test_prefix_of_last_scale_is_the_schedule(self, toy_schedule: msrq.ScaleSchedule) -> None:
        assert toy_schedule.prefix(2) == toy_schedule

    def test_prefix_out_of_range(self, toy_schedule: msrq.ScaleSchedule) -> None:
        with pytest.raises(msrq.LevelOutOfRange):
            toy_schedule.prefix(3)

    def test_single_scale(self, toy_schedule: msrq.ScaleSchedule) -> None:
        single = toy_schedule.single_scale()
        assert single.group_boundaries == (85,)
        assert set(single.group_of_level) == {0}

    def test_digest(self, toy_schedule: msrq.ScaleSchedule) -> None:
        assert len(toy_schedule.digest) == 8
        assert toy_schedule.digest == msrq.ScaleSchedule((1, 2, 4, 8), (0.25, 0.5, 1.0)).digest
        assert toy_schedule.digest != toy_schedule.single_scale().digest


class TestTokenSequence:
    def test_flat_round_trip(self, toy_schedule: msrq.ScaleSchedule, rng: np.random.Generator) -> None:
        flat = rng.integers(0, 7, toy_schedule.token_count)
        t = msrq.TokenSequence.from_flat(flat, toy_schedule, 7)
        testing.assert_array_equal(t.flat(), flat)
        testing.assert_array_equal(t.levels[1], flat[1:5].reshape(2, 2))

    def test_prefix(self, toy_schedule: msrq.ScaleSchedule) -> None:
        t = msrq.TokenSequence.from_flat(np.arange(85) % 9, toy_schedule, 9)
        prefix = t.prefix(1)
        assert prefix.schedule.resolutions == (1, 2, 4)
        testing.assert_array_equal(prefix.flat(), np.arange(21) % 9)

    @pytest.mark.parametrize(
        "levels",
        [
            (np.zeros((1, 1)), np.zeros((2, 2))),
            (np.zeros((1, 1)), np.zeros((2, 2)), np.zeros((3, 3)), np.zeros((8, 8))),
            (np.zeros((1, 1)), np.zeros((2, 2)), np.full((4, 4), 5), np.zeros((8, 8))),
            (np.zeros((1, 1)), np.full((2, 2), -1), np.zeros((4, 4)), np.zeros((8, 8))),
        ],
        ids=["too-few-levels", "wrong-grid", "index-too-large", "negative-index"],
    )
    def test_invalid(self, levels: tuple[np.ndarray, ...], toy_schedule: msrq.ScaleSchedule) -> None:
        with pytest.raises(msrq.InvalidTokens):
            msrq.TokenSequence(levels, toy_schedule, vocab_size=5)

    def test_from_flat_wrong_length(self, toy_schedule: msrq.ScaleSchedule) -> None:
        with pytest.raises(msrq.InvalidTokens):
            msrq.TokenSequence.from_flat(np.zeros(84, dtype=int), toy_schedule, 4)

    def test_equality(self, toy_schedule: msrq.ScaleSchedule) -> None:
        a = msrq.TokenSequence.from_flat(np.zeros(85, dtype=int), toy_schedule, 4)
        b = msrq.TokenSequence.from_flat(np.zeros(85, dtype=int), toy_schedule, 4)
        c = msrq.TokenSequence.from_flat(np.ones(85, dtype=int), toy_schedule, 4)
        assert a == b
        assert a != c


class TestEncodeNextscale:
    def test_zero_latent_picks_the_zero_code(self, l2_codebook: codebook.Codebook) -> None:
        sched = msrq.ScaleSchedule((1, 2, 4), (1.0,))
        z = grid.LatentGrid(np.zeros((32, 4, 4)))
        t = msrq.encode_nextscale(z, sched, l2_codebook, grid.PhiParams.identity(32))
        assert not t.flat().any()

    def test_single_level_is_plain_quantization(
        self, l2_codebook: codebook.Codebook, rng: np.random.Generator
    ) -> None:
        sched = msrq.ScaleSchedule((4,), (1.0,))
        z = grid.LatentGrid(rng.normal(size=(32, 4, 4)))
        t = msrq.encode_nextscale(z, sched, l2_codebook, grid.PhiParams.identity(32))
        testing.assert_array_equal(t.levels[0], codebook.quantize_grid(z, l2_codebook).indices)

    def test_two_levels_by_hand(self, l2_codebook: codebook.Codebook, rng: np.random.Generator) -> None:
        sched = msrq.ScaleSchedule((2, 4), (1.0,))
        phi = grid.PhiParams.averaging(32)
        z = grid.LatentGrid(rng.normal(size=(32, 4, 4)))
        t = msrq.encode_nextscale(z, sched, l2_codebook, phi)

        first = codebook.quantize_grid(grid.area_downsample(z, (2, 2)), l2_codebook).indices
        upsampled = grid.bicubic_upsample(codebook.embed(first, l2_codebook), (4, 4))
        residual = z - grid.phi_refine(upsampled, phi)
        second = codebook.quantize_grid(residual, l2_codebook).indices
        testing.assert_array_equal(t.levels[0], first)
        testing.assert_array_equal(t.levels[1], second)

    def test_per_level_phi(self, l2_codebook: codebook.Codebook, rng: np.random.Generator) -> None:
        sched = msrq.ScaleSchedule((2, 4), (1.0,))
        z = grid.LatentGrid(rng.normal(size=(32, 4, 4)))
        # A zero φ on the first level leaves the residual untouched for the second.
        bank = (grid.PhiParams.zeros(32), grid.PhiParams.identity(32))
        t = msrq.encode_nextscale(z, sched, l2_codebook, bank)
        testing.assert_array_equal(t.levels[1], codebook.quantize_grid(z, l2_codebook).indices)

    def test_wrong_resolution(self, l2_codebook: codebook.Codebook, toy_schedule: msrq.ScaleSchedule) -> None:
        with pytest.raises(msrq.ResolutionMismatch):
            msrq.encode_nextscale(
                grid.LatentGrid(np.zeros((32, 4, 4))), toy_schedule, l2_codebook, grid.PhiParams.identity(32)
            )

    def test_record_collects_every_level(
        self, l2_codebook: codebook.Codebook, toy_schedule: msrq.ScaleSchedule, rng: np.random.Generator
    ) -> None:
        z = grid.LatentGrid(rng.normal(size=(32, 8, 8)))
        record: list[tuple[grid.LatentGrid, codebook.IndexArray]] = []
        t = msrq.tokenize_scale(z, toy_schedule.resolutions, l2_codebook, grid.PhiParams.identity(32), record=record)
        assert [target.size for target, _ in record] == [(1, 1), (2, 2), (4, 4), (8, 8)]
        for (_, chosen), level in zip(record, t):
            testing.assert_array_equal(chosen, level)


class TestDecode:
    def test_accumulate_sums_contributions(
        self, l2_codebook: codebook.Codebook, toy_schedule: msrq.ScaleSchedule, rng: np.random.Generator
    ) -> None:
        t = msrq.TokenSequence.from_flat(rng.integers(0, 32, 85), toy_schedule, 32)
        phi = grid.PhiParams.identity(32)
        expected = sum(
            (msrq.level_contribution(t.levels[i], l2_codebook, phi, 8).data for i in range(3)),
            np.zeros((32, 8, 8)),
        )
        testing.assert_allclose(msrq.decode_accumulate(t, l2_codebook, phi, 3).data, expected, atol=1e-12)

    def test_first_level_is_constant(
        self, l2_codebook: codebook.Codebook, toy_schedule: msrq.ScaleSchedule, rng: np.random.Generator
    ) -> None:
        t = msrq.TokenSequence.from_flat(rng.integers(0, 32, 85), toy_schedule, 32)
        decoded = msrq.decode_accumulate(t, l2_codebook, grid.PhiParams.identity(32), 1).data
        code = l2_codebook.vectors[t.levels[0][0, 0]]
        testing.assert_allclose(decoded, np.broadcast_to(code[:, None, None], decoded.shape), atol=1e-12)

    @pytest.mark.parametrize("level", [0, 5], ids=["zero", "past-the-end"])
    def test_level_out_of_range(
        self, level: int, l2_codebook: codebook.Codebook, toy_schedule: msrq.ScaleSchedule
    ) -> None:
        t = msrq.TokenSequence.from_flat(np.zeros(85, dtype=int), toy_schedule, 32)
        with pytest.raises(msrq.LevelOutOfRange):
            msrq.decode_accumulate(t, l2_codebook, grid.PhiParams.identity(32), level)

    @pytest.mark.parametrize("size", [16, 64], ids=["smaller-codebook", "larger-codebook"])
    def test_codebook_of_another_size(
        self, size: int, toy_schedule: msrq.ScaleSchedule, rng: np.random.Generator
    ) -> None:
        t = msrq.TokenSequence.from_flat(np.full(85, 31), toy_schedule, 32)
        other = codebook.Codebook(rng.normal(size=(size, 32)), codebook.Metric.L2)
        z = grid.LatentGrid(rng.normal(size=(32, 8, 8)))
        phi = grid.PhiParams.identity(32)
        with pytest.raises(msrq.InvalidTokens):
            msrq.decode_accumulate(t, other, phi, 4)
        with pytest.raises(msrq.InvalidTokens):
            msrq.residual_norms(z, t, other, phi)

    def test_residual_norms_match_decoding(
        self, l2_codebook: codebook.Codebook, toy_schedule: msrq.ScaleSchedule, rng: np.random.Generator
    ) -> None:
        z = grid.LatentGrid(rng.normal(size=(32, 8, 8)))
        phi = grid.PhiParams.identity(32)
        t = msrq.encode_nextscale(z, toy_schedule, l2_codebook, phi)
        norms = msrq.residual_norms(z, t, l2_codebook, phi)
        assert len(norms) == 4
        for level, norm in enumerate(norms, start=1):
            assert norm == pytest.approx((z - msrq.decode_accumulate(t, l2_codebook, phi, level)).norm())

    def test_residual_norms_do_not_increase(
        self, l2_codebook: codebook.Codebook, toy_schedule: msrq.ScaleSchedule, rng: np.random.Generator
    ) -> None:
        z = grid.LatentGrid(rng.normal(size=(32, 8, 8)))
        phi = grid.PhiParams.identity(32)
        t = msrq.encode_nextscale(z, toy_schedule, l2_codebook, phi)
        norms = [z.norm(), *msrq.residual_norms(z, t, l2_codebook, phi)]
        assert all(b <= a * (1 + 1e-9) for a, b in zip(norms, norms[1:]))
