"""
Hierarchical tokenization: residual quantization over progressively larger image scales.

The levels of a schedule are partitioned into scale groups. Scale n is tokenized from
its own latent Z_{s_n}; the levels of earlier groups are not quantized again, their
stored indices are reused and only their contributions, re-upsampled to the size of
Z_{s_n}, are subtracted. The tokens of groups 1..n therefore depend on scales 1..n only,
and they are enough to decode the image at scale n.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence

import numpy as np

from hitok import codebook as cb_module
from hitok import grid, msrq, toycodec


@dataclasses.dataclass(frozen=True)
class MultiScaleFeatures:
    """
    The latents Z_{s_1}, …, Z_{s_N} of an image encoded at every target scale.
    """

    per_scale: tuple[grid.LatentGrid, ...]

    def __post_init__(self) -> None:
        per_scale = tuple(self.per_scale)
        if not per_scale:
            raise ScaleMismatch("At least one scale is required.")
        for latent in per_scale:
            if latent.height != latent.width:
                raise ScaleMismatch(f"Latents must be square, got {latent.size}.")
        sides = [latent.height for latent in per_scale]
        if any(a >= b for a, b in zip(sides, sides[1:])):
            raise ScaleMismatch(f"Latent sizes must strictly increase: {sides}.")
        object.__setattr__(self, "per_scale", per_scale)

    @property
    def sides(self) -> tuple[int, ...]:
        return tuple(latent.height for latent in self.per_scale)

    def truncate(self, n: int) -> MultiScaleFeatures:
        """The features of (0-based) scales 0..n."""
        return MultiScaleFeatures(self.per_scale[: n + 1])

    @classmethod
    def from_image(
        cls,
        image: toycodec.Image,
        codec: toycodec.PatchCodec,
        sched: msrq.ScaleSchedule,
    ) -> MultiScaleFeatures:
        """
        Encode the image resized to every target scale, Z_n = E(resize(I, s_n)).

        Raises:
            ScaleMismatch: If the image does not encode to a ρ_L × ρ_L latent.
        """
        native = image.height // codec.patch
        if (image.height, image.width) != (native * codec.patch,) * 2 or native != sched.native:
            raise ScaleMismatch(
                f"A {image.height}×{image.width} image does not encode to {sched.native}×{sched.native}."
            )
        return cls(
            tuple(
                codec.encode_image(toycodec.resize_image(image, side * codec.patch))
                for side in sched.scale_sizes
            )
        )


class ScaleMismatch(ValueError):
    """
    Raised when multi-scale features are inconsistent with each other or with a schedule.
    """


class ScaleOutOfRange(ValueError):
    """
    Raised when asking to decode a scale the schedule does not have.
    """


class ScheduleMismatch(ValueError):
    """
    Raised when two token sequences cannot be compared because their schedules differ.
    """


def _check_features(feats: MultiScaleFeatures, sched: msrq.ScaleSchedule) -> None:
    if feats.sides != sched.scale_sizes:
        raise ScaleMismatch(
            f"Feature sides {feats.sides} do not match the schedule's scales {sched.scale_sizes}."
        )


def encode_hierarchical(
    feats: MultiScaleFeatures,
    sched: msrq.ScaleSchedule,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
    *,
    record: list[tuple[grid.LatentGrid, cb_module.IndexArray]] | None = None,
) -> msrq.TokenSequence:
    """
    Tokenize every scale in turn, reusing the tokens of the scales before it.

    For scale n the working latent is Z_{s_n}. Levels already tokenized at a smaller
    scale keep their indices and only have their contribution subtracted;
    the new levels of group n are quantized from the residual.

    Raises:
        ScaleMismatch: If the features do not match the schedule's target scales.
    """
    _check_features(feats, sched)
    tokens: list[cb_module.IndexArray] = []
    for n, latent in enumerate(feats.per_scale):
        resolutions = sched.resolutions[: sched.levels_through(n)]
        tokens = msrq.tokenize_scale(latent, resolutions, cb, phi, reuse=tokens, record=record)
    return msrq.TokenSequence(tuple(tokens), sched, cb.size)


def decode_at_scale(
    t: msrq.TokenSequence,
    n: int,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
    *,
    via_native: bool = False,
) -> grid.LatentGrid:
    """
    Decode the latent of (1-based) scale n from the tokens of groups 1..n.

    Each level is upsampled straight to s_n·ρ_L. With via_native the levels are
    accumulated at ρ_L and the sum is area-downsampled instead.

    Raises:
        ScaleOutOfRange: If n is outside 1..N.
        msrq.InvalidTokens: If t and cb disagree on the vocabulary size.
    """
    sched = t.schedule
    if not 1 <= n <= sched.scale_count:
        raise ScaleOutOfRange(f"Scale {n} is outside 1..{sched.scale_count}.")
    count = sched.levels_through(n - 1)
    side = sched.scale_sizes[n - 1]
    if via_native:
        full = msrq.decode_levels(t, cb, phi, count, sched.native)
        return grid.area_downsample(full, (side, side))
    return msrq.decode_levels(t, cb, phi, count, side)


def prefix_overlap_check(
    t_full: msrq.TokenSequence, t_small: msrq.TokenSequence, n: int
) -> bool:
    """
    Whether the tokens of (1-based) scale groups 1..n agree between two sequences.

    Raises:
        ScheduleMismatch: If the two schedules do not share the levels of groups 1..n.
    """
    full, small = t_full.schedule, t_small.schedule
    if not 1 <= n <= min(full.scale_count, small.scale_count):
        raise ScheduleMismatch(f"Scale {n} is not present in both schedules.")
    count = full.levels_through(n - 1)
    if (
        small.levels_through(n - 1) != count
        or full.resolutions[:count] != small.resolutions[:count]
    ):
        raise ScheduleMismatch("The schedules differ over the compared scale groups.")
    return all(
        np.array_equal(a, b) for a, b in zip(t_full.levels[:count], t_small.levels[:count])
    )


def group_residual_norms(
    feats: MultiScaleFeatures,
    t: msrq.TokenSequence,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
) -> list[list[float]]:
    """
    For every scale group, ‖Z_{s_n} − f̂‖ after each of the group's own levels.

    f̂ accumulates all levels up to and including the current one at s_n·ρ_L.
    """
    sched = t.schedule
    _check_features(feats, sched)
    msrq.check_vocabulary(t, cb)
    norms: list[list[float]] = []
    for n, latent in enumerate(feats.per_scale):
        side = latent.height
        residual = latent.data.copy()
        group: list[float] = []
        for level in range(sched.levels_through(n)):
            residual -= msrq.level_contribution(
                t.levels[level], cb, grid.phi_for_level(phi, level), side
            ).data
            if sched.group_of_level[level] == n:
                group.append(float(np.linalg.norm(residual)))
        norms.append(group)
    return norms


def prefix_encodings(
    feats: MultiScaleFeatures,
    sched: msrq.ScaleSchedule,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
) -> Sequence[msrq.TokenSequence]:
    """
    Encode the truncated features of every scale on its own prefix schedule.
    """
    return [
        encode_hierarchical(feats.truncate(n), sched.prefix(n), cb, phi)
        for n in range(sched.scale_count)
    ]
