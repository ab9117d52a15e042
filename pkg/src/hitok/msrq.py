"""
Next-scale residual quantization over a single latent.

Every level l quantizes the area-downsampled residual at ρ_l × ρ_l,
upsamples the chosen embeddings back to the working resolution with bicubic
interpolation, refines them with φ, and subtracts them from the residual.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
from collections.abc import Sequence

import numpy as np

from hitok import codebook as cb_module
from hitok import grid


DEFAULT_RESOLUTIONS = (4, 6, 8, 10, 14, 16, 20, 24, 28, 32)
DEFAULT_SCALES = (0.25, 0.5, 1.0)


@dataclasses.dataclass(frozen=True)
class ScaleSchedule:
    """
    Per-level token-grid sides ρ_1 < … < ρ_L and target scales s_1 < … < s_N = 1.

    Level l belongs to the first scale group n with ρ_l ≤ s_n·ρ_L.
    Every s_n·ρ_L must be an integer and must itself be one of the ρ_l,
    so that each group ends exactly at its scale's native resolution.
    """

    resolutions: tuple[int, ...] = DEFAULT_RESOLUTIONS
    target_scales: tuple[float, ...] = DEFAULT_SCALES

    def __post_init__(self) -> None:
        resolutions = tuple(int(r) for r in self.resolutions)
        scales = tuple(float(s) for s in self.target_scales)
        object.__setattr__(self, "resolutions", resolutions)
        object.__setattr__(self, "target_scales", scales)

        if not resolutions:
            raise InvalidSchedule("A schedule needs at least one level.")
        if resolutions[0] < 1 or any(a >= b for a, b in zip(resolutions, resolutions[1:])):
            raise InvalidSchedule(f"Resolutions must be positive and strictly increasing: {resolutions}.")
        if not scales or scales[-1] != 1.0:
            raise InvalidSchedule(f"The last target scale must be 1: {scales}.")
        if scales[0] <= 0 or any(a >= b for a, b in zip(scales, scales[1:])):
            raise InvalidSchedule(f"Target scales must be in (0, 1] and strictly increasing: {scales}.")
        for s in scales:
            side = s * resolutions[-1]
            if side != round(side):
                raise InvalidSchedule(f"Scale {s} of ρ_L={resolutions[-1]} is not an integer side.")
            if round(side) not in resolutions:
                raise InvalidSchedule(f"Scale {s} gives side {round(side)}, which is not one of {resolutions}.")

    @property
    def levels(self) -> int:
        return len(self.resolutions)

    @property
    def native(self) -> int:
        """ρ_L, the side of the native-resolution latent."""
        return self.resolutions[-1]

    @property
    def scale_count(self) -> int:
        return len(self.target_scales)

    @property
    def scale_sizes(self) -> tuple[int, ...]:
        """The latent side s_n·ρ_L of every scale."""
        return tuple(round(s * self.native) for s in self.target_scales)

    @functools.cached_property
    def group_of_level(self) -> tuple[int, ...]:
        """The (0-based) scale group of every (0-based) level."""
        return tuple(
            next(n for n, side in enumerate(self.scale_sizes) if rho <= side)
            for rho in self.resolutions
        )

    def group_levels(self, n: int) -> range:
        """The (0-based) levels of (0-based) scale group n."""
        members = [lvl for lvl, g in enumerate(self.group_of_level) if g == n]
        return range(members[0], members[-1] + 1)

    def levels_through(self, n: int) -> int:
        """How many levels belong to scale groups 0..n."""
        return self.group_levels(n).stop

    @property
    def token_count(self) -> int:
        return sum(rho * rho for rho in self.resolutions)

    @functools.cached_property
    def level_offsets(self) -> tuple[int, ...]:
        """Start offset of every level in the flattened sequence, plus the total."""
        offsets = [0]
        for rho in self.resolutions:
            offsets.append(offsets[-1] + rho * rho)
        return tuple(offsets)

    @property
    def group_boundaries(self) -> tuple[int, ...]:
        """Cumulative token count at the end of every scale group."""
        return tuple(
            self.level_offsets[self.levels_through(n)] for n in range(self.scale_count)
        )

    def prefix(self, n: int) -> ScaleSchedule:
        """
        The schedule for scale groups 0..n alone, as if scale n were the native one.
        """
        if not 0 <= n < self.scale_count:
            raise LevelOutOfRange(f"Scale {n} is outside 0..{self.scale_count - 1}.")
        top = self.target_scales[n]
        return ScaleSchedule(
            resolutions=self.resolutions[: self.levels_through(n)],
            target_scales=tuple(s / top for s in self.target_scales[: n + 1]),
        )

    def single_scale(self) -> ScaleSchedule:
        return ScaleSchedule(resolutions=self.resolutions, target_scales=(1.0,))

    def to_json(self) -> dict[str, list[float] | list[int]]:
        return {
            "resolutions": list(self.resolutions),
            "target_scales": list(self.target_scales),
        }

    @functools.cached_property
    def digest(self) -> bytes:
        """An 8-byte fingerprint recorded in token and checkpoint headers."""
        canonical = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(canonical).digest()[:8]


DEFAULT_SCHEDULE = ScaleSchedule()


class InvalidSchedule(ValueError):
    """
    Raised when resolutions and target scales do not form a valid schedule.
    """


class ResolutionMismatch(ValueError):
    """
    Raised when a latent's spatial size does not match the schedule.
    """


class LevelOutOfRange(ValueError):
    """
    Raised when asking for a level or scale the schedule does not have.
    """


class InvalidTokens(ValueError):
    """
    Raised when index grids do not fit their schedule or vocabulary.
    """


@dataclasses.dataclass(frozen=True, eq=False)
class TokenSequence:
    """
    One index grid per level, each ρ_l × ρ_l, with values in [0, vocab_size).
    """

    levels: tuple[cb_module.IndexArray, ...]
    schedule: ScaleSchedule
    vocab_size: int

    def __post_init__(self) -> None:
        levels = tuple(np.array(level, dtype=np.int64) for level in self.levels)
        if len(levels) != self.schedule.levels:
            raise InvalidTokens(f"Expected {self.schedule.levels} levels, got {len(levels)}.")
        for level, rho in zip(levels, self.schedule.resolutions):
            if level.shape != (rho, rho):
                raise InvalidTokens(f"Expected a {rho}×{rho} grid, got {level.shape}.")
            if level.size and (level.min() < 0 or level.max() >= self.vocab_size):
                raise InvalidTokens(f"Indices must be in [0, {self.vocab_size}).")
            level.setflags(write=False)
        object.__setattr__(self, "levels", levels)

    @property
    def group_boundaries(self) -> tuple[int, ...]:
        return self.schedule.group_boundaries

    def flat(self) -> cb_module.IndexArray:
        """All indices concatenated small-to-large, each grid in row-major order."""
        return np.concatenate([level.reshape(-1) for level in self.levels])

    @classmethod
    def from_flat(
        cls, flat: Sequence[int] | cb_module.IndexArray, schedule: ScaleSchedule, vocab_size: int
    ) -> TokenSequence:
        array = np.asarray(flat, dtype=np.int64)
        if array.shape != (schedule.token_count,):
            raise InvalidTokens(f"Expected {schedule.token_count} tokens, got {array.shape}.")
        offsets = schedule.level_offsets
        return cls(
            levels=tuple(
                array[offsets[i] : offsets[i + 1]].reshape(rho, rho)
                for i, rho in enumerate(schedule.resolutions)
            ),
            schedule=schedule,
            vocab_size=vocab_size,
        )

    def prefix(self, n: int) -> TokenSequence:
        """The tokens of scale groups 0..n, under the prefix schedule."""
        sub = self.schedule.prefix(n)
        return TokenSequence(self.levels[: sub.levels], sub, self.vocab_size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (
            self.schedule == other.schedule
            and self.vocab_size == other.vocab_size
            and all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels))
        )


# Encoding
# --------


def level_contribution(
    indices: cb_module.IndexArray,
    cb: cb_module.Codebook,
    phi: grid.PhiParams,
    size: int,
) -> grid.LatentGrid:
    """
    φ(bicubic(embeddings, size)): what one level adds to a size×size latent.
    """
    upsampled = grid.bicubic_upsample(cb_module.embed(indices, cb), (size, size))
    return grid.phi_refine(upsampled, phi)


def tokenize_scale(
    latent: grid.LatentGrid,
    resolutions: Sequence[int],
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
    reuse: Sequence[cb_module.IndexArray] = (),
    record: list[tuple[grid.LatentGrid, cb_module.IndexArray]] | None = None,
) -> list[cb_module.IndexArray]:
    """
    Residual-quantize one latent over the given level resolutions.

    The first len(reuse) levels are not quantized: their stored indices are kept
    and only their contribution is subtracted from the residual.
    When record is given, every quantized level appends its downsampled residual
    and the indices chosen for it.

    Returns:
        The index grid of every level, reused ones included.
    """
    size = latent.height
    residual = latent.data.copy()
    indices: list[cb_module.IndexArray] = []
    for level, rho in enumerate(resolutions):
        if level < len(reuse):
            chosen = np.asarray(reuse[level], dtype=np.int64)
        else:
            target = grid.area_downsample(grid.LatentGrid(residual), (rho, rho))
            chosen = cb_module.quantize_grid(target, cb).indices
            if record is not None:
                record.append((target, chosen))
        indices.append(chosen)
        residual -= level_contribution(chosen, cb, grid.phi_for_level(phi, level), size).data
    return indices


def encode_nextscale(
    z: grid.LatentGrid,
    sched: ScaleSchedule,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
) -> TokenSequence:
    """
    Tokenize a native-resolution latent with plain next-scale residual quantization.

    Raises:
        ResolutionMismatch: If z is not ρ_L × ρ_L.
    """
    if z.size != (sched.native, sched.native):
        raise ResolutionMismatch(f"Expected a {sched.native}×{sched.native} latent, got {z.size}.")
    levels = tokenize_scale(z, sched.resolutions, cb, phi)
    return TokenSequence(tuple(levels), sched, cb.size)


def check_vocabulary(t: TokenSequence, cb: cb_module.Codebook) -> None:
    """
    Raises:
        InvalidTokens: If t was not produced with a codebook of cb.size entries.
    """
    if t.vocab_size != cb.size:
        raise InvalidTokens(
            f"The tokens use a vocabulary of {t.vocab_size}, the codebook has {cb.size} entries."
        )


def decode_levels(
    t: TokenSequence,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
    count: int,
    size: int,
) -> grid.LatentGrid:
    """
    Sum the contributions of the first count levels at size × size.
    """
    check_vocabulary(t, cb)
    total = np.zeros((cb.dim, size, size))
    for level in range(count):
        total += level_contribution(
            t.levels[level], cb, grid.phi_for_level(phi, level), size
        ).data
    return grid.LatentGrid(total)


def decode_accumulate(
    t: TokenSequence,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
    up_to_level: int,
) -> grid.LatentGrid:
    """
    The cumulative latent of levels 1..up_to_level at the native resolution.

    Raises:
        LevelOutOfRange: If up_to_level is outside 1..L.
        InvalidTokens: If t and cb disagree on the vocabulary size.
    """
    if not 1 <= up_to_level <= t.schedule.levels:
        raise LevelOutOfRange(f"Level {up_to_level} is outside 1..{t.schedule.levels}.")
    return decode_levels(t, cb, phi, up_to_level, t.schedule.native)


def residual_norms(
    z: grid.LatentGrid,
    t: TokenSequence,
    cb: cb_module.Codebook,
    phi: grid.PhiBank,
) -> list[float]:
    """
    ‖z − f̂(l)‖₂ after every level l, where f̂(l) is decode_accumulate(t, l).
    """
    check_vocabulary(t, cb)
    size = t.schedule.native
    residual = z.data.copy()
    norms = []
    for level in range(t.schedule.levels):
        residual -= level_contribution(
            t.levels[level], cb, grid.phi_for_level(phi, level), size
        ).data
        norms.append(float(np.linalg.norm(residual)))
    return norms
