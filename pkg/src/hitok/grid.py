from __future__ import annotations

import dataclasses
import functools
import math
from collections.abc import Callable, Sequence

import numpy as np
import numpy.typing as npt


FloatArray = npt.NDArray[np.float64]

# Cubic-convolution parameter. -0.75 matches the common framework default,
# -0.5 gives the Catmull-Rom spline.
BICUBIC_A = -0.75


# Note [Resampling as matrices]
# -----------------------------
# Every resampling kernel here is separable, so resizing an h×w plane to rows×cols
# is R @ plane @ C.T, where R (rows×h) and C (cols×w) only depend on the sizes.
# We build those matrices once per (src, dst) pair and cache them.
#
# Coordinates use half-pixel alignment: destination pixel i is centred on
# source coordinate (i + 0.5) * src / dst - 0.5. Samples that fall outside the
# source are clamped to the edge pixel.
#
# Area weights are fractional: destination cell i covers the half-open interval
# [i * src / dst, (i + 1) * src / dst) of the source axis, and each source cell is
# weighted by the length of its overlap with that interval. Every row sums to one,
# and every source cell contributes a total weight of dst / src, so the global
# mean of a plane is preserved exactly.


@dataclasses.dataclass(frozen=True)
class LatentGrid:
    """
    A channels×height×width field of real values.

    The array is copied to float64 and made read-only on construction.
    """

    data: FloatArray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatch(f"Expected a non-empty C×H×W array, got {data.shape}.")
        if not np.all(np.isfinite(data)):
            raise NonFiniteGrid
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def size(self) -> tuple[int, int]:
        return self.height, self.width

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> LatentGrid:
        return cls(np.zeros((channels, height, width)))

    def __add__(self, other: LatentGrid) -> LatentGrid:
        _check_same_shape(self, other)
        return LatentGrid(self.data + other.data)

    def __sub__(self, other: LatentGrid) -> LatentGrid:
        _check_same_shape(self, other)
        return LatentGrid(self.data - other.data)

    def scale(self, factor: float) -> LatentGrid:
        return LatentGrid(self.data * factor)

    def norm(self) -> float:
        """Frobenius norm over all channels and cells."""
        return float(np.linalg.norm(self.data))


class ShapeMismatch(ValueError):
    """
    Raised when arrays or grids do not have the shapes an operation needs.
    """


class NonFiniteGrid(ValueError):
    """
    Raised when a LatentGrid would contain NaN or infinite values.
    """


class InvalidTarget(ValueError):
    """
    Raised when a resampling target is the wrong way round for the operation.

    Area downsampling cannot enlarge a grid, and bicubic upsampling cannot shrink one.
    """


def _check_same_shape(a: LatentGrid, b: LatentGrid) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{a.data.shape} != {b.data.shape}")


# Kernels
# -------


def cubic_kernel(x: float, a: float = BICUBIC_A) -> float:
    """
    The cubic-convolution kernel with parameter a, supported on [-2, 2].
    """
    x = abs(x)
    if x <= 1.0:
        return ((a + 2) * x - (a + 3)) * x * x + 1
    if x < 2.0:
        return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return 0.0


def linear_kernel(x: float) -> float:
    x = abs(x)
    return 1.0 - x if x < 1.0 else 0.0


def _interpolation_matrix(
    src: int, dst: int, kernel: Callable[[float], float], taps: Sequence[int]
) -> FloatArray:
    weights = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        x = (i + 0.5) * scale - 0.5
        x0 = math.floor(x)
        t = x - x0
        for offset in taps:
            j = min(max(x0 + offset, 0), src - 1)
            weights[i, j] += kernel(offset - t)
    return weights


@functools.lru_cache(maxsize=256)
def area_matrix(src: int, dst: int) -> FloatArray:
    """
    Fractional-overlap averaging weights mapping a source axis onto a shorter one.

    See Note [Resampling as matrices].

    Raises:
        InvalidTarget: If dst is larger than src.
    """
    if not 1 <= dst <= src:
        raise InvalidTarget(f"Cannot area-resample {src} cells onto {dst}.")
    weights = np.zeros((dst, src))
    for i in range(dst):
        # Work in units of 1/dst source cells so that the boundaries are integers.
        start, stop = i * src, (i + 1) * src
        for j in range(start // dst, min(src, -(-stop // dst))):
            overlap = min(stop, (j + 1) * dst) - max(start, j * dst)
            if overlap > 0:
                weights[i, j] = overlap / src
    weights.setflags(write=False)
    return weights


@functools.lru_cache(maxsize=256)
def bicubic_matrix(src: int, dst: int, a: float = BICUBIC_A) -> FloatArray:
    """
    Cubic-convolution interpolation weights. See Note [Resampling as matrices].
    """
    weights = _interpolation_matrix(
        src, dst, functools.partial(cubic_kernel, a=a), taps=(-1, 0, 1, 2)
    )
    weights.setflags(write=False)
    return weights


@functools.lru_cache(maxsize=256)
def bilinear_matrix(src: int, dst: int) -> FloatArray:
    """
    Linear interpolation weights. See Note [Resampling as matrices].
    """
    weights = _interpolation_matrix(src, dst, linear_kernel, taps=(0, 1))
    weights.setflags(write=False)
    return weights


def _apply(array: FloatArray, rows: FloatArray, cols: FloatArray) -> FloatArray:
    if array.ndim != 3:
        raise ShapeMismatch(f"Expected a C×H×W array, got {array.shape}.")
    return np.einsum("ih,chw,jw->cij", rows, array, cols)


def resize_area(array: FloatArray, size: tuple[int, int]) -> FloatArray:
    """
    Area-downsample a C×H×W array to size.

    Raises:
        InvalidTarget: If size is larger than the array along either axis.
    """
    rows, cols = size
    return _apply(array, area_matrix(array.shape[1], rows), area_matrix(array.shape[2], cols))


def resize_bicubic(
    array: FloatArray, size: tuple[int, int], *, a: float = BICUBIC_A
) -> FloatArray:
    rows, cols = size
    return _apply(
        array,
        bicubic_matrix(array.shape[1], rows, a),
        bicubic_matrix(array.shape[2], cols, a),
    )


def resize_bilinear(array: FloatArray, size: tuple[int, int]) -> FloatArray:
    rows, cols = size
    return _apply(
        array, bilinear_matrix(array.shape[1], rows), bilinear_matrix(array.shape[2], cols)
    )


# Grid operations
# ---------------


def area_downsample(g: LatentGrid, target: tuple[int, int]) -> LatentGrid:
    """
    Average a grid onto a coarser one.

    Each output cell is the mean of the source over its footprint,
    with fractional weights where footprints split source cells.

    Args:
        g: The grid to downsample.
        target: The output (rows, cols).

    Raises:
        InvalidTarget: If target is larger than the grid.
    """
    rows, cols = target
    if rows > g.height or cols > g.width:
        raise InvalidTarget(f"Cannot area-downsample {g.size} to {target}.")
    if target == g.size:
        return g
    return LatentGrid(resize_area(g.data, target))


def bicubic_upsample(g: LatentGrid, target: tuple[int, int]) -> LatentGrid:
    """
    Interpolate a grid onto a finer one with cubic convolution (a = -0.75).

    Values are not clipped, so the output may overshoot the input range.

    Raises:
        InvalidTarget: If target is smaller than the grid.
    """
    rows, cols = target
    if rows < g.height or cols < g.width:
        raise InvalidTarget(f"Cannot bicubic-upsample {g.size} to {target}.")
    if target == g.size:
        return g
    return LatentGrid(resize_bicubic(g.data, target))


def bilinear_upsample(g: LatentGrid, target: tuple[int, int]) -> LatentGrid:
    rows, cols = target
    if rows < g.height or cols < g.width:
        raise InvalidTarget(f"Cannot bilinear-upsample {g.size} to {target}.")
    if target == g.size:
        return g
    return LatentGrid(resize_bilinear(g.data, target))


# Refinement
# ----------


@dataclasses.dataclass(frozen=True)
class PhiParams:
    """
    A 3×3 same-padding convolution applied after upsampling level embeddings.

    weight has shape (channels_out, channels_in, 3, 3) with channels_out == channels_in,
    bias has shape (channels,).
    """

    weight: FloatArray
    bias: FloatArray

    def __post_init__(self) -> None:
        weight = np.array(self.weight, dtype=np.float64)
        bias = np.array(self.bias, dtype=np.float64)
        if weight.ndim != 4 or weight.shape[2:] != (3, 3) or weight.shape[0] != weight.shape[1]:
            raise ShapeMismatch(f"Expected a C×C×3×3 kernel, got {weight.shape}.")
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"Expected a bias of length {weight.shape[0]}, got {bias.shape}.")
        weight.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def channels(self) -> int:
        return int(self.weight.shape[0])

    @classmethod
    def identity(cls, channels: int) -> PhiParams:
        weight = np.zeros((channels, channels, 3, 3))
        weight[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        return cls(weight, np.zeros(channels))

    @classmethod
    def zeros(cls, channels: int) -> PhiParams:
        return cls(np.zeros((channels, channels, 3, 3)), np.zeros(channels))

    @classmethod
    def averaging(cls, channels: int) -> PhiParams:
        """Each output channel is the 3×3 box mean of the same input channel."""
        weight = np.zeros((channels, channels, 3, 3))
        weight[np.arange(channels), np.arange(channels)] = 1.0 / 9.0
        return cls(weight, np.zeros(channels))

    def is_identity(self) -> bool:
        return bool(
            np.array_equal(self.weight, PhiParams.identity(self.channels).weight)
            and not np.any(self.bias)
        )


# A shared φ, or one φ per quantization level.
PhiBank = PhiParams | Sequence[PhiParams]


def phi_for_level(phi: PhiBank, level: int) -> PhiParams:
    """
    Select the φ used for a (0-based) level.
    """
    if isinstance(phi, PhiParams):
        return phi
    return phi[level]


def phi_refine(g: LatentGrid, phi: PhiParams) -> LatentGrid:
    """
    Apply φ as a 3×3 zero-padded convolution.

    Raises:
        ShapeMismatch: If φ was built for a different number of channels.
    """
    if phi.channels != g.channels:
        raise ShapeMismatch(f"φ has {phi.channels} channels, the grid has {g.channels}.")
    if phi.is_identity():
        return g
    padded = np.pad(g.data, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(g.data)
    for dy in range(3):
        for dx in range(3):
            window = padded[:, dy : dy + g.height, dx : dx + g.width]
            out += np.einsum("oc,chw->ohw", phi.weight[:, :, dy, dx], window)
    out += phi.bias[:, None, None]
    return LatentGrid(out)
