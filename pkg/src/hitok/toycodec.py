"""
An analytic stand-in for a learned image autoencoder, plus synthetic data and metrics.

Each non-overlapping 16×16×3 patch is projected onto n_z orthonormal directions, so
the codec is linear and lossless on the span of those directions. Quantization is then
the only lossy stage between an image and its tokens.
"""

from __future__ import annotations

import dataclasses
import functools
import math
import pathlib

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw
from skimage import filters, metrics

from hitok import grid


PATCH = 16
CHANNELS = 3
PSNR_CAP = 100.0

# SSIM constants for a unit dynamic range.
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclasses.dataclass(frozen=True)
class Image:
    """
    A 3×H×W image with pixel values in [0, 1].
    """

    pixels: grid.FloatArray

    def __post_init__(self) -> None:
        pixels = np.array(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[0] != CHANNELS or min(pixels.shape) < 1:
            raise InvalidImage(f"Expected a 3×H×W array, got {pixels.shape}.")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise InvalidImage("Pixel values must be finite and within [0, 1].")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[2])


class InvalidImage(ValueError):
    """
    Raised when pixel data or image dimensions are unusable.
    """


# Codec
# -----


def _dct_atom(u: int, v: int) -> grid.FloatArray:
    """The orthonormal 2-D DCT-II basis function (u, v) on a PATCH×PATCH block."""
    n = np.arange(PATCH)
    cu = math.sqrt((1 if u == 0 else 2) / PATCH)
    cv = math.sqrt((1 if v == 0 else 2) / PATCH)
    rows = cu * np.cos(math.pi * (2 * n + 1) * u / (2 * PATCH))
    cols = cv * np.cos(math.pi * (2 * n + 1) * v / (2 * PATCH))
    return np.outer(rows, cols)


@functools.lru_cache(maxsize=16)
def _projection(n_z: int, seed: int) -> grid.FloatArray:
    # The span is the n_z lowest-frequency DCT atoms, taken across the three channels
    # in order of increasing u + v. A seeded rotation mixes them into the latent axes.
    order = sorted(
        ((u + v, c, u, v) for u in range(PATCH) for v in range(PATCH) for c in range(CHANNELS))
    )
    atoms = np.zeros((n_z, CHANNELS, PATCH, PATCH))
    for row, (_, c, u, v) in enumerate(order[:n_z]):
        atoms[row, c] = _dct_atom(u, v)
    atoms = atoms.reshape(n_z, -1)

    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((n_z, n_z)))
    rotation = q * np.sign(np.diag(r))
    basis: grid.FloatArray = rotation @ atoms
    basis.setflags(write=False)
    return basis


@dataclasses.dataclass(frozen=True)
class PatchCodec:
    """
    Encoder/decoder with compression factor 1/16.

    The basis has orthonormal rows, so decode is the transpose of encode.
    """

    n_z: int = 32
    seed: int = 0
    patch: int = PATCH

    def __post_init__(self) -> None:
        if not 1 <= self.n_z <= CHANNELS * PATCH * PATCH:
            raise InvalidImage(f"n_z must be in 1..{CHANNELS * PATCH * PATCH}.")

    @property
    def basis(self) -> grid.FloatArray:
        """n_z × 768 matrix with orthonormal rows."""
        return _projection(self.n_z, self.seed)

    def encode_image(self, img: Image) -> grid.LatentGrid:
        """
        Project every 16×16 patch onto the basis.

        Raises:
            InvalidImage: If a dimension is not divisible by 16.
        """
        if img.height % self.patch or img.width % self.patch:
            raise InvalidImage(
                f"Image dimensions {img.height}×{img.width} are not divisible by {self.patch}."
            )
        h, w = img.height // self.patch, img.width // self.patch
        patches = (
            img.pixels.reshape(CHANNELS, h, self.patch, w, self.patch)
            .transpose(1, 3, 0, 2, 4)
            .reshape(h, w, -1)
        )
        return grid.LatentGrid(np.einsum("kd,hwd->khw", self.basis, patches))

    def decode_pixels(self, z: grid.LatentGrid) -> grid.FloatArray:
        """
        Reassemble patches from the transpose projection, without clamping.
        """
        if z.channels != self.n_z:
            raise grid.ShapeMismatch(f"Latent has {z.channels} channels, the codec {self.n_z}.")
        patches = np.einsum("kd,khw->hwd", self.basis, z.data)
        pixels = (
            patches.reshape(z.height, z.width, CHANNELS, self.patch, self.patch)
            .transpose(2, 0, 3, 1, 4)
            .reshape(CHANNELS, z.height * self.patch, z.width * self.patch)
        )
        return pixels

    def decode_latent(self, z: grid.LatentGrid) -> Image:
        """The decoded image, clamped to [0, 1]."""
        return Image(np.clip(self.decode_pixels(z), 0.0, 1.0))


# Resizing
# --------


def resize_image(img: Image, side: int) -> Image:
    """Area-downsample a square image to side × side."""
    if (img.height, img.width) == (side, side):
        return img
    return Image(np.clip(grid.resize_area(img.pixels, (side, side)), 0.0, 1.0))


def bilinear_resize(img: Image, size: tuple[int, int]) -> Image:
    """
    Bilinearly upsample an image to size, clamped to [0, 1].

    Raises:
        grid.InvalidTarget: If size is smaller than the image along either axis.
    """
    upsampled = grid.bilinear_upsample(grid.LatentGrid(img.pixels), size)
    return Image(np.clip(upsampled.data, 0.0, 1.0))


# Degradation
# -----------


def gaussian_blur(pixels: grid.FloatArray, sigma: float) -> grid.FloatArray:
    """Gaussian blur of every channel of a C×H×W array, with mirrored borders."""
    if sigma <= 0:
        return pixels
    blurred: grid.FloatArray = filters.gaussian(
        np.asarray(pixels, dtype=np.float64),
        sigma=sigma,
        mode="reflect",
        channel_axis=0,
        preserve_range=True,
    )
    return blurred


def degrade(
    img: Image,
    blur_sigma: float = 1.0,
    factor: int = 4,
    noise_sigma: float = 0.01,
    seed: int = 0,
) -> Image:
    """
    Blur, area-downsample by factor, add Gaussian noise, clamp to [0, 1].

    Raises:
        InvalidImage: If the image dimensions are not divisible by factor.
    """
    if factor < 1 or img.height % factor or img.width % factor:
        raise InvalidImage(f"{img.height}×{img.width} is not divisible by {factor}.")
    pixels = gaussian_blur(img.pixels, blur_sigma)
    if factor > 1:
        pixels = grid.resize_area(pixels, (img.height // factor, img.width // factor))
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        pixels = pixels + rng.normal(0.0, noise_sigma, size=pixels.shape)
    return Image(np.clip(pixels, 0.0, 1.0))


# Metrics
# -------


def _check_pair(a: Image, b: Image) -> None:
    if a.pixels.shape != b.pixels.shape:
        raise grid.ShapeMismatch(f"{a.pixels.shape} != {b.pixels.shape}")


def psnr(a: Image, b: Image) -> float:
    """
    Peak signal-to-noise ratio in dB with peak 1.0, capped at PSNR_CAP.
    """
    _check_pair(a, b)
    if np.array_equal(a.pixels, b.pixels):
        return PSNR_CAP
    return min(PSNR_CAP, float(metrics.peak_signal_noise_ratio(a.pixels, b.pixels, data_range=1.0)))


def _global_ssim(x: grid.FloatArray, y: grid.FloatArray) -> float:
    # One window over the whole plane.
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = ((x - mx) * (y - my)).mean()
    return float(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))


def ssim(a: Image, b: Image) -> float:
    """
    Structural similarity with an 11×11 Gaussian window (σ = 1.5), averaged over channels.

    Images smaller than the window are compared with a single global window.
    """
    _check_pair(a, b)
    if min(a.height, a.width) < SSIM_WINDOW:
        return float(np.mean([_global_ssim(x, y) for x, y in zip(a.pixels, b.pixels)]))
    return float(
        metrics.structural_similarity(
            a.pixels,
            b.pixels,
            win_size=SSIM_WINDOW,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=1.0,
            channel_axis=0,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
    )


# Synthetic corpus
# ----------------


def synthetic_image(rng: np.random.Generator, size: int) -> Image:
    """
    A procedural image: a colour gradient, a Gabor texture and a few flat polygons.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    pixels = np.empty((CHANNELS, size, size))
    for c in range(CHANNELS):
        gx, gy, base = rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(0.3, 0.7)
        pixels[c] = base + gx * (xx - 0.5) + gy * (yy - 0.5)

    theta = rng.uniform(0, math.pi)
    frequency = rng.uniform(2.0, 8.0)
    cx, cy, width = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.15, 0.35)
    envelope = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width**2))
    carrier = np.cos(2 * math.pi * frequency * (xx * math.cos(theta) + yy * math.sin(theta)))
    pixels += rng.uniform(0.1, 0.25) * (envelope * carrier)[None] * rng.uniform(0.5, 1.0, (CHANNELS, 1, 1))

    canvas = PILImage.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    colours = []
    for shape in range(int(rng.integers(1, 4))):
        corners = [tuple(float(v) for v in rng.uniform(0, size, 2)) for _ in range(int(rng.integers(3, 6)))]
        draw.polygon(corners, fill=shape + 1)
        colours.append(rng.uniform(0.0, 1.0, CHANNELS))
    labels = np.asarray(canvas)
    for shape, colour in enumerate(colours):
        mask = labels == shape + 1
        pixels[:, mask] = 0.5 * pixels[:, mask] + 0.5 * colour[:, None]
    return Image(np.clip(pixels, 0.0, 1.0))


def synthetic_corpus(count: int, size: int, seed: int) -> list[Image]:
    """
    count procedural images; the same seed always gives the same corpus.
    """
    return [
        synthetic_image(np.random.default_rng([seed, index]), size) for index in range(count)
    ]


# Files
# -----


def save_png(img: Image, path: pathlib.Path) -> None:
    data = np.round(img.pixels.transpose(1, 2, 0) * 255).astype(np.uint8)
    PILImage.fromarray(data).save(path, format="PNG")


def load_png(path: pathlib.Path) -> Image:
    with PILImage.open(path) as handle:
        data = np.asarray(handle.convert("RGB"), dtype=np.float64) / 255.0
    return Image(data.transpose(2, 0, 1))
