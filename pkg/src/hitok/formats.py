"""
File formats for codebooks, token sequences, model checkpoints and raw images.

All binary formats are little-endian: a fixed struct header starting with a four-byte
magic and a version, followed by the payload.
"""

from __future__ import annotations

import json
import pathlib
import struct
from collections.abc import Mapping
from typing import Any, BinaryIO

import numpy as np

from hitok import codebook as cb_module
from hitok import grid, msrq, toycodec


VERSION = 1

_CODEBOOK = struct.Struct("<4sHIIB")
_CODEBOOK_MAGIC = b"HTCB"
_METRICS = (cb_module.Metric.L2, cb_module.Metric.COSINE)

_TOKENS = struct.Struct("<4sH8sIHH")
_TOKENS_MAGIC = b"HTTS"

_CHECKPOINT = struct.Struct("<4sHI")
_CHECKPOINT_MAGIC = b"HTAR"

_RAW = struct.Struct("<4sHIII")
_RAW_MAGIC = b"HTRF"


class FormatError(Exception):
    """
    Raised when a file is truncated, has the wrong magic, or an unsupported version.
    """


def _read_exact(handle: BinaryIO, size: int) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise FormatError(f"Expected {size} bytes, found {len(data)}.")
    return data


def _read_header(handle: BinaryIO, layout: struct.Struct, magic: bytes) -> tuple[Any, ...]:
    fields = layout.unpack(_read_exact(handle, layout.size))
    if fields[0] != magic:
        raise FormatError(f"Bad magic {fields[0]!r}, expected {magic!r}.")
    if fields[1] != VERSION:
        raise FormatError(f"Unsupported version {fields[1]}.")
    return fields[2:]


def _read_array(handle: BinaryIO, dtype: str, count: int) -> np.ndarray[Any, Any]:
    size = np.dtype(dtype).itemsize * count
    return np.frombuffer(_read_exact(handle, size), dtype=dtype)


# Codebooks
# ---------


def write_codebook(cb: cb_module.Codebook, path: pathlib.Path) -> None:
    with path.open("wb") as handle:
        handle.write(
            _CODEBOOK.pack(_CODEBOOK_MAGIC, VERSION, cb.size, cb.dim, _METRICS.index(cb.metric))
        )
        handle.write(cb.vectors.astype("<f4").tobytes())


def read_codebook(path: pathlib.Path) -> cb_module.Codebook:
    """
    Raises:
        FormatError: If the file is not a codebook written by write_codebook.
    """
    with path.open("rb") as handle:
        size, dim, metric = _read_header(handle, _CODEBOOK, _CODEBOOK_MAGIC)
        if metric >= len(_METRICS):
            raise FormatError(f"Unknown metric {metric}.")
        vectors = _read_array(handle, "<f4", size * dim).reshape(size, dim)
    return cb_module.Codebook(vectors.astype(np.float64), _METRICS[metric])


def codebook_to_json(cb: cb_module.Codebook) -> dict[str, Any]:
    return {
        "size": cb.size,
        "dim": cb.dim,
        "metric": cb.metric.value,
        "vectors": cb.vectors.tolist(),
    }


# Token sequences
# ---------------


def write_tokens(t: msrq.TokenSequence, path: pathlib.Path) -> None:
    """
    Header: schedule digest, vocabulary size, level count, scale count, then the
    resolutions (u16), target scales (f64) and group boundaries (u32).
    Payload: every level as u32, small to large.
    """
    sched = t.schedule
    with path.open("wb") as handle:
        handle.write(
            _TOKENS.pack(
                _TOKENS_MAGIC, VERSION, sched.digest, t.vocab_size, sched.levels, sched.scale_count
            )
        )
        handle.write(np.asarray(sched.resolutions, dtype="<u2").tobytes())
        handle.write(np.asarray(sched.target_scales, dtype="<f8").tobytes())
        handle.write(np.asarray(sched.group_boundaries, dtype="<u4").tobytes())
        handle.write(t.flat().astype("<u4").tobytes())


def read_tokens(path: pathlib.Path) -> msrq.TokenSequence:
    """
    Raises:
        FormatError: If the file is malformed or its schedule digest does not match.
    """
    with path.open("rb") as handle:
        digest, vocab_size, levels, scales = _read_header(handle, _TOKENS, _TOKENS_MAGIC)
        resolutions = _read_array(handle, "<u2", levels)
        target_scales = _read_array(handle, "<f8", scales)
        boundaries = _read_array(handle, "<u4", scales)
        try:
            sched = msrq.ScaleSchedule(
                tuple(int(r) for r in resolutions), tuple(float(s) for s in target_scales)
            )
        except msrq.InvalidSchedule as e:
            raise FormatError(str(e)) from e
        if sched.digest != digest or tuple(int(b) for b in boundaries) != sched.group_boundaries:
            raise FormatError("The token header does not match its schedule.")
        flat = _read_array(handle, "<u4", sched.token_count).astype(np.int64)
    try:
        return msrq.TokenSequence.from_flat(flat, sched, vocab_size)
    except msrq.InvalidTokens as e:
        raise FormatError(str(e)) from e


# Checkpoints
# -----------


def write_checkpoint(
    path: pathlib.Path, metadata: Mapping[str, Any], arrays: Mapping[str, np.ndarray[Any, Any]]
) -> None:
    """
    Header: magic, version, length of a UTF-8 JSON metadata block, the block itself,
    and the number of arrays. Each array is its name (u16 length + UTF-8), rank (u8),
    dimensions (u32 each) and float32 data.
    """
    meta = json.dumps(metadata, sort_keys=True).encode()
    with path.open("wb") as handle:
        handle.write(_CHECKPOINT.pack(_CHECKPOINT_MAGIC, VERSION, len(meta)))
        handle.write(meta)
        handle.write(struct.pack("<I", len(arrays)))
        for name, array in arrays.items():
            encoded = name.encode()
            handle.write(struct.pack("<HB", len(encoded), array.ndim))
            handle.write(encoded)
            handle.write(struct.pack(f"<{array.ndim}I", *array.shape))
            handle.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_checkpoint(
    path: pathlib.Path,
) -> tuple[dict[str, Any], dict[str, np.ndarray[Any, Any]]]:
    with path.open("rb") as handle:
        (meta_length,) = _read_header(handle, _CHECKPOINT, _CHECKPOINT_MAGIC)
        try:
            metadata = json.loads(_read_exact(handle, meta_length))
        except ValueError as e:
            raise FormatError(f"Unreadable checkpoint metadata: {e}") from e
        (count,) = struct.unpack("<I", _read_exact(handle, 4))
        arrays = {}
        for _ in range(count):
            name_length, ndim = struct.unpack("<HB", _read_exact(handle, 3))
            name = _read_exact(handle, name_length).decode()
            shape = struct.unpack(f"<{ndim}I", _read_exact(handle, 4 * ndim))
            arrays[name] = _read_array(handle, "<f4", int(np.prod(shape))).reshape(shape)
    return metadata, arrays


# Raw images
# ----------


def write_raw(pixels: grid.FloatArray, path: pathlib.Path) -> None:
    """Lossless planar float32 C×H×W dump, used for test fixtures."""
    channels, height, width = pixels.shape
    with path.open("wb") as handle:
        handle.write(_RAW.pack(_RAW_MAGIC, VERSION, channels, height, width))
        handle.write(np.ascontiguousarray(pixels, dtype="<f4").tobytes())


def read_raw(path: pathlib.Path) -> grid.FloatArray:
    with path.open("rb") as handle:
        channels, height, width = _read_header(handle, _RAW, _RAW_MAGIC)
        data = _read_array(handle, "<f4", channels * height * width)
    return data.reshape(channels, height, width).astype(np.float64)


def write_raw_image(img: toycodec.Image, path: pathlib.Path) -> None:
    write_raw(img.pixels, path)


def read_raw_image(path: pathlib.Path) -> toycodec.Image:
    return toycodec.Image(read_raw(path))
