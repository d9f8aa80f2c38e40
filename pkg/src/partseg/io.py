"""Readers and writers for score maps, label maps, images, boxes and parameters.

All binary writers are canonical: ``write(read(f))`` reproduces a file we
wrote byte for byte, and ``read(write(x))`` reproduces ``x`` exactly when
its floats are representable in binary32.
"""
from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .core import DetectionBox, check_labels, check_scores


class FormatError(ValueError):
    """A file did not match the expected on-disk layout."""


SCORE_MAGIC = b"SPSM"
CRBM_MAGIC = b"CRBM"
_U32 = struct.Struct("<I")


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def _unpack_header(buf: bytes, magic: bytes, count: int, path) -> tuple[int, ...]:
    if buf[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {buf[:len(magic)]!r}, expected {magic!r}")
    end = len(magic) + 4 * count
    if len(buf) < end:
        raise FormatError(f"{path}: truncated payload (header needs {end} bytes, got {len(buf)})")
    return struct.unpack_from(f"<{count}I", buf, len(magic))


def _take_floats(buf: bytes, offset: int, count: int, path) -> tuple[np.ndarray, int]:
    end = offset + 4 * count
    if len(buf) < end:
        raise FormatError(f"{path}: truncated payload (expected {end} bytes, got {len(buf)})")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return arr.astype(np.float64), end


def _check_consumed(buf: bytes, end: int, path):
    if len(buf) != end:
        raise FormatError(
            f"{path}: dimension mismatch ({len(buf) - end} bytes beyond the declared payload)"
        )


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# -- score maps ---------------------------------------------------------------

def write_scores(path, scores):
    scores = check_scores(scores)
    h, w, k = scores.shape
    Path(path).write_bytes(SCORE_MAGIC + struct.pack("<3I", h, w, k) + _f32(scores))


def read_scores(path) -> np.ndarray:
    buf = _read_bytes(path)
    h, w, k = _unpack_header(buf, SCORE_MAGIC, 3, path)
    if h < 1 or w < 1 or k < 2:
        raise FormatError(f"{path}: dimension mismatch (invalid header dims {h}x{w}x{k})")
    data, end = _take_floats(buf, 16, h * w * k, path)
    _check_consumed(buf, end, path)
    return data.reshape(h, w, k)


# -- netpbm -------------------------------------------------------------------

def _parse_netpbm(buf: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, data_offset) of a binary netpbm file."""
    if buf[:2] != magic:
        raise FormatError(f"{path}: bad magic {buf[:2]!r}, expected {magic!r}")
    pos = 2
    tokens = []
    n = len(buf)
    while len(tokens) < 3:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated payload (incomplete netpbm header)")
        tokens.append(int(buf[start:pos]))
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{path}: truncated payload (incomplete netpbm header)")
    width, height, maxval = tokens
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise FormatError(f"{path}: dimension mismatch (header {width}x{height} maxval {maxval})")
    return width, height, maxval, pos + 1


def _netpbm_payload(buf, offset, count, maxval, path) -> np.ndarray:
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    end = offset + count * dtype.itemsize
    if len(buf) < end:
        raise FormatError(f"{path}: truncated payload (expected {end} bytes, got {len(buf)})")
    _check_consumed(buf, end, path)
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


def write_pgm(path, data, maxval: int):
    data = np.asarray(data)
    h, w = data.shape
    dtype = "u1" if maxval < 256 else ">u2"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(data, dtype=dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    buf = _read_bytes(path)
    w, h, maxval, offset = _parse_netpbm(buf, b"P5", path)
    data = _netpbm_payload(buf, offset, w * h, maxval, path)
    return data.reshape(h, w).astype(np.int64), maxval


def write_labels(path, labels, num_labels: int):
    """Write a label map as a binary graymap with maxval ``num_labels - 1``."""
    if not 2 <= num_labels <= 256:
        raise ValueError(f"label maps support 2 <= K <= 256, got {num_labels}")
    labels = check_labels(labels, num_labels)
    write_pgm(path, labels, num_labels - 1)


def read_labels(path) -> tuple[np.ndarray, int]:
    """Return ``(labels, num_labels)``."""
    labels, maxval = read_pgm(path)
    if maxval > 255:
        raise FormatError(f"{path}: dimension mismatch (label maps need maxval < 256)")
    if labels.max() > maxval:
        raise FormatError(f"{path}: label out of range ({labels.max()} >= K={maxval + 1})")
    return labels, maxval + 1


def write_superpixels(path, sp):
    sp = np.asarray(sp)
    write_pgm(path, sp, max(int(sp.max()), 1))


def read_superpixels(path) -> np.ndarray:
    return read_pgm(path)[0]


def write_image(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got {image.shape}")
    if image.min() < 0 or image.max() > 255:
        raise ValueError("image intensities must lie in 0..255")
    h, w, _ = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_image(path) -> np.ndarray:
    buf = _read_bytes(path)
    w, h, maxval, offset = _parse_netpbm(buf, b"P6", path)
    if maxval != 255:
        raise FormatError(f"{path}: dimension mismatch (only maxval 255 images supported)")
    return _netpbm_payload(buf, offset, w * h * 3, maxval, path).reshape(h, w, 3).copy()


# -- boxes --------------------------------------------------------------------

def format_box(box: DetectionBox) -> str:
    return f"{box.x0} {box.y0} {box.x1} {box.y1} {float(box.confidence)!r} {box.label}"


def write_boxes(path, boxes):
    Path(path).write_text("".join(format_box(b) + "\n" for b in boxes))


def read_boxes(path) -> list[DetectionBox]:
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            x0, y0, x1, y1 = (int(p) for p in parts[:4])
            boxes.append(DetectionBox(x0, y0, x1, y1, float(parts[4]), int(parts[5])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return boxes


# -- model parameters -----------------------------------------------------------

def write_crbm(path, params):
    p = params
    flags = 1 if p.hidden_bias is not None else 0
    header = CRBM_MAGIC + struct.pack("<5I", p.grid_h, p.grid_w, p.num_labels, p.num_hidden, flags)
    chunks = [header, _f32(p.calibration), _f32(p.interactions), _f32(p.location_bias)]
    if flags & 1:
        chunks.append(_f32(p.hidden_bias))
    Path(path).write_bytes(b"".join(chunks))


def read_crbm(path):
    from .crbm import CrbmParams

    buf = _read_bytes(path)
    gh, gw, k, j, flags = _unpack_header(buf, CRBM_MAGIC, 5, path)
    if gh < 1 or gw < 1 or k < 2 or flags & ~1:
        raise FormatError(f"{path}: dimension mismatch (header {gh}x{gw} K={k} J={j} flags={flags})")
    npix = gh * gw
    off = 4 + 20
    cal, off = _take_floats(buf, off, k * k, path)
    inter, off = _take_floats(buf, off, npix * j * k, path)
    loc, off = _take_floats(buf, off, npix * k, path)
    hb = None
    if flags & 1:
        hb, off = _take_floats(buf, off, j, path)
    _check_consumed(buf, off, path)
    return CrbmParams(
        calibration=cal.reshape(k, k),
        interactions=inter.reshape(npix, j, k),
        location_bias=loc.reshape(npix, k),
        hidden_bias=hb,
        grid_h=gh,
        grid_w=gw,
    )


def parse_key_values(text: str, source="<config>") -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_key_values(path) -> dict[str, str]:
    return parse_key_values(Path(path).read_text(), str(path))


def _format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_densecrf(path, params):
    lines = [f"{f.name} = {_format_value(getattr(params, f.name))}" for f in fields(params)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_densecrf(path):
    from .densecrf import DenseCrfParams

    return DenseCrfParams.from_mapping(read_key_values(path), source=str(path))
