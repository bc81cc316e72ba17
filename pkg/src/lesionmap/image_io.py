"""Reading and writing images: PNG (8-bit gray/RGB) and binary PPM/PGM.

The PNG writer emits non-interlaced images with filter type 0 on every
scanline; the reader additionally understands the other four filters so
externally produced files load too. Writes go to a temporary file that is
renamed into place on success, so failures never leave partial output.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import TruncatedFileError, UnsupportedFormatError
from .imaging import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_PNM_WHITESPACE = b" \t\n\r\x0b\x0c"


def read_image(path: str | Path) -> Image:
    """Load a PNG, PPM (P6) or PGM (P5) file, sniffing the format from its bytes."""
    data = Path(path).read_bytes()
    if len(data) == 0:
        raise TruncatedFileError(f"{path}: file is empty")
    if data[:1] == b"\x89" or data[:4] == PNG_SIGNATURE[:4]:
        img = _decode_png(data, str(path))
    elif data[:2] in (b"P6", b"P5"):
        img = _decode_pnm(data, str(path))
    else:
        raise UnsupportedFormatError(f"{path}: unrecognized image format")
    img.source = str(path)
    return img


def write_image(path: str | Path, img: Image) -> None:
    """Write an image in the format implied by the file extension."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        payload = _encode_png(img)
    elif suffix == ".ppm":
        if img.channels != 3:
            raise UnsupportedFormatError("PPM (P6) holds RGB images; use .pgm for grayscale")
        payload = b"P6\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()
    elif suffix == ".pgm":
        if img.channels != 1:
            raise UnsupportedFormatError("PGM (P5) holds grayscale images; use .ppm for RGB")
        payload = b"P5\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()
    else:
        raise UnsupportedFormatError(f"cannot write {suffix!r} files (png/ppm/pgm supported)")
    atomic_write_bytes(path, payload)


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write to a sibling temp file, then rename over the target."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


# ---------------------------------------------------------------------------
# PPM / PGM


def _decode_pnm(data: bytes, name: str) -> Image:
    magic = data[:2]
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and (data[pos : pos + 1] in (b"#",) or data[pos] in _PNM_WHITESPACE):
            if data[pos : pos + 1] == b"#":  # comment runs to end of line
                nl = data.find(b"\n", pos)
                pos = len(data) if nl < 0 else nl + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos] not in _PNM_WHITESPACE:
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{name}: header ended early")
        token = data[start:pos]
        if not token.isdigit():
            raise UnsupportedFormatError(f"{name}: bad header token {token!r}")
        fields.append(int(token))
    if pos >= len(data):
        raise TruncatedFileError(f"{name}: no pixel data after header")
    pos += 1  # single whitespace byte separates header from raster
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise UnsupportedFormatError(f"{name}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"{name}: only maxval 255 supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    raster = data[pos : pos + expected]
    if len(raster) < expected:
        raise TruncatedFileError(f"{name}: expected {expected} pixel bytes, found {len(raster)}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return Image(pixels.copy())


# ---------------------------------------------------------------------------
# PNG


def _png_chunk(kind: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(kind + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", crc)


def _encode_png(img: Image) -> bytes:
    color_type = 2 if img.channels == 3 else 0
    ihdr = struct.pack(">IIBBBBB", img.width, img.height, 8, color_type, 0, 0, 0)
    rows = img.pixels.reshape(img.height, img.width * img.channels)
    raw = b"".join(b"\x00" + rows[y].tobytes() for y in range(img.height))
    return (
        PNG_SIGNATURE
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", zlib.compress(raw, 6))
        + _png_chunk(b"IEND", b"")
    )


def _decode_png(data: bytes, name: str) -> Image:
    if len(data) < 8:
        raise TruncatedFileError(f"{name}: shorter than a PNG signature")
    if data[:8] != PNG_SIGNATURE:
        raise UnsupportedFormatError(f"{name}: bad PNG signature")
    pos = 8
    header = None
    idat = bytearray()
    seen_end = False
    while pos < len(data):
        if pos + 8 > len(data):
            raise TruncatedFileError(f"{name}: file ends inside a chunk header")
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        kind = data[pos + 4 : pos + 8]
        end = pos + 8 + length + 4
        if end > len(data):
            raise TruncatedFileError(f"{name}: chunk {kind!r} truncated")
        payload = data[pos + 8 : pos + 8 + length]
        (crc,) = struct.unpack(">I", data[end - 4 : end])
        if crc != (zlib.crc32(kind + payload) & 0xFFFFFFFF):
            raise UnsupportedFormatError(f"{name}: CRC mismatch in chunk {kind!r}")
        if kind == b"IHDR":
            header = payload
        elif kind == b"IDAT":
            idat.extend(payload)
        elif kind == b"IEND":
            seen_end = True
            break
        pos = end
    if header is None:
        raise UnsupportedFormatError(f"{name}: missing IHDR chunk")
    if not seen_end:
        raise TruncatedFileError(f"{name}: missing IEND chunk")
    width, height, depth, color_type, _, _, interlace = struct.unpack(">IIBBBBB", header)
    if depth != 8 or color_type not in (0, 2) or interlace != 0:
        raise UnsupportedFormatError(
            f"{name}: only 8-bit non-interlaced grayscale/RGB supported "
            f"(depth={depth}, color_type={color_type}, interlace={interlace})"
        )
    channels = 3 if color_type == 2 else 1
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise UnsupportedFormatError(f"{name}: corrupt compressed data ({exc})") from exc
    stride = width * channels
    if len(raw) != height * (stride + 1):
        raise TruncatedFileError(
            f"{name}: expected {height * (stride + 1)} filtered bytes, got {len(raw)}"
        )
    pixels = _unfilter(raw, height, stride, channels, name)
    return Image(pixels.reshape(height, width, channels))


def _unfilter(raw: bytes, height: int, stride: int, bpp: int, name: str) -> np.ndarray:
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int64)
    for y in range(height):
        offset = y * (stride + 1)
        ftype = raw[offset]
        cur = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=offset + 1).astype(np.int64)
        if ftype == 0:
            line = cur
        elif ftype == 2:
            line = (cur + prev) & 0xFF
        elif ftype in (1, 3, 4):
            line = np.zeros(stride, dtype=np.int64)
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                up = prev[i]
                upleft = prev[i - bpp] if i >= bpp else 0
                if ftype == 1:
                    pred = left
                elif ftype == 3:
                    pred = (left + up) // 2
                else:
                    pred = _paeth(left, up, upleft)
                line[i] = (cur[i] + pred) & 0xFF
        else:
            raise UnsupportedFormatError(f"{name}: unknown scanline filter {ftype}")
        out[y] = line.astype(np.uint8)
        prev = line
    return out


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c
