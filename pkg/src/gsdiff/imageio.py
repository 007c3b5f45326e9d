"""Binary PPM/PGM image files and the GSFM feature-map container.

Color images are 8-bit binary PPM (P6). Masks and instance-ID maps are
16-bit binary PGM (P5, big-endian samples per the PNM spec); masks use
0 / 65535 for false / true. Feature maps are stored as ``GSFM``: magic,
u32 version, u32 C/H/W, then C*H*W little-endian f32 planes.
"""

from __future__ import annotations

import numpy as np

from .cloudio import CloudParseError, atomic_write_bytes

GSFM_MAGIC = b"GSFM"
GSFM_VERSION = 1
MASK_TRUE = 65535


class ImageFormatError(ValueError):
    pass


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write an HxWx3 float image in [0, 1] as 8-bit binary PPM."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"expected HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM into an HxWx3 float image in [0, 1]."""
    fields, pixels = _read_pnm(path, b"P6")
    w, h, maxval = fields
    data = np.frombuffer(pixels, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return data.astype(np.float64) / maxval


def write_pgm16(path: str, values: np.ndarray) -> None:
    """Write an HxW array of uint16 values as 16-bit binary PGM."""
    if values.ndim != 2:
        raise ImageFormatError(f"expected HxW array, got shape {values.shape}")
    h, w = values.shape
    data = np.ascontiguousarray(values.astype(">u2"))
    atomic_write_bytes(path, b"P5\n%d %d\n65535\n" % (w, h) + data.tobytes())


def read_pgm16(path: str) -> np.ndarray:
    """Read a binary PGM into an HxW uint16 array (8-bit files are widened)."""
    fields, pixels = _read_pnm(path, b"P5")
    w, h, maxval = fields
    if maxval > 255:
        data = np.frombuffer(pixels, dtype=">u2", count=h * w).astype(np.uint16)
    else:
        data = np.frombuffer(pixels, dtype=np.uint8, count=h * w).astype(np.uint16)
    return data.reshape(h, w)


def write_mask(path: str, mask: np.ndarray) -> None:
    write_pgm16(path, np.where(mask, MASK_TRUE, 0).astype(np.uint16))


def read_mask(path: str) -> np.ndarray:
    return read_pgm16(path) > 0


def _read_pnm(path: str, magic: bytes) -> tuple[tuple[int, int, int], bytes]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != magic:
        raise ImageFormatError(f"{path!r}: expected {magic.decode()} header, got {buf[:2]!r}")
    # Header: magic, width, height, maxval as whitespace-separated tokens,
    # comments (#...) allowed; a single whitespace byte ends the header.
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path!r}: truncated PNM header")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    bytes_per = 2 if (maxval > 255 and magic == b"P5") else (3 if magic == b"P6" else 1)
    expected = w * h * bytes_per
    if len(buf) - pos < expected:
        raise ImageFormatError(
            f"{path!r}: expected {expected} pixel bytes, found {len(buf) - pos}"
        )
    return (w, h, maxval), buf[pos : pos + expected]


def write_feature_map(path: str, features: np.ndarray) -> None:
    """Write a CxHxW feature array as a GSFM container."""
    if features.ndim != 3:
        raise ImageFormatError(f"expected CxHxW features, got shape {features.shape}")
    c, h, w = features.shape
    header = GSFM_MAGIC + np.array([GSFM_VERSION, c, h, w], dtype="<u4").tobytes()
    atomic_write_bytes(path, header + np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_feature_map(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != GSFM_MAGIC:
        raise CloudParseError("missing GSFM magic", 0)
    if len(buf) < 20:
        raise CloudParseError("truncated GSFM header", len(buf))
    version, c, h, w = np.frombuffer(buf[4:20], dtype="<u4")
    if version != GSFM_VERSION:
        raise CloudParseError(f"unsupported GSFM version {version}", 4)
    expected = int(c) * int(h) * int(w) * 4
    if len(buf) - 20 != expected:
        raise CloudParseError(f"expected {expected} payload bytes, found {len(buf) - 20}", 20)
    return np.frombuffer(buf[20:], dtype="<f4").reshape(int(c), int(h), int(w)).astype(np.float64)
