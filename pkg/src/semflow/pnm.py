"""Binary PPM (P6) and PGM (P5) with 8-bit samples."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

_WS = b" \t\n\r\v\f"


def encode_pnm(magic: bytes, pixels: np.ndarray) -> bytes:
    h, w = pixels.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def decode_pnm(raw: bytes, magic: bytes, where: str = "<bytes>") -> np.ndarray:
    """Return an (h, w, 3) array for P6 or (h, w) for P5."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1] in _WS:
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1] not in _WS:
            pos += 1
        if start == pos:
            raise DataError(f"{where}: truncated header")
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise DataError(f"{where}: expected {magic.decode()} magic, found {tokens[0][:2]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{where}: malformed header") from exc
    if maxval != 255:
        raise DataError(f"{where}: only 8-bit samples are supported")
    payload = raw[pos + 1:]  # exactly one whitespace byte ends the header
    channels = 3 if magic == b"P6" else 1
    if len(payload) != w * h * channels:
        raise DataError(f"{where}: payload has {len(payload)} bytes, expected {w * h * channels}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_pnm(path, magic: bytes, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(magic, pixels))


def read_pnm(path, magic: bytes) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes(), magic, str(path)).copy()
