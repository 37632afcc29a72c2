"""Binary PPM (P6) and PGM (P5) readers and writers, maxval 255.

Comment lines (starting '#') after the magic number are preserved on
write via the `comment` argument and skipped on read, which is where
artifact provenance lives for image-shaped outputs.
"""

from pathlib import Path

import numpy as np

from .errors import DataError


def _write_netpbm(path, magic: bytes, dims: tuple[int, int], payload: bytes, comment: str | None):
    width, height = dims
    head = [magic]
    if comment:
        for line in comment.splitlines():
            head.append(b"# " + line.encode("utf-8"))
    head.append(f"{width} {height}".encode())
    head.append(b"255")
    Path(path).write_bytes(b"\n".join(head) + b"\n" + payload)


def _parse_netpbm(path, expected_magic: bytes):
    data = Path(path).read_bytes()
    if not data.startswith(expected_magic):
        raise DataError(f"{path}: expected {expected_magic.decode()} file")
    pos = len(expected_magic)
    fields = []
    comments = []
    while len(fields) < 3:
        if pos >= len(data):
            raise DataError(f"{path}: truncated header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise DataError(f"{path}: unterminated comment")
            comments.append(data[pos + 1 : end].decode("utf-8", "replace").strip())
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise DataError(f"{path}: bad header fields {fields}") from exc
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    return width, height, data[pos:], comments


def write_ppm(path, rgb: np.ndarray, comment: str | None = None):
    """rgb is (H, W, 3) uint8."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"PPM payload must be (H, W, 3), got {rgb.shape}")
    _write_netpbm(path, b"P6", (rgb.shape[1], rgb.shape[0]), rgb.tobytes(), comment)


def read_ppm(path) -> np.ndarray:
    width, height, payload, _ = _parse_netpbm(path, b"P6")
    need = width * height * 3
    if len(payload) != need:
        raise DataError(f"{path}: expected {need} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_pgm(path, gray: np.ndarray, comment: str | None = None):
    """gray is (H, W) uint8."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise DataError(f"PGM payload must be (H, W), got {gray.shape}")
    _write_netpbm(path, b"P5", (gray.shape[1], gray.shape[0]), gray.tobytes(), comment)


def read_pgm(path) -> np.ndarray:
    width, height, payload, _ = _parse_netpbm(path, b"P5")
    need = width * height
    if len(payload) != need:
        raise DataError(f"{path}: expected {need} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def read_comments(path, magic: bytes = b"P5") -> list[str]:
    return _parse_netpbm(path, magic)[3]
