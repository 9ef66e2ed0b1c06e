"""8-bit RGB image reading and writing (PNG via Pillow, binary PPM natively)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

IMAGE_SUFFIXES = (".png", ".ppm")


def quantize(image: np.ndarray) -> np.ndarray:
    """Clamp a ``[3,H,W]`` float image to [0,1] and round half up to uint8 ``[H,W,3]``."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    return np.ascontiguousarray(q.transpose(1, 2, 0))


def dequantize(pixels: np.ndarray) -> np.ndarray:
    """uint8 ``[H,W,3]`` to float64 ``[3,H,W]`` in [0,1]."""
    return np.asarray(pixels, dtype=np.float64).transpose(2, 0, 1) / 255.0


def read_ppm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header at byte offset {pos}")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    need = width * height * 3
    data = buf[pos : pos + need]
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes at offset {pos}, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Read an RGB image as float64 ``[3,H,W]`` in [0,1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return dequantize(read_ppm(path))
    from PIL import Image

    with Image.open(path) as im:
        return dequantize(np.asarray(im.convert("RGB")))


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write a float ``[3,H,W]`` image; the suffix selects PNG or PPM."""
    path = Path(path)
    pixels = quantize(image)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, pixels)
        return
    from PIL import Image

    Image.fromarray(pixels).save(path, format="PNG")
