"""PNG and binary PPM image files for float [0,1] CHW arrays.

Images live in memory as float arrays with intensities in [0,1];
quantization to 8 bits happens only here. Both formats round-trip
losslessly for 8-bit data.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ImageIOError, InvalidArgument


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize a (C, H, W) float [0,1] array to (H, W, C) uint8."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise InvalidArgument(f"expected (3, H, W) array, got shape {img.shape}")
    x = np.clip(img, 0.0, 1.0)
    return np.round(x * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """Convert (H, W, C) uint8 back to (C, H, W) float64 in [0,1]."""
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0


def save_image(path, img: np.ndarray) -> None:
    """Write a float CHW image as .png or .ppm based on the suffix."""
    path = Path(path)
    u8 = to_uint8(img)
    try:
        if path.suffix == ".ppm":
            _write_ppm(path, u8)
        elif path.suffix == ".png":
            Image.fromarray(u8, mode="RGB").save(path, format="PNG")
        else:
            raise ImageIOError(f"unsupported image suffix {path.suffix!r}")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def load_image(path) -> np.ndarray:
    """Read a .png or .ppm file into a float64 CHW array in [0,1]."""
    path = Path(path)
    if not path.exists():
        raise ImageIOError(f"no such image file: {path}")
    try:
        if path.suffix == ".ppm":
            u8 = _read_ppm(path)
        else:
            with Image.open(path) as im:
                u8 = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    return from_uint8(u8)


def _write_ppm(path: Path, u8: np.ndarray) -> None:
    h, w, _ = u8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    fields = []
    pos = 0
    # header: magic, width, height, maxval; '#' comments allowed between tokens
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageIOError(f"truncated PPM header in {path}")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise ImageIOError(f"{path} is not a binary PPM (P6) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ImageIOError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    n = w * h * 3
    raw = data[pos : pos + n]
    if len(raw) != n:
        raise ImageIOError(f"{path}: expected {n} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()
