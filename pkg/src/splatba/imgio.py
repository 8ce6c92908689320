"""Image and depth-map file formats.

Color images are float arrays in [0, 1]; writers quantize to 8 bits
(PPM/PNG). Depth maps are written as little-endian PFM (rows bottom to top,
negative scale marking little-endian) or as 16-bit PNG plus a JSON sidecar
recording the scale such that depth = png / 65535 * scale.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ParseError


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Round a [0, 1] float image to the 8-bit grid (still float in [0, 1]).

    Applying this at generation time makes save -> load lossless.
    """
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6 PPM at maxval 255."""
    arr = _to_u8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("PPM output requires an HxWx3 image")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ParseError("not a binary PPM (P6) file", path, 0)
    pos = 2
    fields = []
    while len(fields) < 3:
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
            raise ParseError("truncated PPM header", path, pos)
        fields.append(data[start:pos])
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise ParseError(f"bad PPM header field: {e}", path, pos) from e
    if maxval != 255:
        raise ParseError(f"unsupported PPM maxval {maxval}", path, pos)
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    body = data[pos : pos + need]
    if len(body) != need:
        raise ParseError(
            f"expected {need} raster bytes, found {len(body)}", path, pos + len(body)
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_png(path, img: np.ndarray) -> None:
    arr = _to_u8(img)
    PILImage.fromarray(arr, mode="RGB").save(str(path), format="PNG")


def read_png(path) -> np.ndarray:
    path = str(path)
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, SyntaxError) as e:
        raise ParseError(f"unreadable PNG: {e}", path) from e
    return arr / 255.0


def write_pfm(path, depth: np.ndarray) -> None:
    """Grayscale PFM, little-endian (negative scale), rows bottom to top."""
    arr = np.asarray(depth, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("PFM output requires an HxW depth map")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(arr[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"Pf"):
        raise ParseError("not a grayscale PFM file", path, 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PFM header", path, pos)
        fields.append(data[start:pos])
    try:
        w, h = int(fields[0]), int(fields[1])
        scale = float(fields[2])
    except ValueError as e:
        raise ParseError(f"bad PFM header field: {e}", path, pos) from e
    pos += 1
    need = w * h * 4
    body = data[pos : pos + need]
    if len(body) != need:
        raise ParseError(
            f"expected {need} raster bytes, found {len(body)}", path, pos + len(body)
        )
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.float64)
    return arr[::-1].copy()


def write_depth_png16(path, depth: np.ndarray) -> None:
    """16-bit PNG plus a `.json` sidecar holding the depth scale."""
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("depth PNG output requires an HxW map")
    scale = float(arr.max()) if arr.size and arr.max() > 0 else 1.0
    q = np.round(np.clip(arr / scale, 0.0, 1.0) * 65535.0).astype(np.uint16)
    PILImage.fromarray(q, mode="I;16").save(str(path), format="PNG")
    with open(str(path) + ".json", "w") as fh:
        json.dump({"depth_scale": scale}, fh)


def read_depth_png16(path) -> np.ndarray:
    path = str(path)
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, SyntaxError) as e:
        raise ParseError(f"unreadable depth PNG: {e}", path) from e
    try:
        with open(path + ".json") as fh:
            scale = float(json.load(fh)["depth_scale"])
    except FileNotFoundError:
        scale = 1.0
    except (ValueError, KeyError, TypeError) as e:
        raise ParseError(f"bad depth sidecar: {e}", path + ".json") from e
    return arr / 65535.0 * scale


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary P5 PGM from a [0, 1] float or boolean array."""
    arr = np.asarray(gray)
    if arr.dtype == bool:
        arr = arr.astype(np.float64)
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.ndim != 2:
        raise ValueError("PGM output requires an HxW array")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())
