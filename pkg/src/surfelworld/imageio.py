"""Image and depth-map file I/O: PNG via Pillow, PFM read/write.

Depth maps travel either as 32-bit float PFM (little-endian, standard
bottom-up row order) or as 16-bit grayscale PNG where
``depth = pixel_value * scale`` (scale defaults to 1/1000, i.e. millimeters).
"""

from __future__ import annotations

import numpy as np
from PIL import Image

DEPTH_PNG_SCALE = 1.0 / 1000.0


def load_image(path) -> np.ndarray:
    """RGB image as (H, W, 3) float32 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def save_mask_png(path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_label_png(path, labels: np.ndarray) -> None:
    """Indexed (paletted) PNG for small integer label maps."""
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("label maps must fit in uint8")
    img = Image.fromarray(arr.astype(np.uint8), mode="P")
    palette = []
    rng = np.random.default_rng(7)
    for _ in range(256):
        palette.extend(int(v) for v in rng.integers(40, 255, size=3))
    img.putpalette(palette)
    img.save(path)


def save_depth_png16(path, depth: np.ndarray, scale: float = DEPTH_PNG_SCALE) -> None:
    raw = np.round(np.asarray(depth, dtype=np.float64) / scale)
    raw = np.clip(raw, 0, 65535).astype(np.uint16)
    Image.fromarray(raw, mode="I;16").save(path)


def load_depth_png16(path, scale: float = DEPTH_PNG_SCALE) -> np.ndarray:
    with Image.open(path) as img:
        raw = np.asarray(img, dtype=np.uint16)
    return raw.astype(np.float32) * scale


# ---------------------------------------------------------------------------
# PFM


def save_pfm(path, data: np.ndarray) -> None:
    """Write a 1- or 3-channel float32 PFM (little-endian, bottom-up rows)."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")  # negative scale marks little-endian
        fh.write(np.flipud(arr).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file: header {header!r}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        raw = np.frombuffer(fh.read(count * 4), dtype=dtype, count=count)
    arr = raw.reshape((h, w) if channels == 1 else (h, w, channels))
    arr = np.flipud(arr).astype(np.float32)
    if scale not in (-1.0, 1.0) and scale != 0:
        arr = arr * abs(scale)
    return np.ascontiguousarray(arr)
