"""PNG I/O and resizing on float arrays in channel-first layout."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid (``round(v*255)/255``) after clipping to [0, 1]."""
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    """Write a [C,H,W] (C in {1,3}) or [H,W] float image in [0,1] as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)
    Image.fromarray(to_uint8(arr)).save(Path(path), format="PNG")


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(
        Path(path), format="PNG")


def read_image(path, channels: int | None = None) -> np.ndarray:
    """Read an image as float32 [C,H,W] in [0,1]; alpha is dropped.

    Single-band files load with one channel unless ``channels`` asks for 3.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            gray = im.mode in ("L", "I", "I;16", "F", "1")
            if channels == 1 or (channels is None and gray):
                return _gray(im)[None]
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            return np.ascontiguousarray(np.moveaxis(arr, -1, 0))
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image") from exc


def _gray(im: Image.Image) -> np.ndarray:
    if im.mode in ("I", "I;16"):
        arr = np.asarray(im, dtype=np.float32)
        top = 65535.0 if arr.max() > 255 else 255.0
        return arr / top
    if im.mode == "F":
        return np.asarray(im, dtype=np.float32)
    return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    """Read a mask as float32 [H,W] in [0,1] (not yet binarized)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            return _gray(im)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable mask image") from exc


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a [C,H,W] float image, channel by channel."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape[-2:] == (height, width):
        return image.copy()
    out = np.empty((image.shape[0], height, width), dtype=np.float32)
    for c in range(image.shape[0]):
        im = Image.fromarray(np.ascontiguousarray(image[c]), mode="F")
        out[c] = np.asarray(im.resize((width, height), Image.Resampling.BILINEAR), dtype=np.float32)
    return out


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of a [H,W] mask, re-binarized at 0.5."""
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape == (height, width):
        return mask >= 0.5
    im = Image.fromarray(np.ascontiguousarray(mask), mode="F")
    return np.asarray(im.resize((width, height), Image.Resampling.NEAREST)) >= 0.5
