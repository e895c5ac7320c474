"""Image container, PNG/PPM reading and writing, and grayscale conversion."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as _PIL

from .errors import IOFailure, UnsupportedFormat

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Image:
    """Row-major ``(height, width, channels)`` float64 samples in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got {arr.shape}")
        if arr.size and (np.nanmin(arr) < 0.0 or np.nanmax(arr) > 1.0 or not np.isfinite(arr).all()):
            raise ValueError("image samples must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self) -> np.ndarray:
        """The single channel of a grayscale image as an ``(H, W)`` array."""
        if self.channels != 1:
            raise ValueError("plane() needs a 1-channel image")
        return self.data[:, :, 0]

    @classmethod
    def from_array(cls, arr) -> "Image":
        return cls(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0))


def load_png(path) -> Image:
    """Read an 8-bit gray/RGB PNG (or binary PPM). Alpha is dropped."""
    path = Path(path)
    try:
        with _PIL.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                if "transparency" in im.info:
                    raise UnsupportedFormat(f"{path}: palette image with transparency")
                im = im.convert("RGB")
                mode = "RGB"
            if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise UnsupportedFormat(f"{path}: {mode} samples are not 8-bit")
            if mode == "1":
                im = im.convert("L")
            elif mode == "LA":
                im = im.getchannel("L")
            elif mode == "RGBA":
                im = im.convert("RGB")
            elif mode not in ("L", "RGB"):
                raise UnsupportedFormat(f"{path}: unsupported mode {mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnsupportedFormat, IOFailure):
        raise
    except FileNotFoundError as exc:
        raise IOFailure(str(exc)) from exc
    except OSError as exc:
        raise IOFailure(f"{path}: {exc}") from exc
    return Image(arr.astype(np.float64) / 255.0)


def save_png(image: Image, path) -> None:
    """Write as 8-bit PNG (or P6 PPM when the suffix is ``.ppm``)."""
    path = Path(path)
    q = np.round(image.data * 255.0).astype(np.uint8)
    if image.channels == 1:
        pil = _PIL.fromarray(q[:, :, 0], mode="L")
    else:
        pil = _PIL.fromarray(q, mode="RGB")
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pgm") else "PNG"
    try:
        pil.save(path, format=fmt)
    except OSError as exc:
        raise IOFailure(f"{path}: {exc}") from exc


def to_grayscale(image: Image) -> Image:
    if image.channels == 1:
        return image
    d = image.data
    gray = GRAY_WEIGHTS[0] * d[:, :, 0] + GRAY_WEIGHTS[1] * d[:, :, 1] + GRAY_WEIGHTS[2] * d[:, :, 2]
    # weights sum to 1 only up to rounding
    return Image(np.clip(gray, 0.0, 1.0))


def resize_nearest(image: Image, height: int, width: int) -> Image:
    rows = (np.arange(height) * image.height // height).astype(int)
    cols = (np.arange(width) * image.width // width).astype(int)
    return Image(image.data[rows][:, cols])


def load_mask_png(path) -> np.ndarray:
    """Boolean pixel mask: any nonzero sample marks an editable pixel."""
    img = load_png(path)
    return (img.data > 0).any(axis=2)
