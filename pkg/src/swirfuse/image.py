"""
Image container, file codecs and the pixel utilities shared by every module.

Planes are stored as float64 numpy arrays: ``(H, W)`` for a single plane and
``(3, H, W)`` for planar RGB. Quantization to integers only happens at encode
time.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

DEFAULT_RANGE = (0.0, 255.0)


class ImageFormatError(ValueError):
    """Raised for unsupported, truncated or malformed image files."""


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable raster of real-valued samples with a nominal display range."""

    data: np.ndarray
    value_range: Tuple[float, float] = DEFAULT_RANGE

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[0] != 3):
            raise ValueError(f"expected (H, W) or (3, H, W) samples, got shape {arr.shape}")
        if arr.shape[-1] < 1 or arr.shape[-2] < 1:
            raise ValueError("image dimensions must be >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image samples must be finite")
        lo, hi = (float(v) for v in self.value_range)
        if not hi > lo:
            raise ValueError(f"invalid value_range {self.value_range}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "value_range", (lo, hi))

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def planes(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[0]

    @property
    def span(self) -> float:
        return self.value_range[1] - self.value_range[0]

    def with_data(self, data: np.ndarray) -> "Image":
        return Image(data, self.value_range)

    def rescaled(self, value_range: Tuple[float, float] = DEFAULT_RANGE) -> "Image":
        """Linearly map samples from this image's range onto ``value_range``."""
        if tuple(value_range) == self.value_range:
            return self
        lo, hi = value_range
        unit = (self.data - self.value_range[0]) / self.span
        return Image(lo + unit * (hi - lo), value_range)

    def __repr__(self):
        return f"Image({self.planes}x{self.height}x{self.width}, range={self.value_range})"


class ThermalBand(str, enum.Enum):
    LWIR = "LWIR"
    MWIR = "MWIR"


@dataclass(frozen=True)
class Sample:
    """A registered multiband record: RGB, thermal and derived/optional SWIR planes."""

    rgb: Image
    thermal: Image
    thermal_band: ThermalBand = ThermalBand.LWIR
    syn_swir: Optional[Image] = None
    real_swir: Optional[Image] = None
    id: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.rgb.planes != 3:
            raise ValueError("rgb must have 3 planes")
        if self.thermal.planes != 1:
            raise ValueError("thermal must be a single plane")
        size = (self.rgb.height, self.rgb.width)
        for name in ("thermal", "syn_swir", "real_swir"):
            plane = getattr(self, name)
            if plane is not None and (plane.height, plane.width) != size:
                raise ValueError(f"{name} is {plane.height}x{plane.width}, rgb is {size[0]}x{size[1]}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rgb.height, self.rgb.width


def as_array(img) -> np.ndarray:
    """Samples of an Image (or anything array-like) as float64."""
    if isinstance(img, Image):
        return img.data
    return np.asarray(img, dtype=np.float64)


# ---------------------------------------------------------------------------
# Codecs
# ---------------------------------------------------------------------------

def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def load_image(path) -> Image:
    """Decode a PNG (8/16-bit gray, 8-bit RGB/RGBA) or binary PGM/PPM file.

    RGB files come back as a 3-plane Image. ``value_range`` follows the bit
    depth: (0, 255) for 8-bit and (0, 65535) for 16-bit data; samples are not
    rescaled.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:2] in (b"P5", b"P6"):
        return _load_netpbm(path)
    if head != b"\x89PNG\r\n\x1a\n":
        raise ImageFormatError(f"unsupported image format: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64)
                rng = (0.0, 65535.0)
            elif mode in ("L", "1", "P", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
                rng = DEFAULT_RANGE
            elif mode in ("RGB", "RGBA"):
                arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
                rng = DEFAULT_RANGE
            else:
                raise ImageFormatError(f"unsupported PNG mode {mode}: {path}")
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    if arr.size == 0:
        raise ImageFormatError(f"zero-dimension image: {path}")
    return Image(arr, rng)


def _netpbm_tokens(buf: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated netpbm header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def _load_netpbm(path: str) -> Image:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic = buf[:2]
    try:
        tokens, offset = _netpbm_tokens(buf, 3)
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"bad netpbm header in {path}") from exc
    if width < 1 or height < 1:
        raise ImageFormatError(f"zero-dimension image: {path}")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"bad maxval {maxval} in {path}")
    planes = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = width * height * planes
    raster = buf[offset:offset + n * dtype.itemsize]
    if len(raster) < n * dtype.itemsize:
        raise ImageFormatError(f"truncated raster in {path}")
    arr = np.frombuffer(raster, dtype=dtype).astype(np.float64)
    rng = (0.0, 65535.0) if maxval > 255 else DEFAULT_RANGE
    if planes == 3:
        return Image(arr.reshape(height, width, 3).transpose(2, 0, 1), rng)
    return Image(arr.reshape(height, width), rng)


def quantize(img: Image, bits: int = 8) -> np.ndarray:
    """Clamp to value_range, map onto [0, 2**bits - 1] and round half away from zero."""
    top = float(2 ** bits - 1)
    lo, hi = img.value_range
    x = np.clip(img.data, lo, hi)
    if (lo, hi) != (0.0, top):
        x = (x - lo) / (hi - lo) * top
    q = round_half_away(x)
    return q.astype(np.uint16 if bits == 16 else np.uint8)


def save_image(img: Image, path, bits: Optional[int] = None) -> None:
    """Encode as PNG, or as PGM/PPM when the suffix is .pgm/.ppm/.pnm.

    ``bits`` defaults to 16 for images whose range exceeds 255, else 8.
    """
    path = os.fspath(path)
    if bits is None:
        bits = 16 if img.value_range[1] > 255 else 8
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    q = quantize(img, bits)
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        magic = b"P6" if img.planes == 3 else b"P5"
        raster = q.transpose(1, 2, 0) if img.planes == 3 else q
        with open(path, "wb") as fh:
            fh.write(b"%s\n%d %d\n%d\n" % (magic, img.width, img.height, 2 ** bits - 1))
            fh.write(np.ascontiguousarray(raster).astype(">u2" if bits == 16 else "u1").tobytes())
        return
    if img.planes == 3:
        if bits != 8:
            raise ValueError("RGB PNG output is 8-bit only")
        q = np.ascontiguousarray(q.transpose(1, 2, 0))
    # Pillow infers L, I;16 or RGB from dtype and shape
    PILImage.fromarray(q).save(path, format="PNG")


# ---------------------------------------------------------------------------
# Pixel utilities
# ---------------------------------------------------------------------------

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def to_luminance(rgb: Image) -> Image:
    """BT.601 luma of a 3-plane image."""
    if rgb.planes != 3:
        raise ValueError("to_luminance expects a 3-plane image")
    r, g, b = rgb.data
    return Image(LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b, rgb.value_range)


def reattach_chroma(luma: Image, rgb: Image) -> Image:
    """Rebuild RGB from a fused luma plane and the Cb/Cr of ``rgb`` (BT.601)."""
    if rgb.planes != 3 or luma.planes != 1:
        raise ValueError("need a single-plane luma and a 3-plane rgb")
    src = rgb.rescaled(luma.value_range).data
    r, g, b = src
    y_src = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    cb = (b - y_src) * 0.564
    cr = (r - y_src) * 0.713
    y = luma.data
    out = np.stack([y + 1.403 * cr, y - 0.344 * cb - 0.714 * cr, y + 1.773 * cb])
    lo, hi = luma.value_range
    return Image(np.clip(out, lo, hi), luma.value_range)


def _axis_coords(n_src: int, n_dst: int) -> np.ndarray:
    if n_dst == 1:
        return np.array([(n_src - 1) / 2.0])
    return np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))


def resize_bilinear(img: Image, w: int, h: int) -> Image:
    """Corner-aligned bilinear resize: output corners sample input corners exactly."""
    if w < 1 or h < 1:
        raise ValueError("target size must be >= 1")
    if (w, h) == (img.width, img.height):
        return img
    ys = _axis_coords(img.height, h)
    xs = _axis_coords(img.width, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    src = img.data

    def one(p):
        top = p[y0][:, x0] * (1 - fx) + p[y0][:, x1] * fx
        bot = p[y1][:, x0] * (1 - fx) + p[y1][:, x1] * fx
        return top * (1 - fy) + bot * fy

    out = one(src) if src.ndim == 2 else np.stack([one(p) for p in src])
    return Image(out, img.value_range)


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def sobel_xy(arr: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unnormalized 3x3 Sobel responses of a 2-D array, replicate borders."""
    arr = np.asarray(arr, dtype=np.float64)
    gx = ndimage.correlate(arr, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(arr, SOBEL_Y, mode="nearest")
    return gx, gy


def sobel_gradient(img: Image) -> Tuple[Image, Image, Image]:
    """Return (gx, gy, magnitude) of a single-plane image."""
    if img.planes != 1:
        raise ValueError("sobel_gradient expects a single plane")
    gx, gy = sobel_xy(img.data)
    mag = np.hypot(gx, gy)
    return img.with_data(gx), img.with_data(gy), img.with_data(mag)
