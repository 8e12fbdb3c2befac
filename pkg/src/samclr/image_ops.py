"""PNG decoding, cropping, resizing and photometric augmentation.

Images are ``uint8`` numpy arrays of shape (H, W, 3).
"""

from __future__ import annotations

import io
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
LUMA = np.array([0.299, 0.587, 0.114])


class ImageDecodeError(ValueError):
    pass


@dataclass(frozen=True)
class CropRect:
    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"degenerate crop {self}")

    def inside(self, x0: int, y0: int, w: int, h: int) -> bool:
        return self.x0 >= x0 and self.y0 >= y0 and self.x0 + self.w <= x0 + w and self.y0 + self.h <= y0 + h


@dataclass(frozen=True)
class JitterParams:
    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 0.2
    p_apply: float = 0.8
    p_gray: float = 0.2

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "p_apply", "p_gray"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not 0.0 <= self.hue <= 0.5:
            raise ValueError(f"hue={self.hue} outside [0, 0.5]")


def check_image(img: np.ndarray) -> None:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected uint8 H×W×3 image, got {img.dtype} {img.shape}")


def png_bit_depth(data: bytes) -> tuple[int, int]:
    """(bit depth, color type) from the IHDR chunk."""
    if data[:8] != PNG_SIGNATURE or len(data) < 33 or data[12:16] != b"IHDR":
        raise ImageDecodeError("not a PNG file")
    return data[24], data[25]


def decode_png(data: bytes, source: str = "<bytes>", channels: int = 3) -> np.ndarray:
    """Decode an 8-bit PNG to H×W×3 (or H×W when ``channels == 1``) uint8."""
    try:
        depth, color_type = png_bit_depth(data)
    except ImageDecodeError as exc:
        raise ImageDecodeError(f"{source}: {exc}") from None
    # palette images store 8-bit samples in the PLTE chunk
    if depth != 8 and not (color_type == 3 and depth <= 8):
        raise ImageDecodeError(f"{source}: unsupported bit depth {depth}")
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if channels == 1:
                im = im.convert("RGB") if im.mode not in ("L", "RGB", "RGBA") else im
                arr = np.asarray(im)
                return np.ascontiguousarray(arr if arr.ndim == 2 else arr[:, :, 0])
            return np.ascontiguousarray(np.asarray(im.convert("RGB")))
    except (OSError, SyntaxError, zlib.error) as exc:
        raise ImageDecodeError(f"{source}: malformed PNG ({exc})") from None


def decode_image(data: bytes, source: str = "<bytes>") -> np.ndarray:
    return decode_png(data, source)


def read_image(path: str | Path) -> np.ndarray:
    return decode_png(Path(path).read_bytes(), str(path))


def encode_png(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr)).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def write_png(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(arr))


def crop(img: np.ndarray, r: CropRect) -> np.ndarray:
    h, w = img.shape[:2]
    if r.x0 < 0 or r.y0 < 0 or r.x0 + r.w > w or r.y0 + r.h > h:
        raise ValueError(f"crop {r} out of bounds for {w}x{h} image")
    return img[r.y0:r.y0 + r.h, r.x0:r.x0 + r.w].copy()


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centers: src = (dst + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear_float(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    src = img.astype(np.float64)
    h, w = src.shape[:2]
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    fy = fy[:, None, None]
    return top * (1 - fy) + bot * fy


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 255.0) + 0.5).astype(np.uint8)


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    if img.shape[1] == out_w and img.shape[0] == out_h:
        return img.copy()
    return _to_u8(resize_bilinear_float(img, out_w, out_h))


def horizontal_flip(img: np.ndarray, rng: np.random.Generator, probability: float = 0.5) -> np.ndarray:
    if not 0.0 <= probability <= 1.0:
        raise ValueError("probability must lie in [0, 1]")
    if rng.random() < probability:
        return img[:, ::-1].copy()
    return img.copy()


# -- photometric ---------------------------------------------------------------

def luminance(x: np.ndarray) -> np.ndarray:
    return x @ LUMA


def adjust_brightness(x: np.ndarray, factor: float) -> np.ndarray:
    return x * factor


def adjust_contrast(x: np.ndarray, factor: float) -> np.ndarray:
    return factor * x + (1 - factor) * luminance(x).mean()


def adjust_saturation(x: np.ndarray, factor: float) -> np.ndarray:
    return factor * x + (1 - factor) * luminance(x)[..., None]


def adjust_hue(x: np.ndarray, shift: float) -> np.ndarray:
    """Rotate the HSV hue by ``shift`` turns, keeping per-pixel max and min.

    Works on unclamped floats: rgb = min + chroma * f(hue).
    """
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    mx = x.max(axis=-1)
    mn = x.min(axis=-1)
    chroma = mx - mn
    safe = np.where(chroma > 0, chroma, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = (h + 6.0 * shift) % 6.0
    # f(h) for each channel from the standard HSV sector formula
    def f(n):
        k = (n + h) % 6.0
        return 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    out = np.stack([f(5.0), f(3.0), f(1.0)], axis=-1)
    out = mn[..., None] + chroma[..., None] * out
    return np.where((chroma > 0)[..., None], out, x)


def to_grayscale(x: np.ndarray) -> np.ndarray:
    return np.repeat(luminance(x)[..., None], 3, axis=-1)


def color_jitter_float(x: np.ndarray, p: JitterParams, rng: np.random.Generator) -> np.ndarray:
    """Jitter a float H×W×3 image; no clamping is done here."""
    if rng.random() < p.p_apply:
        order = rng.permutation(4)
        for idx in order:
            if idx == 0 and p.brightness > 0:
                x = adjust_brightness(x, rng.uniform(max(0.0, 1 - p.brightness), 1 + p.brightness))
            elif idx == 1 and p.contrast > 0:
                x = adjust_contrast(x, rng.uniform(max(0.0, 1 - p.contrast), 1 + p.contrast))
            elif idx == 2 and p.saturation > 0:
                x = adjust_saturation(x, rng.uniform(max(0.0, 1 - p.saturation), 1 + p.saturation))
            elif idx == 3 and p.hue > 0:
                x = adjust_hue(x, rng.uniform(-p.hue, p.hue))
    if rng.random() < p.p_gray:
        x = to_grayscale(x)
    return x


def color_jitter(img: np.ndarray, p: JitterParams, rng: np.random.Generator) -> np.ndarray:
    return _to_u8(color_jitter_float(img.astype(np.float64), p, rng))


def to_tensor_array(img: np.ndarray) -> np.ndarray:
    """H×W×3 uint8 -> 3×H×W float64 in [0, 1]."""
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_tensor(img: np.ndarray):
    from .tensor import Tensor
    return Tensor(to_tensor_array(img))


def augment_view(img: np.ndarray, r: CropRect, size: int, jitter: JitterParams,
                 rng: np.random.Generator, flip_p: float = 0.5) -> np.ndarray:
    """crop -> resize -> flip -> jitter, returning a uint8 size×size×3 view."""
    view = resize_bilinear(crop(img, r), size, size)
    view = horizontal_flip(view, rng, flip_p)
    return color_jitter(view, jitter, rng)

