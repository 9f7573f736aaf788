"""Image I/O, bilinear resizing, model-input preparation and compositing.

Images are :class:`ImageRGBA` values wrapping an ``(H, W, 4)`` uint8 array.
Single-channel float maps are plain ``(H, W)`` float arrays.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .engine import ModelSpec


class ImageDecodeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageRGBA:
    pixels: np.ndarray  # (H, W, 4) uint8, row-major

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 4 or p.dtype != np.uint8:
            raise ValueError(f"expected (H, W, 4) uint8 pixels, got {p.shape} {p.dtype}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError("image dimensions must be >= 1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ImageRGBA):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    @classmethod
    def filled(cls, width: int, height: int, rgba: tuple[int, int, int, int]) -> ImageRGBA:
        px = np.empty((height, width, 4), dtype=np.uint8)
        px[...] = rgba
        return cls(px)


def decode_image(path: str | Path) -> ImageRGBA:
    """Decode PNG/JPEG/PPM/PGM (anything Pillow reads) to RGBA."""
    try:
        with Image.open(path) as im:
            im.load()
            rgba = im.convert("RGBA")
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    return ImageRGBA(np.asarray(rgba, dtype=np.uint8).copy())


def decode_bytes(data: bytes) -> ImageRGBA:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            rgba = im.convert("RGBA")
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image bytes: {exc}") from exc
    return ImageRGBA(np.asarray(rgba, dtype=np.uint8).copy())


def encode_png(img: ImageRGBA) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img.pixels, mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: str | Path, img: ImageRGBA) -> None:
    Path(path).write_bytes(encode_png(img))


def encode_ppm(img: ImageRGBA) -> bytes:
    """Binary P6, maxval 255; alpha is dropped."""
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img.pixels[..., :3]).tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    """Binary P5, maxval 255, from an (H, W) uint8 array."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("PGM needs an (H, W) uint8 array")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray).tobytes()


def map_to_gray(values: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] map to 8 bits for viewing."""
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


# --- resampling ---------------------------------------------------------------

def _axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers, clamped at the borders
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear(arr: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resample of an (H, W) or (H, W, C) array to float64.

    Interpolation is written as ``a + (b - a) * t`` so constant inputs stay
    exactly constant.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    a = np.asarray(arr, dtype=np.float64)
    h, w = a.shape[:2]
    y0, y1, fy = _axis_coords(h, out_h)
    x0, x1, fx = _axis_coords(w, out_w)
    tail = (1,) * (a.ndim - 2)
    fy = fy.reshape((out_h, 1) + tail)
    fx = fx.reshape((1, out_w) + tail)
    top = a[y0]
    rows = top + (a[y1] - top) * fy
    left = rows[:, x0]
    return left + (rows[:, x1] - left) * fx


def resize_bilinear(img: ImageRGBA, out_w: int, out_h: int) -> ImageRGBA:
    if out_w == img.width and out_h == img.height:
        return ImageRGBA(img.pixels.copy())
    out = bilinear(img.pixels, out_w, out_h)
    return ImageRGBA(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def resize_map(values: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    return bilinear(values, out_w, out_h)


def to_model_input(img: ImageRGBA, model: ModelSpec) -> np.ndarray:
    """Resize to the model input, scale to [0, 1], normalize, return (C, H, W) f32."""
    c, h, w = model.input_shape
    rgb = img.pixels[..., :3].astype(np.float64)
    if c == 1:
        rgb = rgb.mean(axis=2, keepdims=True)
    elif c != 3:
        raise ValueError(f"unsupported model input channel count {c}")
    x = bilinear(rgb, w, h) / 255.0
    x = (x - model.mean) / model.std
    return np.ascontiguousarray(x.transpose(2, 0, 1)).astype(np.float32)


# --- compositing ----------------------------------------------------------------

def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def patch_size(patch: ImageRGBA, base_height: int, fraction: float) -> tuple[int, int]:
    """(width, height) of a patch scaled to ``fraction`` of the base height."""
    th = max(1, _round_half_up(fraction * base_height))
    tw = max(1, _round_half_up(th * patch.width / patch.height))
    return tw, th


def composite_over(base: ImageRGBA, patch: ImageRGBA, center: tuple[float, float],
                   target_height_fraction: float) -> ImageRGBA:
    """Paste ``patch`` centered at relative ``center`` with source-over blending.

    The patch is resized so its height is ``target_height_fraction`` of the
    base height, aspect ratio kept. Parts falling outside the base are clipped.
    """
    if not 0.0 < target_height_fraction <= 1.0:
        raise ValueError("target_height_fraction must be in (0, 1]")
    tw, th = patch_size(patch, base.height, target_height_fraction)
    src = resize_bilinear(patch, tw, th).pixels
    cx, cy = center
    x0 = _round_half_up(cx * base.width - tw / 2)
    y0 = _round_half_up(cy * base.height - th / 2)

    out = base.pixels.copy()
    bx0, by0 = max(x0, 0), max(y0, 0)
    bx1, by1 = min(x0 + tw, base.width), min(y0 + th, base.height)
    if bx0 >= bx1 or by0 >= by1:
        return ImageRGBA(out)
    s = src[by0 - y0 : by1 - y0, bx0 - x0 : bx1 - x0].astype(np.float64)
    d = out[by0:by1, bx0:bx1].astype(np.float64)
    a_s = s[..., 3:] / 255.0
    a_d = d[..., 3:] / 255.0
    a_o = a_s + a_d * (1.0 - a_s)
    with np.errstate(invalid="ignore", divide="ignore"):
        rgb = (s[..., :3] * a_s + d[..., :3] * a_d * (1.0 - a_s)) / a_o
    blended = np.concatenate([rgb, a_o * 255.0], axis=-1)
    blended = np.clip(np.rint(np.nan_to_num(blended)), 0, 255).astype(np.uint8)
    touched = (s[..., 3] > 0)
    region = out[by0:by1, bx0:bx1]
    region[touched] = blended[touched]
    return ImageRGBA(out)


# --- rendering -------------------------------------------------------------------

COLD = np.array([0.0, 0.0, 255.0])
HOT = np.array([255.0, 0.0, 0.0])


def colormap(values: np.ndarray) -> np.ndarray:
    """Linear blue-to-red colormap, (H, W) in [0, 1] -> (H, W, 3) float."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)[..., None]
    return COLD + (HOT - COLD) * v


def render_heatmap_overlay(img: ImageRGBA, values: np.ndarray) -> ImageRGBA:
    """Half/half blend of the image with the colormapped activation map."""
    values = np.asarray(values)
    if values.shape != (img.height, img.width):
        raise ValueError(
            f"map shape {values.shape} does not match image {(img.height, img.width)}"
        )
    rgb = 0.5 * img.pixels[..., :3].astype(np.float64) + 0.5 * colormap(values)
    out = np.empty_like(img.pixels)
    out[..., :3] = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    out[..., 3] = 255
    return ImageRGBA(out)


def draw_box(img: ImageRGBA, box: tuple[float, float, float, float],
             color: tuple[int, int, int] = (255, 255, 0), thickness: int = 1) -> ImageRGBA:
    """Outline a box given in pixel coordinates; clipped to the image."""
    px = img.pixels.copy()
    h, w = px.shape[:2]
    x0 = max(0, int(math.floor(box[0])))
    y0 = max(0, int(math.floor(box[1])))
    x1 = min(w - 1, int(math.ceil(box[2])) - 1)
    y1 = min(h - 1, int(math.ceil(box[3])) - 1)
    if x0 > x1 or y0 > y1:
        return ImageRGBA(px)
    rgba = (*color, 255)
    t = thickness
    px[y0 : min(y0 + t, y1 + 1), x0 : x1 + 1] = rgba
    px[max(y1 - t + 1, y0) : y1 + 1, x0 : x1 + 1] = rgba
    px[y0 : y1 + 1, x0 : min(x0 + t, x1 + 1)] = rgba
    px[y0 : y1 + 1, max(x1 - t + 1, x0) : x1 + 1] = rgba
    return ImageRGBA(px)
