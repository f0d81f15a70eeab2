"""Error level analysis preprocessing.

The pipeline recompresses an image as JPEG, takes the absolute per-channel
difference against the decoded original, stretches that difference so its
largest value becomes 255, resizes to the network resolution with bilinear
sampling and scales to [0, 1].

JPEG settings are pinned (baseline, 4:2:0 chroma subsampling, the standard
quality-scaled quantisation tables, no optimisation passes) so the same input
always produces the same tensor for a given libjpeg build.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CodecError, ContractError

DEFAULT_QUALITY = 90
DEFAULT_SIZE = 128
# 4:2:0 in Pillow's subsampling numbering
_SUBSAMPLING_420 = 2


@dataclass(frozen=True, eq=False)
class RgbImage:
    """8-bit interleaved RGB raster stored as a ``(height, width, 3)`` array."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ContractError(f"image dimensions must be >= 1, got {self.width}x{self.height}")
        if self.data.dtype != np.uint8:
            raise ContractError(f"image data must be uint8, got {self.data.dtype}")
        if self.data.size != self.width * self.height * 3:
            raise ContractError(
                f"{self.data.size} values do not match {self.width}x{self.height}x3")
        object.__setattr__(self, "data", np.ascontiguousarray(
            self.data.reshape(self.height, self.width, 3)))

    @classmethod
    def from_array(cls, arr) -> RgbImage:
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ContractError(f"expected an (h, w, 3) array, got {arr.shape}")
        return cls(arr.shape[1], arr.shape[0], arr.astype(np.uint8, copy=False))

    def to_pil(self) -> Image.Image:
        return Image.fromarray(self.data, mode="RGB")

    def __eq__(self, other):
        if not isinstance(other, RgbImage):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and \
            np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class ElaConfig:
    jpeg_quality: int = DEFAULT_QUALITY
    target_width: int = DEFAULT_SIZE
    target_height: int = DEFAULT_SIZE

    def __post_init__(self):
        _check_quality(self.jpeg_quality)
        if self.target_width < 8 or self.target_height < 8:
            raise ContractError("target dimensions must be at least 8x8")

    def to_dict(self) -> dict:
        return {"jpeg_quality": self.jpeg_quality,
                "target_width": self.target_width,
                "target_height": self.target_height}


def _check_quality(quality):
    if not 1 <= int(quality) <= 100:
        raise ContractError(f"JPEG quality must be in [1, 100], got {quality}")


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round half away from zero (numpy's ``round`` rounds half to even)."""
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(values), 0, 255).astype(np.uint8)


def pil_to_rgb(im: Image.Image) -> RgbImage:
    """Convert any decoded Pillow image to RGB.

    Grayscale is replicated across channels; anything with transparency is
    composited over white.
    """
    if im.mode == "P":
        im = im.convert("RGBA" if "transparency" in im.info else "RGB")
    if im.mode in ("RGBA", "LA", "PA") or im.mode.endswith("a"):
        rgba = im.convert("RGBA")
        white = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
        im = Image.alpha_composite(white, rgba)
    if im.mode != "RGB":
        im = im.convert("RGB")
    return RgbImage.from_array(np.asarray(im))


def load_image(path) -> RgbImage:
    """Decode PNG/JPEG/TIFF/BMP (anything Pillow reads) to an RGB raster."""
    try:
        with Image.open(path) as im:
            im.load()
            return pil_to_rgb(im)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as exc:
        raise CodecError(f"cannot decode {os.fspath(path)}: {exc}") from exc


def decode_image_bytes(raw: bytes, name="<bytes>") -> RgbImage:
    try:
        with Image.open(io.BytesIO(raw)) as im:
            im.load()
            return pil_to_rgb(im)
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as exc:
        raise CodecError(f"cannot decode {name}: {exc}") from exc


def save_png(img: RgbImage, path) -> None:
    # compress_level pinned so reruns write identical bytes
    img.to_pil().save(path, format="PNG", compress_level=6)


def recompress_jpeg(img: RgbImage, quality: int = DEFAULT_QUALITY) -> RgbImage:
    """Encode ``img`` as JPEG at ``quality`` and decode it again."""
    _check_quality(quality)
    buf = io.BytesIO()
    try:
        img.to_pil().save(buf, format="JPEG", quality=int(quality),
                          subsampling=_SUBSAMPLING_420, optimize=False,
                          progressive=False)
        with Image.open(io.BytesIO(buf.getvalue())) as dec:
            out = np.asarray(dec.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise CodecError(f"JPEG round trip failed: {exc}") from exc
    return RgbImage.from_array(out)


def ela_difference(original: RgbImage, recompressed: RgbImage) -> RgbImage:
    """Absolute difference stretched so the largest value maps to 255."""
    if (original.width, original.height) != (recompressed.width, recompressed.height):
        raise ContractError(
            f"size mismatch: {original.width}x{original.height} vs "
            f"{recompressed.width}x{recompressed.height}")
    diff = np.abs(original.data.astype(np.int16) - recompressed.data.astype(np.int16))
    peak = int(diff.max())
    scale = 255.0 / peak if peak > 0 else 1.0
    return RgbImage.from_array(_to_uint8(diff * scale))


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, edge samples clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: RgbImage, width: int, height: int) -> RgbImage:
    """Bilinear resize with half-pixel-centred sampling and no antialiasing."""
    if width < 1 or height < 1:
        raise ContractError(f"target size must be >= 1, got {width}x{height}")
    if (width, height) == (img.width, img.height):
        return RgbImage.from_array(img.data.copy())
    y0, y1, fy = _bilinear_axis(img.height, height)
    x0, x1, fx = _bilinear_axis(img.width, width)
    src = img.data.astype(np.float64)
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    top = src[y0][:, x0] * (1.0 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1.0 - fx) + src[y1][:, x1] * fx
    return RgbImage.from_array(_to_uint8(top * (1.0 - fy) + bottom * fy))


def to_unit_tensor(img: RgbImage) -> np.ndarray:
    return img.data.astype(np.float32) / np.float32(255.0)


def ela_image(img: RgbImage, quality: int = DEFAULT_QUALITY) -> RgbImage:
    """Native-resolution ELA visualisation."""
    return ela_difference(img, recompress_jpeg(img, quality))


def ela_transform(img: RgbImage, cfg: ElaConfig | None = None) -> np.ndarray:
    """Network input for ``img``: a ``(height, width, 3)`` float32 tensor in [0, 1]."""
    cfg = cfg or ElaConfig()
    ela = ela_image(img, cfg.jpeg_quality)
    resized = resize_bilinear(ela, cfg.target_width, cfg.target_height)
    return to_unit_tensor(resized)
