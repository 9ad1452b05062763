"""Float image buffers and codecs (PFM, Radiance HDR, 16-bit PNG).

All pipeline math happens in linear RGB; gamma 2.2 is applied only when
exporting to PNG (and undone when reading one). PFM and HDR are linear
storage. PFM scanlines are written bottom-to-top per the format with a
negative (little-endian) scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError, ParameterError
from .util import atomic_write_bytes

LINEAR = "linear"
DISPLAY = "display-gamma-2.2"


@dataclass
class ImageBuffer:
    data: np.ndarray  # (H, W) or (H, W, C) float32, C in {1, 3, 4}
    colorspace: str = LINEAR

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3, 4):
            raise ParameterError("image must be (H, W, {1|3|4})")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


# --- PFM ---------------------------------------------------------------------

def write_pfm(path: str, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        header = b"Pf\n"
        body = img[::-1, :, 0]
    elif img.shape[2] == 3:
        header = b"PF\n"
        body = img[::-1]
    else:
        raise ParameterError("PFM supports 1 or 3 channels")
    blob = header + f"{img.shape[1]} {img.shape[0]}\n".encode() + b"-1.0\n"
    blob += body.astype("<f4").tobytes()
    atomic_write_bytes(path, blob)


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()

    def token(off):
        while blob[off : off + 1].isspace():
            off += 1
        end = off
        while end < len(blob) and not blob[end : end + 1].isspace():
            end += 1
        return blob[off:end], end

    magic, off = token(0)
    if magic not in (b"PF", b"Pf"):
        raise DataError(f"{path}: not a PFM file")
    w, off = token(off)
    h, off = token(off)
    scale, off = token(off)
    w, h, scale = int(w), int(h), float(scale)
    off += 1  # single whitespace after the scale line
    ch = 3 if magic == b"PF" else 1
    dt = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(blob, dt, w * h * ch, off).reshape(h, w, ch).astype(np.float32)
    return data[::-1].copy()


# --- Radiance HDR (RGBE) -----------------------------------------------------

def _float_to_rgbe(img: np.ndarray) -> np.ndarray:
    maxc = img.max(axis=-1)
    rgbe = np.zeros(img.shape[:-1] + (4,), dtype=np.uint8)
    nz = maxc >= 1e-32
    mant, expo = np.frexp(maxc[nz])
    scale = mant * 256.0 / maxc[nz]
    rgbe[nz, :3] = np.clip(img[nz] * scale[:, None], 0, 255).astype(np.uint8)
    rgbe[nz, 3] = (expo + 128).astype(np.uint8)
    return rgbe


def _rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    expo = rgbe[..., 3].astype(np.int32) - 136  # -128 - 8 mantissa bits
    scale = np.ldexp(1.0, expo)
    out = rgbe[..., :3].astype(np.float32) * scale[..., None].astype(np.float32)
    out[rgbe[..., 3] == 0] = 0.0
    return out


def write_hdr(path: str, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ParameterError("HDR requires an (H, W, 3) image")
    h, w = img.shape[:2]
    header = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n" + f"-Y {h} +X {w}\n".encode()
    atomic_write_bytes(path, header + _float_to_rgbe(img).tobytes())


def read_hdr(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"#?"):
        raise DataError(f"{path}: not a Radiance HDR file")
    off = 0
    dims = None
    while True:
        end = blob.index(b"\n", off)
        line = blob[off:end]
        off = end + 1
        if line.startswith(b"-Y"):
            parts = line.split()
            dims = (int(parts[1]), int(parts[3]))
            break
        if off >= len(blob):
            raise DataError(f"{path}: missing resolution line")
    h, w = dims
    out = np.zeros((h, w, 4), dtype=np.uint8)
    for row in range(h):
        # new-style RLE scanline?
        if off + 4 <= len(blob) and blob[off] == 2 and blob[off + 1] == 2:
            rw = (blob[off + 2] << 8) | blob[off + 3]
            if rw != w:
                raise DataError(f"{path}: scanline width mismatch")
            off += 4
            for c in range(4):
                col = 0
                while col < w:
                    count = blob[off]
                    off += 1
                    if count > 128:  # run
                        out[row, col : col + count - 128, c] = blob[off]
                        off += 1
                        col += count - 128
                    else:  # literal
                        out[row, col : col + count, c] = np.frombuffer(
                            blob, np.uint8, count, off
                        )
                        off += count
                        col += count
        else:
            out[row] = np.frombuffer(blob, np.uint8, w * 4, off).reshape(w, 4)
            off += w * 4
    return _rgbe_to_float(out)


# --- PNG ---------------------------------------------------------------------

def write_png(path: str, buffer: ImageBuffer) -> None:
    """16-bit PNG export; linear buffers are gamma-2.2 encoded on the way out."""
    from PIL import Image

    data = buffer.data
    if buffer.colorspace == LINEAR:
        data = np.power(np.clip(data, 0.0, 1.0), 1.0 / 2.2)
    else:
        data = np.clip(data, 0.0, 1.0)
    arr = np.round(data * 65535.0).astype(np.uint16)
    if arr.shape[2] == 1:
        img = Image.fromarray(arr[:, :, 0], mode="I;16")
    else:
        # Pillow lacks 16-bit RGB; round-trip through 8 bit per channel
        arr8 = (arr >> 8).astype(np.uint8)
        img = Image.fromarray(arr8, mode="RGB" if arr.shape[2] == 3 else "RGBA")
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png(path: str) -> ImageBuffer:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype == np.uint8:
        data = arr.astype(np.float32) / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        data = arr.astype(np.float32) / 65535.0
    else:
        data = arr.astype(np.float32)
    if data.ndim == 2:
        data = data[:, :, None]
    return ImageBuffer(np.power(data, 2.2), colorspace=LINEAR)


# --- dispatch ----------------------------------------------------------------

def write_image(path: str, buffer: ImageBuffer) -> None:
    """Extension-dispatched write; enforces the linear/display contract."""
    lower = path.lower()
    if lower.endswith(".pfm"):
        if buffer.colorspace != LINEAR:
            raise ParameterError("PFM stores linear data; convert before writing")
        write_pfm(path, buffer.data[:, :, :3] if buffer.channels == 4 else buffer.data)
    elif lower.endswith(".hdr"):
        if buffer.colorspace != LINEAR:
            raise ParameterError("HDR stores linear data; convert before writing")
        write_hdr(path, buffer.data[:, :, :3])
    elif lower.endswith(".png"):
        write_png(path, buffer)
    else:
        raise ParameterError(f"unsupported image extension: {path}")


def read_image(path: str) -> ImageBuffer:
    lower = path.lower()
    if lower.endswith(".pfm"):
        return ImageBuffer(read_pfm(path), colorspace=LINEAR)
    if lower.endswith(".hdr"):
        return ImageBuffer(read_hdr(path), colorspace=LINEAR)
    if lower.endswith(".png"):
        return read_png(path)
    raise ParameterError(f"unsupported image extension: {path}")


def read_envmap(path: str) -> np.ndarray:
    """Equirectangular radiance map as (H, W, 3) float64."""
    img = read_image(path)
    data = img.data.astype(np.float64)
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    return data[:, :, :3]
