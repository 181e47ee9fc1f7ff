"""Image and depth-map containers plus their on-disk formats.

RGB images are stored as binary PPM (P6, maxval 255) and single-channel
images as binary PGM (P5).  Depth maps use PFM ("Pf" header, negative
scale for little-endian, bottom-up row order) with the validity mask in a
sibling PGM where 255 marks valid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError


@dataclass
class ImageBuffer:
    """Dense intensity image, unit range [0, 1], row-major (H, W, C)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise DimensionMismatchError("image data must be (H, W, 1|3)")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 3) -> "ImageBuffer":
        return cls(np.zeros((height, width, channels), dtype=np.float32))


@dataclass
class DepthMap:
    """Per-pixel depth in meters with a validity mask."""

    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        if self.depth.ndim != 2:
            raise DimensionMismatchError("depth must be (H, W)")
        if self.mask.shape != self.depth.shape:
            raise DimensionMismatchError("mask shape must match depth shape")
        self.mask = self.mask.astype(bool)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @classmethod
    def full(cls, depth: np.ndarray) -> "DepthMap":
        return cls(depth, np.ones(depth.shape, dtype=bool))


def _read_pnm_header(f) -> tuple[bytes, int, int, int]:
    """Parse a P5/P6 header, tolerating comments and arbitrary whitespace."""
    magic = f.read(2)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"not a binary PGM/PPM file (magic {magic!r})")
    fields = []
    while len(fields) < 3:
        token = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        if ch == b"#":
            f.readline()
            continue
        while ch and not ch.isspace():
            token += ch
            ch = f.read(1)
        if not token:
            raise ValueError("truncated PNM header")
        fields.append(int(token))
    width, height, maxval = fields
    return magic, width, height, maxval


def write_ppm(img: ImageBuffer, path: str | Path) -> None:
    if img.channels != 3:
        raise DimensionMismatchError("PPM requires 3 channels")
    raw = np.clip(np.rint(np.asarray(img.data, dtype=np.float64) * 255.0), 0, 255)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
        f.write(raw.astype(np.uint8).tobytes())


def read_ppm(path: str | Path) -> ImageBuffer:
    with open(path, "rb") as f:
        magic, width, height, maxval = _read_pnm_header(f)
        if magic != b"P6":
            raise ValueError("expected P6 for an RGB image")
        raw = np.frombuffer(f.read(width * height * 3), dtype=np.uint8)
    if raw.size != width * height * 3:
        raise ValueError("truncated PPM data")
    data = raw.reshape(height, width, 3).astype(np.float32) / np.float32(maxval)
    return ImageBuffer(data)


def write_pgm(gray: np.ndarray | ImageBuffer, path: str | Path) -> None:
    """Write a single-channel image; float input is treated as unit range."""
    if isinstance(gray, ImageBuffer):
        if gray.channels != 1:
            raise DimensionMismatchError("PGM requires 1 channel")
        gray = gray.data[:, :, 0]
    if gray.dtype == np.uint8:
        raw = gray
    else:
        raw = np.clip(np.rint(np.asarray(gray, dtype=np.float64) * 255.0), 0, 255)
        raw = raw.astype(np.uint8)
    height, width = raw.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (width, height))
        f.write(raw.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a P5 image as raw uint8 values."""
    with open(path, "rb") as f:
        magic, width, height, _ = _read_pnm_header(f)
        if magic != b"P5":
            raise ValueError("expected P5 for a grayscale image")
        raw = np.frombuffer(f.read(width * height), dtype=np.uint8)
    if raw.size != width * height:
        raise ValueError("truncated PGM data")
    return raw.reshape(height, width).copy()


def write_pfm(values: np.ndarray, path: str | Path) -> None:
    """Write a single-channel float map (bottom-up rows, little-endian)."""
    if values.ndim != 2:
        raise DimensionMismatchError("PFM writer takes a (H, W) array")
    height, width = values.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (width, height))
        f.write(np.flipud(values).astype("<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError("not a single-channel PFM file")
        width, height = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        buf = f.read(width * height * 4)
    if len(buf) != width * height * 4:
        raise ValueError("truncated PFM data")
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(buf, dtype=dtype).reshape(height, width)
    return np.flipud(values).astype(np.float64)


def _mask_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".mask.pgm")


def write_depth(d: DepthMap, path: str | Path) -> None:
    """Write depth as PFM plus the validity mask as a sibling PGM (255=valid)."""
    write_pfm(d.depth, path)
    write_pgm((d.mask * np.uint8(255)).astype(np.uint8), _mask_path(path))


def read_depth(path: str | Path) -> DepthMap:
    depth = read_pfm(path)
    mask_file = _mask_path(path)
    if mask_file.exists():
        mask = read_pgm(mask_file) == 255
    else:
        mask = np.ones(depth.shape, dtype=bool)
    return DepthMap(depth, mask)
