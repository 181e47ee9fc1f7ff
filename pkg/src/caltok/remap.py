"""Warp fields between perspective and fisheye frames, and their application.

Resampling is inverse-mapping: the output grid is traversed and each
output pixel pulls from a continuous source coordinate, so no holes can
appear.  RGB is interpolated bilinearly; depth is resampled nearest-
neighbor so values are never mixed across pixels.  Border policy is
strict: any interpolation tap with nonzero weight that would read outside
the source invalidates the output pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError
from .geometry import (
    FisheyeCalibration,
    PinholeIntrinsics,
    fisheye_to_perspective,
    perspective_to_fisheye,
)
from .images import DepthMap, ImageBuffer

TO_FISHEYE = "to_fisheye"
TO_PERSPECTIVE = "to_perspective"


@dataclass
class WarpField:
    """Per-output-pixel continuous source coordinates and validity."""

    src_x: np.ndarray
    src_y: np.ndarray
    mask: np.ndarray
    direction: str
    src_width: int
    src_height: int

    @property
    def out_height(self) -> int:
        return self.src_x.shape[0]

    @property
    def out_width(self) -> int:
        return self.src_x.shape[1]


def _pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


def build_warp_field(
    direction: str, pin: PinholeIntrinsics, fe: FisheyeCalibration
) -> WarpField:
    """Build the dense inverse-mapping field for one warp direction.

    to_fisheye: output grid is the fisheye frame, each output pixel
    sourcing from its perspective preimage.  to_perspective: output grid
    is the perspective frame, sourcing from the fisheye frame.
    """
    if direction == TO_FISHEYE:
        xs, ys = _pixel_grid(fe.width, fe.height)
        sx, sy, valid = fisheye_to_perspective(xs.ravel(), ys.ravel(), fe, pin)
        shape = (fe.height, fe.width)
        src_w, src_h = pin.width, pin.height
    elif direction == TO_PERSPECTIVE:
        xs, ys = _pixel_grid(pin.width, pin.height)
        sx, sy, valid = perspective_to_fisheye(xs.ravel(), ys.ravel(), pin, fe)
        shape = (pin.height, pin.width)
        src_w, src_h = fe.width, fe.height
    else:
        raise ValueError(f"unknown warp direction {direction!r}")
    return WarpField(
        src_x=sx.reshape(shape),
        src_y=sy.reshape(shape),
        mask=valid.reshape(shape),
        direction=direction,
        src_width=src_w,
        src_height=src_h,
    )


def _check_source(w: WarpField, width: int, height: int) -> None:
    if (width, height) != (w.src_width, w.src_height):
        raise DimensionMismatchError(
            f"warp field expects a {w.src_width}x{w.src_height} source, "
            f"got {width}x{height}"
        )


def _bilinear_taps(w: WarpField):
    """Corner indices, convex weights, and in-bounds flag for each output pixel.

    A fractional coordinate exactly on an integer collapses to a single
    tap, so zero-weight neighbors never affect validity.
    """
    x0 = np.floor(w.src_x)
    y0 = np.floor(w.src_y)
    fx = w.src_x - x0
    fy = w.src_y - y0
    x1 = x0 + (fx > 0)
    y1 = y0 + (fy > 0)
    ok = (x0 >= 0) & (x1 <= w.src_width - 1) & (y0 >= 0) & (y1 <= w.src_height - 1)

    def idx(a: np.ndarray, bound: int) -> np.ndarray:
        return np.clip(a, 0, bound - 1).astype(np.intp)

    return (
        idx(x0, w.src_width),
        idx(x1, w.src_width),
        idx(y0, w.src_height),
        idx(y1, w.src_height),
        fx,
        fy,
        ok,
    )


def apply_warp(
    img: ImageBuffer, w: WarpField, interp: str = "bilinear"
) -> tuple[ImageBuffer, np.ndarray]:
    """Resample an image through a warp field.

    Returns the warped image and the output validity mask; masked-out
    pixels are written as 0 and must be excluded from downstream
    reductions.
    """
    _check_source(w, img.width, img.height)
    data = np.asarray(img.data, dtype=np.float64)
    if interp == "bilinear":
        x0, x1, y0, y1, fx, fy, ok = _bilinear_taps(w)
        mask = w.mask & ok
        wx0 = (1.0 - fx)[..., None]
        wx1 = fx[..., None]
        wy0 = (1.0 - fy)[..., None]
        wy1 = fy[..., None]
        out = wy0 * (wx0 * data[y0, x0] + wx1 * data[y0, x1]) + wy1 * (
            wx0 * data[y1, x0] + wx1 * data[y1, x1]
        )
    elif interp == "nearest":
        ix, iy, inb = _nearest_indices(w)
        mask = w.mask & inb
        out = data[iy, ix]
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    out[~mask] = 0.0
    return ImageBuffer(out.astype(img.data.dtype)), mask


def _nearest_indices(w: WarpField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-up rounded source indices and their in-bounds flag."""
    ix = np.floor(w.src_x + 0.5)
    iy = np.floor(w.src_y + 0.5)
    inb = (ix >= 0) & (ix <= w.src_width - 1) & (iy >= 0) & (iy <= w.src_height - 1)
    ix = np.clip(ix, 0, w.src_width - 1).astype(np.intp)
    iy = np.clip(iy, 0, w.src_height - 1).astype(np.intp)
    return ix, iy, inb


def apply_warp_depth(d: DepthMap, w: WarpField) -> DepthMap:
    """Nearest-neighbor depth resampling; values are copied, never blended."""
    _check_source(w, d.width, d.height)
    ix, iy, inb = _nearest_indices(w)
    mask = w.mask & inb & d.mask[iy, ix]
    depth = np.where(mask, d.depth[iy, ix], 0.0)
    return DepthMap(depth, mask)


def coverage_loss(w: WarpField) -> float:
    """Fraction of output pixels with no valid source under the warp."""
    return 1.0 - float(np.count_nonzero(w.mask)) / float(w.mask.size)
