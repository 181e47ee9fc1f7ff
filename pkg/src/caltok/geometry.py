"""Radial fisheye camera geometry.

Implements the four-coefficient odd-polynomial radial model

    r(theta) = k1*theta + k2*theta^3 + k3*theta^5 + k4*theta^7,

its numerical inverse, and the dense per-pixel transforms between a
pinhole (perspective) frame and a fisheye frame.  All angle math runs in
double precision; pixel coordinates are continuous with the pixel-center
convention (integer coordinate = center of pixel).

Every function here is pure and safe for concurrent callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NonMonotoneError, OutOfRangeError, SamplingExhaustedError

# Incidence angles at or above pi/2 have no perspective image.
_THETA_PERSPECTIVE_LIMIT = math.pi / 2 - 1e-6

_MONOTONE_GRID_SAMPLES = 4096
_NEWTON_MAX_ITER = 50
_NEWTON_TOL = 1e-12
_INVERSE_TOL = 1e-10


class PixelCoord(NamedTuple):
    """Continuous pixel position (column x, row y)."""

    x: float
    y: float


@dataclass(frozen=True)
class PinholeIntrinsics:
    """Perspective camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_json_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PinholeIntrinsics":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass(frozen=True)
class FisheyeCalibration:
    """Fisheye camera: radial coefficients, principal point, pixel scale.

    ``scale`` converts the dimensionless polynomial radius r(theta) to
    pixels; ``theta_max`` bounds the incidence angle the lens images.
    """

    k: tuple[float, float, float, float]
    cx: float
    cy: float
    scale: float
    theta_max: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if len(self.k) != 4:
            raise ValueError("exactly four radial coefficients required")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        # Incidence angles may exceed pi/2 (lenses wider than 180 degrees);
        # only the perspective-side transform is capped at pi/2.
        if not (0 < self.theta_max < math.pi):
            raise ValueError("theta_max must lie in (0, pi)")

    @property
    def r_max(self) -> float:
        return float(radial_forward(self.theta_max, self.k))

    def to_json_dict(self) -> dict:
        return {
            "k": list(self.k),
            "cx": self.cx,
            "cy": self.cy,
            "scale": self.scale,
            "theta_max": self.theta_max,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "FisheyeCalibration":
        k = tuple(float(v) for v in d["k"])
        return cls(
            k=k,  # type: ignore[arg-type]
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            scale=float(d["scale"]),
            theta_max=float(d["theta_max"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def radial_forward(theta, k):
    """Evaluate r(theta) = k1*theta + k2*theta^3 + k3*theta^5 + k4*theta^7.

    Horner form in theta^2; accepts scalars or arrays.
    """
    theta = np.asarray(theta, dtype=np.float64)
    k1, k2, k3, k4 = k
    t2 = theta * theta
    return theta * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4)))


def radial_derivative(theta, k):
    """dr/dtheta = k1 + 3*k2*theta^2 + 5*k3*theta^4 + 7*k4*theta^6."""
    theta = np.asarray(theta, dtype=np.float64)
    k1, k2, k3, k4 = k
    t2 = theta * theta
    return k1 + t2 * (3.0 * k2 + t2 * (5.0 * k3 + t2 * 7.0 * k4))


def check_monotone(k, theta_max: float) -> bool:
    """True iff dr/dtheta > 0 on a dense grid of [0, theta_max] and at theta_max."""
    grid = np.linspace(0.0, theta_max, _MONOTONE_GRID_SAMPLES)
    if not np.all(radial_derivative(grid, k) > 0.0):
        return False
    return bool(radial_derivative(theta_max, k) > 0.0)


def radial_inverse(r, k, theta_max: float):
    """Solve r(theta) = r for theta on [0, theta_max].

    Newton iteration from theta0 = r / k1 (at most 50 steps), falling back
    to bisection on [0, theta_max] for any lane whose iterate leaves the
    bracket or fails to converge.  The result satisfies
    |r(theta) - r| < 1e-10.

    Raises OutOfRangeError if r exceeds r(theta_max) beyond tolerance and
    NonMonotoneError if the polynomial is not strictly increasing.
    """
    if not check_monotone(k, theta_max):
        raise NonMonotoneError(f"r(theta) not strictly increasing on [0, {theta_max}]")
    r_arr = np.asarray(r, dtype=np.float64)
    scalar = r_arr.ndim == 0
    r_arr = np.atleast_1d(r_arr).copy()

    r_max = float(radial_forward(theta_max, k))
    tol = 1e-9 * max(r_max, 1.0)
    if np.any(r_arr < -tol) or np.any(r_arr > r_max + tol):
        raise OutOfRangeError(f"radius outside [0, {r_max}]")
    np.clip(r_arr, 0.0, r_max, out=r_arr)

    theta = r_arr / k[0]
    needs_bisect = (theta < 0.0) | (theta > theta_max)
    theta[needs_bisect] = 0.0
    active = ~needs_bisect
    for _ in range(_NEWTON_MAX_ITER):
        if not np.any(active):
            break
        f = radial_forward(theta[active], k) - r_arr[active]
        done = np.abs(f) < _NEWTON_TOL
        step = np.where(done, 0.0, f / radial_derivative(theta[active], k))
        new_theta = theta[active] - step
        escaped = (new_theta < 0.0) | (new_theta > theta_max)
        theta[active] = np.where(escaped, theta[active], new_theta)
        idx = np.flatnonzero(active)
        needs_bisect[idx[escaped]] = True
        still = ~(done | escaped)
        active[idx] = still
    # Unconverged Newton lanes join the bisection pool.
    needs_bisect |= active
    if np.any(needs_bisect):
        theta[needs_bisect] = _bisect(r_arr[needs_bisect], k, theta_max)

    resid = np.abs(radial_forward(theta, k) - r_arr)
    if np.any(resid >= _INVERSE_TOL):
        raise OutOfRangeError("radial inversion failed to converge")
    return float(theta[0]) if scalar else theta


def _bisect(r: np.ndarray, k, theta_max: float) -> np.ndarray:
    lo = np.zeros_like(r)
    hi = np.full_like(r, theta_max)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        below = radial_forward(mid, k) < r
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def perspective_to_fisheye(x, y, pin: PinholeIntrinsics, fe: FisheyeCalibration):
    """Map perspective pixels to fisheye pixels.

    With normalized offsets xn = (x - cx)/fx, yn = (y - cy)/fy:
    rho = hypot(xn, yn), theta = arctan(rho), phi = atan2(yn, xn), and the
    fisheye position is the principal point plus scale * r(theta) along phi.
    Validity requires theta <= theta_max and the result inside the fisheye
    interpolation domain [0, width-1] x [0, height-1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    scalar = x.ndim == 0 and y.ndim == 0
    xn = (np.atleast_1d(x) - pin.cx) / pin.fx
    yn = (np.atleast_1d(y) - pin.cy) / pin.fy
    rho = np.hypot(xn, yn)
    theta = np.arctan(rho)
    phi = np.arctan2(yn, xn)
    rr = radial_forward(theta, fe.k) * fe.scale
    xf = fe.cx + rr * np.cos(phi)
    yf = fe.cy + rr * np.sin(phi)
    valid = (
        (theta <= fe.theta_max)
        & (xf >= 0.0)
        & (xf <= fe.width - 1.0)
        & (yf >= 0.0)
        & (yf <= fe.height - 1.0)
    )
    if scalar:
        return PixelCoord(float(xf[0]), float(yf[0])), bool(valid[0])
    return xf, yf, valid


def fisheye_to_perspective(x, y, fe: FisheyeCalibration, pin: PinholeIntrinsics):
    """Map fisheye pixels back to perspective pixels (inverse transform).

    r = |p - principal point| / scale is inverted to theta, then the
    perspective position is cx + fx*tan(theta)*cos(phi) (and likewise for
    y).  Pixels beyond r(theta_max), at theta >= pi/2, or landing outside
    the perspective interpolation domain are flagged invalid.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    scalar = x.ndim == 0 and y.ndim == 0
    dx = np.atleast_1d(x) - fe.cx
    dy = np.atleast_1d(y) - fe.cy
    r = np.hypot(dx, dy) / fe.scale
    r_max = fe.r_max
    in_range = r <= r_max
    theta = radial_inverse(np.minimum(r, r_max), fe.k, fe.theta_max)
    theta = np.atleast_1d(theta)
    phi = np.arctan2(dy, dx)
    safe = theta < _THETA_PERSPECTIVE_LIMIT
    t = np.where(safe, np.tan(np.minimum(theta, _THETA_PERSPECTIVE_LIMIT)), 0.0)
    xp = pin.cx + pin.fx * t * np.cos(phi)
    yp = pin.cy + pin.fy * t * np.sin(phi)
    valid = (
        in_range
        & safe
        & (xp >= 0.0)
        & (xp <= pin.width - 1.0)
        & (yp >= 0.0)
        & (yp <= pin.height - 1.0)
    )
    if scalar:
        return PixelCoord(float(xp[0]), float(yp[0])), bool(valid[0])
    return xp, yp, valid


@dataclass(frozen=True)
class SamplingConfig:
    """Ranges for drawing random fisheye calibrations.

    k1 is pinned to 1.0; the higher-order coefficients are drawn negative
    with attenuated magnitude, and draws violating strict monotonicity on
    [0, theta_max] are rejected.
    """

    width: int
    height: int
    theta_max_range: tuple[float, float] = (1.05, 1.66)
    k2_range: tuple[float, float] = (-1.0, -0.01)
    k3_range: tuple[float, float] = (-0.1, -0.001)
    k4_range: tuple[float, float] = (-0.01, -0.0001)
    max_attempts: int = 1000


def sample_random_calibration(seed: int, template: SamplingConfig) -> FisheyeCalibration:
    """Draw one monotone calibration; deterministic for a fixed seed.

    The pixel scale is set so the image circle inscribes the output frame:
    scale * r(theta_max) = min(width, height) / 2.
    """
    rng = np.random.default_rng(seed)
    for _ in range(template.max_attempts):
        k = (
            1.0,
            float(rng.uniform(*template.k2_range)),
            float(rng.uniform(*template.k3_range)),
            float(rng.uniform(*template.k4_range)),
        )
        theta_max = float(rng.uniform(*template.theta_max_range))
        if check_monotone(k, theta_max):
            break
    else:
        raise SamplingExhaustedError(
            f"no monotone calibration in {template.max_attempts} attempts"
        )
    scale = (min(template.width, template.height) / 2.0) / float(
        radial_forward(theta_max, k)
    )
    return FisheyeCalibration(
        k=k,
        cx=(template.width - 1) / 2.0,
        cy=(template.height - 1) / 2.0,
        scale=scale,
        theta_max=theta_max,
        width=template.width,
        height=template.height,
    )
