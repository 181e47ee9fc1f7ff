"""Procedural perspective RGB+depth scenes with exact ray-cast depth.

Scenes are analytic: a fronto-parallel textured background plane, a few
tilted finite planes, and random spheres, shaded with a fixed directional
light so appearance differences across the dataset come from geometry,
not lighting.  Generation is pure per (seed, index) and therefore
embarrassingly parallel and byte-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PinholeIntrinsics
from .images import DepthMap, ImageBuffer, read_depth, read_ppm, write_depth, write_ppm

# Unit vector from surface toward the light, fixed for the whole dataset
# (up and behind the camera; image y points down).
_LIGHT = np.array([-0.3, -0.5, -0.8])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


def default_pinhole(size: int = 64, focal: float = 14.0) -> PinholeIntrinsics:
    """Wide-angle square pinhole used by the stock dataset configs."""
    return PinholeIntrinsics(
        fx=focal, fy=focal, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
        width=size, height=size,
    )


@dataclass(frozen=True)
class SceneSpec:
    """Sampling ranges for one procedural dataset."""

    seed: int
    pin: PinholeIntrinsics = field(default_factory=default_pinhole)
    depth_range: tuple[float, float] = (0.6, 9.0)
    sphere_count: tuple[int, int] = (3, 8)
    plane_count: tuple[int, int] = (1, 2)
    texture_freq: tuple[float, float] = (1.1, 1.7)

    def __post_init__(self) -> None:
        lo, hi = self.depth_range
        if not (0 < lo < hi):
            raise ValueError("depth range must be positive with min < max")

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "pin": self.pin.to_json_dict(),
            "depth_range": list(self.depth_range),
            "sphere_count": list(self.sphere_count),
            "plane_count": list(self.plane_count),
            "texture_freq": list(self.texture_freq),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            seed=int(d["seed"]),
            pin=PinholeIntrinsics.from_json_dict(d["pin"]),
            depth_range=tuple(d.get("depth_range", (0.6, 9.0))),
            sphere_count=tuple(d.get("sphere_count", (3, 8))),
            plane_count=tuple(d.get("plane_count", (1, 2))),
            texture_freq=tuple(d.get("texture_freq", (1.1, 1.7))),
        )


def _ray_directions(pin: PinholeIntrinsics) -> np.ndarray:
    """Per-pixel ray directions with dz = 1, so the ray parameter is z-depth."""
    ys, xs = np.mgrid[0 : pin.height, 0 : pin.width]
    dx = (xs - pin.cx) / pin.fx
    dy = (ys - pin.cy) / pin.fy
    return np.stack([dx, dy, np.ones_like(dx)], axis=-1)


def _texture(points, a1, a2, freq, ph1, ph2):
    """Crosshatch of two world-frequency sines.

    Fixed world frequency makes the on-image texture scale a reliable
    distance cue (finer for farther surfaces), which lens distortion then
    corrupts.
    """
    s1 = np.sin(2.0 * np.pi * freq * (points @ a1) + ph1)
    s2 = np.sin(2.0 * np.pi * freq * (points @ a2) + ph2)
    return 0.7 + 0.3 * s1 * s2


_EX = np.array([1.0, 0.0, 0.0])
_EY = np.array([0.0, 1.0, 0.0])
_EZ = np.array([0.0, 0.0, 1.0])


def generate_scene(spec: SceneSpec, index: int) -> tuple[ImageBuffer, DepthMap]:
    """Ray-cast one scene; deterministic per (spec.seed, index).

    Surfaces: a fronto-parallel background wall at fixed depth, a
    ground-style plane below the camera (the strongest view-angle depth
    cue), optionally one extra tilted panel, and spheres with absolute
    world radii so apparent size encodes distance.
    """
    rng = np.random.default_rng([spec.seed, index])
    pin = spec.pin
    d_min, d_max = spec.depth_range
    rays = _ray_directions(pin)
    n_px = pin.height * pin.width
    flat = rays.reshape(n_px, 3)

    # Candidate hits: depth per surface (+inf where missed), with shading,
    # base color, and texture parameters kept in parallel lists.
    depths = []
    shades = []
    colors = []
    textures = []

    def add_texture(a1, a2):
        textures.append(
            (
                a1,
                a2,
                rng.uniform(*spec.texture_freq),
                rng.uniform(0.0, 2.0 * np.pi),
                rng.uniform(0.0, 2.0 * np.pi),
            )
        )

    z_bg = d_min + 0.9 * (d_max - d_min)
    depths.append(np.full(n_px, z_bg))
    bg_normal = np.array([0.0, 0.0, -1.0])
    shades.append(np.full(n_px, 0.3 + 0.7 * max(0.0, float(bg_normal @ _LIGHT))))
    colors.append(rng.uniform(0.25, 0.95, 3))
    add_texture(_EX, _EY)

    n_planes = int(rng.integers(spec.plane_count[0], spec.plane_count[1] + 1))
    for j in range(n_planes):
        if j == 0:
            # Ground plane below the camera: depth grows toward the horizon.
            height = rng.uniform(1.2, 1.8)
            normal = np.array(
                [rng.uniform(-0.12, 0.12), -1.0, rng.uniform(-0.15, 0.05)]
            )
            normal /= np.linalg.norm(normal)
            p0 = np.array([0.0, height, 0.0])
            extent = np.inf
            add_texture(_EX, _EZ)
        else:
            px = rng.uniform(0.15, 0.85) * (pin.width - 1)
            py = rng.uniform(0.15, 0.85) * (pin.height - 1)
            z0 = rng.uniform(0.4, 0.8) * (d_max - d_min) + d_min
            p0 = np.array([(px - pin.cx) / pin.fx, (py - pin.cy) / pin.fy, 1.0]) * z0
            tilt = rng.uniform(-0.7, 0.7, 2)
            normal = np.array([tilt[0], tilt[1], -1.0])
            normal /= np.linalg.norm(normal)
            extent = rng.uniform(0.6, 1.4) * z0
            add_texture(_EX, _EY)
        denom = flat @ normal
        safe = np.abs(denom) > 1e-9
        t = np.where(safe, (p0 @ normal) / np.where(safe, denom, 1.0), np.inf)
        finite = np.isfinite(t) & (t > 0)
        if np.isfinite(extent):
            hit_pts = flat * np.where(finite, t, 0.0)[:, None]
            miss = ~finite | (np.linalg.norm(hit_pts - p0, axis=1) > extent)
        else:
            miss = ~finite
        depths.append(np.where(miss, np.inf, t))
        shades.append(np.full(n_px, 0.3 + 0.7 * max(0.0, float(normal @ _LIGHT))))
        colors.append(rng.uniform(0.15, 0.95, 3))

    n_spheres = int(rng.integers(spec.sphere_count[0], spec.sphere_count[1] + 1))
    for _ in range(n_spheres):
        sx = rng.uniform(0.1, 0.9) * (pin.width - 1)
        sy = rng.uniform(0.1, 0.9) * (pin.height - 1)
        zc = rng.uniform(0.25, 0.7) * (d_max - d_min) + d_min
        center = np.array([(sx - pin.cx) / pin.fx, (sy - pin.cy) / pin.fy, 1.0]) * zc
        # Absolute radii make apparent size a depth cue instead of letting
        # local appearance alone predict depth.
        radius = rng.uniform(0.6, 1.3)
        a = np.einsum("ij,ij->i", flat, flat)
        b = -2.0 * (flat @ center)
        c = center @ center - radius * radius
        disc = b * b - 4.0 * a * c
        hit = disc > 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = (-b - sq) / (2.0 * a)
        t = np.where(hit & (t > 1e-6), t, np.inf)
        depths.append(t)
        pts = flat * np.where(np.isfinite(t), t, 0.0)[:, None]
        normals = np.where(np.isfinite(t)[:, None], (pts - center) / radius, 0.0)
        shades.append(0.3 + 0.7 * np.maximum(0.0, normals @ _LIGHT))
        colors.append(rng.uniform(0.15, 0.95, 3))
        u = rng.normal(size=3)
        v = rng.normal(size=3)
        add_texture(u / np.linalg.norm(u), v / np.linalg.norm(v))

    depth_stack = np.stack(depths, axis=0)
    winner = np.argmin(depth_stack, axis=0)
    depth = depth_stack[winner, np.arange(n_px)]
    points = flat * depth[:, None]

    rgb = np.zeros((n_px, 3))
    for i in range(len(depths)):
        sel = winner == i
        if not np.any(sel):
            continue
        tex = _texture(points[sel], *textures[i])
        rgb[sel] = np.clip(colors[i][None, :] * (tex * shades[i][sel])[:, None], 0.0, 1.0)

    depth = np.clip(depth, d_min, d_max).reshape(pin.height, pin.width)
    img = ImageBuffer(rgb.reshape(pin.height, pin.width, 3).astype(np.float32))
    return img, DepthMap.full(depth)


def scene_paths(split: str, index: int) -> tuple[str, str]:
    stem = f"scenes/{split}/{index:06d}"
    return stem + ".ppm", stem + ".pfm"


def generate_split(
    spec: SceneSpec, out_dir: str | Path, n_train: int, n_val: int, n_test: int
) -> dict:
    """Write PPM/PFM pairs for disjoint train/val/test index ranges."""
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError("split sizes must be positive")
    out = Path(out_dir)
    counts = {"train": n_train, "val": n_val, "test": n_test}
    records = []
    index = 0
    for split, count in counts.items():
        (out / "scenes" / split).mkdir(parents=True, exist_ok=True)
        for _ in range(count):
            img, depth = generate_scene(spec, index)
            img_rel, depth_rel = scene_paths(split, index)
            write_ppm(img, out / img_rel)
            write_depth(depth, out / depth_rel)
            records.append(
                {"index": index, "split": split, "image": img_rel, "depth": depth_rel}
            )
            index += 1
    manifest = {
        "intrinsics": spec.pin.to_json_dict(),
        "spec": spec.to_json_dict(),
        "scenes": records,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


class SceneDataset:
    """Read access to a generated dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        with open(self.root / "manifest.json") as f:
            self.manifest = json.load(f)
        self.pin = PinholeIntrinsics.from_json_dict(self.manifest["intrinsics"])

    def split(self, name: str) -> list[dict]:
        return [r for r in self.manifest["scenes"] if r["split"] == name]

    def load(self, record: dict) -> tuple[ImageBuffer, DepthMap]:
        img = read_ppm(self.root / record["image"])
        depth = read_depth(self.root / record["depth"])
        return img, depth
