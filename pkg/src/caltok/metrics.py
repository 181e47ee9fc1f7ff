"""Depth accuracy metrics and the split-level evaluation harness.

RMSE is the root mean squared depth error and delta1 the fraction of
pixels whose prediction/truth max-ratio stays below 1.25, both over
jointly valid pixels only.  Fisheye evaluation warps each held-out scene
with a sampled calibration, predicts on the distorted view, undoes the
warp, and scores in the perspective frame against the scene's own ground
truth; no scale alignment is applied anywhere.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import SceneDataset
from .errors import EmptyMaskError, NonPositiveDepthError
from .geometry import SamplingConfig, sample_random_calibration
from .images import DepthMap, write_pgm
from .model import ModelWeights, TokenSet, forward
from .remap import TO_FISHEYE, TO_PERSPECTIVE, apply_warp, apply_warp_depth, build_warp_field


def _joint(pred: DepthMap, gt: DepthMap) -> np.ndarray:
    mask = pred.mask & gt.mask
    if not mask.any():
        raise EmptyMaskError("no jointly valid pixels to score")
    return mask


def rmse(pred: DepthMap, gt: DepthMap) -> float:
    """Root mean squared error over jointly valid pixels, in meters."""
    mask = _joint(pred, gt)
    diff = pred.depth[mask] - gt.depth[mask]
    return float(np.sqrt(np.mean(diff * diff)))


def delta1(pred: DepthMap, gt: DepthMap) -> float:
    """Fraction of jointly valid pixels with max(pred/gt, gt/pred) < 1.25."""
    mask = _joint(pred, gt)
    p = pred.depth[mask]
    g = gt.depth[mask]
    if np.any(p <= 0) or np.any(g <= 0):
        raise NonPositiveDepthError("delta1 requires positive depths")
    ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio < 1.25))


@dataclass
class EvalReport:
    rmse: float
    delta1: float
    n_pixels: int
    per_image: list[dict]

    def to_json_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "delta1": self.delta1,
            "n_pixels": self.n_pixels,
            "per_image": self.per_image,
        }

    def write_json(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["index", "rmse", "delta1", "n_pixels"])
            for row in self.per_image:
                writer.writerow(
                    [row["index"], repr(row["rmse"]), repr(row["delta1"]), row["n_pixels"]]
                )
            writer.writerow(["all", repr(self.rmse), repr(self.delta1), self.n_pixels])


def evaluate(
    model: ModelWeights,
    tokens: TokenSet | None,
    dataset: SceneDataset,
    split: str = "test",
    distortion_seeds: list[int] | None = None,
    errmap_dir: str | Path | None = None,
    sampling: SamplingConfig | None = None,
) -> EvalReport:
    """Score a model over one dataset split.

    With ``distortion_seeds`` (one per scene) each scene is warped by the
    seeded calibration, predicted with the given tokens, undone, and
    scored in the perspective frame.  Without seeds the scenes are scored
    directly and tokens are not attached.  Neither model nor tokens are
    mutated.
    """
    records = dataset.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    fisheye = distortion_seeds is not None
    if fisheye and len(distortion_seeds) < len(records):
        raise ValueError("need one distortion seed per scene")
    if sampling is None:
        sampling = SamplingConfig(
            width=model.cfg.image_size, height=model.cfg.image_size
        )
    if errmap_dir is not None:
        Path(errmap_dir).mkdir(parents=True, exist_ok=True)

    per_image = []
    sq_sum = 0.0
    hit_sum = 0
    n_total = 0
    for i, rec in enumerate(records):
        img, gt = dataset.load(rec)
        if fisheye:
            fe = sample_random_calibration(distortion_seeds[i], sampling)
            w_tf = build_warp_field(TO_FISHEYE, dataset.pin, fe)
            w_tp = build_warp_field(TO_PERSPECTIVE, dataset.pin, fe)
            fish_img, fish_mask = apply_warp(img, w_tf, "bilinear")
            pred = forward(model, fish_img, tokens)
            pred = apply_warp_depth(DepthMap(pred.depth, fish_mask), w_tp)
        else:
            pred = forward(model, img, None)
        mask = _joint(pred, gt)
        diff = pred.depth[mask] - gt.depth[mask]
        ratio = np.maximum(pred.depth[mask] / gt.depth[mask], gt.depth[mask] / pred.depth[mask])
        n = int(mask.sum())
        sq_sum += float((diff * diff).sum())
        hit_sum += int((ratio < 1.25).sum())
        n_total += n
        entry = {
            "index": rec["index"],
            "rmse": float(np.sqrt(np.mean(diff * diff))),
            "delta1": float(np.mean(ratio < 1.25)),
            "n_pixels": n,
        }
        if errmap_dir is not None:
            err = np.where(mask, np.abs(pred.depth - gt.depth), 0.0)
            peak = float(err.max())
            norm = err / peak if peak > 0 else err
            write_pgm(norm, Path(errmap_dir) / f"errmap_{rec['index']:06d}.pgm")
            entry["err_max"] = peak
        per_image.append(entry)
    return EvalReport(
        rmse=float(np.sqrt(sq_sum / n_total)),
        delta1=hit_sum / n_total,
        n_pixels=n_total,
        per_image=per_image,
    )
