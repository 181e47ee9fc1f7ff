"""Self-supervised undo-warp training: losses, Adam, and the two loops.

Token adaptation synthesizes a fisheye view of each perspective scene,
predicts depth on it with calibration tokens attached, warps the
prediction back to the perspective frame, and minimizes a masked LogL1
(or L1) distance to the frozen model's own perspective prediction.  The
target is never resampled; only the prediction crosses frames, and the
loss adjoint is scattered exactly through the nearest-neighbor
correspondence back to the fisheye pixels that produced it.

Backbone pretraining on ground-truth perspective scenes uses the same
machinery with all weights trainable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import quantize_model, save_model, save_tokens
from .datagen import SceneDataset
from .errors import EmptyMaskError, ShapeMismatchError
from .geometry import FisheyeCalibration, PinholeIntrinsics, SamplingConfig, sample_random_calibration
from .images import DepthMap, ImageBuffer
from .model import (
    ModelConfig,
    ModelWeights,
    TokenSet,
    forward,
    forward_backward_full,
    forward_backward_tokens,
    init_model,
    init_tokens,
)
from .remap import TO_FISHEYE, TO_PERSPECTIVE, WarpField, apply_warp, apply_warp_depth, build_warp_field, _nearest_indices

LOSS_KINDS = ("logl1", "l1")
FRAMES = ("perspective", "fisheye")
SUPERVISIONS = ("pseudo", "ground_truth")

# Distortion seeds: training examples draw from one band, held-out
# evaluation from another, so the regimes never share a calibration.
_SEED_SPAN = 10_000_000
_EVAL_BAND = 9_000_000


def train_distortion_seed(base_seed: int, example_index: int) -> int:
    return base_seed * _SEED_SPAN + example_index


def eval_distortion_seed(base_seed: int, scene_index: int) -> int:
    return base_seed * _SEED_SPAN + _EVAL_BAND + scene_index


@dataclass(frozen=True)
class LossConfig:
    kind: str = "logl1"
    frame: str = "perspective"
    supervision: str = "pseudo"

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.frame not in FRAMES:
            raise ValueError(f"unknown loss frame {self.frame!r}")
        if self.supervision not in SUPERVISIONS:
            raise ValueError(f"unknown supervision {self.supervision!r}")


def _joint_mask(a: DepthMap, b: DepthMap) -> np.ndarray:
    if a.depth.shape != b.depth.shape:
        raise ShapeMismatchError("depth maps differ in size")
    mask = a.mask & b.mask
    if not mask.any():
        raise EmptyMaskError("no jointly valid pixels")
    return mask


def logl1_loss(a: DepthMap, b: DepthMap) -> tuple[float, np.ndarray]:
    """Mean log(|a-b| + 1) over jointly valid pixels; adjoint w.r.t. a.

    The adjoint at |a-b| = 0 uses sign(0) = 0.
    """
    mask = _joint_mask(a, b)
    diff = a.depth[mask] - b.depth[mask]
    count = diff.size
    loss = float(np.log1p(np.abs(diff)).mean())
    adjoint = np.zeros_like(a.depth, dtype=np.float64)
    adjoint[mask] = np.sign(diff) / ((np.abs(diff) + 1.0) * count)
    return loss, adjoint


def l1_loss(a: DepthMap, b: DepthMap) -> tuple[float, np.ndarray]:
    """Mean |a-b| over jointly valid pixels; adjoint w.r.t. a."""
    mask = _joint_mask(a, b)
    diff = a.depth[mask] - b.depth[mask]
    count = diff.size
    loss = float(np.abs(diff).mean())
    adjoint = np.zeros_like(a.depth, dtype=np.float64)
    adjoint[mask] = np.sign(diff) / count
    return loss, adjoint


def loss_function(kind: str) -> Callable[[DepthMap, DepthMap], tuple[float, np.ndarray]]:
    if kind == "logl1":
        return logl1_loss
    if kind == "l1":
        return l1_loss
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass
class OptimState:
    """Adam state; moments are allocated lazily to match the parameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: object = None
    v: object = None


def _adam_array(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, opt: OptimState):
    if p.shape != g.shape:
        raise ShapeMismatchError("gradient shape does not match parameter shape")
    m *= opt.beta1
    m += (1.0 - opt.beta1) * g
    v *= opt.beta2
    v += (1.0 - opt.beta2) * (g * g)
    m_hat = m / (1.0 - opt.beta1**opt.step)
    v_hat = v / (1.0 - opt.beta2**opt.step)
    return p - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def adam_update(params, grads, opt: OptimState):
    """One bias-corrected Adam step; works on an array or a dict of arrays."""
    opt.step += 1
    if isinstance(params, dict):
        if opt.m is None:
            opt.m = {k: np.zeros_like(p) for k, p in params.items()}
            opt.v = {k: np.zeros_like(p) for k, p in params.items()}
        return {
            k: _adam_array(params[k], grads[k], opt.m[k], opt.v[k], opt)
            for k in params
        }
    if opt.m is None:
        opt.m = np.zeros_like(params)
        opt.v = np.zeros_like(params)
    return _adam_array(params, grads, opt.m, opt.v, opt)


@dataclass
class TrainingExample:
    """One synthesized fisheye view of a perspective scene."""

    fisheye_img: ImageBuffer
    fisheye_mask: np.ndarray
    target: DepthMap
    warp_to_fisheye: WarpField
    warp_to_perspective: WarpField
    fe: FisheyeCalibration


def make_training_example(
    img: ImageBuffer,
    depth_gt: DepthMap,
    pin: PinholeIntrinsics,
    model: ModelWeights,
    fe_seed: int,
    supervision: str = "pseudo",
    sampling: SamplingConfig | None = None,
    _cached_target: DepthMap | None = None,
) -> TrainingExample:
    """Sample a distortion, synthesize the fisheye view, and pick the target.

    The pseudo target is the frozen model's prediction on the untouched
    perspective image; with ground-truth supervision the scene's own depth
    is used instead.  Deterministic per (scene, fe_seed).  ``_cached_target``
    lets the training loop reuse the frozen model's prediction for a scene
    it has already inferred.
    """
    if sampling is None:
        sampling = SamplingConfig(
            width=model.cfg.image_size, height=model.cfg.image_size
        )
    fe = sample_random_calibration(fe_seed, sampling)
    w_tf = build_warp_field(TO_FISHEYE, pin, fe)
    w_tp = build_warp_field(TO_PERSPECTIVE, pin, fe)
    fisheye_img, fmask = apply_warp(img, w_tf, "bilinear")
    if _cached_target is not None:
        target = _cached_target
    elif supervision == "pseudo":
        target = forward(model, img, None)
    elif supervision == "ground_truth":
        target = DepthMap(depth_gt.depth.copy(), depth_gt.mask.copy())
    else:
        raise ValueError(f"unknown supervision {supervision!r}")
    return TrainingExample(
        fisheye_img=fisheye_img,
        fisheye_mask=fmask,
        target=target,
        warp_to_fisheye=w_tf,
        warp_to_perspective=w_tp,
        fe=fe,
    )


def token_loss_and_grad(
    model: ModelWeights,
    tokens: TokenSet,
    example: TrainingExample,
    cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Loss and exact token gradient for one training example.

    Perspective frame: the fisheye prediction is warped back and compared
    to the untouched target; the per-pixel adjoint is scattered to the
    fisheye pixel each output pixel sampled.  Fisheye frame (ablation):
    the target is warped instead and the loss applies directly.
    """
    loss_fn = loss_function(cfg.kind)
    pred = forward(model, example.fisheye_img, tokens)
    pred = DepthMap(pred.depth, example.fisheye_mask)
    if cfg.frame == "perspective":
        warped = apply_warp_depth(pred, example.warp_to_perspective)
        loss, adj_warped = loss_fn(warped, example.target)
        w = example.warp_to_perspective
        ix, iy, _ = _nearest_indices(w)
        adj = np.zeros(
            (model.cfg.image_size, model.cfg.image_size), dtype=np.float64
        )
        live = warped.mask & (adj_warped != 0.0)
        np.add.at(adj, (iy[live], ix[live]), adj_warped[live])
    else:
        target_f = apply_warp_depth(example.target, example.warp_to_fisheye)
        loss, adj = loss_fn(pred, target_f)
    grad = forward_backward_tokens(model, example.fisheye_img, tokens, adj)
    return loss, grad


def token_training_step(
    model: ModelWeights,
    tokens: TokenSet,
    example: TrainingExample,
    cfg: LossConfig,
    opt: OptimState,
) -> tuple[TokenSet, float]:
    """Single-example Adam step on the tokens; the backbone is untouched."""
    loss, grad = token_loss_and_grad(model, tokens, example, cfg)
    updated = adam_update(tokens.tokens, grad, opt)
    return TokenSet(updated, tokens.mode), loss


@dataclass(frozen=True)
class TrainConfig:
    """JSON-backed settings shared by pretraining and token adaptation."""

    seed: int = 0
    iterations: int = 2000
    lr: float = 1e-4
    loss: str = "logl1"
    frame: str = "perspective"
    supervision: str = "pseudo"
    batch: int = 4
    token_count: int = 8
    token_mode: str = "layerwise"
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: str | None = None

    def loss_config(self) -> LossConfig:
        return LossConfig(kind=self.loss, frame=self.frame, supervision=self.supervision)

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "iterations": self.iterations,
            "lr": self.lr,
            "loss": self.loss,
            "frame": self.frame,
            "supervision": self.supervision,
            "batch": self.batch,
            "token_count": self.token_count,
            "token_mode": self.token_mode,
            "model": self.model.to_json_dict(),
            "dataset": self.dataset,
        }

    @classmethod
    def from_json_dict(cls, d: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        cfg = base if base is not None else cls()
        return replace(
            cfg,
            seed=int(d.get("seed", cfg.seed)),
            iterations=int(d.get("iterations", cfg.iterations)),
            lr=float(d.get("lr", cfg.lr)),
            loss=str(d.get("loss", cfg.loss)),
            frame=str(d.get("frame", cfg.frame)),
            supervision=str(d.get("supervision", cfg.supervision)),
            batch=int(d.get("batch", cfg.batch)),
            token_count=int(d.get("token_count", cfg.token_count)),
            token_mode=str(d.get("token_mode", cfg.token_mode)),
            model=ModelConfig.from_json_dict(d["model"]) if "model" in d else cfg.model,
            dataset=d.get("dataset", cfg.dataset),
        )


def default_pretrain_config(**overrides) -> TrainConfig:
    """Pretraining defaults: ground-truth supervision, larger step size."""
    base = TrainConfig(
        lr=1e-3, iterations=2000, supervision="ground_truth", loss="logl1"
    )
    return replace(base, **overrides)


def write_loss_log(rows: list[tuple[int, float, float | None]], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "rmse_eval"])
        for step, loss, rmse in rows:
            writer.writerow([step, repr(loss), "" if rmse is None else repr(rmse)])


def pretrain_fmde(
    dataset: SceneDataset,
    cfg: TrainConfig,
    seed: int,
    out_path: str | Path | None = None,
) -> tuple[ModelWeights, list[tuple[int, float, float | None]]]:
    """Supervised training of all backbone weights on perspective scenes.

    Deterministic for a fixed seed.  The returned weights have been
    rounded through the float32 checkpoint format so in-memory and
    on-disk models agree exactly; the held-out validation report is
    written next to the checkpoint.
    """
    model = init_model(cfg.model, seed)
    opt = OptimState(lr=cfg.lr)
    loss_fn = loss_function(cfg.loss)
    records = dataset.split("train")
    log: list[tuple[int, float, float | None]] = []
    for it in range(cfg.iterations):
        grad_sum = None
        loss_sum = 0.0
        for b in range(cfg.batch):
            rec = records[(it * cfg.batch + b) % len(records)]
            img, depth = dataset.load(rec)
            loss, grads = forward_backward_full(model, img, depth, loss_fn)
            loss_sum += loss
            if grad_sum is None:
                grad_sum = grads
            else:
                for k in grad_sum:
                    grad_sum[k] += grads[k]
        for k in grad_sum:
            grad_sum[k] /= cfg.batch
        model.params = adam_update(model.params, grad_sum, opt)
        log.append((it, loss_sum / cfg.batch, None))
    model = quantize_model(model)
    if out_path is not None:
        from .metrics import evaluate

        save_model(model, out_path)
        write_loss_log(log, str(out_path) + ".log.csv")
        report = evaluate(model, None, dataset, split="val")
        report.write_json(str(out_path) + ".val.json")
    return model, log


def train_tokens(
    model: ModelWeights,
    dataset: SceneDataset,
    cfg: TrainConfig,
    seed: int,
    out_path: str | Path | None = None,
) -> tuple[TokenSet, list[tuple[int, float, float | None]]]:
    """Adapt calibration tokens against freshly sampled distortions.

    Gradients are accumulated over ``cfg.batch`` examples per iteration in
    a fixed order, then applied in one Adam step.  Only the token tensor
    is ever written; the backbone is read-only throughout.
    """
    tokens = init_tokens(cfg.model, cfg.token_count, cfg.token_mode, seed)
    opt = OptimState(lr=cfg.lr)
    loss_cfg = cfg.loss_config()
    records = dataset.split("train")
    sampling = SamplingConfig(
        width=cfg.model.image_size, height=cfg.model.image_size
    )
    log: list[tuple[int, float, float | None]] = []
    target_cache: dict[int, DepthMap] = {}
    for it in range(cfg.iterations):
        grad_sum = np.zeros_like(tokens.tokens)
        loss_sum = 0.0
        for b in range(cfg.batch):
            k = it * cfg.batch + b
            rec = records[k % len(records)]
            img, depth = dataset.load(rec)
            cached = None
            if cfg.supervision == "pseudo":
                if rec["index"] not in target_cache:
                    target_cache[rec["index"]] = forward(model, img, None)
                cached = target_cache[rec["index"]]
            example = make_training_example(
                img,
                depth,
                dataset.pin,
                model,
                train_distortion_seed(seed, k),
                supervision=cfg.supervision,
                sampling=sampling,
                _cached_target=cached,
            )
            loss, grad = token_loss_and_grad(model, tokens, example, loss_cfg)
            grad_sum += grad
            loss_sum += loss
        grad_sum /= cfg.batch
        tokens = TokenSet(adam_update(tokens.tokens, grad_sum, opt), tokens.mode)
        log.append((it, loss_sum / cfg.batch, None))
    tokens = TokenSet(
        tokens.tokens.astype(np.float32).astype(np.float64), tokens.mode
    )
    if out_path is not None:
        save_tokens(tokens, out_path)
        write_loss_log(log, str(out_path) + ".log.csv")
    return tokens, log
