"""Small vision-transformer depth estimator with hand-written gradients.

The encoder is a stack of pre-norm attention/MLP blocks over patch
embeddings; the decoder is a per-patch linear head squashed through
softplus and bilinearly upsampled to image resolution.  Trainable
calibration tokens can be concatenated to the patch sequence in three
modes:

* ``layerwise`` - a fresh token slice is appended at every layer and the
  previous layer's token outputs are dropped at the boundary;
* ``single``    - one slice is appended before the first layer and carried
  through the whole stack;
* ``shared``    - the first slice is appended before every layer and its
  outputs dropped, identical values each time.

Token positions are always removed from the encoder output, so the
decoder and the output shape never depend on the token count.  All
computation is float64 and single-threaded numpy, hence bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, ShapeMismatchError
from .images import DepthMap, ImageBuffer

TOKEN_MODES = ("layerwise", "single", "shared")

_LN_EPS = 1e-6
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    layers: int = 4
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    decoder: str = "linear"

    def __post_init__(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise InvalidConfigError("sizes must be positive")
        if self.image_size % self.patch_size != 0:
            raise InvalidConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise InvalidConfigError("embed_dim must be divisible by heads")
        if self.layers < 1:
            raise InvalidConfigError("at least one layer required")
        if self.decoder != "linear":
            raise InvalidConfigError(f"unknown decoder kind {self.decoder!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def to_json_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "layers": self.layers,
            "embed_dim": self.embed_dim,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "decoder": self.decoder,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            image_size=int(d.get("image_size", 64)),
            patch_size=int(d.get("patch_size", 8)),
            layers=int(d.get("layers", 4)),
            embed_dim=int(d.get("embed_dim", 64)),
            heads=int(d.get("heads", 4)),
            mlp_ratio=int(d.get("mlp_ratio", 4)),
            decoder=str(d.get("decoder", "linear")),
        )


@dataclass
class ModelWeights:
    """Named parameter tensors for one configuration."""

    cfg: ModelConfig
    params: dict[str, np.ndarray]

    def n_parameters(self) -> int:
        return sum(int(p.size) for p in self.params.values())


@dataclass
class TokenSet:
    """Trainable calibration tokens, one (M, F) slice per layer.

    For single/shared modes only slice 0 is consumed; the full tensor is
    kept so optimizer state and checkpoints are shape-stable across modes.
    """

    tokens: np.ndarray
    mode: str

    def __post_init__(self) -> None:
        if self.mode not in TOKEN_MODES:
            raise InvalidConfigError(f"unknown token mode {self.mode!r}")
        if self.tokens.ndim != 3:
            raise ShapeMismatchError("tokens must be (layers, count, embed_dim)")

    @property
    def count(self) -> int:
        return self.tokens.shape[1]


@dataclass
class LayerAttention:
    """One layer's softmax rows plus derived patch-grid summaries."""

    rows: np.ndarray
    n_patches: int
    n_tokens: int

    def token_to_patch(self) -> np.ndarray:
        """Mean attention mass each patch key receives from token queries."""
        n = self.n_patches
        if self.n_tokens == 0:
            return np.zeros(n)
        return self.rows[:, n:, :n].mean(axis=(0, 1))

    def patch_to_token(self) -> np.ndarray:
        """Attention mass each patch query sends to token keys (head mean)."""
        n = self.n_patches
        if self.n_tokens == 0:
            return np.zeros(n)
        return self.rows[:, :n, n:].sum(axis=2).mean(axis=0)


@dataclass
class AttentionRecord:
    layers: list[LayerAttention]
    grid: int


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with resampling outside two standard deviations."""
    x = rng.standard_normal(shape) * std
    bad = np.abs(x) > 2.0 * std
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > 2.0 * std
    return x


def init_model(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Deterministic initialization; identical seeds give identical weights."""
    rng = np.random.default_rng(seed)
    f = cfg.embed_dim
    p: dict[str, np.ndarray] = {}
    p["patch_embed.w"] = _trunc_normal(rng, (cfg.patch_size**2 * 3, f), 0.02)
    p["patch_embed.b"] = np.zeros(f)
    p["pos_embed"] = _trunc_normal(rng, (cfg.n_patches, f), 0.02)
    for l in range(cfg.layers):
        pre = f"blocks.{l}."
        p[pre + "ln1.g"] = np.ones(f)
        p[pre + "ln1.b"] = np.zeros(f)
        p[pre + "attn.qkv.w"] = _trunc_normal(rng, (f, 3 * f), 0.02)
        p[pre + "attn.qkv.b"] = np.zeros(3 * f)
        p[pre + "attn.out.w"] = _trunc_normal(rng, (f, f), 0.02)
        p[pre + "attn.out.b"] = np.zeros(f)
        p[pre + "ln2.g"] = np.ones(f)
        p[pre + "ln2.b"] = np.zeros(f)
        p[pre + "mlp.fc1.w"] = _trunc_normal(rng, (f, cfg.hidden_dim), 0.02)
        p[pre + "mlp.fc1.b"] = np.zeros(cfg.hidden_dim)
        p[pre + "mlp.fc2.w"] = _trunc_normal(rng, (cfg.hidden_dim, f), 0.02)
        p[pre + "mlp.fc2.b"] = np.zeros(f)
    p["final_norm.g"] = np.ones(f)
    p["final_norm.b"] = np.zeros(f)
    p["head.w"] = _trunc_normal(rng, (f, 1), 0.02)
    p["head.b"] = np.zeros(1)
    return ModelWeights(cfg=cfg, params=p)


def init_tokens(cfg: ModelConfig, count: int, mode: str, seed: int) -> TokenSet:
    rng = np.random.default_rng(seed)
    tokens = _trunc_normal(rng, (cfg.layers, count, cfg.embed_dim), 0.02)
    return TokenSet(tokens=tokens, mode=mode)


def zero_tokens(cfg: ModelConfig, count: int, mode: str) -> TokenSet:
    return TokenSet(np.zeros((cfg.layers, count, cfg.embed_dim)), mode)


def _patchify(cfg: ModelConfig, img: np.ndarray) -> np.ndarray:
    g, ps = cfg.grid, cfg.patch_size
    x = img.reshape(g, ps, g, ps, 3)
    return x.transpose(0, 2, 1, 3, 4).reshape(cfg.n_patches, ps * ps * 3)


def _upsample_matrix(grid: int, size: int) -> np.ndarray:
    """Row-interpolation matrix U so a patch grid p upsamples as U @ p @ U.T."""
    scale = size / grid
    u = np.zeros((size, grid))
    src = (np.arange(size) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, grid - 1.0)
    g0 = np.floor(src).astype(int)
    w = src - g0
    g1 = np.minimum(g0 + 1, grid - 1)
    u[np.arange(size), g0] += 1.0 - w
    u[np.arange(size), g1] += w
    return u


_UPSAMPLE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _upsampler(cfg: ModelConfig) -> np.ndarray:
    key = (cfg.grid, cfg.image_size)
    if key not in _UPSAMPLE_CACHE:
        _UPSAMPLE_CACHE[key] = _upsample_matrix(*key)
    return _UPSAMPLE_CACHE[key]


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy: np.ndarray, g: np.ndarray, cache, grads, gname, bname):
    xhat, inv = cache
    if grads is not None:
        grads[gname] += (dy * xhat).sum(axis=0)
        grads[bname] += dy.sum(axis=0)
    dxhat = dy * g
    return inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def _gelu(x: np.ndarray):
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    s, f = x.shape
    return x.reshape(s, heads, f // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, s, d = x.shape
    return x.transpose(1, 0, 2).reshape(s, h * d)


def _check_image(cfg: ModelConfig, img: ImageBuffer) -> np.ndarray:
    if (img.height, img.width, img.channels) != (cfg.image_size, cfg.image_size, 3):
        raise ShapeMismatchError(
            f"expected {cfg.image_size}x{cfg.image_size}x3 image, got "
            f"{img.height}x{img.width}x{img.channels}"
        )
    return np.asarray(img.data, dtype=np.float64)


def _check_tokens(cfg: ModelConfig, tokens: TokenSet) -> None:
    l, _, f = tokens.tokens.shape
    if l != cfg.layers or f != cfg.embed_dim:
        raise ShapeMismatchError(
            f"token tensor {tokens.tokens.shape} does not match "
            f"layers={cfg.layers}, embed_dim={cfg.embed_dim}"
        )


def _layer_input(seq: np.ndarray, layer: int, tokens: TokenSet | None, n: int):
    """Sequence entering a block and whether its tail rows are fresh tokens."""
    if tokens is None:
        return seq, False
    if tokens.mode == "layerwise":
        return np.concatenate([seq[:n], tokens.tokens[layer]], axis=0), True
    if tokens.mode == "shared":
        return np.concatenate([seq[:n], tokens.tokens[0]], axis=0), True
    # single: concatenated once, then carried
    if layer == 0:
        return np.concatenate([seq, tokens.tokens[0]], axis=0), True
    return seq, False


def _forward_pass(
    model: ModelWeights,
    img: ImageBuffer,
    tokens: TokenSet | None,
    *,
    need_cache: bool,
    record_attention: bool,
    attn_key_mask: np.ndarray | None = None,
):
    cfg = model.cfg
    p = model.params
    data = _check_image(cfg, img)
    if tokens is not None:
        _check_tokens(cfg, tokens)
    n = cfg.n_patches

    patches = _patchify(cfg, data)
    z0 = patches @ p["patch_embed.w"] + p["patch_embed.b"] + p["pos_embed"]

    caches = [] if need_cache else None
    attn_layers = [] if record_attention else None
    scale = 1.0 / np.sqrt(cfg.head_dim)
    seq = z0
    for l in range(cfg.layers):
        pre = f"blocks.{l}."
        seq_in, _ = _layer_input(seq, l, tokens, n)
        s = seq_in.shape[0]
        h1, ln1_cache = _layernorm(seq_in, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = h1 @ p[pre + "attn.qkv.w"] + p[pre + "attn.qkv.b"]
        f = cfg.embed_dim
        q = _split_heads(qkv[:, :f], cfg.heads)
        k = _split_heads(qkv[:, f : 2 * f], cfg.heads)
        v = _split_heads(qkv[:, 2 * f :], cfg.heads)
        logits = (q @ k.transpose(0, 2, 1)) * scale
        if attn_key_mask is not None:
            if attn_key_mask.shape[0] != s:
                raise ShapeMismatchError("attention key mask length mismatch")
            logits = np.where(attn_key_mask[None, None, :], logits, -np.inf)
        logits -= logits.max(axis=-1, keepdims=True)
        expl = np.exp(logits)
        attn = expl / expl.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(attn @ v)
        attn_out = ctx @ p[pre + "attn.out.w"] + p[pre + "attn.out.b"]
        x1 = seq_in + attn_out
        h2, ln2_cache = _layernorm(x1, p[pre + "ln2.g"], p[pre + "ln2.b"])
        pre_act = h2 @ p[pre + "mlp.fc1.w"] + p[pre + "mlp.fc1.b"]
        act, tanh_cache = _gelu(pre_act)
        mlp_out = act @ p[pre + "mlp.fc2.w"] + p[pre + "mlp.fc2.b"]
        seq_out = x1 + mlp_out
        if record_attention:
            attn_layers.append(
                LayerAttention(rows=attn, n_patches=n, n_tokens=s - n)
            )
        if need_cache:
            caches.append(
                {
                    "seq_in": seq_in,
                    "ln1": ln1_cache,
                    "h1": h1,
                    "q": q,
                    "k": k,
                    "v": v,
                    "attn": attn,
                    "ctx": ctx,
                    "x1": x1,
                    "ln2": ln2_cache,
                    "h2": h2,
                    "pre_act": pre_act,
                    "act": act,
                    "tanh": tanh_cache,
                }
            )
        seq = seq_out

    z_enc = seq[:n]
    z_final, final_cache = _layernorm(z_enc, p["final_norm.g"], p["final_norm.b"])
    y = z_final @ p["head.w"] + p["head.b"]
    d_patch = _softplus(y).reshape(cfg.grid, cfg.grid)
    u = _upsampler(cfg)
    depth = u @ d_patch @ u.T

    state = {
        "patches": patches,
        "caches": caches,
        "z_enc": z_enc,
        "final_cache": final_cache,
        "z_final": z_final,
        "y": y,
        "attn_layers": attn_layers,
    }
    return depth, state


def forward(
    model: ModelWeights,
    img: ImageBuffer,
    tokens: TokenSet | None = None,
    record_attention: bool = False,
    attn_key_mask: np.ndarray | None = None,
):
    """Predict a dense strictly-positive depth map.

    Returns the DepthMap alone, or (DepthMap, AttentionRecord) when
    record_attention is set.  The no-token path is the unmodified
    perspective model.
    """
    depth, state = _forward_pass(
        model,
        img,
        tokens,
        need_cache=False,
        record_attention=record_attention,
        attn_key_mask=attn_key_mask,
    )
    result = DepthMap.full(depth)
    if record_attention:
        return result, AttentionRecord(layers=state["attn_layers"], grid=model.cfg.grid)
    return result


def export_embeddings(
    model: ModelWeights,
    img: ImageBuffer,
    tokens: TokenSet | None = None,
    csv_path: str | Path | None = None,
) -> np.ndarray:
    """Final-layer patch embeddings (token rows excluded), one CSV row per patch."""
    _, state = _forward_pass(
        model, img, tokens, need_cache=False, record_attention=False
    )
    emb = state["z_final"]
    if csv_path is not None:
        with open(csv_path, "w") as f:
            for row in emb:
                f.write(",".join(repr(float(v)) for v in row) + "\n")
    return emb


def _attention_backward(d_attn_out, cache, p, pre, cfg, grads):
    scale = 1.0 / np.sqrt(cfg.head_dim)
    if grads is not None:
        grads[pre + "attn.out.w"] += cache["ctx"].T @ d_attn_out
        grads[pre + "attn.out.b"] += d_attn_out.sum(axis=0)
    d_ctx = _split_heads(d_attn_out @ p[pre + "attn.out.w"].T, cfg.heads)
    attn, v = cache["attn"], cache["v"]
    d_attn = d_ctx @ v.transpose(0, 2, 1)
    d_v = attn.transpose(0, 2, 1) @ d_ctx
    # softmax rows: dL/dlogits = A * (dA - sum_k dA*A)
    d_logits = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
    d_q = (d_logits @ cache["k"]) * scale
    d_k = (d_logits.transpose(0, 2, 1) @ cache["q"]) * scale
    d_qkv = np.concatenate(
        [_merge_heads(d_q), _merge_heads(d_k), _merge_heads(d_v)], axis=1
    )
    if grads is not None:
        grads[pre + "attn.qkv.w"] += cache["h1"].T @ d_qkv
        grads[pre + "attn.qkv.b"] += d_qkv.sum(axis=0)
    return d_qkv @ p[pre + "attn.qkv.w"].T


def _block_backward(d_out, cache, p, pre, cfg, grads):
    d_x1 = d_out.copy()
    # MLP branch
    d_mlp = d_out
    if grads is not None:
        grads[pre + "mlp.fc2.w"] += cache["act"].T @ d_mlp
        grads[pre + "mlp.fc2.b"] += d_mlp.sum(axis=0)
    d_act = d_mlp @ p[pre + "mlp.fc2.w"].T
    d_pre = d_act * _gelu_grad(cache["pre_act"], cache["tanh"])
    if grads is not None:
        grads[pre + "mlp.fc1.w"] += cache["h2"].T @ d_pre
        grads[pre + "mlp.fc1.b"] += d_pre.sum(axis=0)
    d_h2 = d_pre @ p[pre + "mlp.fc1.w"].T
    d_x1 += _layernorm_backward(
        d_h2, p[pre + "ln2.g"], cache["ln2"], grads, pre + "ln2.g", pre + "ln2.b"
    )
    # attention branch
    d_seq_in = d_x1.copy()
    d_h1 = _attention_backward(d_x1, cache, p, pre, cfg, grads)
    d_seq_in += _layernorm_backward(
        d_h1, p[pre + "ln1.g"], cache["ln1"], grads, pre + "ln1.g", pre + "ln1.b"
    )
    return d_seq_in


def _backward_pass(
    model: ModelWeights,
    tokens: TokenSet | None,
    loss_adjoint: np.ndarray,
    state: dict,
    *,
    want_weights: bool,
):
    cfg = model.cfg
    p = model.params
    n = cfg.n_patches
    grads = (
        {name: np.zeros_like(arr) for name, arr in p.items()} if want_weights else None
    )
    d_tokens = np.zeros_like(tokens.tokens) if tokens is not None else None

    u = _upsampler(cfg)
    d_patchgrid = u.T @ loss_adjoint @ u
    d_y = (d_patchgrid.reshape(-1, 1)) * _sigmoid(state["y"])
    if want_weights:
        grads["head.w"] += state["z_final"].T @ d_y
        grads["head.b"] += d_y.sum(axis=0)
    d_z_final = d_y @ p["head.w"].T
    d_z_enc = _layernorm_backward(
        d_z_final,
        p["final_norm.g"],
        state["final_cache"],
        grads,
        "final_norm.g",
        "final_norm.b",
    )

    caches = state["caches"]
    last = caches[-1]["seq_in"].shape[0] if caches else n
    d_seq = np.zeros((last, cfg.embed_dim))
    d_seq[:n] = d_z_enc
    for l in reversed(range(cfg.layers)):
        pre = f"blocks.{l}."
        d_in = _block_backward(d_seq, caches[l], p, pre, cfg, grads)
        if tokens is None:
            d_seq = d_in
            continue
        mode = tokens.mode
        if mode == "layerwise":
            d_tokens[l] += d_in[n:]
            prev_rows = caches[l - 1]["seq_in"].shape[0] if l > 0 else n
            d_seq = np.zeros((prev_rows, cfg.embed_dim))
            d_seq[:n] = d_in[:n]
        elif mode == "shared":
            d_tokens[0] += d_in[n:]
            prev_rows = caches[l - 1]["seq_in"].shape[0] if l > 0 else n
            d_seq = np.zeros((prev_rows, cfg.embed_dim))
            d_seq[:n] = d_in[:n]
        else:  # single
            if l == 0:
                d_tokens[0] += d_in[n:]
                d_seq = d_in[:n]
            else:
                d_seq = d_in

    # d_seq is now the adjoint of z0 = patches @ W + b + pos
    if want_weights:
        grads["pos_embed"] += d_seq
        grads["patch_embed.w"] += state["patches"].T @ d_seq
        grads["patch_embed.b"] += d_seq.sum(axis=0)
    return d_tokens, grads


def _check_adjoint(cfg: ModelConfig, loss_adjoint: np.ndarray) -> np.ndarray:
    adj = np.asarray(loss_adjoint, dtype=np.float64)
    if adj.shape != (cfg.image_size, cfg.image_size):
        raise ShapeMismatchError(
            f"loss adjoint must be {cfg.image_size}x{cfg.image_size}"
        )
    return adj


def forward_backward_tokens(
    model: ModelWeights,
    img: ImageBuffer,
    tokens: TokenSet,
    loss_adjoint: np.ndarray,
) -> np.ndarray:
    """Exact gradient of the scalar loss w.r.t. every token entry.

    ``loss_adjoint`` is dLoss/dDepth per output pixel; backbone weights are
    treated as constants.  Token slices a mode never consumes come back
    zero.
    """
    adj = _check_adjoint(model.cfg, loss_adjoint)
    _, state = _forward_pass(
        model, img, tokens, need_cache=True, record_attention=False
    )
    d_tokens, _ = _backward_pass(model, tokens, adj, state, want_weights=False)
    return d_tokens


def forward_backward_full(
    model: ModelWeights,
    img: ImageBuffer,
    target: DepthMap,
    objective,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients w.r.t. all model weights (no tokens).

    ``objective`` maps (prediction, target) to (loss, per-pixel adjoint of
    the loss w.r.t. the prediction).
    """
    pred, state = _forward_pass(
        model, img, None, need_cache=True, record_attention=False
    )
    loss, adjoint = objective(DepthMap.full(pred), target)
    _, grads = _backward_pass(
        model, None, _check_adjoint(model.cfg, adjoint), state, want_weights=True
    )
    return loss, grads
