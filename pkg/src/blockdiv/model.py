"""Small flow-matching transformer with adaLN-zero conditioning.

Parameters live in a flat ``dict[str, Tensor]`` so that checkpoints,
optimizer moments and gradient maps can all share the same names.
With ``use_long_residual`` the input of each block in the second half is
``Linear(LayerNorm(f_skip ++ f_prev))`` where ``f_skip`` is the output of
the mirrored block in the first half (block ``i`` feeds block ``L-1-i``).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Rng, Tensor

Params = dict[str, Tensor]

TIME_SCALE = 1000.0
MAX_PERIOD = 10000.0
LN_EPS = 1e-6


# ---------------------------------------------------------------- patching


def patchify(x, p: int):
    """``[N,C,H,W] -> [N,(H/p)(W/p),p*p*C]`` with row-major patch order."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    if isinstance(x, Tensor):
        x = T.reshape(x, (n, c, gh, p, gw, p))
        x = T.transpose(x, (0, 2, 4, 3, 5, 1))
        return T.reshape(x, (n, gh * gw, p * p * c))
    x = np.asarray(x).reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(n, gh * gw, p * p * c)


def unpatchify(tokens, p: int, channels: int, size: int):
    """Inverse of :func:`patchify` for square images of side ``size``."""
    n = tokens.shape[0]
    g = size // p
    if tokens.shape[1] != g * g or tokens.shape[2] != p * p * channels:
        raise ValueError(f"token shape {list(tokens.shape)} does not match a "
                         f"{channels}x{size}x{size} image with patch {p}")
    if isinstance(tokens, Tensor):
        x = T.reshape(tokens, (n, g, g, p, p, channels))
        x = T.transpose(x, (0, 5, 1, 3, 2, 4))
        return T.reshape(x, (n, channels, size, size))
    x = np.asarray(tokens).reshape(n, g, g, p, p, channels).transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(n, channels, size, size)


def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position table of shape ``[grid*grid, dim]``."""
    if dim % 4:
        raise ValueError("position embedding width must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / MAX_PERIOD ** (np.arange(quarter) / quarter)
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    parts = []
    for coord in (rows.reshape(-1), cols.reshape(-1)):
        ang = coord[:, None] * omega[None]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


# ------------------------------------------------------------------ params


def _xavier(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -limit, limit)


def init_params(cfg: ModelConfig, rng: Rng) -> Params:
    """Fresh parameters; adaLN modulation and the output layer start at zero."""
    D = cfg.hidden_dim
    hidden = int(D * cfg.mlp_ratio)
    raw: dict[str, np.ndarray] = {
        "embed.w": _xavier(rng, cfg.token_dim, D),
        "embed.b": np.zeros(D),
        "t_embed.fc1.w": 0.02 * rng.normal((cfg.time_freq_dim, D)),
        "t_embed.fc1.b": np.zeros(D),
        "t_embed.fc2.w": 0.02 * rng.normal((D, D)),
        "t_embed.fc2.b": np.zeros(D),
        "y_embed.table": 0.02 * rng.normal((cfg.num_classes + 1, D)),
    }
    for l in range(cfg.num_blocks):
        pre = f"blocks.{l}."
        raw[pre + "ada.w"] = np.zeros((D, 6 * D))
        raw[pre + "ada.b"] = np.zeros(6 * D)
        raw[pre + "qkv.w"] = _xavier(rng, D, 3 * D)
        raw[pre + "qkv.b"] = np.zeros(3 * D)
        raw[pre + "proj.w"] = _xavier(rng, D, D)
        raw[pre + "proj.b"] = np.zeros(D)
        raw[pre + "fc1.w"] = _xavier(rng, D, hidden)
        raw[pre + "fc1.b"] = np.zeros(hidden)
        raw[pre + "fc2.w"] = _xavier(rng, hidden, D)
        raw[pre + "fc2.b"] = np.zeros(D)
    for target in sorted(cfg.skip_pairs):
        pre = f"fuse.{target}."
        bound = 1.0 / math.sqrt(2 * D)
        raw[pre + "norm.g"] = np.ones(2 * D)
        raw[pre + "norm.b"] = np.zeros(2 * D)
        raw[pre + "linear.w"] = rng.uniform((2 * D, D), -bound, bound)
        raw[pre + "linear.b"] = np.zeros(D)
    raw["final.ada.w"] = np.zeros((D, 2 * D))
    raw["final.ada.b"] = np.zeros(2 * D)
    raw["final.out.w"] = np.zeros((D, cfg.token_dim))
    raw["final.out.b"] = np.zeros(cfg.token_dim)
    return {name: T.parameter(value, name) for name, value in raw.items()}


def perturb_params(params: Params, rng: Rng, std: float = 0.1) -> Params:
    """Copy of ``params`` with Gaussian noise on every entry (breaks zero init)."""
    return {k: T.parameter(v.data + std * rng.normal(v.shape), k) for k, v in params.items()}


# ------------------------------------------------------------------ layers


def timestep_frequencies(t, dim: int) -> np.ndarray:
    """Sinusoidal time features ``[cos(t*f_k), sin(t*f_k)]``, shape ``[N, dim]``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if (t < 0).any() or (t > 1).any():
        raise ValueError("t must lie in [0, 1]")
    half = dim // 2
    freqs = np.exp(-math.log(MAX_PERIOD) * np.arange(half) / half)
    args = TIME_SCALE * t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def time_embed(params: Params, t, dim: int) -> Tensor:
    feats = Tensor(timestep_frequencies(t, dim))
    h = T.silu(T.linear(feats, params["t_embed.fc1.w"], params["t_embed.fc1.b"]))
    return T.linear(h, params["t_embed.fc2.w"], params["t_embed.fc2.b"])


def long_residual_fuse(f_skip: Tensor, f_prev: Tensor, params: Params, target: int) -> Tensor:
    if f_skip.shape != f_prev.shape:
        raise T.ShapeError(f"fuse: {list(f_skip.shape)} vs {list(f_prev.shape)}")
    pre = f"fuse.{target}."
    if pre + "linear.w" not in params:
        raise KeyError(f"no long residual junction for block {target}")
    h = T.concat([f_skip, f_prev], axis=-1)
    h = T.layer_norm(h, params[pre + "norm.g"], params[pre + "norm.b"], LN_EPS)
    return T.linear(h, params[pre + "linear.w"], params[pre + "linear.b"])


def _rows(v: Tensor, tokens: int) -> Tensor:
    n, d = v.shape
    return T.broadcast_to(T.reshape(v, (n, 1, d)), (n, tokens, d))


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (_rows(scale, x.shape[1]) + 1.0) + _rows(shift, x.shape[1])


def attention(x: Tensor, params: Params, pre: str, heads: int) -> Tensor:
    n, tok, d = x.shape
    dh = d // heads
    qkv = T.linear(x, params[pre + "qkv.w"], params[pre + "qkv.b"])
    qkv = T.transpose(T.reshape(qkv, (n, tok, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax(T.scale(q @ T.swap_last(k), 1.0 / math.sqrt(dh)))
    out = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (n, tok, d))
    return T.linear(out, params[pre + "proj.w"], params[pre + "proj.b"])


def block(x: Tensor, cond_act: Tensor, params: Params, l: int, heads: int) -> Tensor:
    pre = f"blocks.{l}."
    d = x.shape[-1]
    mod = T.linear(cond_act, params[pre + "ada.w"], params[pre + "ada.b"])
    shift1, scale1, gate1, shift2, scale2, gate2 = (mod[:, i * d:(i + 1) * d] for i in range(6))
    h = _modulate(T.layer_norm(x, eps=LN_EPS), shift1, scale1)
    x = x + _rows(gate1, x.shape[1]) * attention(h, params, pre, heads)
    h = _modulate(T.layer_norm(x, eps=LN_EPS), shift2, scale2)
    h = T.gelu(T.linear(h, params[pre + "fc1.w"], params[pre + "fc1.b"]))
    h = T.linear(h, params[pre + "fc2.w"], params[pre + "fc2.b"])
    return x + _rows(gate2, x.shape[1]) * h


def final_layer(x: Tensor, cond_act: Tensor, params: Params) -> Tensor:
    d = x.shape[-1]
    mod = T.linear(cond_act, params["final.ada.w"], params["final.ada.b"])
    h = _modulate(T.layer_norm(x, eps=LN_EPS), mod[:, :d], mod[:, d:])
    return T.linear(h, params["final.out.w"], params["final.out.b"])


# ----------------------------------------------------------------- forward


def to_tokens(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if cfg.data_mode == "points":
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise T.ShapeError(f"expected points of shape [N,{cfg.input_dim}], got {list(x.shape)}")
        return x[:, None, :]
    expect = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise T.ShapeError(f"expected images [N,{','.join(map(str, expect))}], got {list(x.shape)}")
    return patchify(x, cfg.patch_size)


def from_tokens(tokens: Tensor, cfg: ModelConfig) -> Tensor:
    if cfg.data_mode == "points":
        return T.reshape(tokens, (tokens.shape[0], cfg.input_dim))
    return unpatchify(tokens, cfg.patch_size, cfg.in_channels, cfg.image_size)


def forward(params: Params, cfg: ModelConfig, x, t, y) -> tuple[Tensor, list[Tensor]]:
    """Velocity prediction in data shape plus the output of every block.

    ``t`` holds one time per sample; ``y`` holds class ids where
    ``cfg.num_classes`` is the null (unconditional) class.
    """
    tokens = to_tokens(x, cfg)
    n = tokens.shape[0]
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise T.ShapeError("one class id per sample is required")
    if (y < 0).any() or (y > cfg.num_classes).any():
        raise ValueError(f"class ids must lie in [0, {cfg.num_classes}]")
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))

    h = T.linear(Tensor(tokens), params["embed.w"], params["embed.b"])
    if cfg.data_mode == "grid":
        pos = sincos_pos_embed(cfg.hidden_dim, cfg.image_size // cfg.patch_size)
        h = h + Tensor(np.broadcast_to(pos, h.shape))
    cond = time_embed(params, t, cfg.time_freq_dim) + T.take_rows(params["y_embed.table"], y)
    cond_act = T.silu(cond)

    skips = cfg.skip_pairs
    features: list[Tensor] = []
    for l in range(cfg.num_blocks):
        if l in skips:
            h = long_residual_fuse(features[skips[l]], h, params, l)
        h = block(h, cond_act, params, l, cfg.num_heads)
        features.append(h)
    out = final_layer(h, cond_act, params)
    return from_tokens(out, cfg), features


def velocity_fn(params: Params, cfg: ModelConfig, y):
    """Gradient-free ``v(x, t)`` closure over fixed params and labels."""
    frozen = {k: Tensor(v.data) for k, v in params.items()}

    def v(x: np.ndarray, t: float) -> np.ndarray:
        out, _ = forward(frozen, cfg, x, t, y)
        return out.data

    return v
