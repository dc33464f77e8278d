"""Shifted-window transformer backbone.

Token grids are tensors of shape ``(B, h, w, d)``.  Parameters live in a flat
``dict[str, Tensor]`` keyed by dotted names (``backbone.stage0.layer1.attn.q.weight``),
which is also the checkpoint naming.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import DimensionError

# Additive mask value for disallowed attention pairs; exp() of it underflows to 0.
MASK_NEG = -1e9
BN_EPS = 1e-5
LN_EPS = 1e-5


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _linear_params(params: dict, name: str, rng, n_in: int, n_out: int, std: float, bias: bool = True):
    params[f"{name}.weight"] = Tensor(trunc_normal(rng, (n_in, n_out), std), requires_grad=True)
    if bias:
        params[f"{name}.bias"] = Tensor(np.zeros(n_out), requires_grad=True)


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    y = ad.matmul(x, params[f"{name}.weight"])
    b = params.get(f"{name}.bias")
    return y if b is None else y + b


def relative_position_index(window: int) -> np.ndarray:
    """``(M*M, M*M)`` indices into the ``(2M-1)^2``-row bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def init_backbone(cfg: ModelConfig, rng: np.random.Generator) -> tuple[dict, dict]:
    """Fresh backbone parameters and BatchNorm running statistics."""
    params: dict[str, Tensor] = {}
    std = cfg.init_std
    _linear_params(params, "backbone.patch_embed", rng, cfg.patch_size * cfg.patch_size * 3, cfg.embed_dim, std)
    for s, st in enumerate(cfg.stages()):
        d, m = st["dim"], st["window"]
        hidden = int(round(d * cfg.mlp_ratio))
        for layer in range(st["layers"]):
            p = f"backbone.stage{s}.layer{layer}"
            for norm in ("norm1", "norm2"):
                params[f"{p}.{norm}.gain"] = Tensor(np.ones(d), requires_grad=True)
                params[f"{p}.{norm}.bias"] = Tensor(np.zeros(d), requires_grad=True)
            for proj in ("q", "k", "v", "proj"):
                _linear_params(params, f"{p}.attn.{proj}", rng, d, d, std)
            params[f"{p}.attn.rel_bias"] = Tensor(np.zeros(((2 * m - 1) ** 2, st["heads"])), requires_grad=True)
            _linear_params(params, f"{p}.mlp.fc1", rng, d, hidden, std)
            _linear_params(params, f"{p}.mlp.fc2", rng, hidden, d, std)
        if st["merge"]:
            _linear_params(params, f"backbone.stage{s}.merge.reduction", rng, 4 * d, 2 * d, std, bias=False)
    df = cfg.final_dim
    params["backbone.bn.gain"] = Tensor(np.ones(df), requires_grad=True)
    params["backbone.bn.bias"] = Tensor(np.zeros(df), requires_grad=True)
    buffers = {"backbone.bn.running_mean": np.zeros(df), "backbone.bn.running_var": np.ones(df)}
    return params, buffers


# -- patch embedding ------------------------------------------------------
def patch_embed(images, params: dict, patch_size: int) -> Tensor:
    """Linear embedding of non-overlapping ``p x p`` patches.

    Each patch is flattened in (row, column, channel) order before the
    projection.  Accepts ``(3, S, S)`` or ``(B, 3, S, S)``.
    """
    x = ad.as_tensor(images)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
    x = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 3, 5, 1)
    x = x.reshape(b, h // p, w // p, p * p * c)
    return linear(x, params, "backbone.patch_embed")


# -- windows --------------------------------------------------------------
@dataclass
class WindowSet:
    windows: Tensor  # (B * nW, M*M, d)
    batch: int
    height: int
    width: int
    window: int
    shift: tuple[int, int] = (0, 0)

    @property
    def num_windows(self) -> int:
        return (self.height // self.window) * (self.width // self.window)


def window_partition(grid, window: int, shift: tuple[int, int] = (0, 0)) -> WindowSet:
    """Tile a ``(B, h, w, d)`` grid into non-overlapping ``M x M`` windows (row-major)."""
    x = ad.as_tensor(grid)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    b, h, w, d = x.shape
    m = window
    if h % m or w % m:
        raise DimensionError(f"grid {h}x{w} is not divisible by window size {m}")
    x = x.reshape(b, h // m, m, w // m, m, d).transpose(0, 1, 3, 2, 4, 5)
    return WindowSet(x.reshape(b * (h // m) * (w // m), m * m, d), b, h, w, m, shift)


def window_reverse(ws: WindowSet, windows: Tensor | None = None) -> Tensor:
    """Inverse of :func:`window_partition`; ``windows`` overrides ``ws.windows``."""
    x = ws.windows if windows is None else windows
    m, b, h, w = ws.window, ws.batch, ws.height, ws.width
    d = x.shape[-1]
    x = x.reshape(b, h // m, w // m, m, m, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, d)


def cyclic_shift(grid, dy: int, dx: int) -> Tensor:
    """Toroidal roll of a ``(B, h, w, d)`` grid: row ``r`` receives former row ``r - dy``."""
    x = ad.as_tensor(grid)
    if dy == 0 and dx == 0:
        return x
    return ad.roll(x, (dy, dx), (-3, -2))


def attention_mask(extent: int, window: int, shift: int, valid: int | None = None) -> np.ndarray | None:
    """Additive ``(nW, M*M, M*M)`` mask for one (possibly shifted, padded) square grid.

    Tokens that were not neighbours before the cyclic shift may not attend
    to each other; padded positions (index >= ``valid``) are never attended to.
    Returns ``None`` when nothing needs masking.
    """
    valid = extent if valid is None else valid
    if shift == 0 and valid == extent:
        return None
    region = np.zeros((extent, extent))
    if shift:
        cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
        label = 0
        for ys in cuts:
            for xs in cuts:
                region[ys, xs] = label
                label += 1
    pad = np.zeros((extent, extent), dtype=bool)
    pad[valid:, :] = True
    pad[:, valid:] = True
    if shift:
        # region labels are already in shifted coordinates; padding is not
        pad = np.roll(pad, (-shift, -shift), (0, 1))

    def tiles(a):
        n = extent // window
        return a.reshape(n, window, n, window).transpose(0, 2, 1, 3).reshape(n * n, window * window)

    r, pd = tiles(region), tiles(pad)
    mask = np.where(r[:, :, None] != r[:, None, :], MASK_NEG, 0.0)
    mask = mask + np.where(pd[:, None, :], MASK_NEG, 0.0)
    return mask


def window_msa(
    windows,
    params: dict,
    prefix: str,
    num_heads: int,
    mask: np.ndarray | None = None,
    rel_index: np.ndarray | None = None,
    trace: list | None = None,
) -> Tensor:
    """Multi-head self-attention inside each window.

    ``softmax(Q K^T / sqrt(d_head) + bias + mask) V`` per head, heads
    concatenated, then the output projection.  ``mask`` has shape
    ``(nW, N, N)`` and repeats over the batch.  Attention matrices are
    appended to ``trace`` when it is given.
    """
    x = ad.as_tensor(windows.windows if isinstance(windows, WindowSet) else windows)
    bw, n, c = x.shape
    if c % num_heads:
        raise DimensionError(f"channel dim {c} is not divisible by {num_heads} heads")
    dh = c // num_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(bw, n, num_heads, dh).transpose(0, 2, 1, 3)

    q = heads(linear(x, params, f"{prefix}.q"))
    k = heads(linear(x, params, f"{prefix}.k"))
    v = heads(linear(x, params, f"{prefix}.v"))
    scores = ad.matmul(q, k.T) * (1.0 / np.sqrt(dh))
    table = params.get(f"{prefix}.rel_bias")
    if table is not None:
        idx = rel_index if rel_index is not None else relative_position_index(int(round(np.sqrt(n))))
        bias = table[idx.reshape(-1)].reshape(n, n, num_heads).transpose(2, 0, 1)
        scores = scores + bias
    if mask is not None:
        nw = mask.shape[0]
        scores = (scores.reshape(bw // nw, nw, num_heads, n, n) + mask[None, :, None]).reshape(bw, num_heads, n, n)
    attn = ad.softmax(scores, axis=-1)
    if trace is not None:
        trace.append(attn.data)
    out = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(bw, n, c)
    return linear(out, params, f"{prefix}.proj")


def swin_layer(
    grid,
    params: dict,
    prefix: str,
    num_heads: int,
    window: int,
    shift: int = 0,
    trace: list | None = None,
) -> Tensor:
    """``p' = MSA(LN(p)) + p`` then ``p_hat = MLP(LN(p')) + p'``.

    With ``shift > 0`` the normalised grid is rolled by ``(-shift, -shift)``
    before windowing and rolled back afterwards.  A grid that ``window``
    does not divide is zero-padded and the padding is masked out.
    """
    x = ad.as_tensor(grid)
    b, h, w, c = x.shape
    if h != w:
        raise DimensionError(f"square token grids only, got {h}x{w}")
    pad = (-h) % window
    y = ad.layer_norm(x, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"], LN_EPS)
    y = ad.pad(y, ((0, 0), (0, pad), (0, pad), (0, 0)))
    extent = h + pad
    y = cyclic_shift(y, -shift, -shift)
    ws = window_partition(y, window, (shift, shift))
    mask = attention_mask(extent, window, shift, valid=h)
    out = window_msa(ws, params, f"{prefix}.attn", num_heads, mask, relative_position_index(window), trace)
    y = cyclic_shift(window_reverse(ws, out), shift, shift)
    if pad:
        y = y[:, :h, :w, :]
    x = x + y
    z = ad.layer_norm(x, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"], LN_EPS)
    z = linear(ad.gelu(linear(z, params, f"{prefix}.mlp.fc1")), params, f"{prefix}.mlp.fc2")
    return x + z


def patch_merging(grid, params: dict, name: str) -> Tensor:
    """Concatenate each 2x2 neighbourhood (4d channels) and project to 2d.

    Channel blocks are ordered (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
    """
    x = ad.as_tensor(grid)
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch merging needs even extents, got {h}x{w}")
    x = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 4, 2, 5).reshape(b, h // 2, w // 2, 4 * c)
    return linear(x, params, name)


def batch_norm(x: Tensor, params: dict, buffers: dict, name: str, training: bool, momentum: float) -> Tensor:
    """BatchNorm over axis 0 of ``(B, d)`` features; updates running stats in training."""
    gain, bias = params[f"{name}.gain"], params[f"{name}.bias"]
    rm, rv = buffers[f"{name}.running_mean"], buffers[f"{name}.running_var"]
    if training:
        n = x.shape[0]
        if n < 2:
            raise DimensionError("BatchNorm in training mode needs at least 2 samples")
        mu = x.mean(axis=0, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=0, keepdims=True)
        rm *= 1.0 - momentum
        rm += momentum * mu.data[0]
        rv *= 1.0 - momentum
        rv += momentum * var.data[0] * n / (n - 1)
        return xc * ad.power(var + BN_EPS, -0.5) * gain + bias
    return (x - rm) * (1.0 / np.sqrt(rv + BN_EPS)) * gain + bias


def backbone_forward(
    images,
    params: dict,
    buffers: dict,
    cfg: ModelConfig,
    training: bool = False,
    trace: list | None = None,
) -> tuple[Tensor, Tensor]:
    """Images ``(B, 3, S, S)`` to ``(shared_feature (B, d), final_grid (B, h, w, d))``.

    Layers alternate regular / shifted windows within each stage, starting
    regular.  ``final_grid`` is the last token grid before pooling (the
    Grad-CAM target); the shared feature is its global average pool passed
    through BatchNorm.
    """
    x = patch_embed(images, params, cfg.patch_size)
    for s, st in enumerate(cfg.stages()):
        for layer in range(st["layers"]):
            shift = st["shift"] if layer % 2 == 1 else 0
            x = swin_layer(x, params, f"backbone.stage{s}.layer{layer}", st["heads"], st["window"], shift, trace)
        if st["merge"]:
            x = patch_merging(x, params, f"backbone.stage{s}.merge.reduction")
    pooled = x.mean(axis=(1, 2))
    feature = batch_norm(pooled, params, buffers, "backbone.bn", training, cfg.bn_momentum)
    return feature, x
