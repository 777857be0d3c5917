"""Masked-reconstruction attention model over (metric, segment) token grids.

Each window is cut into five equal segments per metric; every (metric,
segment) pair becomes one token (segment content projected to d_model plus
learned metric and segment embeddings). A stack of multi-head self-attention
blocks over all 5*N tokens captures cross-metric structure within the target
segment and each metric's own history at the same time; a linear head maps
target-position tokens back to segment space.

Token order is canonicalized by content before the stack and restored after,
so reconstructions are bit-identical under any joint permutation of metrics,
metric embeddings, and the mask plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SEGMENTS, WindowSample
from .errors import ContractError, ShapeError

TARGET_SEG = SEGMENTS - 1  # the last segment is reconstructed


@dataclass(frozen=True)
class ModelConfig:
    n_metrics: int
    t_e: int = 32
    d_model: int = 64
    n_heads: int = 8
    n_layers: int = 4
    d_ff: int = 128
    mask_ratio: float = 0.2
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_metrics < 2:
            raise ContractError("n_metrics must be >= 2")
        if self.t_e < 1:
            raise ContractError("t_e must be positive")
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 < self.mask_ratio < 1.0:
            raise ContractError("mask_ratio must be in (0, 1)")
        if self.n_layers < 2:
            raise ContractError("n_layers must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class MaskPlan:
    """Indices of the metrics whose target segment is hidden this step."""

    indices: tuple[int, ...]


@dataclass
class TokenGrid:
    """The 5*N embedded tokens of one window; token (i, s) at [i, s, :]."""

    tokens: np.ndarray  # (N, 5, d_model)
    masked: tuple[int, ...]


def mask_count(n_metrics: int, mask_ratio: float) -> int:
    """round(mask_ratio * N), half away from zero, clamped to [1, N-1]."""
    k = int(math.floor(mask_ratio * n_metrics + 0.5))
    return max(1, min(k, n_metrics - 1))


def build_mask_plan(n_metrics: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    if n_metrics < 2:
        raise ContractError("build_mask_plan: n_metrics must be >= 2")
    k = mask_count(n_metrics, mask_ratio)
    picks = rng.choice(n_metrics, size=k, replace=False)
    return MaskPlan(indices=tuple(int(i) for i in sorted(picks)))


class ReconstructionModel:
    """Parameters plus the fixed random mask series, seeded and deterministic."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], mask_series: np.ndarray):
        self.config = config
        self.params = params
        self.mask_series = np.asarray(mask_series, dtype=np.float64)

    @classmethod
    def initialize(cls, config: ModelConfig) -> "ReconstructionModel":
        rng = np.random.default_rng(config.seed)
        mask_series = rng.standard_normal(config.t_e)
        d, ff, te = config.d_model, config.d_ff, config.t_e

        def xavier(fan_in: int, fan_out: int) -> np.ndarray:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        p: dict[str, np.ndarray] = {}
        p["input_proj.w"] = xavier(te, d)
        p["input_proj.b"] = np.zeros(d)
        # 0.1 embedding scale: tokens must be distinguishable by position at
        # init or attention stalls on the predict-the-mean plateau
        p["metric_embed"] = rng.normal(0.0, 0.1, size=(config.n_metrics, d))
        p["segment_embed"] = rng.normal(0.0, 0.1, size=(SEGMENTS, d))
        for i in range(config.n_layers):
            pre = f"layers.{i}."
            p[pre + "attn.wq"] = xavier(d, d)
            p[pre + "attn.wk"] = xavier(d, d)
            p[pre + "attn.wv"] = xavier(d, d)
            p[pre + "attn.wo"] = xavier(d, d)
            p[pre + "attn.bo"] = np.zeros(d)
            p[pre + "ln1.g"] = np.ones(d)
            p[pre + "ln1.b"] = np.zeros(d)
            p[pre + "ffn.w1"] = xavier(d, ff)
            p[pre + "ffn.b1"] = np.zeros(ff)
            p[pre + "ffn.w2"] = xavier(ff, d)
            p[pre + "ffn.b2"] = np.zeros(d)
            p[pre + "ln2.g"] = np.ones(d)
            p[pre + "ln2.b"] = np.zeros(d)
        p["head.w"] = xavier(d, te)
        p["head.b"] = np.zeros(te)
        params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
        return cls(config, params, mask_series)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def frozen_params(self) -> dict[str, Tensor]:
        """Non-recording views of the weights, for inference."""
        return {k: Tensor(t.data) for k, t in self.params.items()}


# ---------------------------------------------------------------------------
# forward pipeline
# ---------------------------------------------------------------------------


def _canonical_orders(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-window content sort of the token rows; returns (perm, inverse).

    Sorting before the stack and unsorting after makes every cross-token
    reduction order a function of token content only, which is what makes
    metric-permutation equivariance hold at the bit level.
    """
    B, T, _ = tokens.shape
    perm = np.empty((B, T), dtype=np.intp)
    for b in range(B):
        order = np.argsort(tokens[b, :, 0], kind="stable")
        lead = tokens[b, order, 0]
        if np.any(lead[1:] == lead[:-1]):
            order = np.lexsort(tokens[b].T[::-1])
        perm[b] = order
    inv = np.empty_like(perm)
    rows = np.arange(tokens.shape[1])
    for b in range(B):
        inv[b, perm[b]] = rows
    return perm, inv


def _encode(params: dict[str, Tensor], content: np.ndarray, config: ModelConfig) -> Tensor:
    """Project masked window content into embedded tokens, shape (B, N, 5, d)."""
    B, N = content.shape[0], content.shape[1]
    flat = Tensor(content.reshape(B * N * SEGMENTS, config.t_e))
    h = ad.add(ad.matmul(flat, params["input_proj.w"]), params["input_proj.b"])
    h = ad.reshape(h, (B, N, SEGMENTS, config.d_model))
    h = ad.add(h, ad.reshape(params["metric_embed"], (1, N, 1, config.d_model)))
    h = ad.add(h, ad.reshape(params["segment_embed"], (1, 1, SEGMENTS, config.d_model)))
    return h


def _attention_block(
    params: dict[str, Tensor],
    prefix: str,
    x: Tensor,
    batch: int,
    tokens: int,
    config: ModelConfig,
    train_rng: np.random.Generator | None,
) -> Tensor:
    """One fused block: multi-head self-attention then feed-forward, each with
    residual + layer normalization. ``x`` is (batch*tokens, d_model)."""
    d, heads = config.d_model, config.n_heads
    dh = d // heads

    # one fused projection, then split into per-head Q/K/V stacks
    wqkv = ad.concat(
        [params[prefix + "attn.wq"], params[prefix + "attn.wk"], params[prefix + "attn.wv"]],
        axis=1,
    )
    qkv = ad.permute(ad.reshape(ad.matmul(x, wqkv), (batch, tokens, 3 * heads, dh)),
                     (0, 2, 1, 3))
    q = ad.index_select(qkv, (slice(None), slice(0, heads)))
    k = ad.index_select(qkv, (slice(None), slice(heads, 2 * heads)))
    v = ad.index_select(qkv, (slice(None), slice(2 * heads, 3 * heads)))
    scores = ad.mul(ad.matmul(q, ad.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = ad.matmul(ad.softmax_last(scores), v)
    ctx = ad.reshape(ad.permute(ctx, (0, 2, 1, 3)), (batch * tokens, d))
    attn = ad.add(ad.matmul(ctx, params[prefix + "attn.wo"]), params[prefix + "attn.bo"])
    if train_rng is not None and config.dropout > 0.0:
        attn = ad.apply_dropout(attn, config.dropout, train_rng)
    x = ad.layer_norm(ad.add(x, attn), params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    hidden = ad.relu(ad.add(ad.matmul(x, params[prefix + "ffn.w1"]), params[prefix + "ffn.b1"]))
    if train_rng is not None and config.dropout > 0.0:
        hidden = ad.apply_dropout(hidden, config.dropout, train_rng)
    ff = ad.add(ad.matmul(hidden, params[prefix + "ffn.w2"]), params[prefix + "ffn.b2"])
    return ad.layer_norm(ad.add(x, ff), params[prefix + "ln2.g"], params[prefix + "ln2.b"])


def _apply_stack(
    params: dict[str, Tensor],
    tokens: Tensor,
    config: ModelConfig,
    train_rng: np.random.Generator | None,
) -> Tensor:
    """Run the layer stack over (B, N, 5, d) tokens; returns the same shape."""
    B, N = tokens.shape[0], tokens.shape[1]
    T = N * SEGMENTS
    grid = ad.reshape(tokens, (B, T, config.d_model))
    perm, inv = _canonical_orders(grid.data)
    offsets = (np.arange(B, dtype=np.intp) * T)[:, None]
    flat = ad.reshape(grid, (B * T, config.d_model))
    x = ad.index_select(flat, (offsets + perm).ravel())
    for i in range(config.n_layers):
        x = _attention_block(params, f"layers.{i}.", x, B, T, config, train_rng)
    x = ad.index_select(x, (offsets + inv).ravel())
    return ad.reshape(x, (B, N, SEGMENTS, config.d_model))


def _decode(params: dict[str, Tensor], encoded: Tensor, config: ModelConfig) -> Tensor:
    """Map target-position tokens to reconstructed segments, (B, N, t_e)."""
    B, N = encoded.shape[0], encoded.shape[1]
    target = ad.index_select(encoded, (slice(None), slice(None), TARGET_SEG, slice(None)))
    flat = ad.reshape(target, (B * N, config.d_model))
    recon = ad.add(ad.matmul(flat, params["head.w"]), params["head.b"])
    return ad.reshape(recon, (B, N, config.t_e))


def masked_content(windows: np.ndarray, plan: Sequence[int], mask_series: np.ndarray) -> np.ndarray:
    """Replace the target segment of planned metrics with the fixed mask series."""
    content = windows.copy()
    if len(plan):
        content[:, list(plan), TARGET_SEG, :] = mask_series
    return content


def forward_batch(
    model: ReconstructionModel,
    windows: np.ndarray,
    plan: Sequence[int],
    train_rng: np.random.Generator | None = None,
    params: dict[str, Tensor] | None = None,
) -> Tensor:
    """Tokenize, mask, run the stack, decode. ``windows`` is (B, N, 5, t_e)."""
    cfg = model.config
    if windows.ndim != 4 or windows.shape[1:] != (cfg.n_metrics, SEGMENTS, cfg.t_e):
        raise ShapeError(
            f"forward_batch: expected (B, {cfg.n_metrics}, {SEGMENTS}, {cfg.t_e}), "
            f"got {windows.shape}"
        )
    if params is None:
        params = model.frozen_params()
    content = masked_content(windows, plan, model.mask_series)
    tokens = _encode(params, content, cfg)
    encoded = _apply_stack(params, tokens, cfg, train_rng)
    return _decode(params, encoded, cfg)


# ---------------------------------------------------------------------------
# public single-window operations
# ---------------------------------------------------------------------------


def tokenize(window: WindowSample, plan: MaskPlan | Sequence[int], model: ReconstructionModel) -> TokenGrid:
    """Embed one window into its 5*N token grid, applying the mask plan."""
    cfg = model.config
    indices = plan.indices if isinstance(plan, MaskPlan) else tuple(plan)
    if window.segments.shape != (SEGMENTS, cfg.n_metrics, cfg.t_e):
        raise ShapeError(
            f"tokenize: window segments {window.segments.shape} do not match "
            f"({SEGMENTS}, {cfg.n_metrics}, {cfg.t_e})"
        )
    windows = window.segments.transpose(1, 0, 2)[None]  # (1, N, 5, t_e)
    content = masked_content(windows, indices, model.mask_series)
    tokens = _encode(model.frozen_params(), content, cfg)
    return TokenGrid(tokens=tokens.data[0].copy(), masked=indices)


def forward(grid: TokenGrid, model: ReconstructionModel) -> np.ndarray:
    """Run the stack on a token grid; returns the (N, t_e) reconstruction."""
    cfg = model.config
    if grid.tokens.shape != (cfg.n_metrics, SEGMENTS, cfg.d_model):
        raise ShapeError(f"forward: token grid shape {grid.tokens.shape} mismatches model")
    params = model.frozen_params()
    tokens = Tensor(grid.tokens[None])
    encoded = _apply_stack(params, tokens, cfg, None)
    return _decode(params, encoded, cfg).data[0]


def masked_loss(recon, window: WindowSample, plan: MaskPlan | Sequence[int]) -> Tensor:
    """Log-cosh loss restricted to the masked metrics' target segments."""
    indices = plan.indices if isinstance(plan, MaskPlan) else tuple(plan)
    if not indices:
        raise ContractError("masked_loss: mask plan is empty")
    recon = ad.as_tensor(recon)
    target = window.segments[TARGET_SEG][list(indices)]
    picked = ad.index_select(recon, (list(indices), slice(None)))
    return ad.log_cosh_loss(picked, target)


def masked_loss_batch(recon: Tensor, windows: np.ndarray, plan: Sequence[int]) -> Tensor:
    """Batched variant over (B, N, t_e) reconstructions and (B, N, 5, t_e) windows."""
    indices = list(plan)
    if not indices:
        raise ContractError("masked_loss_batch: mask plan is empty")
    target = windows[:, indices, TARGET_SEG, :]
    picked = ad.index_select(recon, (slice(None), indices, slice(None)))
    return ad.log_cosh_loss(picked, target)


def mask_groups(n_metrics: int, k: int) -> list[list[int]]:
    """ceil(N/k) disjoint chunks of size k (last one smaller)."""
    return [list(range(j, min(j + k, n_metrics))) for j in range(0, n_metrics, k)]


def reconstruct_many(model: ReconstructionModel, windows: np.ndarray) -> np.ndarray:
    """Reconstruct every metric of every window, masking chunk by chunk.

    Each metric's reconstruction comes from the pass in which it was masked.
    Returns (B, N, t_e).
    """
    cfg = model.config
    k = mask_count(cfg.n_metrics, cfg.mask_ratio)
    out = np.empty((windows.shape[0], cfg.n_metrics, cfg.t_e), dtype=np.float64)
    for group in mask_groups(cfg.n_metrics, k):
        recon = forward_batch(model, windows, group)
        out[:, group, :] = recon.data[:, group, :]
    return out


def reconstruct_all(window: WindowSample, model: ReconstructionModel) -> tuple[np.ndarray, np.ndarray]:
    """Full reconstruction of one window plus per-point absolute errors."""
    windows = window.segments.transpose(1, 0, 2)[None]
    recon = reconstruct_many(model, windows)[0]
    errors = np.abs(window.segments[TARGET_SEG] - recon)
    return recon, errors
