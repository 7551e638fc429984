"""Residual context adapter: a small transformer over embedding tokens.

The adapter takes the primary embedding plus a variable set of auxiliary
embeddings (comments, optionally audio) as whole-embedding tokens, runs them
through residual attention blocks, pools, and emits a residual update that is
added to the primary embedding. The final linear layer is zero-initialized,
so a fresh adapter is exactly the identity on the primary embedding.

Only one branch (video or title) is ever adapted in a run: adapting both
simultaneously admits a degenerate shortcut where both sides collapse onto
the same vector, which maximizes their similarity without learning anything.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .numerics import (
    AttentionBlockParams,
    mhsa_block_backward,
    mhsa_block_forward,
    normalize_backward,
    zeros_attention_block,
)

POOL_MODES = ("primary_token_linear", "mean_renorm")


@dataclass(frozen=True)
class AdapterConfig:
    """Geometry and pooling of the adapter.

    ff_width defaults to 4*dim (2048 at dim=512). pool_mode selects how the
    block outputs collapse to one vector before the final linear layer:
    ``primary_token_linear`` reads the output token at position 0,
    ``mean_renorm`` normalizes every valid output token, averages, and
    renormalizes. Position embeddings are off by default, keeping the
    auxiliary tokens an unordered set.
    """

    dim: int
    blocks: int = 2
    heads: int = 8
    ff_width: int | None = None
    pool_mode: str = "primary_token_linear"
    use_position_embeddings: bool = False
    max_tokens: int = 64

    def __post_init__(self) -> None:
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.heads < 1 or self.dim % self.heads != 0:
            raise ValueError(f"heads={self.heads} must divide dim={self.dim}")
        if self.pool_mode not in POOL_MODES:
            raise ValueError(f"pool_mode must be one of {POOL_MODES}")
        if self.ff_width is not None and self.ff_width < 1:
            raise ValueError("ff_width must be >= 1")

    @property
    def resolved_ff_width(self) -> int:
        return self.ff_width if self.ff_width is not None else 4 * self.dim

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "blocks": self.blocks,
            "heads": self.heads,
            "ff_width": self.ff_width,
            "pool_mode": self.pool_mode,
            "use_position_embeddings": self.use_position_embeddings,
            "max_tokens": self.max_tokens,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AdapterConfig":
        return cls(**data)


@dataclass
class AdapterParams:
    """All learnable weights of one adapter instance."""

    config: AdapterConfig
    blocks: list[AttentionBlockParams]
    final_w: np.ndarray  # (d, d)
    final_b: np.ndarray  # (d,)
    pos_emb: np.ndarray | None = None  # (max_tokens, d) when enabled

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Canonical parameter order; checkpoints and the optimizer rely on it."""
        for i, block in enumerate(self.blocks):
            for name, arr in block.named_arrays():
                yield f"blocks.{i}.{name}", arr
        yield "final_w", self.final_w
        yield "final_b", self.final_b
        if self.pos_emb is not None:
            yield "pos_emb", self.pos_emb

    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.named_arrays())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.named_arrays()])

    def from_vector(self, vec: np.ndarray) -> None:
        """Overwrite all parameter arrays in place from a flat vector."""
        pos = 0
        for _, arr in self.named_arrays():
            arr[...] = vec[pos : pos + arr.size].reshape(arr.shape)
            pos += arr.size
        if pos != vec.size:
            raise ValueError(f"vector length {vec.size} != parameter count {pos}")


def zeros_like_params(params: AdapterParams) -> AdapterParams:
    cfg = params.config
    return AdapterParams(
        config=cfg,
        blocks=[
            zeros_attention_block(cfg.dim, cfg.heads, cfg.resolved_ff_width)
            for _ in params.blocks
        ],
        final_w=np.zeros_like(params.final_w),
        final_b=np.zeros_like(params.final_b),
        pos_emb=None if params.pos_emb is None else np.zeros_like(params.pos_emb),
    )


def init_adapter(config: AdapterConfig, seed: int) -> AdapterParams:
    """Scaled-uniform init (+-1/sqrt(fan_in)) for attention/FF weights; layer
    norm gains 1; all biases and the final linear layer zero.

    The zero final layer makes a fresh adapter the exact identity on the
    primary embedding, so an untrained checkpoint never degrades retrieval.
    """
    rng = np.random.default_rng(seed)
    d = config.dim
    ff = config.resolved_ff_width

    def uniform(rows: int, cols: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(rows)
        return rng.uniform(-bound, bound, size=(rows, cols))

    blocks = []
    for _ in range(config.blocks):
        block = zeros_attention_block(d, config.heads, ff)
        block.ln1_gain[...] = 1.0
        block.ln2_gain[...] = 1.0
        block.w_q[...] = uniform(d, d)
        block.w_k[...] = uniform(d, d)
        block.w_v[...] = uniform(d, d)
        block.w_o[...] = uniform(d, d)
        block.w_ff1[...] = uniform(d, ff)
        block.w_ff2[...] = uniform(ff, d)
        blocks.append(block)
    pos_emb = None
    if config.use_position_embeddings:
        pos_emb = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(config.max_tokens, d))
    return AdapterParams(
        config=config,
        blocks=blocks,
        final_w=np.zeros((d, d)),
        final_b=np.zeros(d),
        pos_emb=pos_emb,
    )


@dataclass
class AdaptedEmbedding:
    """Adapter output; when adapted=False the vector is the raw primary."""

    vector: np.ndarray
    adapted: bool


@dataclass
class AdaptCache:
    """Forward intermediates needed to backpropagate one adapt() call."""

    primary: np.ndarray
    token_count: int
    block_caches: list[tuple]
    block_out: np.ndarray
    pooled: np.ndarray
    pool_cache: tuple | None  # mean_renorm intermediates


def _stack_tokens(
    primary: np.ndarray,
    aux: Sequence[np.ndarray],
    mask: Sequence[bool] | None,
    params: AdapterParams,
) -> np.ndarray:
    d = params.config.dim
    if primary.shape != (d,):
        raise ValueError(f"primary shape {primary.shape} != ({d},)")
    if mask is None:
        mask = [True] * len(aux)
    if len(mask) != len(aux):
        raise ValueError(f"mask length {len(mask)} != aux length {len(aux)}")
    active = []
    for vec, keep in zip(aux, mask):
        if vec.shape != (d,):
            raise ValueError(f"auxiliary vector shape {vec.shape} != ({d},)")
        if keep:
            active.append(vec)
    # Masked tokens are dropped before the blocks rather than carried with
    # -inf key logits: their outputs are contractually unread, and dropping
    # makes "masked" and "absent" produce bitwise-identical results.
    tokens = np.vstack([primary[None, :], *[a[None, :] for a in active]])
    if params.pos_emb is not None:
        if tokens.shape[0] > params.pos_emb.shape[0]:
            raise ValueError(
                f"{tokens.shape[0]} tokens exceed position table "
                f"({params.pos_emb.shape[0]})"
            )
        tokens = tokens + params.pos_emb[: tokens.shape[0]]
    return tokens


def _adapt_forward(
    primary: np.ndarray,
    aux: Sequence[np.ndarray],
    mask: Sequence[bool] | None,
    params: AdapterParams,
) -> tuple[np.ndarray, AdaptCache]:
    tokens = _stack_tokens(primary, aux, mask, params)
    block_caches = []
    x = tokens
    for block in params.blocks:
        x, cache = mhsa_block_forward(x, block)
        block_caches.append(cache)

    if params.config.pool_mode == "primary_token_linear":
        pooled = x[0]
        pool_cache = None
    else:  # mean_renorm
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("mean_renorm pooling hit a zero-norm token output")
        unit = x / norms[:, None]
        mean = unit.mean(axis=0)
        mean_norm = float(np.linalg.norm(mean))
        if mean_norm == 0.0:
            raise ValueError("mean_renorm pooling hit a zero-norm token mean")
        pooled = mean / mean_norm
        pool_cache = (x, norms, unit, mean, mean_norm)

    residual = pooled @ params.final_w + params.final_b
    out = primary + residual
    cache = AdaptCache(
        primary=primary,
        token_count=tokens.shape[0],
        block_caches=block_caches,
        block_out=x,
        pooled=pooled,
        pool_cache=pool_cache,
    )
    return out, cache


def _adapt_backward(
    grad_out: np.ndarray, cache: AdaptCache, params: AdapterParams, grads: AdapterParams
) -> np.ndarray:
    """Accumulate parameter gradients for one adapt() call into ``grads``.

    grad_out is dLoss/d(adapted embedding). Returns dLoss/d(primary), which
    includes both the residual passthrough and the token-0 path.
    """
    d_residual = grad_out
    grads.final_w += np.outer(cache.pooled, d_residual)
    grads.final_b += d_residual
    d_pooled = params.final_w @ d_residual

    t_count = cache.token_count
    if cache.pool_cache is None:
        d_x = np.zeros_like(cache.block_out)
        d_x[0] = d_pooled
    else:
        x, norms, unit, mean, mean_norm = cache.pool_cache
        d_mean = normalize_backward(mean, d_pooled)
        d_unit = np.tile(d_mean / t_count, (t_count, 1))
        d_x = np.empty_like(x)
        for t in range(t_count):
            d_x[t] = normalize_backward(x[t], d_unit[t])

    for block, block_cache, block_grads in zip(
        reversed(params.blocks), reversed(cache.block_caches), reversed(grads.blocks)
    ):
        d_x, bg = mhsa_block_backward(d_x, block_cache)
        for (_, acc), (_, g) in zip(block_grads.named_arrays(), bg.named_arrays()):
            acc += g

    if grads.pos_emb is not None:
        grads.pos_emb[:t_count] += d_x
    return grad_out + d_x[0]


def _adapt_forward_batched(
    primaries: np.ndarray, aux_stack: np.ndarray, params: AdapterParams
) -> np.ndarray:
    """Vectorized forward for rows sharing one auxiliary count, outputs only.

    primaries (B, d), aux_stack (B, Ta, d) -> adapted (B, d). Mathematically
    identical to per-row adapt(); used where many forward evaluations are
    needed (finite-difference probing) and no cache is wanted.
    """
    from .numerics import _GELU_CUBIC, _SQRT_2_OVER_PI, LN_EPS, softmax_rows

    b, d = primaries.shape
    tokens = np.concatenate([primaries[:, None, :], aux_stack], axis=1)  # (B, T, d)
    t_count = tokens.shape[1]
    if params.pos_emb is not None:
        if t_count > params.pos_emb.shape[0]:
            raise ValueError("token count exceeds position table")
        tokens = tokens + params.pos_emb[:t_count]

    def ln(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
        return gain * (x - mean) / np.sqrt(var + LN_EPS) + bias

    def gelu_fast(x: np.ndarray) -> np.ndarray:
        # same tanh form as numerics.gelu, minus the finite-input check
        return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + _GELU_CUBIC * (x * x * x))))

    x = tokens
    for block in params.blocks:
        heads = block.heads
        hd = d // heads
        u1 = ln(x, block.ln1_gain, block.ln1_bias)
        # (B, T, H, hd) -> (B, H, T, hd) so heads batch through matmul
        q = (u1 @ block.w_q + block.b_q).reshape(b, t_count, heads, hd).transpose(0, 2, 1, 3)
        k = (u1 @ block.w_k).reshape(b, t_count, heads, hd).transpose(0, 2, 1, 3)
        v = (u1 @ block.w_v + block.b_v).reshape(b, t_count, heads, hd).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(hd)
        attn = softmax_rows(scores)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t_count, d)
        x = x + (ctx @ block.w_o + block.b_o)
        u2 = ln(x, block.ln2_gain, block.ln2_bias)
        x = x + (gelu_fast(u2 @ block.w_ff1 + block.b_ff1) @ block.w_ff2 + block.b_ff2)

    if params.config.pool_mode == "primary_token_linear":
        pooled = x[:, 0, :]
    else:
        norms = np.linalg.norm(x, axis=2, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("mean_renorm pooling hit a zero-norm token output")
        mean = (x / norms).mean(axis=1)
        mean_norms = np.linalg.norm(mean, axis=1, keepdims=True)
        if np.any(mean_norms == 0.0):
            raise ValueError("mean_renorm pooling hit a zero-norm token mean")
        pooled = mean / mean_norms
    return primaries + pooled @ params.final_w + params.final_b


def adapt(
    primary: np.ndarray,
    aux: Sequence[np.ndarray],
    mask: Sequence[bool] | None,
    params: AdapterParams,
) -> AdaptedEmbedding:
    """Adapt one primary embedding with its auxiliary set.

    Token 0 is the primary embedding; masked auxiliaries contribute nothing.
    The result is primary + residual and is deliberately NOT renormalized
    (the affinity computation normalizes).
    """
    out, _ = _adapt_forward(primary, aux, mask, params)
    return AdaptedEmbedding(vector=out, adapted=True)


def adapt_batch(
    primaries: np.ndarray,
    aux_sets: Sequence[Sequence[np.ndarray]],
    masks: Sequence[Sequence[bool] | None],
    params: AdapterParams,
    skip_flags: Sequence[bool] | None = None,
) -> np.ndarray:
    """Row-wise adapt with per-sample skip. primaries (B, d) -> (B, d).

    Row i is returned untouched when skip_flags[i] is true; otherwise it
    equals adapt() on that row exactly.
    """
    b = primaries.shape[0]
    if len(aux_sets) != b or len(masks) != b:
        raise ValueError("aux_sets and masks must have one entry per row")
    if skip_flags is None:
        skip_flags = [False] * b
    if len(skip_flags) != b:
        raise ValueError("skip_flags must have one entry per row")
    out = np.empty_like(primaries, dtype=np.float64)
    for i in range(b):
        if skip_flags[i]:
            out[i] = primaries[i]
        else:
            out[i] = adapt(primaries[i], aux_sets[i], masks[i], params).vector
    return out
