"""Dense float64 kernels: softmax, layer norm, GELU, residual attention blocks.

Matrices are C-contiguous row-major float64 numpy arrays. Every kernel is a
pure function; forward/backward pairs are hand-derived, and ``grad_check``
supplies the central-difference oracle used to validate each composite
gradient built on top of them. 64-bit precision is mandatory here: the
gradient checks are asserted at tolerances that 32-bit arithmetic cannot meet.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Iterator, Sequence

import numpy as np

LN_EPS = 1e-5

_GELU_CUBIC = 0.044715
_SQRT_2_OVER_PI = 0.7978845608028654


class NonFiniteInputError(ValueError):
    """Raised when a kernel receives NaN or Inf input."""


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError(f"{name} contains NaN or Inf entries")


# -----------------------------------------------------------------------------
# Elementwise / rowwise kernels
# -----------------------------------------------------------------------------


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction. m (..., C) -> (..., C).

    Each output row is non-negative and sums to 1; max subtraction keeps the
    exponentials in range for entries as large as +-1e4.
    """
    m = np.asarray(m, dtype=np.float64)
    _check_finite("softmax_rows input", m)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pull grad_out back through a row-wise softmax with output ``probs``."""
    inner = (grad_out * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_out - inner)


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-form GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite("gelu input", x)
    u = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * (x * x * x))
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    u = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * (x * x * x))
    t = np.tanh(u)
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x**2)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS
) -> np.ndarray:
    """Vector layer norm: gain * (x - mean) / sqrt(var + eps) + bias.

    var is the biased (divide-by-d) variance. x, gain, bias all length d.
    """
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if not (x.shape == gain.shape == bias.shape) or x.ndim != 1:
        raise ValueError(
            f"layer_norm length mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    out, _ = _layer_norm_rows_forward(x[None, :], gain, bias, eps)
    return out[0]


def _layer_norm_rows_forward(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS
) -> tuple[np.ndarray, tuple]:
    """x (T, d) normalized per row. Returns (out, cache for backward)."""
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = gain * xhat + bias
    return out, (xhat, inv_std, gain)


def _layer_norm_rows_backward(
    grad_out: np.ndarray, cache: tuple
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_gain, grad_bias) for the rows forward pass."""
    xhat, inv_std, gain = cache
    h = grad_out * gain
    grad_x = inv_std * (
        h - h.mean(axis=1, keepdims=True) - xhat * (h * xhat).mean(axis=1, keepdims=True)
    )
    grad_gain = (grad_out * xhat).sum(axis=0)
    grad_bias = grad_out.sum(axis=0)
    return grad_x, grad_gain, grad_bias


# -----------------------------------------------------------------------------
# Residual multi-head self-attention block
# -----------------------------------------------------------------------------


@dataclass
class AttentionBlockParams:
    """Weights of one pre-norm residual block: LN -> MHSA -> add, LN -> FF -> add.

    Query/key/value projections are stored combined as (d, d) matrices and
    split into ``heads`` slices of width d/heads. The key projection carries
    no bias: a bias shared by all keys shifts every logit of a softmax row
    equally and therefore can never affect the output, so it would be an
    untrainable dead parameter. The feed-forward expands d -> ff -> d with
    GELU after the first linear layer.
    """

    heads: int
    ln1_gain: np.ndarray  # (d,)
    ln1_bias: np.ndarray  # (d,)
    w_q: np.ndarray  # (d, d)
    b_q: np.ndarray  # (d,)
    w_k: np.ndarray  # (d, d)
    w_v: np.ndarray  # (d, d)
    b_v: np.ndarray  # (d,)
    w_o: np.ndarray  # (d, d)
    b_o: np.ndarray  # (d,)
    ln2_gain: np.ndarray  # (d,)
    ln2_bias: np.ndarray  # (d,)
    w_ff1: np.ndarray  # (d, ff)
    b_ff1: np.ndarray  # (ff,)
    w_ff2: np.ndarray  # (ff, d)
    b_ff2: np.ndarray  # (d,)

    _ARRAY_FIELDS = (
        "ln1_gain",
        "ln1_bias",
        "w_q",
        "b_q",
        "w_k",
        "w_v",
        "b_v",
        "w_o",
        "b_o",
        "ln2_gain",
        "ln2_bias",
        "w_ff1",
        "b_ff1",
        "w_ff2",
        "b_ff2",
    )

    def __post_init__(self) -> None:
        d = self.w_q.shape[0]
        if self.heads < 1 or d % self.heads != 0:
            raise ValueError(f"head count {self.heads} must divide d={d}")
        ff = self.w_ff1.shape[1]
        expect = {
            "ln1_gain": (d,),
            "ln1_bias": (d,),
            "w_q": (d, d),
            "b_q": (d,),
            "w_k": (d, d),
            "w_v": (d, d),
            "b_v": (d,),
            "w_o": (d, d),
            "b_o": (d,),
            "ln2_gain": (d,),
            "ln2_bias": (d,),
            "w_ff1": (d, ff),
            "b_ff1": (ff,),
            "w_ff2": (ff, d),
            "b_ff2": (d,),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def ff_width(self) -> int:
        return self.w_ff1.shape[1]

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self._ARRAY_FIELDS:
            yield name, getattr(self, name)


def zeros_attention_block(d: int, heads: int, ff_width: int) -> AttentionBlockParams:
    """All-zero block of the given geometry (gradient accumulators, tests)."""
    z = np.zeros
    return AttentionBlockParams(
        heads=heads,
        ln1_gain=z(d),
        ln1_bias=z(d),
        w_q=z((d, d)),
        b_q=z(d),
        w_k=z((d, d)),
        w_v=z((d, d)),
        b_v=z(d),
        w_o=z((d, d)),
        b_o=z(d),
        ln2_gain=z(d),
        ln2_bias=z(d),
        w_ff1=z((d, ff_width)),
        b_ff1=z(ff_width),
        w_ff2=z((ff_width, d)),
        b_ff2=z(d),
    )


def mhsa_block(
    tokens: np.ndarray,
    params: AttentionBlockParams,
    mask: Sequence[bool] | np.ndarray | None = None,
) -> np.ndarray:
    """Pre-norm residual block over a token sequence. tokens (T, d) -> (T, d).

    ``mask`` marks valid tokens. Masked tokens are excluded as attention keys
    (equivalent to -inf logits); their own output rows are computed but are
    untrusted and must never be read downstream. With all projection and
    feed-forward weights zero the block is the bitwise identity.
    """
    out, _ = mhsa_block_forward(tokens, params, mask)
    return out


def mhsa_block_forward(
    tokens: np.ndarray,
    params: AttentionBlockParams,
    mask: Sequence[bool] | np.ndarray | None = None,
) -> tuple[np.ndarray, tuple]:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != params.dim:
        raise ValueError(f"tokens shape {tokens.shape} incompatible with d={params.dim}")
    t_count, d = tokens.shape
    if mask is None:
        valid = np.arange(t_count)
    else:
        mask_arr = np.asarray(mask, dtype=bool)
        if mask_arr.shape != (t_count,):
            raise ValueError(f"mask length {mask_arr.shape} does not match T={t_count}")
        valid = np.flatnonzero(mask_arr)
        if valid.size == 0:
            raise ValueError("mhsa_block requires at least one valid token")
    heads = params.heads
    head_dim = d // heads
    scale = 1.0 / np.sqrt(head_dim)

    u1, ln1_cache = _layer_norm_rows_forward(tokens, params.ln1_gain, params.ln1_bias)
    u1_valid = u1[valid]
    q = u1 @ params.w_q + params.b_q  # (T, d)
    k = u1_valid @ params.w_k  # (Tv, d)
    v = u1_valid @ params.w_v + params.b_v  # (Tv, d)
    q3 = q.reshape(t_count, heads, head_dim)
    k3 = k.reshape(valid.size, heads, head_dim)
    v3 = v.reshape(valid.size, heads, head_dim)
    # Valid keys are gathered instead of writing -inf logits: zero attention
    # weight on masked keys is then exact regardless of summation strategy.
    scores = np.einsum("qhd,khd->hqk", q3, k3) * scale  # (H, T, Tv)
    attn = softmax_rows(scores)
    ctx = np.einsum("hqk,khd->qhd", attn, v3).reshape(t_count, d)
    att_out = ctx @ params.w_o + params.b_o
    x_mid = tokens + att_out

    u2, ln2_cache = _layer_norm_rows_forward(x_mid, params.ln2_gain, params.ln2_bias)
    z = u2 @ params.w_ff1 + params.b_ff1  # (T, ff)
    g = gelu(z)
    ff_out = g @ params.w_ff2 + params.b_ff2
    out = x_mid + ff_out

    cache = (params, valid, u1, ln1_cache, q3, k3, v3, attn, ctx, ln2_cache, u2, z, g, scale)
    return out, cache


def mhsa_block_backward(
    grad_out: np.ndarray, cache: tuple
) -> tuple[np.ndarray, AttentionBlockParams]:
    """Backward pass of ``mhsa_block_forward``.

    Returns (grad_tokens, grads) where grads mirrors AttentionBlockParams.
    grad_out rows for masked tokens should be zero (their outputs are
    contractually unread).
    """
    params, valid, u1, ln1_cache, q3, k3, v3, attn, ctx, ln2_cache, u2, z, g, scale = cache
    t_count, d = grad_out.shape
    heads = params.heads
    head_dim = d // heads
    grads = zeros_attention_block(d, heads, params.ff_width)

    # Feed-forward half: out = x_mid + (gelu(u2 @ w1 + b1) @ w2 + b2)
    d_ff_out = grad_out
    grads.w_ff2 += g.T @ d_ff_out
    grads.b_ff2 += d_ff_out.sum(axis=0)
    d_g = d_ff_out @ params.w_ff2.T
    d_z = gelu_backward(z, d_g)
    grads.w_ff1 += u2.T @ d_z
    grads.b_ff1 += d_z.sum(axis=0)
    d_u2 = d_z @ params.w_ff1.T
    d_x_mid_from_ln, g2, b2 = _layer_norm_rows_backward(d_u2, ln2_cache)
    grads.ln2_gain += g2
    grads.ln2_bias += b2
    d_x_mid = grad_out + d_x_mid_from_ln

    # Attention half: x_mid = tokens + (ctx @ w_o + b_o)
    d_att_out = d_x_mid
    grads.w_o += ctx.T @ d_att_out
    grads.b_o += d_att_out.sum(axis=0)
    d_ctx3 = (d_att_out @ params.w_o.T).reshape(t_count, heads, head_dim)
    d_attn = np.einsum("qhd,khd->hqk", d_ctx3, v3)
    d_v3 = np.einsum("hqk,qhd->khd", attn, d_ctx3)
    d_scores = softmax_rows_backward(attn, d_attn) * scale
    d_q3 = np.einsum("hqk,khd->qhd", d_scores, k3)
    d_k3 = np.einsum("hqk,qhd->khd", d_scores, q3)

    d_q = d_q3.reshape(t_count, d)
    d_k = d_k3.reshape(valid.size, d)
    d_v = d_v3.reshape(valid.size, d)
    u1_valid = u1[valid]
    grads.w_q += u1.T @ d_q
    grads.b_q += d_q.sum(axis=0)
    grads.w_k += u1_valid.T @ d_k
    grads.w_v += u1_valid.T @ d_v
    grads.b_v += d_v.sum(axis=0)

    d_u1 = d_q @ params.w_q.T
    d_u1[valid] += d_k @ params.w_k.T + d_v @ params.w_v.T
    d_tokens_from_ln, g1, b1 = _layer_norm_rows_backward(d_u1, ln1_cache)
    grads.ln1_gain += g1
    grads.ln1_bias += b1
    grad_tokens = d_x_mid + d_tokens_from_ln
    return grad_tokens, grads


# -----------------------------------------------------------------------------
# Finite-difference gradient oracle
# -----------------------------------------------------------------------------


@dataclass
class GradReport:
    """Per-coordinate comparison of analytic and central-difference gradients.

    relative error = |a - n| / max(|a|, |n|, 1e-12).
    """

    analytic: np.ndarray
    numeric: np.ndarray
    relative_error: np.ndarray
    max_relative_error: float
    step: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_relative_error <= self.tolerance)


class NondeterministicLossError(RuntimeError):
    """loss_fn returned different values for identical parameters."""


def grad_check(
    loss_fn: Callable[[np.ndarray], float],
    theta: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-6,
    tol: float = 1e-6,
) -> GradReport:
    """Central-difference check of ``analytic_grad`` at ``theta``.

    numeric_i = (f(theta + h e_i) - f(theta - h e_i)) / 2h. loss_fn must be
    deterministic; that is verified by a repeated evaluation before probing.
    """
    if h <= 0:
        raise ValueError("grad_check step h must be > 0")
    theta = np.asarray(theta, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if theta.shape != analytic.shape or theta.ndim != 1:
        raise ValueError("theta and analytic_grad must be flat vectors of equal length")
    base = float(loss_fn(theta.copy()))
    repeat = float(loss_fn(theta.copy()))
    if base != repeat:
        raise NondeterministicLossError(
            f"loss_fn not deterministic: {base!r} != {repeat!r} on identical input"
        )
    numeric = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.size):
        orig = probe[i]
        probe[i] = orig + h
        up = float(loss_fn(probe))
        probe[i] = orig - h
        down = float(loss_fn(probe))
        probe[i] = orig
        numeric[i] = (up - down) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    rel = np.abs(analytic - numeric) / denom
    return GradReport(
        analytic=analytic,
        numeric=numeric,
        relative_error=rel,
        max_relative_error=float(rel.max()) if rel.size else 0.0,
        step=h,
        tolerance=tol,
    )


# -----------------------------------------------------------------------------
# Shared small helpers
# -----------------------------------------------------------------------------


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """x / ||x||, raising on zero norm."""
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return x / norm


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize rows: zero-norm row present")
    return m / norms


def normalize_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pull grad_out back through y = x / ||x|| for one vector."""
    norm = float(np.linalg.norm(x))
    y = x / norm
    return (grad_out - y * float(y @ grad_out)) / norm
