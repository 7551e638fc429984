"""Batch affinity matrix and the symmetric contrastive objective.

The affinity between video row i and text row j is their cosine similarity
scaled by 1/temperature. The loss is the symmetric cross-entropy over rows
and columns of that matrix: it pulls the diagonal (matching pairs) up and
pushes every off-diagonal entry down in one self-balancing expression.
Gradients back to the adapter parameters are hand-derived and validated by
the finite-difference oracle in numerics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapter import (
    AdapterParams,
    _adapt_backward,
    _adapt_forward,
    _adapt_forward_batched,
    zeros_like_params,
)
from .datamodel import Batch, Sample
from .numerics import l2_normalize_rows, softmax_rows


@dataclass
class AffinityMatrix:
    """values[i][j] = cosine(video_i, text_j) / temperature."""

    values: np.ndarray  # (B, B)
    temperature: float


@dataclass
class LossValue:
    """Total loss and its two directional cross-entropy components."""

    total: float
    video_to_text: float  # rows of the affinity matrix
    text_to_video: float  # columns


def affinity(
    video_embs: np.ndarray, text_embs: np.ndarray, temperature: float
) -> AffinityMatrix:
    """Pairwise temperature-scaled cosine similarities. Both inputs (B, d)."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if video_embs.shape != text_embs.shape or video_embs.ndim != 2:
        raise ValueError(
            f"shape mismatch: video {video_embs.shape} vs text {text_embs.shape}"
        )
    v = l2_normalize_rows(np.asarray(video_embs, dtype=np.float64))
    t = l2_normalize_rows(np.asarray(text_embs, dtype=np.float64))
    return AffinityMatrix(values=(v @ t.T) / temperature, temperature=temperature)


def _logsumexp_rows(m: np.ndarray) -> np.ndarray:
    peak = m.max(axis=1)
    return peak + np.log(np.exp(m - peak[:, None]).sum(axis=1))


def contrastive_loss(a: AffinityMatrix) -> LossValue:
    """Symmetric cross-entropy pulling the diagonal up, off-diagonal down.

    total = (1/2B) * sum_i [(lse(row_i) - A_ii) + (lse(col_i) - A_ii)],
    computed with max-subtracted log-sum-exp. Non-negative; ln(B) when every
    entry is equal; 0 in the limit of diagonal dominance. B=1 yields 0.
    """
    vals = np.asarray(a.values, dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("affinity matrix contains non-finite entries")
    diag = np.diag(vals)
    v2t = float((_logsumexp_rows(vals) - diag).mean())
    t2v = float((_logsumexp_rows(vals.T) - diag).mean())
    return LossValue(total=0.5 * (v2t + t2v), video_to_text=v2t, text_to_video=t2v)


def contrastive_loss_grad(a: AffinityMatrix) -> np.ndarray:
    """dLoss/dA for contrastive_loss: (P_rows + P_cols - 2I) / 2B."""
    vals = a.values
    b = vals.shape[0]
    p_rows = softmax_rows(vals)
    p_cols = softmax_rows(vals.T).T
    return (p_rows + p_cols - 2.0 * np.eye(b)) / (2.0 * b)


def contrastive_loss_ratio_form(a: AffinityMatrix) -> float:
    """Diagnostic-only ratio variant: 0.5 * sum_i [A_ii/lse(row_i) + A_ii/lse(col_i)].

    Exposed for inspection of the raw ratio formulation; it is not a valid
    training objective (it is not minimized by diagonal dominance) and nothing
    in the trainer uses it.
    """
    vals = np.asarray(a.values, dtype=np.float64)
    diag = np.diag(vals)
    lse_rows = _logsumexp_rows(vals)
    lse_cols = _logsumexp_rows(vals.T)
    return float(0.5 * (diag / lse_rows + diag / lse_cols).sum())


# -----------------------------------------------------------------------------
# Full forward/backward through the adapter
# -----------------------------------------------------------------------------


def _active_aux(sample: Sample, comment_mask: np.ndarray) -> list[np.ndarray]:
    aux = [c for c, keep in zip(sample.comment_embs, comment_mask) if keep]
    if sample.audio_emb is not None:
        aux.append(sample.audio_emb)
    return aux


def batch_loss(
    batch: Batch,
    params: AdapterParams,
    branch: str,
    temperature: float,
    skip_flags: Sequence[bool],
) -> LossValue:
    """Forward-only loss evaluation, no gradient bookkeeping.

    Rows with a uniform active-auxiliary count go through the vectorized
    adapter forward; anything else falls back to per-row evaluation. This is
    the function to probe with finite differences: it is cheap and agrees
    with loss_and_grads to floating-point accuracy.
    """
    if branch not in ("adapt_video", "adapt_title"):
        raise ValueError(f"unknown branch {branch!r}")
    b = len(batch)
    samples = [batch.store.samples[i] for i in batch.indices]
    videos = np.stack([s.video_emb for s in samples])
    titles = np.stack([s.title_emb for s in samples])
    primaries = videos if branch == "adapt_video" else titles

    adapted = np.array(primaries, dtype=np.float64, copy=True)
    live = [i for i in range(b) if not skip_flags[i]]
    aux_lists = {i: _active_aux(samples[i], batch.comment_masks[i]) for i in live}
    counts = {len(aux_lists[i]) for i in live}
    if live and len(counts) == 1 and counts != {0}:
        stack = np.stack([np.stack(aux_lists[i]) for i in live])
        adapted[live] = _adapt_forward_batched(primaries[live], stack, params)
    else:
        for i in live:
            adapted[i], _ = _adapt_forward(primaries[i], aux_lists[i], None, params)

    if branch == "adapt_video":
        a = affinity(adapted, titles, temperature)
    else:
        a = affinity(videos, adapted, temperature)
    return contrastive_loss(a)


def loss_and_grads(
    batch: Batch,
    params: AdapterParams,
    branch: str,
    temperature: float,
    skip_flags: Sequence[bool],
) -> tuple[LossValue, AdapterParams]:
    """Forward adapt -> affinity -> loss, then analytic parameter gradients.

    ``branch`` selects which side is adapted ("adapt_video" or "adapt_title");
    the other side stays at its raw frozen embedding, so no gradient flows
    there. Skipped rows use the raw primary and contribute no parameter
    gradient. Accumulation is sequential over the batch for determinism.
    """
    if branch not in ("adapt_video", "adapt_title"):
        raise ValueError(f"unknown branch {branch!r}")
    b = len(batch)
    if len(skip_flags) != b:
        raise ValueError("skip_flags must have one entry per batch sample")
    samples = [batch.store.samples[i] for i in batch.indices]
    videos = np.stack([s.video_emb for s in samples])
    titles = np.stack([s.title_emb for s in samples])
    primaries = videos if branch == "adapt_video" else titles

    adapted = np.empty_like(primaries)
    caches: list = [None] * b
    for i, sample in enumerate(samples):
        if skip_flags[i]:
            adapted[i] = primaries[i]
        else:
            aux = _active_aux(sample, batch.comment_masks[i])
            adapted[i], caches[i] = _adapt_forward(primaries[i], aux, None, params)

    if branch == "adapt_video":
        video_side, text_side = adapted, titles
    else:
        video_side, text_side = videos, adapted
    a = affinity(video_side, text_side, temperature)
    loss = contrastive_loss(a)

    g = contrastive_loss_grad(a)  # (B, B)
    v_hat = l2_normalize_rows(video_side)
    t_hat = l2_normalize_rows(text_side)
    if branch == "adapt_video":
        d_hat = (g @ t_hat) / temperature  # dLoss/d(normalized video rows)
        hat, raw = v_hat, video_side
    else:
        d_hat = (g.T @ v_hat) / temperature
        hat, raw = t_hat, text_side

    grads = zeros_like_params(params)
    norms = np.linalg.norm(raw, axis=1)
    for i in range(b):
        if caches[i] is None:
            continue
        # through row normalization: d_raw = (I - h h^T) d_hat / ||raw||
        h = hat[i]
        d_row = (d_hat[i] - h * float(h @ d_hat[i])) / norms[i]
        _adapt_backward(d_row, caches[i], params, grads)
    return loss, grads
