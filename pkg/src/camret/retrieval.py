"""Exact cosine top-k search plus every retrieval harness built on it:
bidirectional Recall@N, distractor-robustness curves, comment-count sweeps,
and mask-out comment saliency.

Search is exact (full scan); corpora stay small enough that approximate
indexes would only add noise to the comparisons. Ties are broken by ascending
id so every ranking is a deterministic total order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .adapter import AdapterParams, adapt
from .datamodel import DatasetStore, Sample
from .numerics import l2_normalize, l2_normalize_rows
from .trainer import TrainConfig

EVAL_MODES = ("no_comments", "averaging", "adapter")
DEFAULT_EVAL_COMMENTS = 5


@dataclass
class RetrievalIndex:
    ids: list[str]
    matrix: np.ndarray  # (N, d), unit rows

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class EvalReport:
    """Recall percentages for both retrieval directions.

    tvr_* is text->video (title queries a video corpus), vtr_* the reverse.
    """

    tvr_r1: float
    tvr_r10: float
    vtr_r1: float
    vtr_r10: float
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tvr_r1": self.tvr_r1,
            "tvr_r10": self.tvr_r10,
            "vtr_r1": self.vtr_r1,
            "vtr_r10": self.vtr_r10,
            "settings": self.settings,
        }


def build_index(ids: Sequence[str], vectors: np.ndarray) -> RetrievalIndex:
    """Unit-normalize target vectors into an exact-search index."""
    if len(ids) == 0:
        raise ValueError("cannot build an empty index")
    if len(set(ids)) != len(ids):
        raise ValueError("index ids must be unique")
    if vectors.shape[0] != len(ids):
        raise ValueError("one vector per id required")
    return RetrievalIndex(ids=list(ids), matrix=l2_normalize_rows(np.asarray(vectors, float)))


def topk(index: RetrievalIndex, query: np.ndarray, k: int) -> list[str]:
    """ids of the k nearest targets by descending cosine, ties by ascending id."""
    if len(index) == 0:
        raise ValueError("index is empty")
    if k > len(index):
        raise ValueError(f"k={k} exceeds index size {len(index)}")
    q = l2_normalize(np.asarray(query, dtype=np.float64))
    scores = index.matrix @ q
    id_arr = np.array(index.ids)
    order = np.lexsort((id_arr, -scores))
    return [index.ids[i] for i in order[:k]]


def recall_at_n(
    ranked_lists: Sequence[Sequence[str]],
    truth_ids: Sequence[str],
    n: int,
    corpus_ids: Sequence[str] | None = None,
) -> float:
    """100 * fraction of queries whose ground-truth id appears in the top n."""
    if len(ranked_lists) != len(truth_ids):
        raise ValueError("one ground-truth id per query required")
    if corpus_ids is not None:
        corpus = set(corpus_ids)
        for truth in truth_ids:
            if truth not in corpus:
                raise ValueError(f"ground-truth id {truth!r} not in corpus")
    hits = sum(1 for ranked, truth in zip(ranked_lists, truth_ids) if truth in ranked[:n])
    return 100.0 * hits / len(truth_ids)


# -----------------------------------------------------------------------------
# Evaluation harnesses
# -----------------------------------------------------------------------------


def _eval_comments(sample: Sample, m_eval: int) -> list[np.ndarray]:
    return sample.comment_embs[: min(m_eval, sample.n_comments)]


def _aux_tokens(sample: Sample, comments: list[np.ndarray]) -> list[np.ndarray]:
    aux = list(comments)
    if sample.audio_emb is not None:
        aux.append(sample.audio_emb)
    return aux


def _query_embeddings(
    store: DatasetStore,
    params: AdapterParams | None,
    mode: str,
    branch: str,
    m_eval: int,
    extra_comments: Sequence[Sequence[np.ndarray]] | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (video_side, text_side) matrices for the requested mode."""
    videos = store.video_matrix()
    titles = store.title_matrix()
    if mode == "no_comments":
        return videos, titles

    per_sample_comments = []
    for i, sample in enumerate(store.samples):
        comments = _eval_comments(sample, m_eval)
        if extra_comments is not None:
            comments = comments + list(extra_comments[i])
        per_sample_comments.append(comments)

    if mode == "averaging":
        # Query = renormalized mean of the title and its active comments.
        text_side = np.empty_like(titles)
        for i, sample in enumerate(store.samples):
            stack = [sample.title_emb, *per_sample_comments[i]]
            text_side[i] = l2_normalize(np.mean(stack, axis=0))
        return videos, text_side

    if mode == "adapter":
        if params is None:
            raise ValueError("adapter mode requires adapter parameters")
        adapted = np.empty_like(titles)
        for i, sample in enumerate(store.samples):
            primary = sample.video_emb if branch == "adapt_video" else sample.title_emb
            aux = _aux_tokens(sample, per_sample_comments[i])
            adapted[i] = adapt(primary, aux, None, params).vector
        if branch == "adapt_video":
            return adapted, titles
        return videos, adapted

    raise ValueError(f"mode must be one of {EVAL_MODES}, got {mode!r}")


def eval_bidirectional(
    store: DatasetStore,
    params: AdapterParams | None,
    mode: str,
    config: TrainConfig,
    m_eval: int = DEFAULT_EVAL_COMMENTS,
    extra_comments: Sequence[Sequence[np.ndarray]] | None = None,
) -> EvalReport:
    """Recall@1/@10 in both directions on one corpus.

    no_comments ranks raw title against raw video; averaging replaces the text
    side with the renormalized title+comments mean; adapter runs the configured
    branch through the adapter with skipping disabled.
    """
    video_side, text_side = _query_embeddings(
        store, params, mode, config.branch, m_eval, extra_comments
    )
    ids = store.ids()
    video_index = build_index(ids, video_side)
    text_index = build_index(ids, text_side)
    k = min(10, len(store))
    tvr_ranked = [topk(video_index, text_side[i], k) for i in range(len(store))]
    vtr_ranked = [topk(text_index, video_side[i], k) for i in range(len(store))]
    settings = {"mode": mode, "branch": config.branch, "m_eval": m_eval}
    if extra_comments is not None:
        settings["n_distractors"] = len(extra_comments[0]) if len(store) else 0
    return EvalReport(
        tvr_r1=recall_at_n(tvr_ranked, ids, 1, corpus_ids=ids),
        tvr_r10=recall_at_n(tvr_ranked, ids, min(10, k), corpus_ids=ids),
        vtr_r1=recall_at_n(vtr_ranked, ids, 1, corpus_ids=ids),
        vtr_r10=recall_at_n(vtr_ranked, ids, min(10, k), corpus_ids=ids),
        settings=settings,
    )


def distractor_eval(
    store: DatasetStore,
    params: AdapterParams | None,
    mode: str,
    n_distractors: Sequence[int],
    seed: int,
    config: TrainConfig,
    m_eval: int = DEFAULT_EVAL_COMMENTS,
) -> list[tuple[int, EvalReport]]:
    """Robustness curve: append n irrelevant comments from other samples.

    For each sample, distractors are real comment embeddings of uniformly
    drawn *other* samples; the per-sample sequence is drawn once at the max
    grid value and prefixed, so the curve genuinely adds distractors
    gradually. Deterministic in seed.
    """
    grid = sorted(set(int(n) for n in n_distractors))
    if any(n < 0 for n in grid):
        raise ValueError("distractor counts must be >= 0")
    rng = np.random.default_rng(seed)
    max_n = max(grid) if grid else 0
    pools: list[list[np.ndarray]] = []
    for i in range(len(store)):
        drawn: list[np.ndarray] = []
        while len(drawn) < max_n:
            j = int(rng.integers(len(store)))
            donor = store.samples[j]
            if j == i or donor.n_comments == 0:
                continue
            slot = int(rng.integers(donor.n_comments))
            drawn.append(donor.comment_embs[slot])
        pools.append(drawn)
    curve = []
    for n in grid:
        extra = [pool[:n] for pool in pools]
        report = eval_bidirectional(store, params, mode, config, m_eval, extra)
        report.settings["n_distractors"] = n
        curve.append((n, report))
    return curve


def vary_comments_eval(
    store: DatasetStore,
    params_by_m_train: Mapping[int, AdapterParams],
    m_eval_grid: Sequence[int],
    config: TrainConfig,
) -> dict[tuple[int, int], EvalReport]:
    """Cross grid of train-time vs eval-time comment counts.

    The m_eval=0 column bypasses the adapter entirely (raw embeddings), which
    is the documented no-comments regime for a trained checkpoint.
    """
    results: dict[tuple[int, int], EvalReport] = {}
    for m_train in sorted(params_by_m_train):
        params = params_by_m_train[m_train]
        if params is None:
            raise ValueError(f"missing checkpoint for grid cell m_train={m_train}")
        for m_eval in m_eval_grid:
            if m_eval == 0:
                report = eval_bidirectional(store, None, "no_comments", config, 0)
            else:
                report = eval_bidirectional(store, params, "adapter", config, m_eval)
            report.settings["m_train"] = m_train
            results[(m_train, int(m_eval))] = report
    return results


def comment_saliency(
    sample: Sample, params: AdapterParams, config: TrainConfig
) -> list[tuple[int, float]]:
    """Rank comments by how much masking each one shifts the adapted descriptor.

    score_k = <psi_all, psi_without_k> on normalized descriptors; a low score
    means removing the comment moved the descriptor a lot, i.e. the comment is
    salient. Returned (comment_index, score) pairs are sorted ascending by
    score = descending saliency, ties by index.
    """
    if sample.n_comments == 0:
        raise ValueError(f"sample {sample.id!r} has no comments to rank")
    primary = sample.video_emb if config.branch == "adapt_video" else sample.title_emb
    aux = _aux_tokens(sample, list(sample.comment_embs))
    psi_all = l2_normalize(adapt(primary, aux, None, params).vector)
    scores = []
    for k in range(sample.n_comments):
        mask = [i != k for i in range(len(aux))]
        psi_minus = l2_normalize(adapt(primary, aux, mask, params).vector)
        scores.append((k, float(psi_all @ psi_minus)))
    return sorted(scores, key=lambda pair: (pair[1], pair[0]))
