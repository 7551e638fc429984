"""Embedding storage: manifest/blob ingestion, dedup, synthetic worlds, batching.

On-disk layout is a JSON-lines manifest plus a flat blob of little-endian
float32 vectors. The header line declares {d, count, blob_file}; every
following line is one sample record whose offsets index vectors (byte offset
= index * d * 4). In memory everything is float64 and unit-norm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numerics import l2_normalize

# Share of irrelevant synthetic comments drawn from the generic-phrase pool
# (the rest are fresh random directions). Pool phrases recur across samples,
# so a trained adapter can learn to discount them.
GENERIC_COMMENT_POOL_SHARE = 0.75


@dataclass
class Sample:
    """One item: primary embeddings plus a variable set of comment embeddings.

    relevance_flags and title_generic exist only for synthetic data, where the
    generator knows which comments actually describe the underlying topic.
    """

    id: str
    title_emb: np.ndarray
    video_emb: np.ndarray
    comment_embs: list[np.ndarray] = field(default_factory=list)
    audio_emb: np.ndarray | None = None
    relevance_flags: list[bool] | None = None
    title_text: str | None = None
    title_generic: bool | None = None

    @property
    def n_comments(self) -> int:
        return len(self.comment_embs)


@dataclass
class DatasetStore:
    """Immutable-after-construction collection of dimension-consistent samples."""

    d: int
    samples: list[Sample]
    split: str = "train"

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for s in self.samples:
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            vecs = [s.title_emb, s.video_emb, *s.comment_embs]
            if s.audio_emb is not None:
                vecs.append(s.audio_emb)
            for v in vecs:
                if v.shape != (self.d,):
                    raise ValueError(
                        f"sample {s.id!r}: vector shape {v.shape} != ({self.d},)"
                    )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(f"unknown sample id {sample_id!r}")

    def title_matrix(self) -> np.ndarray:
        return np.stack([s.title_emb for s in self.samples])

    def video_matrix(self) -> np.ndarray:
        return np.stack([s.video_emb for s in self.samples])


class IngestError(ValueError):
    """Manifest or blob violates the storage schema."""


# -----------------------------------------------------------------------------
# Manifest / blob round trip
# -----------------------------------------------------------------------------


def export_store(store: DatasetStore, manifest_path: str | Path) -> None:
    """Write ``store`` as a manifest + float32 blob next to it.

    Vectors are quantized to little-endian float32; records are marked
    normalized=true because stores hold unit vectors by construction.
    """
    manifest_path = Path(manifest_path)
    blob_name = manifest_path.stem + ".blob.bin"
    blob_path = manifest_path.parent / blob_name
    vectors: list[np.ndarray] = []

    def push(vec: np.ndarray) -> int:
        vectors.append(vec)
        return len(vectors) - 1

    records = []
    for s in store.samples:
        offsets: dict = {
            "title": push(s.title_emb),
            "video": push(s.video_emb),
            "comments": [push(c) for c in s.comment_embs],
        }
        if s.audio_emb is not None:
            offsets["audio"] = push(s.audio_emb)
        rec = {"id": s.id, "split": store.split, "offsets": offsets, "normalized": True}
        if s.title_text is not None:
            rec["title_text"] = s.title_text
        if s.relevance_flags is not None:
            rec["relevance_flags"] = list(s.relevance_flags)
        if s.title_generic is not None:
            rec["title_generic"] = s.title_generic
        records.append(rec)

    header = {"d": store.d, "count": len(records), "blob_file": blob_name}
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    with manifest_path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    flat = np.concatenate([v.astype("<f4") for v in vectors]) if vectors else np.empty(0, "<f4")
    blob_path.write_bytes(flat.tobytes())


def ingest(manifest_path: str | Path, split_filter: str | None = None) -> DatasetStore:
    """Load a manifest + blob into a DatasetStore.

    Vectors flagged normalized=false are L2-normalized on load; every stored
    embedding therefore has unit norm (up to float32 quantization of already
    normalized inputs). Records failing schema checks abort with the offending
    record id in the message.
    """
    manifest_path = Path(manifest_path)
    with manifest_path.open("r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise IngestError(f"{manifest_path}: empty manifest")
    header = json.loads(lines[0])
    for key in ("d", "count", "blob_file"):
        if key not in header:
            raise IngestError(f"{manifest_path}: header missing {key!r}")
    d = int(header["d"])
    blob_path = manifest_path.parent / header["blob_file"]
    if not blob_path.exists():
        raise IngestError(f"{manifest_path}: blob file {blob_path} not found")
    raw = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    if raw.size % d != 0:
        raise IngestError(
            f"{blob_path}: blob length {raw.size} floats is not a multiple of d={d}"
        )
    n_vectors = raw.size // d
    table = raw.reshape(n_vectors, d).astype(np.float64)

    def fetch(record_id: str, index: int, normalized: bool) -> np.ndarray:
        if not (0 <= index < n_vectors):
            raise IngestError(
                f"record {record_id!r}: vector index {index} outside blob "
                f"(have {n_vectors} vectors)"
            )
        vec = table[index].copy()
        if not normalized:
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise IngestError(f"record {record_id!r}: zero vector at index {index}")
            vec /= norm
        return vec

    record_lines = lines[1:]
    if len(record_lines) != int(header["count"]):
        raise IngestError(
            f"{manifest_path}: header count {header['count']} != {len(record_lines)} records"
        )
    samples: list[Sample] = []
    seen: set[str] = set()
    splits: set[str] = set()
    for ln in record_lines:
        rec = json.loads(ln)
        rid = rec.get("id")
        if rid is None:
            raise IngestError(f"{manifest_path}: record without id: {ln[:80]}")
        if split_filter is not None and rec.get("split") != split_filter:
            continue
        if rid in seen:
            raise IngestError(f"record {rid!r}: duplicate id")
        seen.add(rid)
        splits.add(rec.get("split", "train"))
        offsets = rec.get("offsets")
        if not isinstance(offsets, dict) or "title" not in offsets or "video" not in offsets:
            raise IngestError(f"record {rid!r}: offsets must contain title and video")
        normalized = bool(rec.get("normalized", False))
        sample = Sample(
            id=rid,
            title_emb=fetch(rid, int(offsets["title"]), normalized),
            video_emb=fetch(rid, int(offsets["video"]), normalized),
            comment_embs=[fetch(rid, int(i), normalized) for i in offsets.get("comments", [])],
            audio_emb=(
                fetch(rid, int(offsets["audio"]), normalized) if "audio" in offsets else None
            ),
            relevance_flags=(
                [bool(b) for b in rec["relevance_flags"]]
                if "relevance_flags" in rec
                else None
            ),
            title_text=rec.get("title_text"),
            title_generic=rec.get("title_generic"),
        )
        samples.append(sample)
    split = split_filter or (splits.pop() if len(splits) == 1 else "mixed")
    return DatasetStore(d=d, samples=samples, split=split)


# -----------------------------------------------------------------------------
# Near-duplicate filtering
# -----------------------------------------------------------------------------


def deduplicate(store: DatasetStore, threshold: float) -> DatasetStore:
    """Greedy first-wins scan: drop a sample iff its video embedding has
    cosine >= threshold with any earlier retained sample. Order-preserving
    and idempotent."""
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"dedup threshold must be in (0, 1], got {threshold}")
    kept: list[Sample] = []
    kept_rows: list[np.ndarray] = []
    for s in store.samples:
        v = s.video_emb / np.linalg.norm(s.video_emb)
        if kept_rows:
            sims = np.stack(kept_rows) @ v
            if float(sims.max()) >= threshold:
                continue
        kept.append(s)
        kept_rows.append(v)
    return DatasetStore(d=store.d, samples=kept, split=store.split)


# -----------------------------------------------------------------------------
# Synthetic world
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for a ground-truth synthetic corpus.

    Each sample has a latent topic on the unit sphere; titles are either noisy
    copies of the topic or drawn from a small shared pool of generic phrases
    (so that comments are *necessary* to disambiguate them), and comments are
    a mix of noisy topic copies (flagged relevant) and generic/random vectors
    (flagged irrelevant).
    """

    d: int = 32
    n_train: int = 2000
    n_test: int = 500
    comments_per_sample: int = 4
    sigma_video: float = 0.1
    sigma_title: float = 0.12
    sigma_comment: float = 0.3
    p_ambiguous_title: float = 0.5
    p_relevant_comment: float = 0.6
    n_generic_phrases: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d < 2:
            raise ValueError("d must be >= 2")
        for name in ("sigma_video", "sigma_title", "sigma_comment"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("p_ambiguous_title", "p_relevant_comment"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must be in [0, 1]")
        if self.n_generic_phrases < 1:
            raise ValueError("n_generic_phrases must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        return cls(**data)


def _sphere_point(rng: np.random.Generator, d: int) -> np.ndarray:
    return l2_normalize(rng.standard_normal(d))


def _noisy_copy(rng: np.random.Generator, z: np.ndarray, sigma: float) -> np.ndarray:
    return l2_normalize(z + sigma * rng.standard_normal(z.shape[0]))


def synth_generate(config: SynthConfig) -> tuple[DatasetStore, DatasetStore]:
    """Generate (train, test) stores, bitwise reproducible in config.seed."""
    rng = np.random.default_rng(config.seed)
    pool = np.stack([_sphere_point(rng, config.d) for _ in range(config.n_generic_phrases)])

    def make_split(split: str, count: int) -> DatasetStore:
        samples = []
        for i in range(count):
            z = _sphere_point(rng, config.d)
            video = _noisy_copy(rng, z, config.sigma_video)
            generic_title = rng.random() < config.p_ambiguous_title
            if generic_title:
                phrase = int(rng.integers(config.n_generic_phrases))
                title = pool[phrase].copy()
                title_text = f"generic phrase {phrase}"
            else:
                title = _noisy_copy(rng, z, config.sigma_title)
                title_text = f"topic title {split}-{i:05d}"
            comments: list[np.ndarray] = []
            flags: list[bool] = []
            for _ in range(config.comments_per_sample):
                if rng.random() < config.p_relevant_comment:
                    comments.append(_noisy_copy(rng, z, config.sigma_comment))
                    flags.append(True)
                else:
                    if rng.random() < GENERIC_COMMENT_POOL_SHARE:
                        comments.append(pool[int(rng.integers(config.n_generic_phrases))].copy())
                    else:
                        comments.append(_sphere_point(rng, config.d))
                    flags.append(False)
            samples.append(
                Sample(
                    id=f"{split}-{i:05d}",
                    title_emb=title,
                    video_emb=video,
                    comment_embs=comments,
                    relevance_flags=flags,
                    title_text=title_text,
                    title_generic=generic_title,
                )
            )
        return DatasetStore(d=config.d, samples=samples, split=split)

    return make_split("train", config.n_train), make_split("test", config.n_test)


# -----------------------------------------------------------------------------
# Batch sampling
# -----------------------------------------------------------------------------


@dataclass
class Batch:
    """Sample references plus the effective per-comment keep mask.

    comment_masks[i][k] is True iff comment k of sample indices[i] stays
    active after comment dropout and the max-comments cap.
    """

    store: DatasetStore
    indices: list[int]
    comment_masks: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.indices) < 2:
            raise ValueError("contrastive batches need at least 2 samples")
        if len(self.comment_masks) != len(self.indices):
            raise ValueError("comment_masks must align with indices")

    def __len__(self) -> int:
        return len(self.indices)

    def sample_ids(self) -> list[str]:
        return [self.store.samples[i].id for i in self.indices]


def _draw_comment_mask(
    sample: Sample,
    rng: np.random.Generator,
    mask_prob: float,
    max_comments: int | None,
) -> np.ndarray:
    m = sample.n_comments
    mask = np.ones(m, dtype=bool)
    if max_comments is not None and m > max_comments:
        chosen = rng.choice(m, size=max_comments, replace=False)
        mask = np.zeros(m, dtype=bool)
        mask[np.sort(chosen)] = True
    if mask_prob > 0.0:
        mask &= rng.random(m) >= mask_prob
    return mask


def batch_sample(
    store: DatasetStore,
    batch_size: int,
    rng: np.random.Generator,
    mask_prob: float = 0.0,
    max_comments: int | None = None,
) -> Batch:
    """Draw one batch uniformly without replacement, with comment dropout."""
    if batch_size > len(store):
        raise ValueError(f"batch size {batch_size} > store size {len(store)}")
    if batch_size < 2:
        raise ValueError("batch size must be >= 2")
    indices = [int(i) for i in rng.permutation(len(store))[:batch_size]]
    masks = [
        _draw_comment_mask(store.samples[i], rng, mask_prob, max_comments) for i in indices
    ]
    return Batch(store=store, indices=indices, comment_masks=masks)


def epoch_batches(
    store: DatasetStore,
    batch_size: int,
    rng: np.random.Generator,
    mask_prob: float = 0.0,
    max_comments: int | None = None,
) -> Iterator[Batch]:
    """One full shuffled pass in consecutive chunks; trailing chunks smaller
    than 2 are dropped (contrastive loss is degenerate at B=1)."""
    if batch_size < 2:
        raise ValueError("batch size must be >= 2")
    order = rng.permutation(len(store))
    for start in range(0, len(order), batch_size):
        chunk = [int(i) for i in order[start : start + batch_size]]
        if len(chunk) < 2:
            continue
        masks = [
            _draw_comment_mask(store.samples[i], rng, mask_prob, max_comments) for i in chunk
        ]
        yield Batch(store=store, indices=chunk, comment_masks=masks)
