"""Training loop: per-sample adapter skipping, comment dropout, Adam updates,
checkpointing, and deterministic replay.

The whole trajectory is a pure function of (store bytes, config): every random
draw comes from one seeded generator in a fixed order, gradient accumulation
is sequential, and nothing time-dependent is written to checkpoints or the
metrics log, so identical runs produce bitwise-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adapter import AdapterConfig, AdapterParams, init_adapter
from .datamodel import DatasetStore, epoch_batches
from .objective import loss_and_grads

CHECKPOINT_MAGIC = b"CAMCKPT1"

BRANCHES = ("adapt_video", "adapt_title")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the offending batch ids."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent with expectations."""


@dataclass(frozen=True)
class TrainConfig:
    """All knobs of one training run.

    Exactly one branch is adapted per run; asking for anything other than the
    two single-branch values is rejected at validation, which is what rules
    out the both-sides degenerate solution. The default learning rate targets
    adapter-only training at desk scale.
    """

    branch: str = "adapt_title"
    temperature: float = 0.07
    mask_prob: float = 0.5
    skip_prob: float = 0.5
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 5
    max_comments: int = 5
    seed: int = 0
    pool_mode: str = "primary_token_linear"
    eval_every: int = 0
    skip_granularity: str = "per_sample"  # or "per_batch"
    adapter_blocks: int = 2
    adapter_heads: int = 8
    adapter_ff_width: int | None = None
    use_position_embeddings: bool = False

    def __post_init__(self) -> None:
        if self.branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {self.branch!r}")
        for name in ("mask_prob", "skip_prob"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must be in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.skip_granularity not in ("per_sample", "per_batch"):
            raise ValueError("skip_granularity must be per_sample or per_batch")

    def adapter_config(self, dim: int) -> AdapterConfig:
        return AdapterConfig(
            dim=dim,
            blocks=self.adapter_blocks,
            heads=self.adapter_heads,
            ff_width=self.adapter_ff_width,
            pool_mode=self.pool_mode,
            use_position_embeddings=self.use_position_embeddings,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# -----------------------------------------------------------------------------
# Adam
# -----------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Bias-corrected Adam accumulators over the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)


def adam_step(
    theta: np.ndarray,
    grad: np.ndarray,
    state: OptimizerState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam update; returns fresh arrays."""
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValueError("theta, grad and optimizer state shapes must agree")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    new_theta = theta - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return new_theta, OptimizerState(m=m, v=v, step=step)


# -----------------------------------------------------------------------------
# Checkpoint format: 8-byte magic, one JSON header line, float32 LE payload
# -----------------------------------------------------------------------------


def save_checkpoint(
    params: AdapterParams,
    state: OptimizerState,
    config: TrainConfig,
    path: str | Path,
) -> None:
    path = Path(path)
    names_shapes = [[name, list(arr.shape)] for name, arr in params.named_arrays()]
    theta = params.to_vector().astype("<f4")
    moments = np.concatenate([state.m, state.v]).astype("<f4")
    payload = theta.tobytes() + moments.tobytes()
    header = {
        "format_version": 1,
        "adapter_config": params.config.to_dict(),
        "train_config": config.to_dict(),
        "config_hash": config_hash(config),
        "branch": config.branch,
        "step": state.step,
        "seed": config.seed,
        "param_order": names_shapes,
        "n_params": int(theta.size),
        "payload_bytes": len(payload),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_checkpoint(
    path: str | Path, expected_config: TrainConfig | None = None
) -> tuple[AdapterParams, OptimizerState, dict]:
    """Read a checkpoint; returns (params, optimizer state, header).

    When expected_config is given, its hash must match the stored one; on
    mismatch the error lists every differing field.
    """
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    newline = blob.find(b"\n", len(CHECKPOINT_MAGIC))
    if newline < 0:
        raise CheckpointError(f"{path}: header line not terminated")
    header = json.loads(blob[len(CHECKPOINT_MAGIC) : newline].decode("utf-8"))
    payload = blob[newline + 1 :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)"
        )
    if expected_config is not None:
        stored = header["train_config"]
        expected = expected_config.to_dict()
        if config_hash(expected_config) != header["config_hash"]:
            mismatched = sorted(
                k
                for k in set(stored) | set(expected)
                if stored.get(k) != expected.get(k)
            )
            raise CheckpointError(
                f"{path}: config hash mismatch; differing fields: {mismatched}"
            )
    adapter_config = AdapterConfig.from_dict(header["adapter_config"])
    params = init_adapter(adapter_config, seed=0)
    n = header["n_params"]
    flat = np.frombuffer(payload, dtype="<f4")
    if flat.size != 3 * n:
        raise CheckpointError(f"{path}: payload holds {flat.size} floats, expected {3 * n}")
    params.from_vector(flat[:n].astype(np.float64))
    state = OptimizerState(
        m=flat[n : 2 * n].astype(np.float64),
        v=flat[2 * n : 3 * n].astype(np.float64),
        step=int(header["step"]),
    )
    return params, state, header


# -----------------------------------------------------------------------------
# Training loop
# -----------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    history: list[dict] = field(default_factory=list)

    def epoch_mean_losses(self) -> dict[int, float]:
        sums: dict[int, list[float]] = {}
        for rec in self.history:
            if "loss" in rec:
                sums.setdefault(rec["epoch"], []).append(rec["loss"])
        return {ep: float(np.mean(vals)) for ep, vals in sums.items()}


def train(
    store: DatasetStore,
    config: TrainConfig,
    out_dir: str | Path,
    eval_store: DatasetStore | None = None,
) -> TrainResult:
    """Run the full optimization and write checkpoint + metrics log.

    Per batch: draw per-sample (or per-batch) adapter-skip flags and
    per-comment dropout masks, compute loss and analytic gradients on the
    configured branch, apply one Adam step. A checkpoint is written at the end
    of every epoch; the metrics log is line-delimited JSON.
    """
    if len(store) == 0:
        raise ValueError("training store is empty")
    if config.batch_size > len(store):
        raise ValueError(
            f"batch_size {config.batch_size} exceeds store size {len(store)}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.ckpt"
    metrics_path = out_dir / "metrics.jsonl"

    rng = np.random.default_rng(config.seed)
    params = init_adapter(config.adapter_config(store.d), seed=config.seed)
    theta = params.to_vector()
    state = OptimizerState.zeros(theta.size)
    history: list[dict] = []
    step = 0

    with metrics_path.open("w", encoding="utf-8") as log:

        def emit(record: dict) -> None:
            history.append(record)
            log.write(json.dumps(record) + "\n")

        for epoch in range(config.epochs):
            for batch in epoch_batches(
                store,
                config.batch_size,
                rng,
                mask_prob=config.mask_prob,
                max_comments=config.max_comments,
            ):
                if config.skip_granularity == "per_batch":
                    skip_flags = [bool(rng.random() < config.skip_prob)] * len(batch)
                else:
                    skip_flags = list(rng.random(len(batch)) < config.skip_prob)
                loss, grads = loss_and_grads(
                    batch, params, config.branch, config.temperature, skip_flags
                )
                if not np.isfinite(loss.total):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}; batch ids: {batch.sample_ids()}"
                    )
                theta, state = adam_step(
                    theta,
                    grads.to_vector(),
                    state,
                    config.learning_rate,
                    config.adam_beta1,
                    config.adam_beta2,
                    config.adam_eps,
                )
                params.from_vector(theta)
                step += 1
                emit(
                    {
                        "step": step,
                        "epoch": epoch,
                        "loss": loss.total,
                        "video_to_text": loss.video_to_text,
                        "text_to_video": loss.text_to_video,
                    }
                )
                if (
                    config.eval_every > 0
                    and eval_store is not None
                    and step % config.eval_every == 0
                ):
                    from .retrieval import eval_bidirectional

                    report = eval_bidirectional(eval_store, params, "adapter", config)
                    emit({"step": step, "epoch": epoch, "eval": report.to_dict()})
            save_checkpoint(params, state, config, checkpoint_path)

    return TrainResult(
        checkpoint_path=checkpoint_path, metrics_path=metrics_path, history=history
    )
