"""The curriculum teacher: utility prediction, selection, online refinement.

The teacher regresses each question's utility — the Bernoulli reward
standard deviation sqrt(p(1-p)) of the student's current success
probability — from the question's observable features. Its prediction head
is a linear map plus a sigmoid scaled to (0, 0.5), the valid range of that
standard deviation. Selection is epsilon-greedy over a small uniformly
sampled candidate pool; feedback targets go through a sliding-window replay
buffer, and the predictor is refit by mini-batch gradient descent on MSE
every ``update_every`` feedback records.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from goldilocks import backends, grpo
from goldilocks.grpo import RolloutGroup
from goldilocks.students import Question

log = logging.getLogger(__name__)

POOLING_MODES = ("mean", "last_position")
CHECKPOINT_VERSION = 1


class InsufficientCandidatesError(ValueError):
    """Dataset smaller than the candidate pool size."""


@dataclass
class TeacherModel:
    """Feature encoder plus scaled-sigmoid utility head.

    The encoder is one tanh layer whose output is viewed as ``positions``
    embedding rows; those rows are pooled (mean, or last row only) before
    the linear head, mirroring the pooling choice a sequence encoder would
    face. Predictions lie strictly inside (0, 0.5) for finite inputs (up to
    float64 rounding, which saturates the sigmoid beyond |logit| ~ 37).
    """

    encoder_weights: np.ndarray  # (positions * embed_dim, feature_dim)
    encoder_bias: np.ndarray     # (positions * embed_dim,)
    head_weights: np.ndarray     # (embed_dim,)
    head_bias: float
    pooling: str = "mean"
    positions: int = 4
    version: int = 0

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        if self.encoder_weights.shape[0] != self.positions * self.head_weights.shape[0]:
            raise ValueError("encoder rows must equal positions * embed_dim")

    @classmethod
    def initialize(cls, feature_dim: int, *, embed_dim: int = 16, positions: int = 4,
                   pooling: str = "mean", seed: int = 0) -> "TeacherModel":
        """Random encoder, zero head: every initial prediction is exactly 0.25."""
        rng = np.random.default_rng([seed])
        rows = positions * embed_dim
        return cls(
            encoder_weights=rng.normal(0.0, 1.0 / np.sqrt(feature_dim), (rows, feature_dim)),
            encoder_bias=np.zeros(rows),
            head_weights=np.zeros(embed_dim),
            head_bias=0.0,
            pooling=pooling,
            positions=positions,
        )

    @property
    def feature_dim(self) -> int:
        return self.encoder_weights.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.head_weights.shape[0]

    def predict_batch(self, feats: np.ndarray) -> np.ndarray:
        feats = np.ascontiguousarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.feature_dim:
            raise ValueError(
                f"feature matrix shape {feats.shape} does not match encoder "
                f"feature_dim {self.feature_dim}"
            )
        return backends.teacher_predict(
            feats, self.encoder_weights, self.encoder_bias,
            self.head_weights, self.head_bias,
            self.positions, self.pooling == "mean",
        )

    def parameter_blocks(self):
        return self.encoder_weights, self.encoder_bias, self.head_weights


def predict_utility(model: TeacherModel, q: Question) -> float:
    """Predicted utility of one question, strictly inside (0, 0.5)."""
    return float(model.predict_batch(q.features[None, :])[0])


def save_teacher(model: TeacherModel, path) -> None:
    """Versioned, deterministic JSON checkpoint (floats round-trip exactly)."""
    record = {
        "format_version": CHECKPOINT_VERSION,
        "pooling": model.pooling,
        "positions": model.positions,
        "embed_dim": model.embed_dim,
        "feature_dim": model.feature_dim,
        "version": model.version,
        "encoder_weights": model.encoder_weights.tolist(),
        "encoder_bias": model.encoder_bias.tolist(),
        "head_weights": model.head_weights.tolist(),
        "head_bias": model.head_bias,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, separators=(",", ":"))
        fh.write("\n")


def load_teacher(path) -> TeacherModel:
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    if record.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format_version {record.get('format_version')}"
        )
    model = TeacherModel(
        encoder_weights=np.asarray(record["encoder_weights"], dtype=np.float64),
        encoder_bias=np.asarray(record["encoder_bias"], dtype=np.float64),
        head_weights=np.asarray(record["head_weights"], dtype=np.float64),
        head_bias=float(record["head_bias"]),
        pooling=record["pooling"],
        positions=int(record["positions"]),
        version=int(record["version"]),
    )
    if model.feature_dim != record["feature_dim"] or model.embed_dim != record["embed_dim"]:
        raise ValueError("checkpoint dimensions are inconsistent")
    return model


@dataclass
class TeacherConfig:
    candidate_size: int = 8
    epsilon: float = 0.2
    replay_capacity: int = 64
    update_every: int = 4
    epochs_per_update: int = 4
    batch_size: int = 8
    learn_rate: float = 1e-3
    momentum: float = 0.0
    # Accepted for interface compatibility with the selection policy's
    # declared inputs, but unused: selection is pure argmax / uniform.
    temperature_tau: float = 1.0
    embed_dim: int = 16
    positions: int = 4
    pooling: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        for name in ("candidate_size", "replay_capacity", "update_every",
                     "epochs_per_update", "batch_size", "embed_dim", "positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learn_rate <= 0:
            raise ValueError("learn_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class ReplaySample:
    question_id: int
    features: np.ndarray
    target: float
    inserted_at: int


class ReplayBuffer:
    """Sliding window of (question, empirical utility target) pairs."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._samples: deque[ReplaySample] = deque(maxlen=capacity)
        self._inserted = 0

    def __len__(self) -> int:
        return len(self._samples)

    def push(self, question: Question, target: float) -> ReplaySample:
        sample = ReplaySample(
            question_id=question.id,
            features=question.features,
            target=target,
            inserted_at=self._inserted,
        )
        self._inserted += 1
        self._samples.append(sample)
        return sample

    def samples(self) -> list[ReplaySample]:
        return list(self._samples)


def record_feedback(buffer: ReplayBuffer, q: Question, group: RolloutGroup) -> ReplaySample:
    """Turn a rollout group into a replay target sqrt(p_hat * (1 - p_hat))."""
    if group.question_id != q.id:
        raise ValueError("rollout group does not belong to this question")
    p_hat = float(group.rewards_ver.sum()) / group.group_size
    return buffer.push(q, grpo.utility_score(p_hat))


# ---------------------------------------------------------------------------
# selection


@dataclass
class SelectionOutcome:
    question: Question
    candidates: list[Question]
    predictions: np.ndarray
    explored: bool


def sample_candidates(dataset: list[Question], k: int, rng: np.random.Generator):
    if len(dataset) < k:
        raise InsufficientCandidatesError(
            f"dataset of {len(dataset)} questions cannot fill a candidate pool of {k}"
        )
    idx = rng.choice(len(dataset), size=k, replace=False)
    return [dataset[i] for i in idx]

def select_detailed(model: TeacherModel, dataset: list[Question],
                    cfg: TeacherConfig, rng: np.random.Generator) -> SelectionOutcome:
    """Epsilon-greedy selection over a fresh uniform candidate pool.

    RNG consumption order is fixed (candidates, epsilon draw, uniform pick)
    so that seeded runs are reproducible wherever selection happens.
    """
    candidates = sample_candidates(dataset, cfg.candidate_size, rng)
    feats = np.stack([c.features for c in candidates])
    predictions = model.predict_batch(feats)
    explore = float(rng.random()) < cfg.epsilon
    pick = int(rng.integers(cfg.candidate_size))
    if not explore:
        best = np.flatnonzero(predictions == predictions.max())
        pick = int(min(best, key=lambda i: candidates[i].id))
    return SelectionOutcome(question=candidates[pick], candidates=candidates,
                            predictions=predictions, explored=explore)


def select_query(model: TeacherModel, dataset: list[Question],
                 cfg: TeacherConfig, rng: np.random.Generator) -> Question:
    return select_detailed(model, dataset, cfg, rng).question


def prediction_stats(model: TeacherModel, candidates: list[Question]):
    """Mean and population std of predictions over a candidate list."""
    if not candidates:
        raise ValueError("candidate list must be non-empty")
    preds = model.predict_batch(np.stack([c.features for c in candidates]))
    return float(preds.mean()), float(preds.std())


# ---------------------------------------------------------------------------
# refinement


@dataclass
class UpdateReport:
    update_index: int
    buffer_size: int
    epoch_mse: list[float]
    val_mae: float | None
    n_unseen: int
    skipped: bool = False


def update_model(model: TeacherModel, buffer: ReplayBuffer, cfg: TeacherConfig,
                 rng: np.random.Generator, seen_keys: set,
                 velocities: dict | None = None, update_index: int = 0) -> UpdateReport:
    """One refinement cycle: shuffle the buffer once, then run
    ``epochs_per_update`` epochs of mini-batch gradient descent on MSE.

    During the first epoch, absolute errors are collected on samples whose
    (question_id, inserted_at) key never appeared in a previous cycle; their
    mean is the online validation score reported as ``val_mae``.
    """
    samples = buffer.samples()
    if not samples:
        log.warning("teacher update triggered with an empty replay buffer; skipping")
        return UpdateReport(update_index=update_index, buffer_size=0, epoch_mse=[],
                            val_mae=None, n_unseen=0, skipped=True)
    order = rng.permutation(len(samples))
    feats = np.stack([samples[i].features for i in order])
    targets = np.array([samples[i].target for i in order])
    keys = [(samples[i].question_id, samples[i].inserted_at) for i in order]
    unseen = np.array([k not in seen_keys for k in keys])

    batches = [slice(i, i + cfg.batch_size) for i in range(0, len(samples), cfg.batch_size)]
    epoch_mse = []
    abs_errors = []
    for epoch in range(cfg.epochs_per_update):
        sq_sum = 0.0
        for batch in batches:
            x, y = feats[batch], targets[batch]
            preds, mse, g_ew, g_eb, g_hw, g_hb = backends.teacher_batch_grads(
                x, y, model.encoder_weights, model.encoder_bias,
                model.head_weights, model.head_bias,
                model.positions, model.pooling == "mean",
            )
            if epoch == 0:
                mask = unseen[batch]
                if mask.any():
                    abs_errors.extend(np.abs(preds - y)[mask])
            sq_sum += mse * len(y)
            steps = {"encoder_weights": cfg.learn_rate * g_ew,
                     "encoder_bias": cfg.learn_rate * g_eb,
                     "head_weights": cfg.learn_rate * g_hw,
                     "head_bias": cfg.learn_rate * g_hb}
            if cfg.momentum > 0.0 and velocities is not None:
                for name, step in steps.items():
                    prev = velocities.get(name)
                    steps[name] = step if prev is None else cfg.momentum * prev + step
                velocities.update(steps)
            model.encoder_weights -= steps["encoder_weights"]
            model.encoder_bias -= steps["encoder_bias"]
            model.head_weights -= steps["head_weights"]
            model.head_bias -= steps["head_bias"]
        epoch_mse.append(sq_sum / len(samples))
    seen_keys.update(keys)
    model.version += 1
    val_mae = float(np.mean(abs_errors)) if abs_errors else None
    return UpdateReport(update_index=update_index, buffer_size=len(samples),
                        epoch_mse=epoch_mse, val_mae=val_mae,
                        n_unseen=int(unseen.sum()))


def maybe_update(model: TeacherModel, buffer: ReplayBuffer, cfg: TeacherConfig,
                 samples_since_update: int, rng: np.random.Generator,
                 seen_keys: set, velocities: dict | None = None,
                 update_index: int = 0):
    """Run a refinement cycle if enough feedback accumulated since the last."""
    if samples_since_update < cfg.update_every:
        return model, None
    report = update_model(model, buffer, cfg, rng, seen_keys,
                          velocities=velocities, update_index=update_index)
    return model, report


# ---------------------------------------------------------------------------
# coordinator: the single logical teacher actor


class GoldilocksCoordinator:
    """Owns the teacher model, buffer, and selection RNG for one experiment.

    Both the in-process training loop and the network server drive the same
    coordinator methods, which is what makes the two execution modes produce
    identical metrics. ``record`` deliberately returns the validation MAE of
    the most recently *completed* refinement before a new one can run
    (updates are triggered separately via ``run_pending_update`` after the
    feedback has been acknowledged).
    """

    def __init__(self, model: TeacherModel, dataset: list[Question],
                 cfg: TeacherConfig, selection_seed: int, update_seed: int):
        self.model = model
        self.dataset = dataset
        self.by_id = {q.id: q for q in dataset}
        self.cfg = cfg
        self.selection_rng = np.random.default_rng([selection_seed])
        # sub-stream 1: stream 0 of the same seed is the model initializer
        self.update_rng = np.random.default_rng([update_seed, 1])
        self.buffer = ReplayBuffer(cfg.replay_capacity)
        self.samples_since_update = 0
        self.seen_keys: set = set()
        self.velocities: dict = {}
        self.selection_count = 0
        self.feedback_count = 0
        self.update_count = 0
        self.last_report: UpdateReport | None = None
        self.lock = threading.Lock()

    def select(self):
        """Pick a question; returns (question, mu, sigma, model_version)."""
        outcome = select_detailed(self.model, self.dataset, self.cfg, self.selection_rng)
        self.selection_count += 1
        mu = float(outcome.predictions.mean())
        sigma = float(outcome.predictions.std())
        return outcome.question, mu, sigma, self.model.version

    def record(self, question_id: int, rewards_ver) -> float | None:
        """Store feedback; returns the last completed update's val MAE."""
        q = self.by_id.get(question_id)
        if q is None:
            raise KeyError(f"unknown question id {question_id}")
        rewards_ver = np.asarray(rewards_ver, dtype=np.int64)
        group = RolloutGroup(
            question_id=question_id,
            rewards_ver=rewards_ver,
            rewards_format=np.zeros(rewards_ver.shape[0]),
            group_size=rewards_ver.shape[0],
        )
        record_feedback(self.buffer, q, group)
        self.feedback_count += 1
        self.samples_since_update += 1
        return self.last_report.val_mae if self.last_report else None

    def run_pending_update(self) -> UpdateReport | None:
        # subtract the trigger quantum rather than resetting: feedback that
        # arrived from another connection while an update was pending still
        # counts toward the next one
        report = None
        while self.samples_since_update >= self.cfg.update_every:
            _, rep = maybe_update(
                self.model, self.buffer, self.cfg, self.samples_since_update,
                self.update_rng, self.seen_keys, velocities=self.velocities,
                update_index=self.update_count,
            )
            if rep is None:
                break
            self.samples_since_update -= self.cfg.update_every
            self.update_count += 1
            self.last_report = rep
            report = rep
        return report
