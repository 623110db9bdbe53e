"""Experiment orchestration: curriculum arm vs uniform baseline.

Both arms run the identical six-stage cycle per selected prompt — sample a
question, roll out a group, compute advantages, feed the outcome back,
accumulate the student update, log metrics — differing only in where the
question comes from. The baseline samples uniformly and never constructs a
teacher. One metrics record is written per selected prompt.

Because the baseline arm forgoes the resources a teacher would consume, a
fair comparison aligns curriculum step n with baseline step
round(compute_ratio * n); ``normalized_compare`` performs that alignment.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from goldilocks import grpo, protocol, students
from goldilocks.grpo import LossConfig, RewardConfig
from goldilocks.students import IrtStudent, PolicyStudent, Question
from goldilocks.teacher import GoldilocksCoordinator, TeacherConfig, TeacherModel

MODES = ("goldilocks", "baseline")

CSV_COLUMNS = (
    "step", "mean_reward", "reward_std", "zero_variance_flag", "grad_norm",
    "teacher_mu", "teacher_sigma", "teacher_val_mae", "validation_accuracy",
)


class AlignmentError(ValueError):
    """Baseline run too short for the requested step alignment."""


@dataclass
class MetricsRecord:
    """One training-dynamics row, per selected prompt."""

    step: int
    mean_reward: float
    reward_std: float
    zero_variance_flag: int
    grad_norm: float
    teacher_mu: float = math.nan
    teacher_sigma: float = math.nan
    teacher_val_mae: float = math.nan
    validation_accuracy: float = math.nan


def _format_cell(value) -> str:
    if isinstance(value, int):
        return str(value)
    if math.isnan(value):
        return ""
    return repr(float(value))


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in records:
            fh.write(",".join(_format_cell(getattr(r, c)) for c in CSV_COLUMNS) + "\n")


class MetricsWriter:
    """Append-only metrics stream, flushed after every step's rows.

    Produces byte-identical output to ``write_metrics_csv`` on the same
    records.
    """

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._fh.write(",".join(CSV_COLUMNS) + "\n")

    def extend(self, records: list[MetricsRecord]) -> None:
        for r in records:
            self._fh.write(",".join(_format_cell(getattr(r, c))
                                    for c in CSV_COLUMNS) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics_csv(path) -> list[MetricsRecord]:
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        for line in fh:
            cells = line.rstrip("\n").split(",")
            values = dict(zip(CSV_COLUMNS, cells))
            records.append(MetricsRecord(
                step=int(values["step"]),
                mean_reward=float(values["mean_reward"]),
                reward_std=float(values["reward_std"]),
                zero_variance_flag=int(values["zero_variance_flag"]),
                grad_norm=float(values["grad_norm"]),
                teacher_mu=float(values["teacher_mu"]) if values["teacher_mu"] else math.nan,
                teacher_sigma=float(values["teacher_sigma"]) if values["teacher_sigma"] else math.nan,
                teacher_val_mae=float(values["teacher_val_mae"]) if values["teacher_val_mae"] else math.nan,
                validation_accuracy=(float(values["validation_accuracy"])
                                     if values["validation_accuracy"] else math.nan),
            ))
    return records


# ---------------------------------------------------------------------------
# smoothing


@dataclass
class SmoothedSeries:
    """Exponential moving average with s_0 = x_0 and
    s_t = alpha * s_{t-1} + (1 - alpha) * x_t."""

    alpha: float = 0.9
    values: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")

    def push(self, x: float) -> float:
        s = x if not self.values else self.alpha * self.values[-1] + (1 - self.alpha) * x
        self.values.append(s)
        return s


def ema(values, alpha: float = 0.9) -> np.ndarray:
    series = SmoothedSeries(alpha=alpha)
    for x in values:
        series.push(float(x))
    return np.asarray(series.values)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetSettings:
    kind: str = "irt"
    size: int = 10000
    feature_dim: int = 8
    noise_sigma: float = 0.25
    difficulty_dist: str = "uniform"
    difficulty_low: float = -3.0
    difficulty_high: float = 7.0
    difficulty_mean: float = 0.0
    difficulty_sd: float = 1.0
    vocab: int = 10

    def generate(self, seed, n: int | None = None) -> list[Question]:
        return students.generate_dataset(
            self.kind, self.size if n is None else n, seed,
            feature_dim=self.feature_dim, noise_sigma=self.noise_sigma,
            difficulty_dist=self.difficulty_dist,
            difficulty_low=self.difficulty_low, difficulty_high=self.difficulty_high,
            difficulty_mean=self.difficulty_mean, difficulty_sd=self.difficulty_sd,
            vocab=self.vocab,
        )


@dataclass
class StudentSettings:
    kind: str = "irt"
    skill: float = 0.0
    discrimination: float = 1.0
    learn_rate: float = 0.01
    seq_len: int = 1
    temperature_train: float = 0.7
    temperature_eval: float = 0.0
    init_scale: float = 0.5

    def build(self, feature_dim: int, vocab: int, seed: int):
        if self.kind == "irt":
            return IrtStudent(skill=self.skill, discrimination=self.discrimination,
                              learn_rate=self.learn_rate)
        if self.kind == "policy":
            return PolicyStudent.initialize(
                feature_dim, vocab, seed, init_scale=self.init_scale,
                seq_len=self.seq_len, temperature_train=self.temperature_train,
                temperature_eval=self.temperature_eval, learn_rate=self.learn_rate,
            )
        raise ValueError("student kind must be 'irt' or 'policy'")


@dataclass
class SeedSettings:
    dataset: int = 1
    student: int = 2
    teacher: int = 3
    selection: int = 4

    def __post_init__(self):
        for name in ("dataset", "student", "teacher", "selection"):
            if getattr(self, name) < 0:
                raise ValueError(f"seeds.{name} must be >= 0")

    @classmethod
    def from_base(cls, base: int) -> "SeedSettings":
        return cls(dataset=base, student=base + 1, teacher=base + 2, selection=base + 3)


@dataclass
class ProtocolSettings:
    host: str = "127.0.0.1"
    port: int = 8641
    timeout: float = 30.0


@dataclass
class ExperimentConfig:
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    student: StudentSettings = field(default_factory=StudentSettings)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    seeds: SeedSettings = field(default_factory=SeedSettings)
    protocol: ProtocolSettings = field(default_factory=ProtocolSettings)
    group_size: int = 16
    batch_size: int = 12
    total_steps: int = 2000
    compute_ratio: Fraction = Fraction(8, 6)
    eval_every: int = 200
    validation_size: int = 500

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        for name in ("batch_size", "total_steps", "eval_every", "validation_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.compute_ratio < 1:
            raise ValueError("compute_ratio must be >= 1")

    def train_questions(self) -> list[Question]:
        return self.dataset.generate([self.seeds.dataset, 0])

    def validation_questions(self) -> list[Question]:
        return self.dataset.generate([self.seeds.dataset, 1], n=self.validation_size)

    def build_student(self):
        return self.student.build(self.dataset.feature_dim, self.dataset.vocab,
                                  self.seeds.student)

    def baseline_steps(self) -> int:
        return int(round(self.compute_ratio * self.total_steps))


@dataclass
class RunResult:
    metrics: list[MetricsRecord]
    student: object
    teacher: TeacherModel | None = None
    coordinator: GoldilocksCoordinator | None = None


# ---------------------------------------------------------------------------
# sampling channels


class LocalGoldilocksChannel:
    """Drives a coordinator directly; mirrors the wire client's semantics."""

    def __init__(self, coordinator: GoldilocksCoordinator):
        self.coordinator = coordinator

    def request_sample(self):
        q, mu, sigma, _version = self.coordinator.select()
        return q, mu, sigma

    def send_feedback(self, question_id: int, rewards_ver) -> float | None:
        val_mae = self.coordinator.record(question_id, rewards_ver)
        self.coordinator.run_pending_update()
        return val_mae


class BaselineChannel:
    """Uniform sampling over the dataset; feedback goes nowhere."""

    def __init__(self, dataset: list[Question], selection_seed: int):
        self.dataset = dataset
        self.rng = np.random.default_rng([selection_seed])

    def request_sample(self):
        q = self.dataset[int(self.rng.integers(len(self.dataset)))]
        return q, math.nan, math.nan

    def send_feedback(self, question_id: int, rewards_ver):
        return None


# ---------------------------------------------------------------------------
# the training loop


def _rollout_for_variant(student, q, cfg: ExperimentConfig, step: int):
    """Roll out a group, resampling for the mixed-batch constraint if the
    clipped-surrogate variant demands it."""
    group, sampled = student.rollout(q, cfg.group_size, step, cfg.reward,
                                     cfg.seeds.student)
    if cfg.loss.variant == "dapo":
        attempt = 1
        while (not 0 < int(group.rewards_ver.sum()) < cfg.group_size
               and attempt < cfg.loss.dapo_max_resamples):
            group, sampled = student.rollout(q, cfg.group_size, step, cfg.reward,
                                             cfg.seeds.student, attempt=attempt)
            attempt += 1
    return group, sampled


def training_loop(student, channel, cfg: ExperimentConfig,
                  validation: list[Question],
                  on_step=None) -> list[MetricsRecord]:
    records: list[MetricsRecord] = []
    is_irt = isinstance(student, IrtStudent)
    for step in range(1, cfg.total_steps + 1):
        step_records = []
        contributions = []
        policy_old = None
        if not is_irt and cfg.loss.variant == "dapo":
            policy_old = dataclasses.replace(student, params=student.params.copy())
        for _ in range(cfg.batch_size):
            q, mu, sigma = channel.request_sample()
            group, sampled = _rollout_for_variant(student, q, cfg, step)
            adv = grpo.group_advantages(group)
            val_mae = channel.send_feedback(q.id, [int(x) for x in group.rewards_ver])
            if is_irt:
                increment = student.update_increment(adv)
                contributions.append(increment)
                grad_norm = increment
            elif cfg.loss.variant == "dapo" and not 0 < adv.empirical_p < 1:
                # resampling failed to produce a mixed group: no signal
                contributions.append(np.zeros_like(student.params))
                grad_norm = 0.0
            else:
                _, grad = student.update_contribution(sampled, adv, cfg.loss,
                                                      policy_old=policy_old)
                contributions.append(grad)
                grad_norm = float(np.linalg.norm(grad))
            step_records.append(MetricsRecord(
                step=step,
                mean_reward=float(group.total_rewards.mean()),
                reward_std=adv.group_std,
                zero_variance_flag=int(adv.group_std == 0.0),
                grad_norm=grad_norm,
                teacher_mu=mu,
                teacher_sigma=sigma,
                teacher_val_mae=math.nan if val_mae is None else val_mae,
            ))
        if is_irt:
            student.apply_increments(contributions)
        else:
            student.apply_gradients(contributions)
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            step_records[-1].validation_accuracy = student.evaluate(validation)
        records.extend(step_records)
        if on_step is not None:
            on_step(step_records)
    return records


def run_experiment(cfg: ExperimentConfig, mode: str, on_step=None) -> RunResult:
    """Run one arm; deterministic given the config's seeds."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    dataset = cfg.train_questions()
    validation = cfg.validation_questions()
    student = cfg.build_student()
    if mode == "baseline":
        channel = BaselineChannel(dataset, cfg.seeds.selection)
        metrics = training_loop(student, channel, cfg, validation, on_step=on_step)
        return RunResult(metrics=metrics, student=student)
    model = TeacherModel.initialize(
        cfg.dataset.feature_dim, embed_dim=cfg.teacher.embed_dim,
        positions=cfg.teacher.positions, pooling=cfg.teacher.pooling,
        seed=cfg.seeds.teacher,
    )
    coordinator = GoldilocksCoordinator(model, dataset, cfg.teacher,
                                        selection_seed=cfg.seeds.selection,
                                        update_seed=cfg.seeds.teacher)
    metrics = training_loop(student, LocalGoldilocksChannel(coordinator), cfg,
                            validation, on_step=on_step)
    return RunResult(metrics=metrics, student=student, teacher=model,
                     coordinator=coordinator)


def run_client_experiment(cfg: ExperimentConfig, host: str, port: int,
                          timeout: float | None = None,
                          transcript_path=None,
                          shutdown_server: bool = False,
                          on_step=None) -> RunResult:
    """Run the student side of the loop against a remote teacher."""
    validation = cfg.validation_questions()
    student = cfg.build_student()
    conn = protocol.ClientConnection(
        host, port, timeout=cfg.protocol.timeout if timeout is None else timeout,
        transcript_path=transcript_path,
    )
    try:
        metrics = training_loop(student, conn, cfg, validation, on_step=on_step)
        if shutdown_server:
            conn.shutdown_server()
    finally:
        conn.close()
    return RunResult(metrics=metrics, student=student)


# ---------------------------------------------------------------------------
# comparison


def aggregate_by_step(records: list[MetricsRecord]) -> dict[int, dict]:
    """Per-step means of the per-prompt metrics (nan-aware for teacher columns)."""
    by_step: dict[int, list[MetricsRecord]] = {}
    for r in records:
        by_step.setdefault(r.step, []).append(r)
    out = {}
    for step, rows in by_step.items():
        def nanmean(values):
            vals = [v for v in values if not math.isnan(v)]
            return float(np.mean(vals)) if vals else math.nan
        out[step] = {
            "mean_reward": float(np.mean([r.mean_reward for r in rows])),
            "reward_std": float(np.mean([r.reward_std for r in rows])),
            "zero_variance_fraction": float(np.mean([r.zero_variance_flag for r in rows])),
            "grad_norm": float(np.mean([r.grad_norm for r in rows])),
            "teacher_mu": nanmean([r.teacher_mu for r in rows]),
            "teacher_sigma": nanmean([r.teacher_sigma for r in rows]),
            "teacher_val_mae": nanmean([r.teacher_val_mae for r in rows]),
            "validation_accuracy": nanmean([r.validation_accuracy for r in rows]),
        }
    return out


def normalized_compare(goldilocks: list[MetricsRecord], baseline: list[MetricsRecord],
                       ratio: Fraction) -> list[dict]:
    """Pair curriculum step n with baseline step round(ratio * n)."""
    ratio = Fraction(ratio)
    gold_steps = sorted({r.step for r in goldilocks})
    base = aggregate_by_step(baseline)
    gold = aggregate_by_step(goldilocks)
    max_base = max(base)
    rows = []
    for n in gold_steps:
        m = int(round(ratio * n))
        if m > max_base:
            raise AlignmentError(
                f"baseline ends at step {max_base}, but aligning curriculum step "
                f"{n} needs baseline step {m}"
            )
        # the baseline has no step 0; a sub-one ratio product cannot occur (ratio >= 1)
        row = {"step_goldilocks": n, "step_baseline": m}
        for key, value in gold[n].items():
            row[f"goldilocks_{key}"] = value
        for key, value in base[m].items():
            row[f"baseline_{key}"] = value
        rows.append(row)
    return rows


def final_accuracy(records: list[MetricsRecord], last_k: int = 5) -> float:
    """Mean of the last ``last_k`` validation accuracies."""
    evals = [r.validation_accuracy for r in records
             if not math.isnan(r.validation_accuracy)]
    if len(evals) < last_k:
        raise ValueError(f"need at least {last_k} evaluations, have {len(evals)}")
    return float(np.mean(evals[-last_k:]))
