"""Synthetic students and question datasets.

Two student backends stand in for an LLM policy:

* ``IrtStudent`` — an item-response-theory learner whose success
  probability on a question is ``sigmoid(a * (skill - difficulty))``. Every
  training quantity has a closed form, which makes it the workhorse for
  exact oracles and for the reference experiment.
* ``PolicyStudent`` — a linear-softmax policy over a small vocabulary,
  trained with real policy gradients. Its output space is enumerable, so
  success probabilities, entropies, and expected gradients are computable
  exactly.

Questions carry teacher-observable ``features`` and a hidden ``difficulty``;
the teacher only ever sees the features.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from goldilocks import grpo
from goldilocks.grpo import AdvantageSet, RewardConfig, RolloutGroup

DATASET_KINDS = ("irt", "arithmetic")


@dataclass(eq=False)
class Question:
    id: int
    features: np.ndarray
    difficulty: float
    payload: dict


@dataclass
class SampledGroup:
    """The G sampled output sequences for one question."""

    question: Question
    outputs: np.ndarray    # (G, T) token ids; (G, 0) for the IRT student
    log_probs: np.ndarray  # per-token log-probs under the sampling policy

    @property
    def question_id(self) -> int:
        return self.question.id


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# datasets


def generate_dataset(kind: str, n: int, seed: int, *, feature_dim: int = 8,
                     noise_sigma: float = 0.25, difficulty_dist: str = "uniform",
                     difficulty_low: float = -3.0, difficulty_high: float = 7.0,
                     difficulty_mean: float = 0.0, difficulty_sd: float = 1.0,
                     vocab: int = 10) -> list[Question]:
    """Deterministically generate a question set.

    ``irt``: hidden difficulties from the configured distribution;
    feature 0 is a noisy observation of the difficulty and the remaining
    dimensions are standard-normal distractors, so difficulty must be
    learned from features rather than read off.

    ``arithmetic``: questions are (a, b) pairs with answer
    ``(a + b) mod vocab``; features are a fixed random projection of
    one-hot(a) concatenated with one-hot(b).
    """
    if n <= 0:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    if kind not in DATASET_KINDS:
        raise ValueError(f"kind must be one of {DATASET_KINDS}")
    if feature_dim < 2:
        raise ValueError("feature_dim must be >= 2")
    rng = np.random.default_rng(seed)
    questions = []
    if kind == "irt":
        if difficulty_dist == "uniform":
            difficulties = rng.uniform(difficulty_low, difficulty_high, n)
        elif difficulty_dist == "normal":
            difficulties = rng.normal(difficulty_mean, difficulty_sd, n)
        else:
            raise ValueError("difficulty_dist must be 'uniform' or 'normal'")
        observed = difficulties + noise_sigma * rng.normal(0.0, 1.0, n)
        distractors = rng.normal(0.0, 1.0, (n, feature_dim - 1))
        for i in range(n):
            feats = np.concatenate(([observed[i]], distractors[i]))
            questions.append(Question(id=i, features=feats,
                                      difficulty=float(difficulties[i]), payload={}))
    else:
        projection = rng.normal(0.0, 1.0 / math.sqrt(2 * vocab), (feature_dim, 2 * vocab))
        a = rng.integers(0, vocab, n)
        b = rng.integers(0, vocab, n)
        for i in range(n):
            feats = projection[:, a[i]] + projection[:, vocab + b[i]]
            payload = {"a": int(a[i]), "b": int(b[i]),
                       "answer": [int((a[i] + b[i]) % vocab)]}
            questions.append(Question(id=i, features=feats.copy(),
                                      difficulty=0.0, payload=payload))
    return questions


def question_to_record(q: Question) -> dict:
    return {
        "id": q.id,
        "features": [float(x) for x in q.features],
        "difficulty": q.difficulty,
        "payload": q.payload,
    }


def question_from_record(rec: dict) -> Question:
    return Question(
        id=int(rec["id"]),
        features=np.asarray(rec["features"], dtype=np.float64),
        difficulty=float(rec["difficulty"]),
        payload=rec["payload"],
    )


def save_dataset(questions: list[Question], path) -> None:
    """One JSON record per line; floats round-trip bit-exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for q in questions:
            fh.write(json.dumps(question_to_record(q), separators=(",", ":")))
            fh.write("\n")


def load_dataset(path) -> list[Question]:
    questions = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                questions.append(question_from_record(json.loads(line)))
    return questions


# ---------------------------------------------------------------------------
# IRT student


@dataclass
class IrtStudent:
    """Scalar-skill learner with sigmoid success probability.

    The per-question learning increment is ``learn_rate * sqrt(p(1-p))``
    of the empirical group success rate: proportional to the factor that
    scales the policy-gradient norm, so zero-variance groups teach nothing.
    """

    skill: float = 0.0
    discrimination: float = 1.0
    learn_rate: float = 0.01

    def __post_init__(self):
        if self.discrimination <= 0:
            raise ValueError("discrimination must be > 0")
        if self.learn_rate <= 0:
            raise ValueError("learn_rate must be > 0")

    def success_prob(self, q: Question) -> float:
        return float(_sigmoid(self.discrimination * (self.skill - q.difficulty)))

    def rollout(self, q: Question, group_size: int, step: int,
                reward_cfg: RewardConfig, seed: int, attempt: int = 0):
        if group_size < 2:
            raise ValueError("group_size must be >= 2")
        rng = np.random.default_rng([seed, step, q.id, attempt])
        p = self.success_prob(q)
        rewards_ver = (rng.random(group_size) < p).astype(np.int64)
        r_format = grpo.format_reward(step, reward_cfg)
        group = RolloutGroup(
            question_id=q.id,
            rewards_ver=rewards_ver,
            rewards_format=np.full(group_size, r_format),
            group_size=group_size,
        )
        sampled = SampledGroup(
            question=q,
            outputs=np.zeros((group_size, 0), dtype=np.int64),
            log_probs=np.zeros((group_size, 0)),
        )
        return group, sampled

    def update_increment(self, adv: AdvantageSet) -> float:
        return grpo.utility_score(adv.empirical_p)

    def apply_increments(self, increments, lr: float | None = None) -> None:
        lr = self.learn_rate if lr is None else lr
        if increments:
            self.skill += lr * float(np.mean(increments))

    def evaluate(self, validation: list[Question]) -> float:
        """Exact expected accuracy over the validation set."""
        if not validation:
            raise ValueError("validation set must be non-empty")
        skills = np.array([self.skill - q.difficulty for q in validation])
        return float(np.mean(_sigmoid(self.discrimination * skills)))

    def state_bytes(self) -> bytes:
        return repr((self.skill, self.discrimination, self.learn_rate)).encode()


# ---------------------------------------------------------------------------
# linear-softmax policy student


@dataclass
class PolicyStudent:
    """Linear-softmax policy over a small vocabulary.

    Token distribution for a question is
    ``softmax(features @ params / temperature_train)``; sequence positions
    are independent and identically distributed, which keeps the full
    output space enumerable. ``temperature_eval = 0`` means greedy decoding.
    """

    params: np.ndarray  # (feature_dim, vocab) logit weights
    seq_len: int = 1
    temperature_train: float = 0.7
    temperature_eval: float = 0.0
    learn_rate: float = 0.1

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim != 2:
            raise ValueError("params must be a (feature_dim, vocab) matrix")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.temperature_train <= 0:
            raise ValueError("temperature_train must be > 0")
        if self.temperature_eval < 0:
            raise ValueError("temperature_eval must be >= 0")

    @classmethod
    def initialize(cls, feature_dim: int, vocab: int, seed: int, *,
                   init_scale: float = 0.5, **kwargs) -> "PolicyStudent":
        rng = np.random.default_rng([seed])
        params = rng.normal(0.0, init_scale / math.sqrt(feature_dim),
                            (feature_dim, vocab))
        return cls(params=params, **kwargs)

    @property
    def vocab_size(self) -> int:
        return self.params.shape[1]

    def token_probs(self, q: Question) -> np.ndarray:
        logits = q.features @ self.params / self.temperature_train
        logits = logits - logits.max()
        e = np.exp(logits)
        return e / e.sum()

    def _answer_key(self, q: Question) -> np.ndarray:
        key = np.asarray(q.payload["answer"], dtype=np.int64)
        if key.shape != (self.seq_len,):
            raise ValueError(
                f"answer key length {key.shape} does not match seq_len {self.seq_len}"
            )
        return key

    def success_prob(self, q: Question) -> float:
        """Exact probability of sampling the correct sequence."""
        probs = self.token_probs(q)
        return float(np.prod(probs[self._answer_key(q)]))

    def rollout(self, q: Question, group_size: int, step: int,
                reward_cfg: RewardConfig, seed: int, attempt: int = 0):
        if group_size < 2:
            raise ValueError("group_size must be >= 2")
        rng = np.random.default_rng([seed, step, q.id, attempt])
        probs = self.token_probs(q)
        outputs = rng.choice(self.vocab_size, size=(group_size, self.seq_len), p=probs)
        log_probs = np.log(probs)[outputs]
        key = self._answer_key(q)
        rewards_ver = (outputs == key).all(axis=1).astype(np.int64)
        r_format = grpo.format_reward(step, reward_cfg)
        group = RolloutGroup(
            question_id=q.id,
            rewards_ver=rewards_ver,
            rewards_format=np.full(group_size, r_format),
            group_size=group_size,
        )
        return group, SampledGroup(question=q, outputs=outputs, log_probs=log_probs)

    # -- differentiable pieces consumed by goldilocks.grpo ------------------

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise grpo.MalformedRolloutError(
                f"token ids must lie in [0, {self.vocab_size})"
            )
        return tokens

    def sequence_log_prob_grad(self, q: Question, tokens):
        tokens = self._check_tokens(tokens)
        probs = self.token_probs(q)
        logp = float(np.log(probs)[tokens].sum())
        counts = np.bincount(tokens, minlength=self.vocab_size).astype(np.float64)
        dlogits = counts - tokens.size * probs
        grad = np.outer(q.features, dlogits) / self.temperature_train
        return logp, grad

    def token_log_probs(self, q: Question, tokens) -> np.ndarray:
        tokens = self._check_tokens(tokens)
        return np.log(self.token_probs(q))[tokens]

    def token_log_prob_grads(self, q: Question, tokens) -> np.ndarray:
        tokens = self._check_tokens(tokens)
        probs = self.token_probs(q)
        grads = np.empty((tokens.size,) + self.params.shape)
        for t, tok in enumerate(tokens):
            one_hot = np.zeros(self.vocab_size)
            one_hot[tok] = 1.0
            grads[t] = np.outer(q.features, one_hot - probs) / self.temperature_train
        return grads

    def entropy_and_grad(self, q: Question):
        """Exact entropy of the length-T output distribution.

        Positions are i.i.d., so the sequence entropy is T times the token
        entropy; the identity is cross-checked by explicit enumeration in
        the test suite.
        """
        probs = self.token_probs(q)
        logp = np.log(probs)
        h_token = float(-(probs * logp).sum())
        dlogits = -probs * (logp + h_token)
        grad = self.seq_len * np.outer(q.features, dlogits) / self.temperature_train
        return self.seq_len * h_token, grad

    # -- training ------------------------------------------------------------

    def update_contribution(self, group: SampledGroup, adv: AdvantageSet,
                            cfg: grpo.LossConfig, policy_old=None):
        loss, grad = grpo.composed_loss_and_gradient(self, group, adv, cfg,
                                                     policy_old=policy_old)
        return loss, grad

    def apply_gradients(self, grads, lr: float | None = None) -> None:
        lr = self.learn_rate if lr is None else lr
        if grads:
            self.params -= lr * np.mean(grads, axis=0)

    def greedy_sequence(self, q: Question) -> np.ndarray:
        probs = self.token_probs(q)
        return np.full(self.seq_len, int(np.argmax(probs)), dtype=np.int64)

    def evaluate(self, validation: list[Question]) -> float:
        """Fraction of validation questions answered correctly greedily."""
        if not validation:
            raise ValueError("validation set must be non-empty")
        correct = 0
        for q in validation:
            if np.array_equal(self.greedy_sequence(q), self._answer_key(q)):
                correct += 1
        return correct / len(validation)

    def state_bytes(self) -> bytes:
        return self.params.tobytes()


# ---------------------------------------------------------------------------
# function-style entry points over the two student backends


def true_success_prob(student, q: Question) -> float:
    return student.success_prob(q)


def rollout_group(student, q: Question, group_size: int, step: int,
                  reward_cfg: RewardConfig, seed: int):
    return student.rollout(q, group_size, step, reward_cfg, seed)


def student_update(student, q: Question, adv: AdvantageSet, group: SampledGroup,
                   lr: float | None = None):
    """Single-question update step; batched training uses the same pieces."""
    if isinstance(student, IrtStudent):
        student.apply_increments([student.update_increment(adv)], lr=lr)
    else:
        _, grad = student.update_contribution(group, adv, grpo.LossConfig())
        student.apply_gradients([grad], lr=lr)
    return student


def evaluate(student, validation: list[Question]) -> float:
    return student.evaluate(validation)


# ---------------------------------------------------------------------------
# exact oracles used to probe the gradient-norm law


def make_calibrated_policy(success_probs, vocab: int, *, answer_token: int = 0):
    """Policy plus questions whose success probabilities are exactly as given.

    Question j gets a one-hot feature vector, so column block j of the
    parameter matrix fixes its token distribution independently: probability
    p on the answer token and (1-p)/(V-1) on every other token. Temperature
    is 1 so log-probabilities equal the raw logits up to normalization.
    """
    n = len(success_probs)
    params = np.zeros((n, vocab))
    questions = []
    for j, p in enumerate(success_probs):
        if not 0.0 < p < 1.0:
            raise ValueError("success probabilities must lie strictly in (0, 1)")
        rest = (1.0 - p) / (vocab - 1)
        logits = np.full(vocab, math.log(rest))
        logits[answer_token] = math.log(p)
        params[j] = logits
        feats = np.zeros(n)
        feats[j] = 1.0
        questions.append(Question(id=j, features=feats, difficulty=0.0,
                                  payload={"answer": [answer_token]}))
    policy = PolicyStudent(params=params, seq_len=1, temperature_train=1.0)
    return policy, questions


def exact_expected_gradient(policy: PolicyStudent, q: Question) -> np.ndarray:
    """Expectation of the group policy gradient, by output-space enumeration.

    Uses the analytic two-value advantages for the policy's true success
    probability; the norm of this gradient is what scales with
    sqrt(p(1-p)).
    """
    p = policy.success_prob(q)
    a_pos, a_neg = grpo.closed_form_advantages(p)
    key = policy._answer_key(q)
    probs = policy.token_probs(q)
    if policy.vocab_size ** policy.seq_len > 65536:
        raise ValueError("output space too large to enumerate")
    grad = np.zeros_like(policy.params)
    for seq in itertools.product(range(policy.vocab_size), repeat=policy.seq_len):
        tokens = np.asarray(seq, dtype=np.int64)
        weight = float(np.prod(probs[tokens]))
        adv = a_pos if np.array_equal(tokens, key) else a_neg
        _, logp_grad = policy.sequence_log_prob_grad(q, tokens)
        grad -= weight * adv * logp_grad
    return grad
