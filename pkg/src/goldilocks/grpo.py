"""Group-relative rewards, advantages, and policy losses.

The reward for one rollout is ``r_total = r_format + r_ver`` where r_ver is
a binary verification reward and r_format is an auxiliary constant (with an
optional noisy warm-up phase). Advantages standardize r_total within the
group of rollouts generated for a single question, using the population
standard deviation, which makes the group statistics line up with the
Bernoulli closed forms implemented here.

Loss functions operate on any policy object exposing:

    sequence_log_prob_grad(question, tokens) -> (logp, grad)
    token_log_probs(question, tokens)        -> (T,) array
    token_log_prob_grads(question, tokens)   -> (T, *param_shape) array
    entropy_and_grad(question)               -> (entropy, grad)

``goldilocks.students.PolicyStudent`` implements this interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from goldilocks import backends

LOSS_VARIANTS = ("grpo", "dapo", "grpo_entropy")


class InvalidGroupError(ValueError):
    """Rollout group too small or structurally broken."""


class DegenerateProbabilityError(ValueError):
    """Success probability at 0 or 1 where the closed forms blow up."""


class MixedBatchViolation(ValueError):
    """DAPO group without at least one correct and one incorrect rollout."""


class MalformedRolloutError(ValueError):
    """Rollout tokens outside the policy's vocabulary."""


@dataclass
class RewardConfig:
    """Shape of the format-reward component.

    After ``format_warmup_steps`` the format reward is exactly
    ``format_constant``; before that it is perturbed by a seeded offset of
    amplitude at most ``format_noise_amplitude`` (modeling the transient
    before the output format is mastered).
    """

    format_constant: float = 0.0
    format_warmup_steps: int = 0
    format_noise_amplitude: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.format_warmup_steps < 0:
            raise ValueError("format_warmup_steps must be >= 0")
        if self.format_noise_amplitude < 0:
            raise ValueError("format_noise_amplitude must be >= 0")


def format_reward(step: int, cfg: RewardConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= cfg.format_warmup_steps or cfg.format_noise_amplitude == 0.0:
        return cfg.format_constant
    rng = np.random.default_rng([cfg.noise_seed, step])
    return cfg.format_constant + cfg.format_noise_amplitude * rng.uniform(-1.0, 1.0)


def total_reward(r_ver: int, step: int, cfg: RewardConfig) -> float:
    """Total rollout reward: format component plus binary verification."""
    if r_ver not in (0, 1):
        raise ValueError("r_ver must be 0 or 1")
    return format_reward(step, cfg) + r_ver


@dataclass
class RolloutGroup:
    """Per-rollout rewards for the G rollouts of one question."""

    question_id: int
    rewards_ver: np.ndarray
    rewards_format: np.ndarray
    group_size: int

    def __post_init__(self):
        self.rewards_ver = np.asarray(self.rewards_ver, dtype=np.int64)
        self.rewards_format = np.asarray(self.rewards_format, dtype=np.float64)
        if self.rewards_ver.shape != (self.group_size,):
            raise InvalidGroupError("rewards_ver length must equal group_size")
        if self.rewards_format.shape != (self.group_size,):
            raise InvalidGroupError("rewards_format length must equal group_size")
        if not np.isin(self.rewards_ver, (0, 1)).all():
            raise InvalidGroupError("verification rewards must be 0 or 1")

    @property
    def total_rewards(self) -> np.ndarray:
        return self.rewards_format + self.rewards_ver


@dataclass
class AdvantageSet:
    """Group-standardized advantages plus the group statistics behind them."""

    advantages: np.ndarray
    empirical_p: float
    group_std: float


def group_advantages(group: RolloutGroup) -> AdvantageSet:
    """Standardize total rewards within the group.

    Uses the population std (divide by G). A zero-variance group (all
    rollouts identical) yields all-zero advantages: the gradient vanishes
    rather than being rescued by an epsilon in the denominator.
    """
    if group.group_size < 2:
        raise InvalidGroupError("group_size must be >= 2")
    adv, _, std = backends.group_normalize(group.total_rewards)
    p_hat = float(group.rewards_ver.sum()) / group.group_size
    return AdvantageSet(advantages=adv, empirical_p=p_hat, group_std=std)


def closed_form_advantages(p: float) -> tuple[float, float]:
    """Analytic (correct, incorrect) advantage pair for success probability p."""
    if not 0.0 < p < 1.0:
        raise DegenerateProbabilityError(f"p={p} must lie strictly in (0, 1)")
    s = math.sqrt(p * (1.0 - p))
    return (1.0 - p) / s, -p / s


def utility_score(p: float) -> float:
    """Bernoulli reward standard deviation sqrt(p(1-p)), in [0, 0.5]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p={p} must lie in [0, 1]")
    return math.sqrt(p * (1.0 - p))


@dataclass
class LossConfig:
    variant: str = "grpo"
    entropy_beta: float = 0.0
    clip_low: float = 0.2
    clip_high: float = 0.2
    zero_std_policy: str = "zero_advantage"
    dapo_max_resamples: int = 8

    def __post_init__(self):
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"variant must be one of {LOSS_VARIANTS}")
        if not 0.0 < self.clip_low < 1.0 or not 0.0 < self.clip_high < 1.0:
            raise ValueError("clip_low and clip_high must lie in (0, 1)")
        if self.entropy_beta < 0:
            raise ValueError("entropy_beta must be >= 0")
        if self.zero_std_policy != "zero_advantage":
            raise ValueError("zero_std_policy must be 'zero_advantage'")


def grpo_loss_and_gradient(policy, group, adv: AdvantageSet):
    """Policy-gradient group loss and its exact parameter gradient.

    loss = -(1/G) * sum_i adv_i * sum_t log pi(o_{i,t} | question). The
    rollouts are assumed to come from `policy` itself (a single update
    iteration, so probability ratios are identically 1 and the plain
    log-prob form is exact).
    """
    outputs = np.asarray(group.outputs)
    g = outputs.shape[0]
    loss = 0.0
    grad = None
    for i in range(g):
        a = float(adv.advantages[i])
        logp, logp_grad = policy.sequence_log_prob_grad(group.question, outputs[i])
        loss -= a * logp / g
        contrib = (-a / g) * logp_grad
        grad = contrib if grad is None else grad + contrib
    return loss, grad


def dapo_loss(policy_new, policy_old, group, adv: AdvantageSet, cfg: LossConfig) -> float:
    """Clipped-surrogate group objective, normalized by total token count.

    Returns the objective to *maximize*; negate for descent. Requires a
    mixed group (at least one correct and one incorrect rollout).
    """
    value, _ = dapo_loss_and_gradient(policy_new, policy_old, group, adv, cfg)
    return value


def dapo_loss_and_gradient(policy_new, policy_old, group, adv: AdvantageSet, cfg: LossConfig):
    if not 0.0 < adv.empirical_p < 1.0:
        raise MixedBatchViolation(
            "clipped-surrogate loss requires at least one correct and one "
            f"incorrect rollout (empirical p = {adv.empirical_p})"
        )
    outputs = np.asarray(group.outputs)
    g, seq_len = outputs.shape
    lo = 1.0 - cfg.clip_low
    hi = 1.0 + cfg.clip_high
    total_tokens = g * seq_len
    value = 0.0
    grad = None
    for i in range(g):
        a = float(adv.advantages[i])
        logp_new = policy_new.token_log_probs(group.question, outputs[i])
        logp_old = policy_old.token_log_probs(group.question, outputs[i])
        grads_new = policy_new.token_log_prob_grads(group.question, outputs[i])
        ratios = np.exp(logp_new - logp_old)
        for t in range(seq_len):
            r = float(ratios[t])
            clipped = min(max(r, lo), hi)
            value += min(r * a, clipped * a) / total_tokens
            # gradient flows only where the unclipped branch is active
            if (a >= 0 and r <= hi) or (a < 0 and r >= lo):
                contrib = (a * r / total_tokens) * grads_new[t]
                grad = contrib if grad is None else grad + contrib
    if grad is None:
        grad = np.zeros_like(policy_new.params)
    return value, grad


def entropy_bonus(policy, question):
    """Entropy of the policy's full output distribution, with exact gradient.

    Composes with the policy-gradient loss as
    ``total = grpo_loss + entropy_beta * entropy``.
    """
    return policy.entropy_and_grad(question)


def composed_loss_and_gradient(policy, group, adv: AdvantageSet, cfg: LossConfig,
                               policy_old=None):
    """Loss and gradient for the configured variant, as a descent objective."""
    if cfg.variant == "grpo":
        return grpo_loss_and_gradient(policy, group, adv)
    if cfg.variant == "grpo_entropy":
        loss, grad = grpo_loss_and_gradient(policy, group, adv)
        ent, ent_grad = entropy_bonus(policy, group.question)
        return loss + cfg.entropy_beta * ent, grad + cfg.entropy_beta * ent_grad
    # dapo: maximize the surrogate, so descend its negation
    value, grad = dapo_loss_and_gradient(
        policy, policy_old if policy_old is not None else policy, group, adv, cfg
    )
    return -value, -grad
