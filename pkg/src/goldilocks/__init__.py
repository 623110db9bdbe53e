"""Teacher-driven curriculum selection for group-relative policy optimization.

A student learns from groups of verifiable rollouts whose rewards are
standardized within each group; the learning signal of a question scales
with sqrt(p(1-p)) of the student's success probability p on it. A teacher
model regresses that utility from question features online and steers an
epsilon-greedy curriculum toward questions near p = 0.5, where the signal
peaks. Synthetic students (item-response-theory and a small softmax policy)
make every quantity exactly checkable at desk scale.
"""

from goldilocks.backends import BACKEND
from goldilocks.grpo import (
    AdvantageSet,
    LossConfig,
    RewardConfig,
    RolloutGroup,
    closed_form_advantages,
    dapo_loss,
    entropy_bonus,
    group_advantages,
    grpo_loss_and_gradient,
    total_reward,
    utility_score,
)
from goldilocks.harness import (
    ExperimentConfig,
    MetricsRecord,
    SmoothedSeries,
    ema,
    final_accuracy,
    normalized_compare,
    run_experiment,
)
from goldilocks.students import (
    IrtStudent,
    PolicyStudent,
    Question,
    SampledGroup,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from goldilocks.teacher import (
    ReplayBuffer,
    TeacherConfig,
    TeacherModel,
    maybe_update,
    predict_utility,
    prediction_stats,
    record_feedback,
    select_query,
)

__version__ = "0.1.0"

__all__ = [
    "AdvantageSet", "BACKEND", "ExperimentConfig", "IrtStudent", "LossConfig",
    "MetricsRecord", "PolicyStudent", "Question", "ReplayBuffer",
    "RewardConfig", "RolloutGroup", "SampledGroup", "SmoothedSeries",
    "TeacherConfig", "TeacherModel", "closed_form_advantages", "dapo_loss",
    "ema", "entropy_bonus", "final_accuracy", "generate_dataset",
    "group_advantages", "grpo_loss_and_gradient", "load_dataset",
    "maybe_update", "normalized_compare", "predict_utility",
    "prediction_stats", "record_feedback", "run_experiment", "save_dataset",
    "select_query", "total_reward", "utility_score",
]
