"""Reported quantities: log-ratio rewards, gaps, and classification accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation
from .objectives import LabeledBatch, posterior_real, posterior_synth
from .task_model import (
    AutoregressiveTable,
    TaskSpec,
    log_prob_batch,
    response_log_prob_table,
)


@dataclass
class RewardSummary:
    mean_reward_real: float
    mean_reward_synth: float
    reward_gap: float
    rewards_real: np.ndarray | None = None
    rewards_synth: np.ndarray | None = None


def _side_rewards(items, main, opponent):
    prompts = np.array([int(p) for p, _ in items], dtype=np.int64)
    responses = np.array([list(r) for _, r in items], dtype=np.int64)
    return (log_prob_batch(main, prompts, responses)
            - log_prob_batch(opponent, prompts, responses))


def reward_summary(batch: LabeledBatch, main: AutoregressiveTable,
                   opponent: AutoregressiveTable,
                   keep_samples: bool = False) -> RewardSummary:
    """Mean log-ratio reward per side, and the real-minus-synthetic gap."""
    batch.require_real()
    batch.require_synth()
    r_real = _side_rewards(batch.real_items, main, opponent)
    r_synth = _side_rewards(batch.synth_items, main, opponent)
    mean_real = float(r_real.mean())
    mean_synth = float(r_synth.mean())
    return RewardSummary(
        mean_reward_real=mean_real,
        mean_reward_synth=mean_synth,
        reward_gap=mean_real - mean_synth,
        rewards_real=r_real if keep_samples else None,
        rewards_synth=r_synth if keep_samples else None,
    )


def classifier_accuracy(batch: LabeledBatch, main: AutoregressiveTable,
                        opponent: AutoregressiveTable, mu: float) -> float:
    """Fraction of items whose posterior puts them on the correct side.

    A real item is correct when ``posterior_real > 0.5`` and a synthetic
    one when ``posterior_synth > 0.5``. Exact ties count as incorrect so
    the model-equals-opponent case is deterministic rather than
    platform-dependent.
    """
    batch.require_real()
    batch.require_synth()
    if mu <= 0.0:
        raise ContractViolation(f"mu must be > 0, got {mu}")
    r_real = _side_rewards(batch.real_items, main, opponent)
    r_synth = _side_rewards(batch.synth_items, main, opponent)
    correct = int((posterior_real(mu, r_real) > 0.5).sum())
    correct += int((posterior_synth(mu, r_synth) > 0.5).sum())
    return correct / (r_real.size + r_synth.size)


def exact_reward_summary(main: AutoregressiveTable,
                         opponent: AutoregressiveTable,
                         task: TaskSpec) -> RewardSummary:
    """Population version: expectations under the data and opponent laws."""
    reward = response_log_prob_table(main) - response_log_prob_table(opponent)
    p_data = np.exp(response_log_prob_table(task.target))
    p_opp = np.exp(response_log_prob_table(opponent))
    q = task.prompt_dist.weights
    mean_real = float(q @ (p_data * reward).sum(axis=1))
    mean_synth = float(q @ (p_opp * reward).sum(axis=1))
    return RewardSummary(mean_reward_real=mean_real,
                         mean_reward_synth=mean_synth,
                         reward_gap=mean_real - mean_synth)


def exact_classifier_accuracy(main: AutoregressiveTable,
                              opponent: AutoregressiveTable,
                              task: TaskSpec, mu: float) -> float:
    """Probability mass classified correctly under the 1:mu mixture."""
    if mu <= 0.0:
        raise ContractViolation(f"mu must be > 0, got {mu}")
    reward = response_log_prob_table(main) - response_log_prob_table(opponent)
    p_data = np.exp(response_log_prob_table(task.target))
    p_opp = np.exp(response_log_prob_table(opponent))
    q = task.prompt_dist.weights
    real_mass = float(q @ (p_data * (posterior_real(mu, reward) > 0.5)).sum(axis=1))
    synth_mass = float(q @ (p_opp * (posterior_synth(mu, reward) > 0.5)).sum(axis=1))
    return (real_mass + mu * synth_mass) / (1.0 + mu)
