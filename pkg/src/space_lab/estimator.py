"""Scikit-learn estimator facade over the self-play fine-tuning engine.

``X`` is a vector of integer prompt ids and ``y`` a matrix of integer
response tokens, one fixed-length response per row. ``fit`` treats the
rows as the annotated dataset and runs the configured number of self-play
iterations; afterwards the fitted model can score, sample, and decode
responses, and the estimator composes with the usual scikit-learn
machinery (``get_params`` / ``set_params`` / ``clone``).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .datastore import AnnotatedDataset
from .exceptions import ContractViolation
from .objectives import (
    SFTSpec,
    SIPOSpec,
    SPACESpec,
    SPINSpec,
    SPIN_MARGIN,
    SSIMPOSpec,
)
from .seeding import SAMPLER, substream
from .selfplay import (
    MODE_MONTE_CARLO,
    OPT_RMSPROP,
    OptimizerConfig,
    RunConfig,
    selfplay_loop,
)
from .task_model import (
    AutoregressiveTable,
    enumerate_support,
    log_prob_batch,
    response_log_prob_table,
    sample_batch,
    snapshot,
)


class SelfPlayTuner(BaseEstimator):
    """Fit a tabular autoregressive model to (prompt, response) data by self-play.

    Parameters
    ----------
    objective : {"space", "spin", "sipo", "ssimpo", "sft"}
        Training objective. "space" is the classification objective that
        stays informative even when synthetic responses collide with the
        annotated ones; the others are the gap-based baselines and plain
        supervised fine-tuning.
    mu : float
        Synthetic-to-annotated generation ratio, and the prior odds used
        by the classification objective.
    iterations, epochs_per_iteration, batch_size : int
        Self-play loop shape. ``batch_size`` is clamped to the dataset size.
    optimizer : {"rmsprop", "plain-gd"}
    reference_task : TaskSpec or None
        When given, per-iteration KL diagnostics in ``history_`` are
        computed against this task's target; otherwise they are NaN.
    """

    def __init__(self, objective="space", mu=1.0, spin_lambda=1.0,
                 spin_form=SPIN_MARGIN, tau=0.5, beta=2.0, gamma=0.0,
                 iterations=5, epochs_per_iteration=2, batch_size=64,
                 optimizer=OPT_RMSPROP, learning_rate=0.01, decay=0.99,
                 epsilon=1e-8, regen_policy="fresh", vocab_size=None,
                 prompt_count=None, random_state=0, reference_task=None):
        self.objective = objective
        self.mu = mu
        self.spin_lambda = spin_lambda
        self.spin_form = spin_form
        self.tau = tau
        self.beta = beta
        self.gamma = gamma
        self.iterations = iterations
        self.epochs_per_iteration = epochs_per_iteration
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.decay = decay
        self.epsilon = epsilon
        self.regen_policy = regen_policy
        self.vocab_size = vocab_size
        self.prompt_count = prompt_count
        self.random_state = random_state
        self.reference_task = reference_task

    def _objective_spec(self):
        kind = self.objective
        if kind == "sft":
            return SFTSpec()
        if kind == "spin":
            return SPINSpec(lambda_=self.spin_lambda, form=self.spin_form)
        if kind == "sipo":
            return SIPOSpec(tau=self.tau)
        if kind == "ssimpo":
            return SSIMPOSpec(beta=self.beta, gamma=self.gamma)
        if kind == "space":
            return SPACESpec(mu=self.mu)
        raise ContractViolation(f"unknown objective {kind!r}")

    def _validate_prompts(self, X, limit=None):
        X = column_or_1d(np.asarray(X).reshape(-1) if np.ndim(X) > 1 else X,
                         warn=False)
        prompts = check_array(X.reshape(-1, 1), dtype=np.int64,
                              ensure_2d=True).ravel()
        if prompts.min(initial=0) < 0:
            raise ContractViolation("prompt ids must be nonnegative")
        if limit is not None and prompts.size and prompts.max() >= limit:
            raise ContractViolation(
                f"prompt id {prompts.max()} out of range [0, {limit})")
        return prompts

    def fit(self, X, y):
        """Run the self-play loop on the annotated (prompt, response) rows."""
        prompts = self._validate_prompts(X)
        responses = check_array(y, dtype=np.int64, ensure_2d=True)
        if responses.shape[0] != prompts.size:
            raise ContractViolation(
                f"X and y disagree on sample count: {prompts.size} vs "
                f"{responses.shape[0]}")
        if responses.min(initial=0) < 0:
            raise ContractViolation("response tokens must be nonnegative")
        vocab = self.vocab_size
        if vocab is None:
            vocab = max(2, int(responses.max()) + 1)
        prompt_count = self.prompt_count
        if prompt_count is None:
            prompt_count = int(prompts.max()) + 1
        length = responses.shape[1]
        if int(responses.max()) >= vocab:
            raise ContractViolation(
                f"response token {int(responses.max())} out of range [0, {vocab})")
        if int(prompts.max()) >= prompt_count:
            raise ContractViolation(
                f"prompt id {int(prompts.max())} out of range [0, {prompt_count})")

        mu = float(self.mu)
        generation_ratio = mu if self.objective == "space" else 1.0
        config = RunConfig(
            task_seed=self.reference_task.seed if self.reference_task else 0,
            run_seed=int(self.random_state),
            objective=self._objective_spec(),
            iterations=int(self.iterations),
            epochs_per_iteration=int(self.epochs_per_iteration),
            batch_size=min(int(self.batch_size), prompts.size),
            dataset_size=prompts.size,
            generation_ratio=generation_ratio,
            optimizer=OptimizerConfig(kind=self.optimizer,
                                      learning_rate=float(self.learning_rate),
                                      decay=float(self.decay),
                                      epsilon=float(self.epsilon)),
            mode=MODE_MONTE_CARLO,
            regen_policy=self.regen_policy,
            vocab_size=vocab,
            length=length,
            prompt_count=prompt_count,
        )
        config.validate()
        dataset = AnnotatedDataset(
            items=[(int(p), tuple(int(t) for t in row))
                   for p, row in zip(prompts, responses)],
            task_seed=config.task_seed,
        )
        main = AutoregressiveTable.uniform(vocab, length, prompt_count)
        opponent = snapshot(main)
        self.history_ = selfplay_loop(main, opponent, dataset,
                                      self.reference_task, config)
        self.model_ = main
        self.n_iter_ = config.iterations
        self.vocab_size_ = vocab
        self.length_ = length
        self.prompt_count_ = prompt_count
        return self

    def log_prob(self, X, y):
        """Per-row log-likelihood of responses y under the fitted model."""
        check_is_fitted(self, "model_")
        prompts = self._validate_prompts(X, limit=self.prompt_count_)
        responses = check_array(y, dtype=np.int64, ensure_2d=True)
        return log_prob_batch(self.model_, prompts, responses)

    def score(self, X, y):
        """Mean log-likelihood (higher is better)."""
        return float(self.log_prob(X, y).mean())

    def sample(self, X, random_state=None):
        """Draw one response per prompt id from the fitted model."""
        check_is_fitted(self, "model_")
        prompts = self._validate_prompts(X, limit=self.prompt_count_)
        seed = self.random_state if random_state is None else random_state
        rng = substream(int(seed), SAMPLER)
        return sample_batch(self.model_, prompts, rng)

    def predict(self, X):
        """Most likely full response per prompt (exact argmax over the support)."""
        check_is_fitted(self, "model_")
        prompts = self._validate_prompts(X, limit=self.prompt_count_)
        table = response_log_prob_table(self.model_)
        support = np.array(enumerate_support(self.vocab_size_, self.length_),
                           dtype=np.int64)
        best = table.argmax(axis=1)
        return support[best[prompts]]
