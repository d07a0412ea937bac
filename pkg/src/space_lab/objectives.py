"""The five fine-tuning objectives and their analytic gradients.

Five losses share one calling convention: ``sft`` fits annotated data
directly; ``spin``, ``sipo``, and ``ssimpo`` are gap-based (they see the
model only through the difference between real and synthetic rewards);
``space`` is the noise-contrastive objective that classifies real vs
synthetic responses and therefore keeps a meaningful signal even when the
two coincide.

The reward of a response u is the log ratio
``r(u|x) = log p_model(u|x) - log p_opponent(u|x)``.

Gradients are closed-form: each loss depends on the model only through
``log p_model(u|x)`` terms, so we differentiate the scalar loss with
respect to those log probabilities and chain through the per-step softmax
(``d log p / d logit = onehot - softmax`` at each visited context). No
autodiff framework is involved; the gradient formulas themselves are what
the test suite pins against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation
from .task_model import (
    AutoregressiveTable,
    TaskSpec,
    log_prob_batch,
    path_nodes,
    response_log_prob_table,
    response_prob_table,
    step_log_probs,
)

SPIN_DIFFERENCE = "difference-of-losses"
SPIN_MARGIN = "loss-of-margin"


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ContractViolation(message)


# ---------------------------------------------------------------------------
# Stable scalar kernels
# ---------------------------------------------------------------------------

def softplus(x):
    """log(1 + e^x) without overflow, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(x):
    """log of the standard logistic, computed as -softplus(-x)."""
    return -softplus(-np.asarray(x, dtype=np.float64))


def sigmoid(x):
    return np.exp(log_sigmoid(x))


def log_sigma_mu(mu: float, x):
    """log of the tilted logistic sigma_mu(x) = 1 / (1 + mu * e^(-x))."""
    _require(mu > 0.0, f"mu must be > 0, got {mu}")
    return -softplus(math.log(mu) - np.asarray(x, dtype=np.float64))


def sigma_mu(mu: float, x):
    """Tilted logistic 1 / (1 + mu * e^(-x)); strictly increasing in x."""
    return np.exp(log_sigma_mu(mu, x))


def posterior_real(mu: float, reward):
    """P(label=real | reward) under a real:synthetic mixture with odds 1:mu."""
    return sigma_mu(mu, reward)


def posterior_synth(mu: float, reward):
    """P(label=synthetic | reward); complements posterior_real exactly."""
    _require(mu > 0.0, f"mu must be > 0, got {mu}")
    return sigma_mu(1.0 / mu, -np.asarray(reward, dtype=np.float64))


# ---------------------------------------------------------------------------
# Objective specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SFTSpec:
    kind = "sft"


@dataclass(frozen=True)
class SPINSpec:
    lambda_: float = 1.0
    form: str = SPIN_MARGIN
    kind = "spin"

    def __post_init__(self):
        _require(self.lambda_ > 0.0, f"lambda must be > 0, got {self.lambda_}")
        _require(self.form in (SPIN_DIFFERENCE, SPIN_MARGIN),
                 f"unknown spin form {self.form!r}")


@dataclass(frozen=True)
class SIPOSpec:
    tau: float = 0.5
    kind = "sipo"

    def __post_init__(self):
        _require(self.tau > 0.0, f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class SSIMPOSpec:
    beta: float = 2.0
    gamma: float = 0.0
    kind = "ssimpo"

    def __post_init__(self):
        _require(self.beta > 0.0, f"beta must be > 0, got {self.beta}")


@dataclass(frozen=True)
class SPACESpec:
    mu: float = 1.0
    kind = "space"

    def __post_init__(self):
        _require(self.mu > 0.0, f"mu must be > 0, got {self.mu}")


ObjectiveSpec = SFTSpec | SPINSpec | SIPOSpec | SSIMPOSpec | SPACESpec

OBJECTIVE_KINDS = ("sft", "spin", "sipo", "ssimpo", "space")


def objective_to_dict(spec: ObjectiveSpec) -> dict:
    if isinstance(spec, SFTSpec):
        return {"kind": "sft"}
    if isinstance(spec, SPINSpec):
        return {"kind": "spin", "lambda": spec.lambda_, "spin_form": spec.form}
    if isinstance(spec, SIPOSpec):
        return {"kind": "sipo", "tau": spec.tau}
    if isinstance(spec, SSIMPOSpec):
        return {"kind": "ssimpo", "beta": spec.beta, "gamma": spec.gamma}
    if isinstance(spec, SPACESpec):
        return {"kind": "space", "mu": spec.mu}
    raise ContractViolation(f"unknown objective spec {spec!r}")


def objective_from_dict(data: dict) -> ObjectiveSpec:
    kind = data.get("kind")
    if kind == "sft":
        return SFTSpec()
    if kind == "spin":
        return SPINSpec(lambda_=float(data.get("lambda", 1.0)),
                        form=data.get("spin_form", SPIN_MARGIN))
    if kind == "sipo":
        return SIPOSpec(tau=float(data.get("tau", 0.5)))
    if kind == "ssimpo":
        return SSIMPOSpec(beta=float(data.get("beta", 2.0)),
                          gamma=float(data.get("gamma", 0.0)))
    if kind == "space":
        return SPACESpec(mu=float(data.get("mu", 1.0)))
    raise ContractViolation(f"unknown objective kind {kind!r}")


def default_objective(kind: str) -> ObjectiveSpec:
    return objective_from_dict({"kind": kind})


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class LabeledBatch:
    """Real and synthetic (prompt, response) items consumed by the losses.

    Pairwise losses require ``synth_items`` to align with ``real_items``
    index by index (same length, same prompt at each index). The
    classification loss only needs both lists nonempty; supervised
    fine-tuning ignores ``synth_items`` entirely.
    """

    real_items: list = field(default_factory=list)
    synth_items: list = field(default_factory=list)

    def real_arrays(self):
        return _items_to_arrays(self.real_items)

    def synth_arrays(self):
        return _items_to_arrays(self.synth_items)

    def require_real(self):
        _require(len(self.real_items) > 0, "batch has no real items")

    def require_synth(self):
        _require(len(self.synth_items) > 0, "batch has no synthetic items")

    def require_paired(self):
        self.require_real()
        self.require_synth()
        _require(len(self.real_items) == len(self.synth_items),
                 f"paired loss needs equal list lengths, got "
                 f"{len(self.real_items)} real vs {len(self.synth_items)} synthetic")
        for i, (real, synth) in enumerate(zip(self.real_items, self.synth_items)):
            _require(int(real[0]) == int(synth[0]),
                     f"paired loss needs index-aligned prompts; "
                     f"item {i} has prompts {real[0]} vs {synth[0]}")


def _items_to_arrays(items):
    prompts = np.array([int(p) for p, _ in items], dtype=np.int64)
    responses = np.array([list(r) for _, r in items], dtype=np.int64)
    return prompts, responses


# ---------------------------------------------------------------------------
# Gradient chaining through the tabular softmax
# ---------------------------------------------------------------------------

def zero_gradient(model: AutoregressiveTable) -> np.ndarray:
    return np.zeros_like(model.logits)


def logprob_gradient(model: AutoregressiveTable, prompts, responses,
                     coefficients) -> np.ndarray:
    """Gradient of ``sum_i c_i * log p(y_i | x_i)`` w.r.t. all logits.

    Each visited context receives ``c * (onehot(token) - softmax(row))``,
    so every context row of the result sums to zero by construction.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    responses = np.asarray(responses, dtype=np.int64)
    coefficients = np.asarray(coefficients, dtype=np.float64)
    grad = zero_gradient(model)
    if prompts.size == 0:
        return grad
    probs = np.exp(step_log_probs(model))
    nodes = path_nodes(model, responses)
    for pos in range(model.length):
        node = nodes[:, pos]
        np.add.at(grad, (prompts, node), -coefficients[:, None] * probs[prompts, node])
        np.add.at(grad, (prompts, node, responses[:, pos]), coefficients)
    return grad


def logprob_gradient_full_support(model: AutoregressiveTable,
                                  coefficients: np.ndarray) -> np.ndarray:
    """Like :func:`logprob_gradient` but with one coefficient per (prompt,
    response) over the full enumerated support.

    ``coefficients`` has shape (prompt_count, V**L) with columns in
    lexicographic response order.
    """
    P, V, L = model.prompt_count, model.vocab_size, model.length
    _require(coefficients.shape == (P, model.support_size),
             f"coefficient table must be {(P, model.support_size)}, "
             f"got {coefficients.shape}")
    probs = np.exp(step_log_probs(model))
    grad = zero_gradient(model)
    offsets = model.node_offsets()
    for pos in range(L):
        # group responses sharing (prefix, token) at this position
        mass = coefficients.reshape(P, V ** pos, V, -1).sum(axis=3)
        rows = slice(int(offsets[pos]), int(offsets[pos]) + V ** pos)
        grad[:, rows, :] += mass
        grad[:, rows, :] -= probs[:, rows, :] * mass.sum(axis=2, keepdims=True)
    return grad


def _check_compatible(main, opponent):
    _require(main.shape_key() == opponent.shape_key(),
             f"model shapes differ: {main.shape_key()} vs {opponent.shape_key()}")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def sft_loss(batch: LabeledBatch, main: AutoregressiveTable) -> float:
    """Mean negative log-likelihood of the real items."""
    batch.require_real()
    prompts, responses = batch.real_arrays()
    return float(-log_prob_batch(main, prompts, responses).mean())


def _sft_grad(batch, main):
    prompts, responses = batch.real_arrays()
    coeff = np.full(prompts.size, -1.0 / prompts.size)
    return logprob_gradient(main, prompts, responses, coeff)


def _rewards(batch_side, main, opponent):
    prompts, responses = batch_side
    lp_main = log_prob_batch(main, prompts, responses)
    lp_opp = log_prob_batch(opponent, prompts, responses)
    return prompts, responses, lp_main - lp_opp


def space_loss(batch: LabeledBatch, main: AutoregressiveTable,
               opponent: AutoregressiveTable, mu: float) -> float:
    """Binary-classification loss over real and synthetic responses.

    Real items are pushed toward high reward through ``-log sigma_mu(r)``
    and synthetic items toward low reward through
    ``-mu * log sigma_{1/mu}(-r)``, weighted 1/n and mu/m respectively.
    Every summand is positive because both sigmas live in (0, 1).
    """
    batch.require_real()
    batch.require_synth()
    _check_compatible(main, opponent)
    _, _, r_real = _rewards(batch.real_arrays(), main, opponent)
    _, _, r_synth = _rewards(batch.synth_arrays(), main, opponent)
    real_part = -log_sigma_mu(mu, r_real).sum() / r_real.size
    synth_part = -log_sigma_mu(1.0 / mu, -r_synth).sum() * mu / r_synth.size
    return float(real_part + synth_part)


def space_loss_shifted_logsigmoid(batch: LabeledBatch, main, opponent,
                                  mu: float) -> float:
    """Same objective computed through the standard logistic.

    Uses the identity ``log sigma_mu(x) = log sigma(x - log mu)``; exists
    as an independent expression of the same value for cross-checking.
    """
    batch.require_real()
    batch.require_synth()
    _check_compatible(main, opponent)
    _require(mu > 0.0, f"mu must be > 0, got {mu}")
    _, _, r_real = _rewards(batch.real_arrays(), main, opponent)
    _, _, r_synth = _rewards(batch.synth_arrays(), main, opponent)
    real_part = -log_sigmoid(r_real - math.log(mu)).sum() / r_real.size
    synth_part = -log_sigmoid(-r_synth - math.log(1.0 / mu)).sum() * mu / r_synth.size
    return float(real_part + synth_part)


def _space_grad_batch(batch, main, opponent, mu):
    pr, yr, r_real = _rewards(batch.real_arrays(), main, opponent)
    ps, ys, r_synth = _rewards(batch.synth_arrays(), main, opponent)
    # d/dr of -log sigma_mu(r) is -(1 - sigma_mu(r)) = -posterior_synth(mu, r)
    coeff_real = -posterior_synth(mu, r_real) / r_real.size
    # d/dr of -mu * log sigma_{1/mu}(-r) is +mu * sigma_mu(r)
    coeff_synth = mu * sigma_mu(mu, r_synth) / r_synth.size
    prompts = np.concatenate([pr, ps])
    responses = np.concatenate([yr, ys], axis=0)
    coeff = np.concatenate([coeff_real, coeff_synth])
    return logprob_gradient(main, prompts, responses, coeff)


def space_grad_coefficients(main: AutoregressiveTable,
                            opponent: AutoregressiveTable,
                            task: TaskSpec, mu: float) -> np.ndarray:
    """Full-support coefficient of grad log p_model(u|x) in the exact gradient.

    Entry [x, u] is ``-q(x) * sigma_{1/mu}(-r(x,u)) * (p_data(u|x) -
    p_model(u|x))``. Note the second factor subtracts the *current model*
    probability, not the opponent's; the two agree only while model and
    opponent coincide. Finite differences confirm this is the derivative
    of the exact expected loss.

    A negative entry means gradient descent will raise ``log p_model(u|x)``,
    so responses the model still under-covers (``p_data > p_model``) get
    pushed up and over-covered ones get pushed down, each at its own rate.
    """
    _require(mu > 0.0, f"mu must be > 0, got {mu}")
    _check_compatible(main, opponent)
    _check_compatible(main, task.target)
    lp_main = response_log_prob_table(main)
    lp_opp = response_log_prob_table(opponent)
    reward = lp_main - lp_opp
    p_data = response_prob_table(task.target)
    p_main = np.exp(lp_main)
    q = task.prompt_dist.weights[:, None]
    return -q * posterior_synth(mu, reward) * (p_data - p_main)


def space_grad(batch_or_task, main: AutoregressiveTable,
               opponent: AutoregressiveTable, mu: float) -> np.ndarray:
    """Gradient of the classification loss w.r.t. every logit of ``main``.

    Given a :class:`LabeledBatch`, differentiates the Monte-Carlo loss of
    :func:`space_loss`. Given a :class:`TaskSpec`, differentiates the exact
    expected loss using the closed-form per-response coefficients of
    :func:`space_grad_coefficients` chained through the softmax steps.
    """
    if isinstance(batch_or_task, TaskSpec):
        coeff = space_grad_coefficients(main, opponent, batch_or_task, mu)
        return logprob_gradient_full_support(main, coeff)
    if isinstance(batch_or_task, LabeledBatch):
        batch = batch_or_task
        batch.require_real()
        batch.require_synth()
        _check_compatible(main, opponent)
        _require(mu > 0.0, f"mu must be > 0, got {mu}")
        return _space_grad_batch(batch, main, opponent, mu)
    raise ContractViolation(
        f"expected LabeledBatch or TaskSpec, got {type(batch_or_task).__name__}")


def spin_loss(batch: LabeledBatch, main, opponent, lambda_: float,
              form: str = SPIN_MARGIN) -> float:
    """Gap-based pairwise loss with the logistic link l(t) = log(1 + e^-t).

    ``difference-of-losses`` evaluates ``l(lambda*r_real) -
    l(lambda*r_synth)`` per pair; ``loss-of-margin`` evaluates
    ``l(lambda*(r_real - r_synth))``. Both collapse to a constant when the
    paired responses are identical.
    """
    batch.require_paired()
    _check_compatible(main, opponent)
    _require(lambda_ > 0.0, f"lambda must be > 0, got {lambda_}")
    _, _, r_real = _rewards(batch.real_arrays(), main, opponent)
    _, _, r_synth = _rewards(batch.synth_arrays(), main, opponent)
    if form == SPIN_DIFFERENCE:
        values = softplus(-lambda_ * r_real) - softplus(-lambda_ * r_synth)
    elif form == SPIN_MARGIN:
        values = softplus(-lambda_ * (r_real - r_synth))
    else:
        raise ContractViolation(f"unknown spin form {form!r}")
    return float(values.mean())


def _spin_grad(batch, main, opponent, lambda_, form):
    pr, yr, r_real = _rewards(batch.real_arrays(), main, opponent)
    ps, ys, r_synth = _rewards(batch.synth_arrays(), main, opponent)
    n = r_real.size
    if form == SPIN_DIFFERENCE:
        coeff_real = -lambda_ * sigmoid(-lambda_ * r_real) / n
        coeff_synth = lambda_ * sigmoid(-lambda_ * r_synth) / n
    else:
        slope = -lambda_ * sigmoid(-lambda_ * (r_real - r_synth)) / n
        coeff_real = slope
        coeff_synth = -slope
    prompts = np.concatenate([pr, ps])
    responses = np.concatenate([yr, ys], axis=0)
    coeff = np.concatenate([coeff_real, coeff_synth])
    return logprob_gradient(main, prompts, responses, coeff)


def sipo_loss(batch: LabeledBatch, main, opponent, tau: float) -> float:
    """Squared-gap loss: mean of (r_real - r_synth - 1/(2*tau))^2."""
    batch.require_paired()
    _check_compatible(main, opponent)
    _require(tau > 0.0, f"tau must be > 0, got {tau}")
    _, _, r_real = _rewards(batch.real_arrays(), main, opponent)
    _, _, r_synth = _rewards(batch.synth_arrays(), main, opponent)
    return float(((r_real - r_synth - 0.5 / tau) ** 2).mean())


def _sipo_grad(batch, main, opponent, tau):
    pr, yr, r_real = _rewards(batch.real_arrays(), main, opponent)
    ps, ys, r_synth = _rewards(batch.synth_arrays(), main, opponent)
    n = r_real.size
    gap = r_real - r_synth - 0.5 / tau
    prompts = np.concatenate([pr, ps])
    responses = np.concatenate([yr, ys], axis=0)
    coeff = np.concatenate([2.0 * gap / n, -2.0 * gap / n])
    return logprob_gradient(main, prompts, responses, coeff)


def ssimpo_loss(batch: LabeledBatch, main, beta: float, gamma: float) -> float:
    """Length-normalized margin loss through the standard logistic.

    Responses here all have the model's fixed length, so the per-response
    normalizer is beta / length on both sides.
    """
    batch.require_paired()
    _require(beta > 0.0, f"beta must be > 0, got {beta}")
    pr, yr = batch.real_arrays()
    ps, ys = batch.synth_arrays()
    scale = beta / main.length
    margin = scale * (log_prob_batch(main, pr, yr) - log_prob_batch(main, ps, ys))
    return float(-log_sigmoid(margin - gamma).mean())


def _ssimpo_grad(batch, main, beta, gamma):
    pr, yr = batch.real_arrays()
    ps, ys = batch.synth_arrays()
    n = pr.size
    scale = beta / main.length
    margin = scale * (log_prob_batch(main, pr, yr) - log_prob_batch(main, ps, ys))
    slope = -sigmoid(-(margin - gamma)) * scale / n
    prompts = np.concatenate([pr, ps])
    responses = np.concatenate([yr, ys], axis=0)
    coeff = np.concatenate([slope, -slope])
    return logprob_gradient(main, prompts, responses, coeff)


def loss_and_grad(spec: ObjectiveSpec, batch: LabeledBatch,
                  main: AutoregressiveTable,
                  opponent: AutoregressiveTable | None = None):
    """Evaluate one objective and its analytic gradient on a batch.

    ``sft`` and ``ssimpo`` never touch the opponent; the others require it.
    Returns ``(loss_value, gradient_table)`` where the gradient has the
    same shape as ``main.logits``.
    """
    if isinstance(spec, SFTSpec):
        return sft_loss(batch, main), _sft_grad(batch, main)
    if isinstance(spec, SPINSpec):
        _require(opponent is not None, "spin requires an opponent model")
        value = spin_loss(batch, main, opponent, spec.lambda_, spec.form)
        return value, _spin_grad(batch, main, opponent, spec.lambda_, spec.form)
    if isinstance(spec, SIPOSpec):
        _require(opponent is not None, "sipo requires an opponent model")
        value = sipo_loss(batch, main, opponent, spec.tau)
        return value, _sipo_grad(batch, main, opponent, spec.tau)
    if isinstance(spec, SSIMPOSpec):
        value = ssimpo_loss(batch, main, spec.beta, spec.gamma)
        return value, _ssimpo_grad(batch, main, spec.beta, spec.gamma)
    if isinstance(spec, SPACESpec):
        _require(opponent is not None, "space requires an opponent model")
        value = space_loss(batch, main, opponent, spec.mu)
        return value, _space_grad_batch(batch, main, opponent, spec.mu)
    raise ContractViolation(f"unknown objective spec {spec!r}")
