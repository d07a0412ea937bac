"""Brute-force verification machinery: exact expectations and finite differences.

Everything in this module is deliberately independent of the analytic
gradient code: expected losses are plain enumeration-weighted sums over
the full response support, and gradients are checked with central finite
differences. The two routes meeting within tolerance is the core evidence
that the closed-form gradients are right.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation, SupportCapExceeded
from . import objectives as obj
from .task_model import (
    DEFAULT_SUPPORT_CAP,
    AutoregressiveTable,
    TaskSpec,
    kl_divergence,
    response_log_prob_table,
    sample_batch,
    snapshot,
)
from .seeding import substream

PAIRED_KINDS = ("spin", "sipo", "ssimpo")


@dataclass
class ExactExpectation:
    """An exactly enumerated expected loss and the number of summed terms."""

    value: float
    term_count: int


def _tables(main, opponent, task, cap):
    if main.support_size > cap:
        raise SupportCapExceeded(
            f"support too large: {main.support_size} responses exceeds cap {cap}")
    lp_main = response_log_prob_table(main, cap)
    lp_opp = response_log_prob_table(opponent, cap)
    p_data = np.exp(response_log_prob_table(task.target, cap))
    p_opp = np.exp(lp_opp)
    q = task.prompt_dist.weights
    return lp_main, lp_opp, p_data, p_opp, q


def _check_paired_cap(main, cap):
    pairs = main.support_size ** 2
    if pairs > cap:
        raise SupportCapExceeded(
            f"support too large: {pairs} response pairs per prompt exceeds cap {cap}")


def exact_expected_loss(spec: obj.ObjectiveSpec, main: AutoregressiveTable,
                        opponent: AutoregressiveTable, task: TaskSpec,
                        cap: int = DEFAULT_SUPPORT_CAP) -> ExactExpectation:
    """Expected loss under the true sampling process, summed exactly.

    Real responses are weighted by ``q(x) * p_data(y|x)`` and synthetic
    ones by ``q(x) * p_opponent(y'|x)``; pairwise losses enumerate all
    (y, y') combinations per prompt. The result depends on no batch and no
    randomness.
    """
    value, _ = _exact_loss_and_coefficients(spec, main, opponent, task, cap,
                                            want_grad=False)
    P, S = task.prompt_count, main.support_size
    terms = P * S * S if spec.kind in PAIRED_KINDS else P * S
    return ExactExpectation(value=value, term_count=terms)


def exact_loss_and_grad(spec: obj.ObjectiveSpec, main: AutoregressiveTable,
                        opponent: AutoregressiveTable, task: TaskSpec,
                        cap: int = DEFAULT_SUPPORT_CAP):
    """Exact expected loss plus its analytic gradient for any objective.

    The gradient comes from differentiating each enumerated summand with
    respect to the model's log probabilities and chaining through the
    softmax steps. For the classification objective this is a separate
    derivation route from :func:`space_lab.objectives.space_grad`, which
    the tests compare against.
    """
    value, coeff = _exact_loss_and_coefficients(spec, main, opponent, task, cap,
                                                want_grad=True)
    grad = obj.logprob_gradient_full_support(main, coeff)
    return value, grad


def _exact_loss_and_coefficients(spec, main, opponent, task, cap, want_grad):
    if spec.kind in PAIRED_KINDS:
        _check_paired_cap(main, cap)
    lp_main, lp_opp, p_data, p_opp, q = _tables(main, opponent, task, cap)
    reward = lp_main - lp_opp
    coeff = None

    if isinstance(spec, obj.SFTSpec):
        w = q[:, None] * p_data
        value = float((w * -lp_main).sum())
        if want_grad:
            coeff = -w

    elif isinstance(spec, obj.SPACESpec):
        mu = spec.mu
        w_real = q[:, None] * p_data
        w_synth = q[:, None] * p_opp
        value = float((w_real * -obj.log_sigma_mu(mu, reward)).sum()
                      + mu * (w_synth * -obj.log_sigma_mu(1.0 / mu, -reward)).sum())
        if want_grad:
            coeff = (w_real * -obj.posterior_synth(mu, reward)
                     + mu * w_synth * obj.sigma_mu(mu, reward))

    elif isinstance(spec, obj.SPINSpec):
        lam = spec.lambda_
        if spec.form == obj.SPIN_DIFFERENCE:
            # separable: the pair sum factorizes into two single-response sums
            w_real = q[:, None] * p_data
            w_synth = q[:, None] * p_opp
            value = float((w_real * obj.softplus(-lam * reward)).sum()
                          - (w_synth * obj.softplus(-lam * reward)).sum())
            if want_grad:
                slope = -lam * obj.sigmoid(-lam * reward)
                coeff = w_real * slope - w_synth * slope
        else:
            value, coeff = _exact_pairwise(
                q, p_data, p_opp, reward, reward,
                fn=lambda t: obj.softplus(-lam * t),
                slope=lambda t: -lam * obj.sigmoid(-lam * t),
                want_grad=want_grad)

    elif isinstance(spec, obj.SIPOSpec):
        half_inv_tau = 0.5 / spec.tau
        value, coeff = _exact_pairwise(
            q, p_data, p_opp, reward, reward,
            fn=lambda t: (t - half_inv_tau) ** 2,
            slope=lambda t: 2.0 * (t - half_inv_tau),
            want_grad=want_grad)

    elif isinstance(spec, obj.SSIMPOSpec):
        scale = spec.beta / main.length
        gamma = spec.gamma
        value, coeff = _exact_pairwise(
            q, p_data, p_opp, scale * lp_main, scale * lp_main,
            fn=lambda t: obj.softplus(-(t - gamma)),
            slope=lambda t: -obj.sigmoid(-(t - gamma)),
            want_grad=want_grad,
            side_scale=scale)

    else:
        raise ContractViolation(f"unknown objective spec {spec!r}")

    return value, coeff


def _exact_pairwise(q, p_data, p_opp, real_score, synth_score, fn, slope,
                    want_grad, side_scale=1.0):
    """Sum loss fn(real_score[y] - synth_score[y']) over all weighted pairs.

    Returns the scalar value and, when requested, the per-(prompt,
    response) coefficient of d/d(log p_model) collected from both the
    real and the synthetic side of each pair.
    """
    P, S = p_data.shape
    value = 0.0
    coeff = np.zeros((P, S)) if want_grad else None
    for x in range(P):
        t = real_score[x][:, None] - synth_score[x][None, :]
        w = q[x] * p_data[x][:, None] * p_opp[x][None, :]
        value += float((w * fn(t)).sum())
        if want_grad:
            s = w * slope(t)
            coeff[x] += side_scale * (s.sum(axis=1) - s.sum(axis=0))
    return value, coeff


def fd_gradient(loss_fn, main: AutoregressiveTable, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn(model)`` w.r.t. every logit."""
    if h <= 0.0:
        raise ContractViolation(f"step size must be > 0, got {h}")
    probe = snapshot(main)
    grad = np.zeros_like(main.logits)
    flat = probe.logits.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        up = loss_fn(probe)
        flat[i] = original - h
        down = loss_fn(probe)
        flat[i] = original
        if not (math.isfinite(up) and math.isfinite(down)):
            raise ContractViolation(
                f"non-finite loss during finite differences at index {i}")
        out[i] = (up - down) / (2.0 * h)
    return grad


def max_normalized_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst elementwise error |a - f| / (0.01 + |f|).

    Comparing this value against a tolerance ``tol`` is equivalent to the
    elementwise bound ``|a - f| <= 0.01*tol + tol*|f|``, i.e. a relative
    check with an absolute floor two orders below the tolerance.
    """
    diff = np.abs(analytic - numeric)
    return float((diff / (0.01 + np.abs(numeric))).max())


# ---------------------------------------------------------------------------
# Gradient check suite (shared by the CLI and the acceptance tests)
# ---------------------------------------------------------------------------

GRADCHECK_STREAM = 91


def _gradcheck_scenario(seed: int):
    """Small random models and an aligned batch for one gradient check."""
    rng = substream(seed, GRADCHECK_STREAM)
    vocab = 2 + seed % 2
    length = 1 + (seed // 2) % 2
    prompts_n = 2
    data_table = AutoregressiveTable.random(vocab, length, prompts_n, rng)
    main = AutoregressiveTable.random(vocab, length, prompts_n, rng)
    opponent = AutoregressiveTable.random(vocab, length, prompts_n, rng)
    n_items = 8
    prompt_ids = rng.integers(0, prompts_n, size=n_items)
    real = sample_batch(data_table, prompt_ids, rng)
    synth = sample_batch(opponent, prompt_ids, rng)
    batch = obj.LabeledBatch(
        real_items=[(int(p), tuple(int(t) for t in y)) for p, y in zip(prompt_ids, real)],
        synth_items=[(int(p), tuple(int(t) for t in y)) for p, y in zip(prompt_ids, synth)],
    )
    specs = [
        obj.SFTSpec(),
        obj.SPINSpec(lambda_=(0.5, 1.0, 2.0)[seed % 3],
                     form=(obj.SPIN_DIFFERENCE, obj.SPIN_MARGIN)[seed % 2]),
        obj.SIPOSpec(tau=(0.1, 0.5, 1.0)[seed % 3]),
        obj.SSIMPOSpec(beta=(1.0, 2.0)[seed % 2], gamma=(0.0, 0.5, -0.3)[seed % 3]),
        obj.SPACESpec(mu=(0.5, 1.0, 2.0)[seed % 3]),
    ]
    return batch, main, opponent, specs


def gradient_check_suite(n_seeds: int = 20, h: float = 1e-5) -> dict:
    """Max normalized analytic-vs-finite-difference error per objective."""
    if n_seeds < 1:
        raise ContractViolation(f"need at least 1 seed, got {n_seeds}")
    worst = {kind: 0.0 for kind in obj.OBJECTIVE_KINDS}
    for seed in range(n_seeds):
        batch, main, opponent, specs = _gradcheck_scenario(seed)
        for spec in specs:
            _, analytic = obj.loss_and_grad(spec, batch, main, opponent)

            def batch_loss(model, spec=spec):
                value, _ = obj.loss_and_grad(spec, batch, model, opponent)
                return value

            numeric = fd_gradient(batch_loss, main, h)
            err = max_normalized_error(analytic, numeric)
            worst[spec.kind] = max(worst[spec.kind], err)
    return worst


# ---------------------------------------------------------------------------
# Minimizer verification
# ---------------------------------------------------------------------------

@dataclass
class MinimizerReport:
    """Outcome of exact-expectation gradient descent on the classification loss."""

    final_kl: float
    converged: bool
    steps: int
    diverged: bool = False
    loss_trace: list = field(default_factory=list)  # (step, loss, kl) rows


def verify_minimizer(task: TaskSpec, mu: float, budget: int, lr: float = 2.0,
                     init: AutoregressiveTable | None = None,
                     kl_threshold: float = 1e-4) -> MinimizerReport:
    """Plain gradient descent on the exact expected classification loss.

    The opponent stays frozen at the initial model state the whole run, so
    this checks that the loss's minimizer in the model argument alone is
    the data distribution. The default step size is calibrated so the
    desk-scale task converges well inside a 5000-step budget while the
    loss sequence stays monotone. Divergence (loss increasing for 100
    consecutive steps) is reported, not raised.
    """
    main = snapshot(init) if init is not None else AutoregressiveTable.uniform(
        task.vocab_size, task.length, task.prompt_count)
    opponent = snapshot(main)
    spec = obj.SPACESpec(mu=mu)
    trace = []
    rises = 0
    diverged = False
    prev = math.inf
    for step in range(budget):
        value, grad = exact_loss_and_grad(spec, main, opponent, task)
        kl = kl_divergence(task.target, main, task.prompt_dist)
        trace.append((step, value, kl))
        rises = rises + 1 if value > prev else 0
        if rises >= 100:
            diverged = True
            break
        prev = value
        main.logits = main.logits - lr * grad
    final_kl = kl_divergence(task.target, main, task.prompt_dist)
    return MinimizerReport(
        final_kl=final_kl,
        converged=bool(final_kl <= kl_threshold),
        steps=len(trace),
        diverged=diverged,
        loss_trace=trace,
    )


def write_minimizer_report(report: MinimizerReport, out_dir) -> str:
    """Persist the report JSON plus its loss trace CSV; returns the JSON path."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    trace_path = os.path.join(out_dir, "loss_trace.csv")
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "kl"])
        for step, loss, kl in report.loss_trace:
            writer.writerow([step, repr(float(loss)), repr(float(kl))])
    report_path = os.path.join(out_dir, "minimizer_report.json")
    payload = {
        "final_kl": report.final_kl,
        "converged": report.converged,
        "steps": report.steps,
        "diverged": report.diverged,
        "loss_trace_path": trace_path,
    }
    with open(report_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report_path
