"""The outer self-play loop: generate, optimize, snapshot, repeat.

Each iteration the frozen opponent generates synthetic responses, the main
model is optimized against the configured objective for a fixed number of
epochs, and the opponent is then replaced by a bit-exact snapshot of the
main model. Because the opponent equals the main model at every iteration
boundary, all log-ratio rewards start each iteration at exactly zero;
the recorded reward metrics are end-of-iteration values.

Two execution modes share the loop:

* ``monte-carlo`` trains on a finite annotated dataset with shuffled
  minibatches and the configured optimizer.
* ``exact`` replaces datasets with enumeration-weighted expectations and
  always takes plain gradient-descent steps, eliminating sampling noise so
  stationarity and convergence checks are exact.

Runs are bit-reproducible: all randomness flows from ``(task_seed,
run_seed)`` through purpose-keyed substreams, and reductions have fixed
order. Only wall-clock fields differ between identical runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import oracle
from .datastore import AnnotatedDataset, make_task, sample_dataset
from .exceptions import ContractViolation, EngineAbort
from .metrics import (
    classifier_accuracy,
    exact_classifier_accuracy,
    exact_reward_summary,
    reward_summary,
)
from .objectives import (
    LabeledBatch,
    ObjectiveSpec,
    SPACESpec,
    loss_and_grad,
    objective_from_dict,
    objective_to_dict,
)
from .seeding import BATCH_SHUFFLE, SYNTH_GEN, SYNTH_SHUFFLE, substream
from .task_model import (
    AutoregressiveTable,
    TaskSpec,
    kl_divergence,
    sample_batch,
    snapshot,
)

MODE_MONTE_CARLO = "monte-carlo"
MODE_EXACT = "exact"
REGEN_FRESH = "fresh"
REGEN_FIXED = "fixed"
OPT_RMSPROP = "rmsprop"
OPT_PLAIN_GD = "plain-gd"

PAIRED_OBJECTIVES = ("spin", "sipo", "ssimpo")

METRICS_COLUMNS = ["iteration", "pre_kl", "post_kl", "mean_reward_real",
                   "mean_reward_synth", "reward_gap", "mean_loss", "grad_norm",
                   "classifier_accuracy", "wall_time_s"]


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ContractViolation(message)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = OPT_RMSPROP
    learning_rate: float = 0.01
    decay: float = 0.99
    epsilon: float = 1e-8


@dataclass(frozen=True)
class RunConfig:
    task_seed: int = 7
    run_seed: int = 11
    objective: ObjectiveSpec = field(default_factory=SPACESpec)
    iterations: int = 5
    epochs_per_iteration: int = 2
    batch_size: int = 64
    dataset_size: int = 512
    generation_ratio: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mode: str = MODE_MONTE_CARLO
    regen_policy: str = REGEN_FRESH
    vocab_size: int = 3
    length: int = 3
    prompt_count: int = 4

    def validate(self) -> None:
        _require(self.task_seed >= 0 and self.run_seed >= 0,
                 "seeds must be nonnegative")
        _require(self.iterations >= 1, f"iterations must be >= 1, got {self.iterations}")
        _require(self.epochs_per_iteration >= 1,
                 f"epochs must be >= 1, got {self.epochs_per_iteration}")
        _require(self.dataset_size >= 1,
                 f"dataset size must be >= 1, got {self.dataset_size}")
        _require(1 <= self.batch_size <= self.dataset_size,
                 f"batch size must be in [1, {self.dataset_size}], got {self.batch_size}")
        _require(self.generation_ratio > 0.0,
                 f"generation ratio must be > 0, got {self.generation_ratio}")
        _require(self.optimizer.learning_rate > 0.0, "learning rate must be > 0")
        _require(self.optimizer.kind in (OPT_RMSPROP, OPT_PLAIN_GD),
                 f"unknown optimizer kind {self.optimizer.kind!r}")
        if self.optimizer.kind == OPT_RMSPROP:
            _require(0.0 < self.optimizer.decay < 1.0,
                     f"rmsprop decay must be in (0, 1), got {self.optimizer.decay}")
            _require(self.optimizer.epsilon > 0.0, "rmsprop epsilon must be > 0")
        _require(self.mode in (MODE_MONTE_CARLO, MODE_EXACT),
                 f"unknown mode {self.mode!r}")
        _require(self.regen_policy in (REGEN_FRESH, REGEN_FIXED),
                 f"unknown regen policy {self.regen_policy!r}")
        if isinstance(self.objective, SPACESpec):
            _require(abs(self.generation_ratio - self.objective.mu) <= 1e-12,
                     "generation ratio must equal the objective's mu")
        if self.objective.kind in PAIRED_OBJECTIVES:
            _require(self.synthetic_count() == self.dataset_size,
                     f"{self.objective.kind} needs paired data: generation ratio "
                     f"{self.generation_ratio} gives {self.synthetic_count()} synthetic "
                     f"items for {self.dataset_size} annotated ones")
        _require(int(round(self.generation_ratio * self.batch_size)) >= 1,
                 "generation ratio too small: batches would have no synthetic items")

    def synthetic_count(self) -> int:
        return int(round(self.generation_ratio * self.dataset_size))


@dataclass
class IterationRecord:
    """End-of-iteration metrics; rewards are measured against the opponent
    snapshot the iteration trained against (they are identically zero at
    the start of every iteration, where opponent == main)."""

    iteration: int
    pre_kl: float
    post_kl: float
    mean_reward_real: float
    mean_reward_synth: float
    reward_gap: float
    mean_loss: float
    grad_norm: float
    classifier_accuracy: float
    wall_time_s: float

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRICS_COLUMNS}


@dataclass
class RunManifest:
    config: RunConfig
    config_hash: str
    status: str
    iterations: list
    final_model: AutoregressiveTable | None = None

    @property
    def task_seed(self) -> int:
        return self.config.task_seed

    @property
    def run_seed(self) -> int:
        return self.config.run_seed


# ---------------------------------------------------------------------------
# Config serialization
# ---------------------------------------------------------------------------

def optimizer_to_dict(opt: OptimizerConfig) -> dict:
    return {"kind": opt.kind, "learning_rate": opt.learning_rate,
            "decay": opt.decay, "epsilon": opt.epsilon}


def optimizer_from_dict(data: dict) -> OptimizerConfig:
    return OptimizerConfig(
        kind=data.get("kind", OPT_RMSPROP),
        learning_rate=float(data.get("learning_rate", 0.01)),
        decay=float(data.get("decay", 0.99)),
        epsilon=float(data.get("epsilon", 1e-8)),
    )


def run_config_to_dict(config: RunConfig) -> dict:
    return {
        "task_seed": config.task_seed,
        "run_seed": config.run_seed,
        "objective": objective_to_dict(config.objective),
        "iterations": config.iterations,
        "epochs_per_iteration": config.epochs_per_iteration,
        "batch_size": config.batch_size,
        "dataset_size": config.dataset_size,
        "generation_ratio": config.generation_ratio,
        "optimizer": optimizer_to_dict(config.optimizer),
        "mode": config.mode,
        "regen_policy": config.regen_policy,
        "vocab_size": config.vocab_size,
        "length": config.length,
        "prompt_count": config.prompt_count,
    }


def run_config_from_dict(data: dict) -> RunConfig:
    defaults = RunConfig()
    return RunConfig(
        task_seed=int(data.get("task_seed", defaults.task_seed)),
        run_seed=int(data.get("run_seed", defaults.run_seed)),
        objective=(objective_from_dict(data["objective"])
                   if "objective" in data else SPACESpec()),
        iterations=int(data.get("iterations", defaults.iterations)),
        epochs_per_iteration=int(data.get("epochs_per_iteration",
                                          defaults.epochs_per_iteration)),
        batch_size=int(data.get("batch_size", defaults.batch_size)),
        dataset_size=int(data.get("dataset_size", defaults.dataset_size)),
        generation_ratio=float(data.get("generation_ratio",
                                        defaults.generation_ratio)),
        optimizer=optimizer_from_dict(data.get("optimizer", {})),
        mode=data.get("mode", defaults.mode),
        regen_policy=data.get("regen_policy", defaults.regen_policy),
        vocab_size=int(data.get("vocab_size", defaults.vocab_size)),
        length=int(data.get("length", defaults.length)),
        prompt_count=int(data.get("prompt_count", defaults.prompt_count)),
    )


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(run_config_to_dict(config), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Optimizer steps
# ---------------------------------------------------------------------------

def rmsprop_step(params: np.ndarray, grad: np.ndarray, state: np.ndarray,
                 lr: float, decay: float, epsilon: float):
    """One adaptive step: returns the updated (params, accumulator) pair.

    accumulator <- decay * accumulator + (1 - decay) * grad^2
    params      <- params - lr * grad / sqrt(accumulator + epsilon)
    """
    _require(params.shape == grad.shape == state.shape, "shape mismatch")
    _require(0.0 < decay < 1.0, f"decay must be in (0, 1), got {decay}")
    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(grad))):
        raise EngineAbort("non-finite input to rmsprop step")
    # overflow here surfaces as non-finite params, which the caller aborts on
    with np.errstate(over="ignore", invalid="ignore"):
        state = decay * state + (1.0 - decay) * grad ** 2
        params = params - lr * grad / np.sqrt(state + epsilon)
    return params, state


def plain_gd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        return params - lr * grad


def generate_synthetic(opponent: AutoregressiveTable, prompts, m: int,
                       rng: np.random.Generator) -> list:
    """Sample m synthetic (prompt, response) items from the opponent.

    Prompts are cycled in order when m exceeds the annotated count, so
    each annotated prompt occurrence appears ceil/floor(m/n) times.
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    _require(prompts.size >= 1, "need at least one prompt")
    _require(m >= 1, f"synthetic count must be >= 1, got {m}")
    cycled = prompts[np.arange(m) % prompts.size]
    responses = sample_batch(opponent, cycled, rng)
    return [(int(p), tuple(int(t) for t in y)) for p, y in zip(cycled, responses)]


# ---------------------------------------------------------------------------
# One self-play iteration
# ---------------------------------------------------------------------------

def _synth_batch_bounds(real_sizes, m, ratio):
    """Slice boundaries assigning round(ratio * batch) synthetic items per batch."""
    bounds = [0]
    consumed = 0.0
    for size in real_sizes:
        consumed += size * ratio
        bounds.append(min(int(round(consumed)), m))
    bounds[-1] = m
    return bounds


def _check_finite(value, what, t, epoch, batch_index):
    ok = (math.isfinite(value) if np.isscalar(value)
          else bool(np.all(np.isfinite(value))))
    if not ok:
        raise EngineAbort(
            f"non-finite {what} at iteration {t}, epoch {epoch}, batch {batch_index}",
            iteration=t, epoch=epoch, batch_index=batch_index)


def run_iteration(main: AutoregressiveTable, opponent: AutoregressiveTable,
                  dataset: AnnotatedDataset | None, task: TaskSpec | None,
                  config: RunConfig, t: int,
                  synth_items: list | None = None) -> IterationRecord:
    """Optimize the main model for one self-play iteration, in place.

    The opponent must be an independent snapshot (never aliased to
    ``main``); this function does not copy main into the opponent — the
    outer loop does, so the record reflects the opponent actually used.
    ``synth_items`` overrides synthetic generation (used for the
    fixed-regeneration policy and for forced-degeneracy experiments).
    """
    _require(opponent.logits is not main.logits,
             "opponent must be an independent snapshot of main")
    started = time.perf_counter()
    if config.mode == MODE_EXACT:
        _require(task is not None, "exact mode requires a task")
        record = _run_iteration_exact(main, opponent, task, config, t)
    else:
        _require(dataset is not None, "monte-carlo mode requires a dataset")
        if synth_items is None:
            synth_items = generate_synthetic(
                opponent, dataset.prompts(), config.synthetic_count(),
                substream(config.run_seed, SYNTH_GEN, t))
        record = _run_iteration_mc(main, opponent, dataset, task, config, t,
                                   synth_items)
    record.wall_time_s = time.perf_counter() - started
    return record


def _run_iteration_mc(main, opponent, dataset, task, config, t, synth_items):
    pre_kl = _kl_or_nan(task, main)
    n = dataset.n
    m = len(synth_items)
    ratio = config.generation_ratio
    opt = config.optimizer
    opt_state = np.zeros_like(main.logits)
    loss_sum = 0.0
    loss_count = 0
    grad_norm = 0.0
    for epoch in range(config.epochs_per_iteration):
        perm = substream(config.run_seed, BATCH_SHUFFLE, t, epoch).permutation(n)
        starts = list(range(0, n, config.batch_size))
        real_batches = [perm[s:s + config.batch_size] for s in starts]
        if m == n:
            synth_batches = [[synth_items[i] for i in chunk] for chunk in real_batches]
        else:
            sperm = substream(config.run_seed, SYNTH_SHUFFLE, t, epoch).permutation(m)
            bounds = _synth_batch_bounds([len(c) for c in real_batches], m, ratio)
            synth_batches = [[synth_items[sperm[j]] for j in range(bounds[b], bounds[b + 1])]
                             for b in range(len(real_batches))]
        for b, chunk in enumerate(real_batches):
            batch = LabeledBatch(
                real_items=[dataset.items[i] for i in chunk],
                synth_items=synth_batches[b],
            )
            loss, grad = loss_and_grad(config.objective, batch, main, opponent)
            _check_finite(loss, "loss", t, epoch, b)
            _check_finite(grad, "gradient", t, epoch, b)
            if opt.kind == OPT_RMSPROP:
                main.logits, opt_state = rmsprop_step(
                    main.logits, grad, opt_state,
                    opt.learning_rate, opt.decay, opt.epsilon)
            else:
                main.logits = plain_gd_step(main.logits, grad, opt.learning_rate)
            _check_finite(main.logits, "parameters", t, epoch, b)
            loss_sum += loss
            loss_count += 1
            grad_norm = max(grad_norm, float(np.abs(grad).max()))
    full_batch = LabeledBatch(real_items=list(dataset.items),
                              synth_items=list(synth_items))
    rewards = reward_summary(full_batch, main, opponent)
    accuracy = classifier_accuracy(full_batch, main, opponent, ratio)
    return IterationRecord(
        iteration=t,
        pre_kl=pre_kl,
        post_kl=_kl_or_nan(task, main),
        mean_reward_real=rewards.mean_reward_real,
        mean_reward_synth=rewards.mean_reward_synth,
        reward_gap=rewards.reward_gap,
        mean_loss=loss_sum / loss_count,
        grad_norm=grad_norm,
        classifier_accuracy=accuracy,
        wall_time_s=0.0,
    )


def _run_iteration_exact(main, opponent, task, config, t):
    # exact mode always takes plain-gradient steps: adaptive state would
    # contaminate stationarity checks
    pre_kl = kl_divergence(task.target, main, task.prompt_dist)
    steps = config.epochs_per_iteration * max(
        1, -(-config.dataset_size // config.batch_size))
    loss_sum = 0.0
    grad_norm = 0.0
    for s in range(steps):
        loss, grad = oracle.exact_loss_and_grad(config.objective, main, opponent, task)
        _check_finite(loss, "loss", t, 0, s)
        _check_finite(grad, "gradient", t, 0, s)
        main.logits = plain_gd_step(main.logits, grad, config.optimizer.learning_rate)
        _check_finite(main.logits, "parameters", t, 0, s)
        loss_sum += loss
        grad_norm = max(grad_norm, float(np.abs(grad).max()))
    rewards = exact_reward_summary(main, opponent, task)
    accuracy = exact_classifier_accuracy(main, opponent, task,
                                         config.generation_ratio)
    return IterationRecord(
        iteration=t,
        pre_kl=pre_kl,
        post_kl=kl_divergence(task.target, main, task.prompt_dist),
        mean_reward_real=rewards.mean_reward_real,
        mean_reward_synth=rewards.mean_reward_synth,
        reward_gap=rewards.reward_gap,
        mean_loss=loss_sum / steps,
        grad_norm=grad_norm,
        classifier_accuracy=accuracy,
        wall_time_s=0.0,
    )


def _kl_or_nan(task, main):
    if task is None:
        return float("nan")
    return kl_divergence(task.target, main, task.prompt_dist)


# ---------------------------------------------------------------------------
# The outer loop
# ---------------------------------------------------------------------------

def selfplay_loop(main: AutoregressiveTable, opponent: AutoregressiveTable,
                  dataset: AnnotatedDataset | None, task: TaskSpec | None,
                  config: RunConfig, observer=None):
    """Run all iterations; returns the per-iteration records.

    ``observer``, when given, is called as ``observer(t, main, opponent,
    record)`` right after the opponent snapshot at each boundary.
    """
    records = []
    fixed_synth = None
    for t in range(config.iterations):
        synth_override = None
        if (config.mode == MODE_MONTE_CARLO
                and config.regen_policy == REGEN_FIXED):
            if fixed_synth is None:
                fixed_synth = generate_synthetic(
                    opponent, dataset.prompts(), config.synthetic_count(),
                    substream(config.run_seed, SYNTH_GEN, 0))
            synth_override = fixed_synth
        try:
            record = run_iteration(main, opponent, dataset, task, config, t,
                                   synth_items=synth_override)
        except EngineAbort as abort:
            abort.partial_records = records
            raise
        records.append(record)
        opponent.logits = snapshot(main).logits
        if observer is not None:
            observer(t, main, opponent, record)
    return records


def run(config: RunConfig, task: TaskSpec | None = None,
        init: AutoregressiveTable | str | None = None,
        observer=None) -> RunManifest:
    """Execute a full self-play run from a config.

    Builds the task and annotated dataset from the config seeds (or uses a
    supplied task), initializes main = opponent = uniform (the
    uninformative stand-in for a pretrained model; ``init`` can override
    with ``"target"`` or an explicit model), and loops: optimize, then
    copy main into the opponent. On a non-finite abort the partial
    manifest is attached to the raised :class:`EngineAbort`.
    """
    config.validate()
    if task is None:
        task = make_task(config.task_seed, config.vocab_size, config.length,
                         config.prompt_count)
    else:
        config = replace(config, vocab_size=task.vocab_size, length=task.length,
                         prompt_count=task.prompt_count, task_seed=task.seed)
    if init is None:
        main = AutoregressiveTable.uniform(task.vocab_size, task.length,
                                           task.prompt_count)
    elif init == "target":
        main = snapshot(task.target)
    else:
        main = snapshot(init)
    opponent = snapshot(main)
    dataset = None
    if config.mode == MODE_MONTE_CARLO:
        dataset = sample_dataset(task, config.dataset_size)
    try:
        records = selfplay_loop(main, opponent, dataset, task, config, observer)
    except EngineAbort as abort:
        abort.manifest = RunManifest(config=config, config_hash=config_hash(config),
                                     status="aborted",
                                     iterations=getattr(abort, "partial_records", []),
                                     final_model=main)
        raise
    return RunManifest(config=config, config_hash=config_hash(config),
                       status="completed", iterations=records, final_model=main)


# ---------------------------------------------------------------------------
# Manifest and metrics persistence
# ---------------------------------------------------------------------------

def manifest_to_dict(manifest: RunManifest) -> dict:
    return {
        "format_version": 1,
        "config": run_config_to_dict(manifest.config),
        "config_hash": manifest.config_hash,
        "task_seed": manifest.task_seed,
        "run_seed": manifest.run_seed,
        "status": manifest.status,
        "iterations": [record.to_dict() for record in manifest.iterations],
    }


def write_manifest(manifest: RunManifest, path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest_to_dict(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics_csv(records: list, path) -> None:
    """One row per iteration; float fields use repr so values round-trip."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for record in records:
            row = record.to_dict()
            writer.writerow([row["iteration"]]
                            + [repr(float(row[c])) for c in METRICS_COLUMNS[1:]])
