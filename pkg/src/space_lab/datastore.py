"""Task and dataset generation plus on-disk persistence.

Tasks serialize to a single JSON document; datasets use JSONL with a
header line, one item per following line. Every file carries a
``format_version`` field so stale artifacts fail loudly instead of
parsing into garbage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation, SupportCapExceeded
from .seeding import DATASET_ITEM, TASK_LOGITS, substream
from .task_model import (
    DEFAULT_SUPPORT_CAP,
    AutoregressiveTable,
    PromptDistribution,
    TaskSpec,
    sample_batch,
)

FORMAT_VERSION = 1


@dataclass
class AnnotatedDataset:
    """The annotated (prompt, response) collection a run trains on."""

    items: list
    task_seed: int

    @property
    def n(self) -> int:
        return len(self.items)

    def prompts(self) -> np.ndarray:
        return np.array([p for p, _ in self.items], dtype=np.int64)


def make_task(seed: int, vocab_size: int, length: int, prompt_count: int,
              cap: int = DEFAULT_SUPPORT_CAP,
              uniform_target: bool = False) -> TaskSpec:
    """Build a reproducible ground-truth task from a seed.

    Prompt weights are uniform; target logits are i.i.d. uniform on
    [-2, 2], which yields per-prompt probability ratios spanning roughly
    e^4 — far from uniform but nowhere near degenerate. The
    ``uniform_target`` switch zeroes the logits for debugging.
    """
    if seed < 0:
        raise ContractViolation(f"seed must be nonnegative, got {seed}")
    if vocab_size ** length > cap:
        raise SupportCapExceeded(
            f"support too large: {vocab_size}**{length} exceeds cap {cap}")
    target = AutoregressiveTable(vocab_size, length, prompt_count)
    if not uniform_target:
        rng = substream(seed, TASK_LOGITS)
        target.logits = rng.uniform(-2.0, 2.0, size=target.logits.shape)
    return TaskSpec(prompt_dist=PromptDistribution.uniform(prompt_count),
                    target=target, seed=seed)


def sample_dataset(task: TaskSpec, n: int, seed: int | None = None) -> AnnotatedDataset:
    """Draw n i.i.d. (prompt, response) items from the task.

    Each item gets its own substream keyed by its index, so generating the
    dataset in partitions yields exactly the same items as generating it
    sequentially.
    """
    if n < 1:
        raise ContractViolation(f"dataset size must be >= 1, got {n}")
    seed = task.seed if seed is None else seed
    items = []
    for i in range(n):
        rng = substream(seed, DATASET_ITEM, i)
        prompt = int(task.prompt_dist.sample(rng))
        response = tuple(int(t) for t in
                         sample_batch(task.target, np.array([prompt]), rng)[0])
        items.append((prompt, response))
    return AnnotatedDataset(items=items, task_seed=seed)


# ---------------------------------------------------------------------------
# Task serialization
# ---------------------------------------------------------------------------

def task_to_dict(task: TaskSpec) -> dict:
    target = task.target
    offsets = target.node_offsets()
    nested = []
    for p in range(target.prompt_count):
        per_position = []
        for pos in range(target.length):
            start = int(offsets[pos])
            count = target.vocab_size ** pos
            per_position.append(target.logits[p, start:start + count, :].tolist())
        nested.append(per_position)
    return {
        "format_version": FORMAT_VERSION,
        "seed": task.seed,
        "vocab_size": target.vocab_size,
        "length": target.length,
        "prompt_count": target.prompt_count,
        "prompt_weights": task.prompt_dist.weights.tolist(),
        "target_logits": nested,
    }


def task_from_dict(data: dict) -> TaskSpec:
    _check_version(data)
    vocab = int(data["vocab_size"])
    length = int(data["length"])
    prompts = int(data["prompt_count"])
    target = AutoregressiveTable(vocab, length, prompts)
    logits = np.zeros_like(target.logits)
    offsets = target.node_offsets()
    nested = data["target_logits"]
    if len(nested) != prompts:
        raise ContractViolation(
            f"target_logits has {len(nested)} prompt entries, expected {prompts}")
    for p in range(prompts):
        for pos in range(length):
            block = np.asarray(nested[p][pos], dtype=np.float64)
            count = vocab ** pos
            if block.shape != (count, vocab):
                raise ContractViolation(
                    f"logit block for prompt {p} position {pos} has shape "
                    f"{block.shape}, expected {(count, vocab)}")
            start = int(offsets[pos])
            logits[p, start:start + count, :] = block
    target.logits = logits
    return TaskSpec(prompt_dist=PromptDistribution(data["prompt_weights"]),
                    target=target, seed=int(data["seed"]))


def save_task(task: TaskSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(task_to_dict(task), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_task(path) -> TaskSpec:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ContractViolation(f"malformed task file {path}: {exc}") from exc
    return task_from_dict(data)


# ---------------------------------------------------------------------------
# Dataset serialization (JSONL: header line, then one item per line)
# ---------------------------------------------------------------------------

def save_dataset(dataset: AnnotatedDataset, path, label: str = "real") -> None:
    with open(path, "w") as fh:
        header = {"format_version": FORMAT_VERSION, "kind": "dataset",
                  "task_seed": dataset.task_seed, "n": dataset.n}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for prompt, response in dataset.items:
            row = {"prompt": int(prompt), "response": [int(t) for t in response],
                   "label": label}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path) -> AnnotatedDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ContractViolation(f"empty dataset file: {path}")
    header = _parse_line(lines[0], path, 1)
    _check_version(header)
    if header.get("kind") != "dataset":
        raise ContractViolation(
            f"{path} is not a dataset file (kind={header.get('kind')!r})")
    items = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        row = _parse_line(raw, path, lineno)
        try:
            items.append((int(row["prompt"]), tuple(int(t) for t in row["response"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractViolation(
                f"{path}:{lineno}: bad dataset row: {exc}") from exc
    if not items:
        raise ContractViolation(f"empty dataset: {path} has a header but no items")
    declared = int(header.get("n", len(items)))
    if declared != len(items):
        raise ContractViolation(
            f"{path}: header declares {declared} items but file has {len(items)}")
    return AnnotatedDataset(items=items, task_seed=int(header.get("task_seed", 0)))


def _parse_line(raw: str, path, lineno: int) -> dict:
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ContractViolation(f"{path}:{lineno}: malformed JSON: {exc}") from exc


def _check_version(data: dict) -> None:
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ContractViolation(
            f"unsupported format_version {version!r}, expected {FORMAT_VERSION}")
