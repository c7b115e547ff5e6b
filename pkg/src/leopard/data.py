"""Datasets, tokenization, input transformations and episodic sampling.

Text is whitespace-tokenized against a fixed vocabulary (case preserved).
Examples live in JSONL files ({"text": ..., "text_pair": ..., "label": ...});
a task manifest lists the tasks with their input kind and split paths.
Phrase tasks are materialized as pair tasks at ingestion, so downstream
code only ever sees {single, pair}.
"""

import itertools
import json
from dataclasses import dataclass, field, replace

import numpy as np

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
RESERVED = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]


class DataError(ValueError):
    pass


class Vocabulary:
    """token -> id map with fixed reserved ids for PAD/UNK/CLS/SEP."""

    def __init__(self, tokens=()):
        self._ids = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            self.add(t)

    def add(self, token):
        if token not in self._ids:
            self._ids[token] = len(self._ids)
        return self._ids[token]

    def id(self, token):
        return self._ids.get(token, UNK_ID)

    def __len__(self):
        return len(self._ids)

    def __contains__(self, token):
        return token in self._ids

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls(line.rstrip("\n") for line in f if line.rstrip("\n"))

    def save(self, path):
        inv = sorted((i, t) for t, i in self._ids.items() if i >= len(RESERVED))
        with open(path, "w") as f:
            for _, t in inv:
                f.write(t + "\n")


@dataclass(frozen=True)
class Example:
    text: str
    label: str
    text_pair: str = None


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # "single" | "pair" | "phrase"
    labels: tuple
    train_path: str = None
    val_path: str = None
    test_path: str = None

    def __post_init__(self):
        if self.kind not in ("single", "pair", "phrase"):
            raise DataError(f"unknown task kind {self.kind!r}")
        if len(set(self.labels)) != len(self.labels) or len(self.labels) < 2:
            raise DataError(f"task {self.name}: labels must be distinct and >= 2")
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n_classes(self):
        return len(self.labels)


@dataclass
class TaskData:
    """A task spec together with its loaded splits."""

    spec: TaskSpec
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def name(self):
        return self.spec.name

    @property
    def size(self):
        return len(self.train)

    def by_label(self, split="train"):
        groups = {lab: [] for lab in self.spec.labels}
        for ex in getattr(self, split):
            if ex.label not in groups:
                raise DataError(f"task {self.name}: example label {ex.label!r} not in label set")
            groups[ex.label].append(ex)
        return groups


@dataclass(frozen=True)
class Episode:
    task: str
    generation_batch: tuple
    adaptation_batches: tuple  # G batches
    validation_batch: tuple


def load_examples(path):
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(Example(text=obj["text"], label=obj["label"],
                               text_pair=obj.get("text_pair")))
    return out


def load_task(spec):
    """Load a task's splits; phrase tasks come back as pair tasks."""
    data = TaskData(spec=spec)
    for split, path in (("train", spec.train_path), ("val", spec.val_path),
                        ("test", spec.test_path)):
        if path:
            setattr(data, split, load_examples(path))
    if spec.kind == "phrase":
        data.spec = replace(spec, kind="pair")
    return data


def encode_input(example, kind, vocab, max_len):
    """Token ids: [CLS] text (single) or [CLS] text [SEP] text_pair,
    truncated to max_len (keeping [CLS] and at least one token after [SEP])
    and padded with [PAD]."""
    if max_len < 3:
        raise DataError(f"max_len must be >= 3, got {max_len}")
    toks = [vocab.id(t) for t in example.text.split()]
    if kind == "single":
        ids = [CLS_ID] + toks
        ids = ids[:max_len]
    else:
        if example.text_pair is None:
            raise DataError(f"{kind} example is missing text_pair: {example.text!r}")
        toks2 = [vocab.id(t) for t in example.text_pair.split()]
        # budget: CLS + first segment + SEP + at least one second-segment token
        first = toks[:max_len - 3]
        rest = max_len - 2 - len(first)
        ids = [CLS_ID] + first + [SEP_ID] + toks2[:rest]
    ids = ids + [PAD_ID] * (max_len - len(ids))
    return ids


def encode_batch(examples, kind, vocab, max_len):
    """(n, max_len) int array plus the label strings."""
    ids = np.array([encode_input(ex, kind, vocab, max_len) for ex in examples], dtype=np.int64)
    return ids


def labels_to_indices(examples, labels):
    index = {lab: i for i, lab in enumerate(labels)}
    out = []
    for ex in examples:
        if ex.label not in index:
            raise DataError(f"label {ex.label!r} not in task label set {list(labels)}")
        out.append(index[ex.label])
    return np.array(out, dtype=np.int64)


def augment_pairwise(task):
    """Split an N-label task into C(N, 2) binary tasks (identity for N=2)."""
    spec = task.spec
    if spec.n_classes == 2:
        return [task]
    out = []
    for a, b in itertools.combinations(spec.labels, 2):
        pair_spec = TaskSpec(name=f"{spec.name}:{a}-vs-{b}", kind=spec.kind, labels=(a, b))
        sub = TaskData(spec=pair_spec)
        for split in ("train", "val", "test"):
            setattr(sub, split,
                    [ex for ex in getattr(task, split) if ex.label in (a, b)])
        out.append(sub)
    return out


def _sample_k_per_label(groups, k, rng, what):
    batch = []
    for lab, pool in groups.items():
        if len(pool) < k:
            raise DataError(f"{what}: label {lab!r} has only {len(pool)} examples, need {k}")
        idx = rng.choice(len(pool), size=k, replace=False)
        batch.extend(pool[i] for i in idx)
    return tuple(batch)


def sample_episode(task, k, G, rng):
    """One generation batch + G adaptation batches + one validation batch,
    each with exactly k examples per label. Sampling is without replacement
    within a batch and with replacement across batches; the validation
    batch avoids the generation batch when the data permits."""
    groups = task.by_label("train")
    gen = _sample_k_per_label(groups, k, rng, f"task {task.name} generation batch")
    adapt = tuple(_sample_k_per_label(groups, k, rng, f"task {task.name} adaptation batch {s}")
                  for s in range(G))
    gen_set = set(map(id, gen))
    val_groups = {}
    for lab, pool in groups.items():
        held = [ex for ex in pool if id(ex) not in gen_set]
        val_groups[lab] = held if len(held) >= k else pool
    val = _sample_k_per_label(val_groups, k, rng, f"task {task.name} validation batch")
    return Episode(task=task.name, generation_batch=gen,
                   adaptation_batches=adapt, validation_batch=val)


def sample_task(tasks, rng):
    """Square-root-of-size proportional task sampling."""
    if not tasks:
        raise DataError("sample_task: empty task list")
    w = np.array([np.sqrt(t.size) for t in tasks], dtype=np.float64)
    p = w / w.sum()
    return tasks[rng.choice(len(tasks), p=p)]


def sample_kshot_train(task, k, seed):
    """Deterministic k-per-label support draw for test-time fine-tuning."""
    rng = np.random.default_rng(seed)
    groups = task.by_label("train")
    return list(_sample_k_per_label(groups, k, rng, f"task {task.name} k-shot support"))
