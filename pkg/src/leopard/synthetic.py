"""Synthetic marker-token task distribution.

A task picks N (2 or 3) marker tokens; every example is a sequence of
distinct filler tokens plus repeated occurrences of exactly one marker,
and the label names that marker (the marker is the only repeated token). Train and test tasks draw their markers from
disjoint pools, so test tasks are genuinely unseen; filler tokens are
shared, which keeps every embedding exercised during training.
"""

import numpy as np

from .data import Example, TaskData, TaskSpec, Vocabulary


def marker_vocabulary(vocab_size=200):
    return Vocabulary(f"tok{i}" for i in range(vocab_size))


def _make_example(marker, fillers, seq_len, n_marker, rng):
    # fillers are drawn without replacement so the marker is the one
    # repeated token: class identity is recoverable from sequence
    # structure alone, independent of which token plays the marker
    body = list(rng.choice(fillers, size=seq_len, replace=False))
    pos = rng.choice(seq_len, size=min(n_marker, seq_len), replace=False)
    for p in pos:
        body[p] = marker
    return Example(text=" ".join(body), label=marker)


def make_marker_task(name, markers, filler_pool, rng, n_train=60, n_val=20, n_test=40,
                     seq_len=6, n_marker=4):
    """One N-way task: label = which marker token the sequence contains."""
    fillers = [t for t in filler_pool if t not in markers]
    spec = TaskSpec(name=name, kind="single", labels=tuple(markers))
    task = TaskData(spec=spec)
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        exs = []
        for _ in range(n):
            m = markers[rng.integers(len(markers))]
            exs.append(_make_example(m, fillers, seq_len, n_marker, rng))
        setattr(task, split, exs)
    return task


def make_marker_benchmark(n_train_tasks=30, n_test_tasks=20, vocab_size=200, seed=0,
                          seq_len=6, n_marker=4, examples_per_task=60):
    """(train_tasks, test_tasks, vocab): the few-shot transfer benchmark.

    Marker pools for train and test tasks are disjoint subsets of the
    token vocabulary; N per task alternates in {2, 3}.
    """
    rng = np.random.default_rng(seed)
    vocab = marker_vocabulary(vocab_size)
    tokens = [f"tok{i}" for i in range(vocab_size)]
    perm = rng.permutation(vocab_size)
    n_test_markers = 3 * n_test_tasks
    test_pool = [tokens[i] for i in perm[:n_test_markers]]
    train_pool = [tokens[i] for i in perm[n_test_markers:]]

    def build(prefix, count, pool):
        tasks = []
        for t in range(count):
            n_way = 2 + t % 2
            markers = list(rng.choice(pool, size=n_way, replace=False))
            tasks.append(make_marker_task(f"{prefix}{t}", markers, tokens, rng,
                                          n_train=examples_per_task, seq_len=seq_len,
                                          n_marker=n_marker))
        return tasks

    train_tasks = build("train", n_train_tasks, train_pool)
    test_tasks = build("test", n_test_tasks, test_pool)
    return train_tasks, test_tasks, vocab
