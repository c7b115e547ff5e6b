"""k-shot evaluation protocol, paired supports and the leave-one-task-out
study driver.

For every (task, k) the harness samples 10 support sets (seeds 0..9),
fine-tunes or adapts per method, and scores the full test split. The
support draw depends only on (task, k, seed), so every method sees
byte-identical supports and comparisons are paired."""

import csv
import json
import statistics
from dataclasses import dataclass

import numpy as np

from .data import sample_kshot_train

N_EVAL_SEEDS = 10


@dataclass(frozen=True)
class EvalReport:
    task: str
    method: str
    k: int
    seed_accuracies: tuple  # one accuracy per evaluation seed
    mean: float
    std: float  # sample standard deviation

    @classmethod
    def from_accuracies(cls, task, method, k, accs):
        accs = tuple(float(a) for a in accs)
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ValueError(f"accuracies outside [0, 1]: {accs}")
        return cls(task=task, method=method, k=k, seed_accuracies=accs,
                   mean=statistics.fmean(accs),
                   std=statistics.stdev(accs) if len(accs) > 1 else 0.0)


def kshot_evaluate(make_predictor, task, method, k, n_seeds=N_EVAL_SEEDS, n_threads=1):
    """Run the 10-seed protocol for one (task, method, k).

    `make_predictor(task, support, seed)` returns an object with
    .accuracy(examples); the support is the paired (task, k, seed) draw.
    Seeds are independent, so they may run on `n_threads` workers; the
    report is assembled in seed order either way.
    """
    if not task.test:
        raise ValueError(f"task {task.name} has no test split")

    def one_seed(seed):
        support = sample_kshot_train(task, k, seed)
        return make_predictor(task, support, seed).accuracy(task.test)

    if n_threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            accs = list(pool.map(one_seed, range(n_seeds)))
    else:
        accs = [one_seed(seed) for seed in range(n_seeds)]
    return EvalReport.from_accuracies(task.name, method, k, accs)


def write_reports_csv(path, reports):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "method", "k", "mean", "std", "seed_accs"])
        for r in reports:
            w.writerow([r.task, r.method, r.k, f"{r.mean:.6f}", f"{r.std:.6f}",
                        ";".join(f"{a:.6f}" for a in r.seed_accuracies)])


def write_reports_jsonl(path, reports):
    with open(path, "w") as f:
        for r in reports:
            f.write(json.dumps({"task": r.task, "method": r.method, "k": r.k,
                                "mean": r.mean, "std": r.std,
                                "seed_accuracies": list(r.seed_accuracies)}) + "\n")


def tune_epochs(make_predictor_with_epochs, task, k, epoch_grid, n_seeds=3):
    """Pick fine-tuning epochs by validation-split accuracy on a tuning task."""
    if not task.val:
        raise ValueError(f"tuning task {task.name} has no validation split")
    best_epochs, best_acc = epoch_grid[0], -1.0
    for epochs in epoch_grid:
        accs = []
        for seed in range(n_seeds):
            support = sample_kshot_train(task, k, seed)
            predictor = make_predictor_with_epochs(task, support, seed, epochs)
            accs.append(predictor.accuracy(task.val))
        acc = float(np.mean(accs))
        if acc > best_acc:
            best_epochs, best_acc = epochs, acc
    return best_epochs, best_acc


def leave_one_task_out(train_tasks, target_tasks, train_fn, eval_fn, k):
    """Retrain once per held-out training task and measure relative change.

    `train_fn(tasks)` returns a trained model; `eval_fn(model, task, k)`
    returns an EvalReport. Output: dict with the all-tasks baseline row
    and a (held-out -> target -> relative change) matrix, where relative
    change = (acc_heldout - acc_all) / acc_all.
    """
    if len(train_tasks) < 2:
        raise ValueError("leave_one_task_out needs at least 2 training tasks")
    base_model = train_fn(train_tasks)
    baseline = {t.name: eval_fn(base_model, t, k) for t in target_tasks}
    matrix = {}
    for held in train_tasks:
        kept = [t for t in train_tasks if t.name != held.name]
        model = train_fn(kept)
        row = {}
        for t in target_tasks:
            rep = eval_fn(model, t, k)
            base = baseline[t.name].mean
            row[t.name] = {
                "mean": rep.mean,
                "relative_change": (rep.mean - base) / base if base else float("nan"),
            }
        matrix[held.name] = row
    return {"baseline": {name: {"mean": r.mean, "std": r.std}
                         for name, r in baseline.items()},
            "matrix": matrix}


def write_loto_csv(path, result, target_names):
    """Relative-change matrix as CSV (rows = held-out task, cols = targets)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["held_out"] + list(target_names))
        w.writerow(["<none>"] + [f"{result['baseline'][t]['mean']:.6f}" for t in target_names])
        for held, row in result["matrix"].items():
            w.writerow([held] + [f"{row[t]['relative_change']:.6f}" for t in target_names])
