"""Command-line surface: meta-train, baseline-train, eval, loto,
gradcheck and episode-dump subcommands.

Exit codes: 0 success, 1 runtime error (one-line diagnostic on stderr),
2 usage error. The LEOPARD_THREADS env var controls how many evaluation
seeds run concurrently (default 1)."""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .baselines import TaskHead, finetune_eval, mtl_train, proto_train, ProtoModel
from .config import builtin_profile, load_manifest, load_profile
from .data import sample_episode
from .evaluate import (kshot_evaluate, leave_one_task_out, write_loto_csv,
                       write_reports_csv, write_reports_jsonl)
from .meta import MetaConfig, finetune_adapt, meta_train, partition
from .synthetic import make_marker_benchmark

EVAL_METHODS = ("leopard", "leopard-zero", "proto", "finetune",
                "mtl-full", "mtl-softmax", "mtl-reuse")


def _n_threads():
    try:
        return max(1, int(os.environ.get("LEOPARD_THREADS", "1")))
    except ValueError:
        return 1


def _load_tasks(args):
    if args.synthetic:
        train, test, vocab = make_marker_benchmark(seed=args.data_seed)
        return train, test, vocab
    if not args.manifest:
        raise ValueError("provide --manifest or --synthetic")
    tasks, vocab = load_manifest(args.manifest)
    return tasks, tasks, vocab


def _run_config(args):
    if args.config:
        return load_profile(args.config)
    return builtin_profile(args.profile)


def _find_task(tasks, name):
    for t in tasks:
        if t.name == name:
            return t
    raise ValueError(f"unknown task {name!r}; have {[t.name for t in tasks]}")


def cmd_meta_train(args):
    cfg = _run_config(args)
    train_tasks, _, vocab = _load_tasks(args)
    enc_cfg = cfg.encoder_config(len(vocab))
    overrides = {"zero_softmax": args.zero_softmax}
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if args.seed is not None:
        overrides["seed"] = args.seed
    meta_cfg = cfg.meta_config(**overrides)
    params, part, log = meta_train(train_tasks, enc_cfg, meta_cfg, vocab,
                                   log_path=args.log, progress=args.progress)
    header = {"kind": "leopard-zero" if args.zero_softmax else "leopard",
              "run_config": cfg.as_dict(),
              "meta": dataclasses.asdict(meta_cfg),
              "vocab_size": len(vocab)}
    ckpt.save_checkpoint(args.out, params, config=header, seed=meta_cfg.seed)
    print(f"saved checkpoint to {args.out} ({len(log)} episode records)")
    return 0


def cmd_baseline_train(args):
    cfg = _run_config(args)
    train_tasks, _, vocab = _load_tasks(args)
    enc_cfg = cfg.encoder_config(len(vocab))
    t = cfg.training
    if args.method == "proto":
        model, log = proto_train(train_tasks, enc_cfg, vocab,
                                 episodes=args.episodes or int(t["episodes"]),
                                 k=int(t["batch_size"]), lr=float(t["outer_lr"]),
                                 seed=args.seed or int(t["seed"]),
                                 progress=args.progress)
        params = model.params
        header = {"kind": "proto", "run_config": cfg.as_dict(), "vocab_size": len(vocab)}
    else:
        model, log = mtl_train(train_tasks, enc_cfg, vocab,
                               steps=args.episodes or int(t["episodes"]),
                               lr=float(t["outer_lr"]), seed=args.seed or int(t["seed"]),
                               progress=args.progress)
        params = dict(model.params)
        for name, head in model.heads.items():
            params[f"heads.{name}.W"] = head.W
            params[f"heads.{name}.b"] = head.b
        header = {"kind": "mtl", "run_config": cfg.as_dict(), "vocab_size": len(vocab)}
    ckpt.save_checkpoint(args.out, params, config=header, seed=args.seed or int(t["seed"]))
    print(f"saved {args.method} checkpoint to {args.out}")
    return 0


def _split_heads(params):
    heads, rest = {}, {}
    for path, t in params.items():
        if path.startswith("heads."):
            name, leaf = path[len("heads."):].rsplit(".", 1)
            heads.setdefault(name, {})[leaf] = t
        else:
            rest[path] = t
    return rest, {name: TaskHead(name=name, W=d["W"], b=d["b"]) for name, d in heads.items()}


def make_predictor_factory(method, params, header, cfg, enc_cfg, vocab, epochs, lr):
    """Bind an eval method to a `(task, support, seed) -> predictor` closure."""
    if method in ("leopard", "leopard-zero"):
        zero = method == "leopard-zero"
        meta_hdr = header.get("meta", {})
        meta_cfg = MetaConfig(
            adaptation_steps=int(meta_hdr.get("adaptation_steps", 2)),
            outer_lr=float(meta_hdr.get("outer_lr", 1e-3)),
            k=int(meta_hdr.get("k", 4)), nu=int(meta_hdr.get("nu", 0)),
            zero_softmax=zero)
        part = partition(params, meta_cfg.nu, enc_cfg.n_layers)

        def make(task, support, seed):
            return finetune_adapt(params, part, enc_cfg, meta_cfg, task, support,
                                  vocab, epochs)
        return make
    if method == "proto":
        model = ProtoModel(params={p: t for p, t in params.items()
                                   if p.startswith("encoder.")},
                           enc_cfg=enc_cfg, vocab=vocab)

        def make(task, support, seed):
            return model.predictor(task, support)
        return make

    mode = {"finetune": "full", "mtl-full": "full", "mtl-softmax": "softmax_only",
            "mtl-reuse": "reuse_head"}[method]
    enc_params, heads = _split_heads(params)

    def make(task, support, seed):
        donor = None
        if mode == "reuse_head":
            for head in heads.values():
                if head.W.data.shape[0] == task.spec.n_classes:
                    donor = head
                    break
            if donor is None:
                raise ValueError(
                    f"no donor head with {task.spec.n_classes} classes for task {task.name}")
        return finetune_eval(enc_params, enc_cfg, mode, task, support, vocab,
                             epochs, lr, donor_head=donor)
    return make


def _load_eval_model(args, cfg, vocab):
    if args.checkpoint:
        params, _, header = ckpt.load_checkpoint(args.checkpoint)
        header = header.get("config", {})
        vocab_size = header.get("vocab_size", len(vocab))
        enc_cfg = cfg.encoder_config(vocab_size)
        return params, header, enc_cfg
    if args.method != "finetune":
        raise ValueError(f"--checkpoint is required for method {args.method}")
    # random-init fine-tuning baseline
    from .encoder import init_encoder_params
    enc_cfg = cfg.encoder_config(len(vocab))
    params = init_encoder_params(enc_cfg, np.random.default_rng(args.seed or 0))
    return params, {"kind": "random-init"}, enc_cfg


def cmd_eval(args):
    cfg = _run_config(args)
    _, eval_tasks, vocab = _load_tasks(args)
    params, header, enc_cfg = _load_eval_model(args, cfg, vocab)
    ks = [int(x) for x in args.k.split(",")]
    if args.tasks:
        eval_tasks = [_find_task(eval_tasks, n) for n in args.tasks.split(",")]
    lr = args.lr if args.lr is not None else float(cfg.finetune["lr"])
    reports = []
    for k in ks:
        epochs = args.epochs if args.epochs is not None else cfg.epochs_for_k(k)
        factory = make_predictor_factory(args.method, params, header, cfg, enc_cfg,
                                         vocab, epochs, lr)
        if args.tune_on:
            from .evaluate import tune_epochs
            tune_task = _find_task(eval_tasks, args.tune_on)

            def with_epochs(task, support, seed, e):
                return make_predictor_factory(args.method, params, header, cfg,
                                              enc_cfg, vocab, e, lr)(task, support, seed)
            epochs, acc = tune_epochs(with_epochs, tune_task, k,
                                      epoch_grid=[0, 10, 25, 50, 100, 150])
            print(f"k={k}: tuned epochs={epochs} (val acc {acc:.3f} on {args.tune_on})")
            factory = make_predictor_factory(args.method, params, header, cfg,
                                             enc_cfg, vocab, epochs, lr)
        for task in eval_tasks:
            if args.tune_on and task.name == args.tune_on:
                continue
            rep = kshot_evaluate(factory, task, args.method, k, n_threads=_n_threads())
            reports.append(rep)
            print(f"{task.name} {args.method} k={k}: "
                  f"{100 * rep.mean:.2f} +/- {100 * rep.std:.2f}")
    os.makedirs(args.out, exist_ok=True)
    write_reports_csv(os.path.join(args.out, "reports.csv"), reports)
    write_reports_jsonl(os.path.join(args.out, "reports.jsonl"), reports)
    print(f"wrote {len(reports)} reports to {args.out}")
    return 0


def cmd_loto(args):
    cfg = _run_config(args)
    train_tasks, eval_tasks, vocab = _load_tasks(args)
    enc_cfg = cfg.encoder_config(len(vocab))
    meta_cfg = cfg.meta_config(episodes=args.episodes or int(cfg.training["episodes"]))
    targets = ([_find_task(eval_tasks, n) for n in args.tasks.split(",")]
               if args.tasks else eval_tasks)
    epochs = args.epochs if args.epochs is not None else cfg.epochs_for_k(args.k)

    def train_fn(tasks):
        params, part, _ = meta_train(tasks, enc_cfg, meta_cfg, vocab)
        return (params, part)

    def eval_fn(model, task, k):
        params, part = model

        def make(task_, support, seed):
            return finetune_adapt(params, part, enc_cfg, meta_cfg, task_, support,
                                  vocab, epochs)
        return kshot_evaluate(make, task, "leopard", k, n_threads=_n_threads())

    result = leave_one_task_out(train_tasks, targets, train_fn, eval_fn, args.k)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "loto.json"), "w") as f:
        json.dump(result, f, indent=2)
    write_loto_csv(os.path.join(args.out, "loto.csv"), result,
                   [t.name for t in targets])
    print(f"wrote leave-one-task-out study to {args.out}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import check_full_loss
    per_group, overall = check_full_loss(samples_per_tensor=args.samples, seed=args.seed or 0)
    for group in sorted(per_group):
        print(f"{group}: max rel err {per_group[group]:.3e}")
    print(f"overall max relative error: {overall:.3e}")
    if overall >= 1e-4:
        print("gradcheck FAILED (threshold 1e-4)", file=sys.stderr)
        return 1
    print("gradcheck passed (threshold 1e-4)")
    return 0


def cmd_episode_dump(args):
    _, tasks, vocab = _load_tasks(args)
    task = _find_task(tasks, args.task)
    rng = np.random.default_rng(args.seed or 0)
    ep = sample_episode(task, args.k, args.G, rng)

    def dump(batch):
        return [{"text": e.text, "text_pair": e.text_pair, "label": e.label}
                for e in batch]

    print(json.dumps({"task": ep.task, "k": args.k, "G": args.G,
                      "generation_batch": dump(ep.generation_batch),
                      "adaptation_batches": [dump(b) for b in ep.adaptation_batches],
                      "validation_batch": dump(ep.validation_batch)}, indent=2))
    return 0


def _add_common(p):
    p.add_argument("--manifest", help="task manifest JSON")
    p.add_argument("--synthetic", action="store_true",
                   help="use the built-in marker-token benchmark")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--config", help="profile file (INI sections)")
    p.add_argument("--profile", choices=["desk", "paper"], default="desk")
    p.add_argument("--seed", type=int, default=None)


def build_parser():
    ap = argparse.ArgumentParser(prog="leopard",
                                 description="Meta-learning across classification "
                                             "tasks with generated softmax parameters")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="episodic meta-training")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--zero-softmax", action="store_true",
                   help="zero-initialized softmax instead of the generator")
    p.add_argument("--log", help="JSONL training log path")
    p.add_argument("--progress", type=int, default=None)
    p.set_defaults(fn=cmd_meta_train)

    p = sub.add_parser("baseline-train", help="train a baseline model")
    _add_common(p)
    p.add_argument("--method", choices=["proto", "mtl"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--progress", type=int, default=None)
    p.set_defaults(fn=cmd_baseline_train)

    p = sub.add_parser("eval", help="k-shot evaluation protocol")
    _add_common(p)
    p.add_argument("--method", choices=EVAL_METHODS, required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--k", default="4,8,16")
    p.add_argument("--tasks", help="comma-separated target task names (default: all)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--tune-on", help="tune fine-tuning epochs on this validation task")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("loto", help="leave-one-task-out study")
    _add_common(p)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--tasks", help="target task names (default: all eval tasks)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_loto)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--samples", type=int, default=12,
                   help="coordinates sampled per tensor")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("episode-dump", help="emit one sampled episode as JSON")
    _add_common(p)
    p.add_argument("--task", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--G", type=int, required=True)
    p.set_defaults(fn=cmd_episode_dump)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
