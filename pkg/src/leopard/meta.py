"""Meta-training: parameter partition, first-order inner/outer loops,
per-layer learned inner rates and test-time fine-tuning.

Inner-loop semantics: each adaptation step computes the task loss at the
current task-specific values, detaches that step gradient, and forms
phi' = phi - alpha * stopgrad(g). The subtraction chain keeps phi^(G)
differentiable w.r.t. the generated softmax (and hence the generator and
encoder that produced it) and w.r.t. the per-group rates alpha, while the
step gradients themselves contribute no second-order terms.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import encode_batch, labels_to_indices, sample_episode, sample_task
from .encoder import encode, layer_of
from .generator import GeneratedSoftmax, generate_softmax, class_logits, init_generator_params


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterPartition:
    nu: int
    theta_paths: frozenset  # task-agnostic persistent parameters
    phi_paths: frozenset    # task-specific persistent parameters (excl. generated W, b)
    phi_groups: tuple       # layer-groups adapted in the inner loop

    def group_of(self, path):
        if path in ("softmax.W", "softmax.b"):
            return "softmax"
        if path.startswith("proj."):
            return "proj"
        v = layer_of(path)
        if v is None:
            raise PartitionError(f"parameter {path!r} has no inner-loop group")
        return f"layer{v}"


def partition(params, nu, n_layers):
    """Split persistent parameters by the layer threshold nu.

    Embeddings are layer 0 and transformer blocks 1..L. Layers above nu
    are task-specific; nu=0 additionally adapts the embeddings, so the
    whole encoder is task-specific at nu=0 and none of it at nu=L. The
    projection is always task-specific, the generator always agnostic.
    """
    if not 0 <= nu <= n_layers:
        raise PartitionError(f"nu must be in [0, {n_layers}], got {nu}")
    adapted_layers = {v for v in range(1, n_layers + 1) if v > nu}
    if nu == 0:
        adapted_layers.add(0)
    theta, phi = set(), set()
    for path in params:
        if path.startswith("gen."):
            theta.add(path)
        elif path.startswith("proj."):
            phi.add(path)
        elif path.startswith("encoder."):
            (phi if layer_of(path) in adapted_layers else theta).add(path)
        elif path.startswith("alpha."):
            continue
        else:
            raise PartitionError(f"unknown parameter path {path!r}")
    groups = tuple(f"layer{v}" for v in sorted(adapted_layers)) + ("proj", "softmax")
    return ParameterPartition(nu=nu, theta_paths=frozenset(theta),
                              phi_paths=frozenset(phi), phi_groups=groups)


def init_alpha(part, init=1e-3):
    """One trainable scalar inner rate per adapted layer-group."""
    if init <= 0:
        raise ValueError(f"alpha must initialize strictly positive, got {init}")
    return {f"alpha.{g}": Tensor(np.asarray(init), requires_grad=True, name=f"alpha.{g}")
            for g in part.phi_groups}


def inner_adapt(phi, batches, loss_fn, alpha, group_of, track=True, frozen_grads=None,
                capture=None):
    """G steps of phi <- phi - alpha_group * stopgrad(grad loss_fn).

    `phi` maps path -> Tensor (may include graph nodes such as the
    generated softmax); `alpha` maps group -> scalar Tensor or float.
    With track=True the update chain stays differentiable w.r.t. the
    initial phi and alpha; track=False runs the same arithmetic on
    detached leaves (test-time adaptation).

    `capture`, if a list, receives each step's detached gradient dict;
    `frozen_grads` replays such a capture instead of recomputing, which
    pins down the exact function the first-order backward differentiates
    (the finite-difference oracle evaluates it).
    """
    cur = dict(phi)
    for s, batch in enumerate(batches):
        if frozen_grads is not None:
            step_grads = frozen_grads[s]
            loss = None
        else:
            view = {p: ad.leaf_like(t) for p, t in cur.items()}
            loss = loss_fn(view, batch)
            ad.backward(loss)
            step_grads = {p: (view[p].grad if view[p].grad is not None
                              else np.zeros_like(t.data))
                          for p, t in cur.items()}
        if capture is not None:
            capture.append({p: g.copy() for p, g in step_grads.items()})
        new = {}
        for p, t in cur.items():
            g = step_grads[p]
            lr = alpha[group_of(p)]
            if track:
                t.grad = g
                new[p] = ad.sgd_step(t, lr)
                t.grad = None
            else:
                lr_val = lr.data if isinstance(lr, Tensor) else lr
                new[p] = Tensor(t.data - lr_val * g, requires_grad=True, name=t.name)
        if loss is not None:
            ad.zero_grad_graph(loss)
        cur = new
    return cur


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def outer_step(params, task_grads, beta, state, b1=0.9, b2=0.999, eps=1e-8):
    """Adam update of the persistent store from summed per-task gradients.

    `task_grads` is one grad dict per task in fixed order; an empty
    meta-batch (or beta=0) leaves the store untouched.
    """
    if not task_grads or beta == 0.0:
        return
    total = {}
    for grads in task_grads:
        for p, g in grads.items():
            total[p] = total.get(p, 0.0) + g
    state.step += 1
    t = state.step
    for p in sorted(total):
        g = total[p]
        m = state.m.get(p, 0.0)
        v = state.v.get(p, 0.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[p], state.v[p] = m, v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        params[p].data -= beta * mhat / (np.sqrt(vhat) + eps)


@dataclass
class MetaConfig:
    adaptation_steps: int = 2          # G
    outer_lr: float = 1e-3             # beta
    tasks_per_batch: int = 4
    k: int = 4
    nu: int = 0
    episodes: int = 1000
    seed: int = 0
    alpha_init: float = 1e-3
    warmup_frac: float = 0.0
    eval_every: int = 100
    patience: int = 5
    zero_softmax: bool = False         # LEOPARD-ZERO: zero-init W, b instead of generated
    generator_tanh_output: bool = False
    prose_batches: bool = False        # reuse batch 1 for generation; adapt on the other G-1

    def __post_init__(self):
        if self.adaptation_steps < 1:
            raise ValueError("adaptation_steps (G) must be >= 1 during meta-training")
        if self.outer_lr <= 0:
            raise ValueError("outer_lr (beta) must be > 0")


def init_model_params(enc_cfg, meta_cfg, rng):
    from .encoder import init_encoder_params
    params = init_encoder_params(enc_cfg, rng)
    if not meta_cfg.zero_softmax:
        params.update(init_generator_params(enc_cfg.d_model, enc_cfg.class_embed_size, rng))
    part = partition(params, meta_cfg.nu, enc_cfg.n_layers)
    params.update(init_alpha(part, meta_cfg.alpha_init))
    return params, part


def split_alpha(params):
    return {p[len("alpha."):]: t for p, t in params.items() if p.startswith("alpha.")}


def _batch_arrays(examples, task, vocab, max_len):
    ids = encode_batch(examples, task.spec.kind, vocab, max_len)
    y = labels_to_indices(examples, task.spec.labels)
    return ids, y


def _make_loss_fn(params, enc_cfg, labels, rng, training):
    """Loss closure for inner adaptation: phi overrides the persistent
    store, the generated softmax rides along under softmax.W / softmax.b."""

    def loss_fn(phi, batch):
        ids, y = batch
        merged = {**params, **{p: t for p, t in phi.items() if not p.startswith("softmax.")}}
        sm = GeneratedSoftmax(W=phi["softmax.W"], b=phi["softmax.b"], class_order=labels)
        h = encode(merged, ids, enc_cfg, rng=rng, training=training)
        return ad.softmax_cross_entropy(class_logits(sm, merged, h), y)

    return loss_fn


def build_generated_softmax(params, enc_cfg, meta_cfg, task, gen_examples, vocab,
                            rng=None, training=False):
    """Encode the generation batch and pool per class into (W, b)."""
    labels = task.spec.labels
    ids, y = _batch_arrays(gen_examples, task, vocab, enc_cfg.max_len)
    if meta_cfg.zero_softmax:
        N, l = len(labels), enc_cfg.class_embed_size
        return GeneratedSoftmax(W=Tensor(np.zeros((N, l)), requires_grad=True, name="softmax.W"),
                                b=Tensor(np.zeros(N), requires_grad=True, name="softmax.b"),
                                class_order=labels)
    h = encode(params, ids, enc_cfg, rng=rng, training=training)
    by_class = [ad.embedding(h, np.flatnonzero(y == n)) for n in range(len(labels))]
    return generate_softmax(params, by_class, labels, meta_cfg.generator_tanh_output)


def run_episode(params, part, enc_cfg, meta_cfg, task, episode, vocab, rng=None,
                train=True, training_noise=False, frozen_grads=None, capture_grads=None):
    """One episode: generate softmax, adapt, score the validation batch.

    Returns (val_loss, val_acc, grads) where grads covers the whole
    outer-optimized set (theta, initial phi, generator, alpha) when
    train=True, else None.
    """
    labels = task.spec.labels
    alpha = split_alpha(params)
    if meta_cfg.prose_batches:
        adapt_batches = episode.adaptation_batches[1:]
    else:
        adapt_batches = episode.adaptation_batches
    sm = build_generated_softmax(params, enc_cfg, meta_cfg, task, episode.generation_batch,
                                 vocab, rng=rng, training=training_noise)
    phi0 = {p: params[p] for p in part.phi_paths}
    phi0["softmax.W"], phi0["softmax.b"] = sm.W, sm.b
    loss_fn = _make_loss_fn(params, enc_cfg, labels, rng, training_noise)
    batches = [_batch_arrays(b, task, vocab, enc_cfg.max_len) for b in adapt_batches]
    phiG = inner_adapt(phi0, batches, loss_fn, alpha, part.group_of, track=train,
                       frozen_grads=frozen_grads, capture=capture_grads)

    val_ids, val_y = _batch_arrays(episode.validation_batch, task, vocab, enc_cfg.max_len)
    merged = {**params, **{p: phiG[p] for p in part.phi_paths}}
    smG = GeneratedSoftmax(W=phiG["softmax.W"], b=phiG["softmax.b"], class_order=labels)
    h = encode(merged, val_ids, enc_cfg, rng=rng, training=training_noise)
    logits = class_logits(smG, merged, h)
    loss = ad.softmax_cross_entropy(logits, val_y)
    acc = float(np.mean(np.argmax(logits.data, axis=-1) == val_y))
    grads = None
    if train:
        ad.backward(loss)
        grads = {}
        for p, t in params.items():
            grads[p] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        ad.zero_grad_graph(loss)
        for t in params.values():
            t.grad = None
    return float(loss.data), acc, grads


def evaluate_episode_accuracy(params, part, enc_cfg, meta_cfg, tasks, vocab, seed):
    """Mean adapted validation accuracy over one episode per task."""
    accs = []
    for i, task in enumerate(tasks):
        rng = np.random.default_rng((seed, i))
        ep = sample_episode(task, meta_cfg.k, meta_cfg.adaptation_steps, rng)
        _, acc, _ = run_episode(params, part, enc_cfg, meta_cfg, task, ep, vocab, train=False)
        accs.append(acc)
    return float(np.mean(accs))


def meta_train(train_tasks, enc_cfg, meta_cfg, vocab, val_tasks=None, log_path=None,
               progress=None):
    """Full episodic training loop; returns (params, part, log records)."""
    if not train_tasks:
        raise ValueError("meta_train needs at least one training task")
    rng = np.random.default_rng(meta_cfg.seed)
    params, part = init_model_params(enc_cfg, meta_cfg, rng)
    adam = AdamState()
    log = []
    best_snapshot, best_acc, bad_evals = None, -1.0, 0
    t0 = time.time()
    warm = max(1, int(meta_cfg.warmup_frac * meta_cfg.episodes)) if meta_cfg.warmup_frac else 0
    noise = (enc_cfg.attn_dropout > 0 or enc_cfg.hidden_dropout > 0 or enc_cfg.cls_dropout > 0)

    for ep in range(meta_cfg.episodes):
        beta = meta_cfg.outer_lr
        if warm and ep < warm:
            beta = meta_cfg.outer_lr * (ep + 1) / warm
        task_grads = []
        for _ in range(meta_cfg.tasks_per_batch):
            task = sample_task(train_tasks, rng)
            try:
                episode = sample_episode(task, meta_cfg.k, meta_cfg.adaptation_steps, rng)
                loss, acc, grads = run_episode(params, part, enc_cfg, meta_cfg, task,
                                               episode, vocab, rng=rng, train=True,
                                               training_noise=noise)
            except Exception as e:
                raise type(e)(f"episode {ep} on task {task.name}: {e}") from e
            task_grads.append(grads)
            log.append({"episode": ep, "task": task.name, "val_loss": loss,
                        "val_acc": acc, "wallclock": time.time() - t0})
        outer_step(params, task_grads, beta, adam)
        if progress and (ep + 1) % progress == 0:
            recent = log[-progress * meta_cfg.tasks_per_batch:]
            print(f"episode {ep + 1}: loss={np.mean([r['val_loss'] for r in recent]):.4f} "
                  f"acc={np.mean([r['val_acc'] for r in recent]):.3f}")
        if val_tasks and (ep + 1) % meta_cfg.eval_every == 0:
            acc = evaluate_episode_accuracy(params, part, enc_cfg, meta_cfg, val_tasks,
                                            vocab, meta_cfg.seed)
            if acc > best_acc:
                best_acc, bad_evals = acc, 0
                best_snapshot = {p: t.data.copy() for p, t in params.items()}
            else:
                bad_evals += 1
                if bad_evals >= meta_cfg.patience:
                    break
    if best_snapshot is not None:
        for p, t in params.items():
            t.data = best_snapshot[p]
    if log_path:
        with open(log_path, "w") as f:
            for rec in log:
                f.write(json.dumps(rec) + "\n")
    return params, part, log


@dataclass
class AdaptedPredictor:
    """A classifier closed over task-adapted parameters."""

    params: dict
    phi: dict
    labels: tuple
    enc_cfg: object
    kind: str
    vocab: object

    def logits(self, examples):
        ids = encode_batch(examples, self.kind, self.vocab, self.enc_cfg.max_len)
        merged = {**self.params, **{p: t for p, t in self.phi.items()
                                    if not p.startswith("softmax.")}}
        sm = GeneratedSoftmax(W=self.phi["softmax.W"], b=self.phi["softmax.b"],
                              class_order=self.labels)
        h = encode(merged, ids, self.enc_cfg)
        return class_logits(sm, merged, h).data

    def predict_probs(self, examples):
        z = self.logits(examples)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def accuracy(self, examples):
        y = labels_to_indices(examples, self.labels)
        return float(np.mean(np.argmax(self.logits(examples), axis=-1) == y))


def finetune_adapt(params, part, enc_cfg, meta_cfg, task, support, vocab, epochs):
    """Test-time adaptation: generate the softmax from the full support
    once, then run `epochs` full-support passes of inner-style SGD with
    the learned per-group rates. epochs=0 is the pure generated-softmax
    (prototype-style) predictor."""
    labels = task.spec.labels
    groups = {}
    for ex in support:
        groups.setdefault(ex.label, []).append(ex)
    missing = [lab for lab in labels if lab not in groups]
    extra = [lab for lab in groups if lab not in labels]
    if missing or extra:
        raise ValueError(f"support label set mismatch: missing {missing}, unknown {extra}")
    sm = build_generated_softmax(params, enc_cfg, meta_cfg, task, support, vocab)
    phi0 = {p: params[p] for p in part.phi_paths}
    phi0["softmax.W"], phi0["softmax.b"] = sm.W, sm.b
    loss_fn = _make_loss_fn(params, enc_cfg, labels, None, False)
    batch = _batch_arrays(support, task, vocab, enc_cfg.max_len)
    alpha = split_alpha(params)
    phi = inner_adapt(phi0, [batch] * epochs, loss_fn, alpha, part.group_of, track=False)
    return AdaptedPredictor(params=params, phi=phi, labels=labels, enc_cfg=enc_cfg,
                            kind=task.spec.kind, vocab=vocab)
