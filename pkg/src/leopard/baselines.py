"""Comparison systems: prototypical network, multi-task training with
per-task heads, and the family of fine-tuning evaluation modes
(full / softmax-only / head-reuse / zero-initialized generated softmax)."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import encode_batch, labels_to_indices, sample_episode, sample_task
from .encoder import encode, init_encoder_params
from .meta import AdamState, outer_step, finetune_adapt, partition, split_alpha


@dataclass
class PrototypeSet:
    prototypes: np.ndarray  # (N, d) class means of support embeddings
    class_order: tuple


def proto_predict(prototypes, query_embedding):
    """Softmax over negative squared euclidean distances to the prototypes."""
    diffs = prototypes.prototypes - np.asarray(query_embedding)[None, :]
    logits = -np.sum(diffs * diffs, axis=-1)
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def build_prototypes(params, enc_cfg, task, support, vocab):
    labels = task.spec.labels
    ids = encode_batch(support, task.spec.kind, vocab, enc_cfg.max_len)
    y = labels_to_indices(support, labels)
    h = encode(params, ids, enc_cfg).data
    protos = np.stack([h[y == n].mean(axis=0) for n in range(len(labels))])
    return PrototypeSet(prototypes=protos, class_order=labels)


@dataclass
class ProtoPredictor:
    params: dict
    protos: PrototypeSet
    labels: tuple
    enc_cfg: object
    kind: str
    vocab: object

    def logits(self, examples):
        ids = encode_batch(examples, self.kind, self.vocab, self.enc_cfg.max_len)
        h = encode(self.params, ids, self.enc_cfg).data
        d = h[:, None, :] - self.protos.prototypes[None, :, :]
        return -np.sum(d * d, axis=-1)

    def predict_probs(self, examples):
        z = self.logits(examples)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def accuracy(self, examples):
        y = labels_to_indices(examples, self.labels)
        return float(np.mean(np.argmax(self.logits(examples), axis=-1) == y))


@dataclass
class ProtoModel:
    params: dict
    enc_cfg: object
    vocab: object

    def predictor(self, task, support):
        protos = build_prototypes(self.params, self.enc_cfg, task, support, self.vocab)
        return ProtoPredictor(params=self.params, protos=protos, labels=task.spec.labels,
                              enc_cfg=self.enc_cfg, kind=task.spec.kind, vocab=self.vocab)


def proto_train(train_tasks, enc_cfg, vocab, episodes=500, k=4, lr=1e-3, seed=0,
                progress=None):
    """Episodic prototypical training of all encoder parameters."""
    rng = np.random.default_rng(seed)
    params = init_encoder_params(enc_cfg, rng)
    params = {p: t for p, t in params.items() if not p.startswith("proj.")}
    adam = AdamState()
    log = []
    for ep in range(episodes):
        task = sample_task(train_tasks, rng)
        episode = sample_episode(task, k, 1, rng)
        labels = task.spec.labels
        support, query = episode.generation_batch, episode.validation_batch
        sup_ids = encode_batch(support, task.spec.kind, vocab, enc_cfg.max_len)
        sup_y = labels_to_indices(support, labels)
        q_ids = encode_batch(query, task.spec.kind, vocab, enc_cfg.max_len)
        q_y = labels_to_indices(query, labels)
        hs = encode(params, sup_ids, enc_cfg)
        hq = encode(params, q_ids, enc_cfg)
        protos = ad.concat_rows([ad.mean_rows(ad.embedding(hs, np.flatnonzero(sup_y == n)))
                                 for n in range(len(labels))])
        logits = proto_logits(hq, protos)
        loss = ad.softmax_cross_entropy(logits, q_y)
        ad.backward(loss)
        grads = {p: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                 for p, t in params.items()}
        ad.zero_grad_graph(loss)
        for t in params.values():
            t.grad = None
        outer_step(params, [grads], lr, adam)
        acc = float(np.mean(np.argmax(logits.data, axis=-1) == q_y))
        log.append({"episode": ep, "task": task.name, "val_loss": float(loss.data),
                    "val_acc": acc})
        if progress and (ep + 1) % progress == 0:
            recent = log[-progress:]
            print(f"proto episode {ep + 1}: "
                  f"loss={np.mean([r['val_loss'] for r in recent]):.4f} "
                  f"acc={np.mean([r['val_acc'] for r in recent]):.3f}")
    return ProtoModel(params=params, enc_cfg=enc_cfg, vocab=vocab), log


def proto_logits(hq, protos):
    """Differentiable -||q - p||^2 logits: (B, d) queries vs (N, d) prototypes."""
    d = protos.data.shape[1]
    ones = np.ones((d, 1))
    qp = ad.matmul(hq, ad.transpose(protos, (1, 0)))                        # (B, N)
    p2 = ad.transpose(ad.matmul(ad.mul(protos, protos), ones), (1, 0))      # (1, N)
    q2 = ad.matmul(ad.mul(hq, hq), ones)                                    # (B, 1)
    return ad.sub(ad.sub(ad.scale(qp, 2.0), p2), q2)


@dataclass
class TaskHead:
    name: str
    W: Tensor  # (N, d)
    b: Tensor  # (N,)


@dataclass
class MultiTaskModel:
    params: dict           # shared encoder
    heads: dict            # task name -> TaskHead
    enc_cfg: object
    vocab: object


def head_logits(params, head, enc_cfg, ids, rng=None, training=False):
    h = encode(params, ids, enc_cfg, rng=rng, training=training)
    return ad.add(ad.matmul(h, ad.transpose(head.W, (1, 0))), head.b)


def mtl_train(train_tasks, enc_cfg, vocab, steps=500, batch_size=8, lr=1e-3, seed=0,
              progress=None):
    """Multi-task minibatch training: shared encoder, one linear head per task,
    square-root proportional task sampling."""
    rng = np.random.default_rng(seed)
    params = init_encoder_params(enc_cfg, rng)
    params = {p: t for p, t in params.items() if not p.startswith("proj.")}
    heads = {}
    for task in train_tasks:
        N = task.spec.n_classes
        heads[task.name] = TaskHead(
            name=task.name,
            W=Tensor(np.zeros((N, enc_cfg.d_model)), requires_grad=True,
                     name=f"heads.{task.name}.W"),
            b=Tensor(np.zeros(N), requires_grad=True, name=f"heads.{task.name}.b"))
    adam = AdamState()
    log = []
    for step in range(steps):
        task = sample_task(train_tasks, rng)
        head = heads[task.name]
        batch = [task.train[i] for i in rng.choice(len(task.train), size=min(batch_size, len(task.train)), replace=False)]
        ids = encode_batch(batch, task.spec.kind, vocab, enc_cfg.max_len)
        y = labels_to_indices(batch, task.spec.labels)
        logits = head_logits(params, head, enc_cfg, ids)
        loss = ad.softmax_cross_entropy(logits, y)
        ad.backward(loss)
        trainable = dict(params)
        trainable[f"heads.{task.name}.W"] = head.W
        trainable[f"heads.{task.name}.b"] = head.b
        grads = {p: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                 for p, t in trainable.items()}
        ad.zero_grad_graph(loss)
        for t in trainable.values():
            t.grad = None
        outer_step(trainable, [grads], lr, adam)
        log.append({"step": step, "task": task.name, "loss": float(loss.data)})
        if progress and (step + 1) % progress == 0:
            recent = log[-progress:]
            print(f"mtl step {step + 1}: loss={np.mean([r['loss'] for r in recent]):.4f}")
    return MultiTaskModel(params=params, heads=heads, enc_cfg=enc_cfg, vocab=vocab), log


FINETUNE_MODES = ("full", "softmax_only", "reuse_head", "leopard_zero")


@dataclass
class HeadPredictor:
    params: dict
    head: TaskHead
    labels: tuple
    enc_cfg: object
    kind: str
    vocab: object

    def logits(self, examples):
        ids = encode_batch(examples, self.kind, self.vocab, self.enc_cfg.max_len)
        return head_logits(self.params, self.head, self.enc_cfg, ids).data

    def predict_probs(self, examples):
        z = self.logits(examples)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def accuracy(self, examples):
        y = labels_to_indices(examples, self.labels)
        return float(np.mean(np.argmax(self.logits(examples), axis=-1) == y))


def finetune_eval(params, enc_cfg, mode, task, support, vocab, epochs, lr,
                  donor_head=None, meta_cfg=None, part=None):
    """Fine-tune per `mode` on a k-shot support and return a predictor.

    full: fresh zero head, all parameters tuned. softmax_only: only the
    head tuned. reuse_head: donor head copied, then everything tuned.
    leopard_zero: generated-softmax architecture with zero-initialized
    W, b adapted by inner-style SGD (learned per-group rates).
    """
    if mode not in FINETUNE_MODES:
        raise ValueError(f"unknown fine-tuning mode {mode!r}")
    labels = task.spec.labels
    N = len(labels)

    if mode == "leopard_zero":
        from .meta import MetaConfig
        mc = meta_cfg or MetaConfig(zero_softmax=True)
        if not mc.zero_softmax:
            raise ValueError("leopard_zero fine-tuning needs a zero_softmax meta config")
        return finetune_adapt(params, part, enc_cfg, mc, task, support, vocab, epochs)

    # detached working copies so fine-tuning never mutates the checkpoint
    enc = {p: Tensor(t.data.copy(), requires_grad=True, name=p)
           for p, t in params.items()
           if p.startswith("encoder.")}
    if mode == "reuse_head":
        if donor_head is None:
            raise ValueError("reuse_head mode needs a donor head")
        if donor_head.W.data.shape[0] != N:
            raise ValueError(
                f"donor head has {donor_head.W.data.shape[0]} classes, task needs {N}")
        head = TaskHead(name=task.name,
                        W=Tensor(donor_head.W.data.copy(), requires_grad=True),
                        b=Tensor(donor_head.b.data.copy(), requires_grad=True))
    else:
        head = TaskHead(name=task.name,
                        W=Tensor(np.zeros((N, enc_cfg.d_model)), requires_grad=True),
                        b=Tensor(np.zeros(N), requires_grad=True))

    trainable = {"head.W": head.W, "head.b": head.b}
    if mode != "softmax_only":
        trainable.update(enc)
    adam = AdamState()
    ids = encode_batch(support, task.spec.kind, vocab, enc_cfg.max_len)
    y = labels_to_indices(support, labels)
    for _ in range(epochs):
        logits = head_logits(enc, head, enc_cfg, ids)
        loss = ad.softmax_cross_entropy(logits, y)
        ad.backward(loss)
        grads = {p: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                 for p, t in trainable.items()}
        ad.zero_grad_graph(loss)
        for t in trainable.values():
            t.grad = None
        outer_step(trainable, [grads], lr, adam)
    return HeadPredictor(params=enc, head=head, labels=labels, enc_cfg=enc_cfg,
                         kind=task.spec.kind, vocab=vocab)
