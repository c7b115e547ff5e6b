"""Finite-difference checking of the full meta-learning loss.

Builds a tiny end-to-end episode (generation, G adaptation steps,
validation loss) and compares the analytic gradient of every parameter
group against central finite differences. Coordinates are subsampled per
tensor for speed; small tensors (and every inner learning rate) are
checked exhaustively.
"""

from dataclasses import dataclass

import numpy as np

from .data import sample_episode
from .encoder import EncoderConfig
from .meta import MetaConfig, init_model_params, run_episode
from .synthetic import make_marker_task, marker_vocabulary


def rel_err(a, f, floor=1e-3):
    """|a - f| scaled by the larger magnitude, floored for tiny gradients."""
    return abs(a - f) / max(abs(a), abs(f), floor)


def finite_difference(fn, x0, h=1e-5):
    """Central finite-difference gradient of scalar fn over flat x0."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for j in range(x0.size):
        x = x0.copy()
        x[j] = x0[j] + h
        fp = fn(x)
        x[j] = x0[j] - h
        fm = fn(x)
        g[j] = (fp - fm) / (2 * h)
    return g


@dataclass
class TinySetup:
    params: dict
    part: object
    enc_cfg: EncoderConfig
    meta_cfg: MetaConfig
    task: object
    episode: object
    vocab: object

    def loss(self, frozen_grads=None):
        loss, _, _ = run_episode(self.params, self.part, self.enc_cfg, self.meta_cfg,
                                 self.task, self.episode, self.vocab, train=False,
                                 frozen_grads=frozen_grads)
        return loss

    def analytic_grads(self):
        """(outer gradients, captured inner-step gradients).

        The captured step gradients define the function the first-order
        backward differentiates; replaying them during finite-difference
        evaluation keeps the oracle aligned with the first-order contract
        (step gradients are constants of the graph, not re-derived)."""
        capture = []
        _, _, grads = run_episode(self.params, self.part, self.enc_cfg, self.meta_cfg,
                                  self.task, self.episode, self.vocab, train=True,
                                  capture_grads=capture)
        return grads, capture


def build_tiny_setup(n_layers=2, d_model=16, class_embed=8, n_classes=3, k=2, G=2,
                     max_len=6, seed=0, zero_softmax=False, alpha_init=0.05):
    """The gradient-suite configuration: L=2, d=16, l=8, N=3, k=2, G=2."""
    vocab = marker_vocabulary(8)
    enc_cfg = EncoderConfig(n_layers=n_layers, d_model=d_model, n_heads=2,
                            d_ff=2 * d_model, max_len=max_len, vocab_size=len(vocab),
                            class_embed_size=class_embed)
    meta_cfg = MetaConfig(adaptation_steps=G, k=k, nu=0, episodes=1, seed=seed,
                          alpha_init=alpha_init, zero_softmax=zero_softmax)
    rng = np.random.default_rng(seed)
    markers = [f"tok{i}" for i in range(n_classes)]
    tokens = [f"tok{i}" for i in range(8)]
    task = make_marker_task("gradcheck", markers, tokens, rng, n_train=12 * n_classes,
                            seq_len=max_len - 1, n_marker=2)
    episode = sample_episode(task, k, G, rng)
    params, part = init_model_params(enc_cfg, meta_cfg, rng)
    # kick the weights away from the near-symmetric init so the loss
    # surface (and every gradient path) is non-degenerate
    for path, t in params.items():
        if not path.startswith("alpha."):
            t.data = t.data + rng.normal(0.0, 0.2, size=t.data.shape)
    return TinySetup(params=params, part=part, enc_cfg=enc_cfg, meta_cfg=meta_cfg,
                     task=task, episode=episode, vocab=vocab)


def _group_name(path):
    if path.startswith("gen."):
        return "generator"
    if path.startswith("proj."):
        return "projection"
    if path.startswith("alpha."):
        return "alpha"
    if path.startswith("encoder.embed."):
        return "encoder.layer0"
    if path.startswith("encoder.layer"):
        return "encoder." + path.split(".")[1]
    return path


def check_full_loss(setup=None, h=1e-5, samples_per_tensor=12, seed=0):
    """Per-group max relative error of the episode loss gradient.

    Returns (per_group: dict group -> max rel err, overall max).
    """
    setup = setup or build_tiny_setup()
    rng = np.random.default_rng(seed)
    analytic, frozen = setup.analytic_grads()
    per_group = {}
    for path in sorted(setup.params):
        t = setup.params[path]
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= samples_per_tensor or path.startswith("alpha."):
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_tensor, replace=False)
        ga = analytic[path].reshape(-1)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            fp = setup.loss(frozen_grads=frozen)
            flat[j] = orig - h
            fm = setup.loss(frozen_grads=frozen)
            flat[j] = orig
            fd = (fp - fm) / (2 * h)
            err = rel_err(ga[j], fd)
            g = _group_name(path)
            per_group[g] = max(per_group.get(g, 0.0), err)
    return per_group, max(per_group.values())
