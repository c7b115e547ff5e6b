"""Task-dependent softmax parameter generation and class prediction.

The generator is a two-layer MLP (tanh hidden, linear output by default)
mapping an encoded support example to an (l + 1)-vector: the first l
components are that class's softmax weight row, the last is its bias.
Per-class outputs are mean-pooled over the class partition and stacked
row-wise into (W, b).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import project


class GeneratorError(ValueError):
    pass


@dataclass
class GeneratedSoftmax:
    W: "Tensor"  # (N, l)
    b: "Tensor"  # (N,)
    class_order: tuple  # ordered label list; row n <-> label n


def init_generator_params(d_model, class_embed_size, rng, std=0.02):
    from .encoder import _trunc_normal
    l = class_embed_size
    return {
        "gen.w1": Tensor(_trunc_normal(rng, (d_model, d_model), std), requires_grad=True, name="gen.w1"),
        "gen.b1": Tensor(np.zeros(d_model), requires_grad=True, name="gen.b1"),
        "gen.w2": Tensor(_trunc_normal(rng, (d_model, l + 1), std), requires_grad=True, name="gen.w2"),
        "gen.b2": Tensor(np.zeros(l + 1), requires_grad=True, name="gen.b2"),
    }


def generator_mlp(params, h, tanh_output=False):
    """(n, d) -> (n, l + 1); tanh after the first layer, optionally after both."""
    z = ad.tanh(ad.add(ad.matmul(h, params["gen.w1"]), params["gen.b1"]))
    out = ad.add(ad.matmul(z, params["gen.w2"]), params["gen.b2"])
    return ad.tanh(out) if tanh_output else out


def generate_class_params(params, class_embeddings, tanh_output=False, label=None):
    """Mean over a class's encoded support examples of the generator MLP.

    Returns (w, b): the l-vector weight row and scalar bias for the class.
    """
    if class_embeddings.data.ndim != 2 or class_embeddings.data.shape[0] == 0:
        raise GeneratorError(f"empty class partition for class {label!r}")
    pooled = ad.mean_rows(generator_mlp(params, class_embeddings, tanh_output))
    l = pooled.data.shape[0] - 1
    return ad.slice_cols(pooled, 0, l), ad.slice_cols(pooled, l, l + 1)


def assemble_softmax(per_class, class_order):
    """Row-wise concatenation of per-class (w, b) pairs, in task label order."""
    if len(per_class) < 2:
        raise GeneratorError(f"need >= 2 classes, got {len(per_class)}")
    dims = {w.data.shape for w, _ in per_class}
    if len(dims) != 1:
        raise GeneratorError(f"inconsistent class weight shapes: {sorted(dims)}")
    W = ad.concat_rows([w for w, _ in per_class])
    b = ad.reshape(ad.concat_rows([b for _, b in per_class]), (len(per_class),))
    return GeneratedSoftmax(W=W, b=b, class_order=tuple(class_order))


def generate_softmax(gen_params, embeddings_by_class, class_order, tanh_output=False):
    """Full generation path: per-class pooling then row-wise assembly.

    `embeddings_by_class` is an ordered list of (n_c, d) encoded support
    tensors, one per label in `class_order`.
    """
    per_class = [generate_class_params(gen_params, emb, tanh_output, label=lab)
                 for emb, lab in zip(embeddings_by_class, class_order)]
    return assemble_softmax(per_class, class_order)


def class_logits(softmax, proj_params, h):
    """Eq.-style logits W h_phi(x) + b for an encoded batch h: (B, d) -> (B, N)."""
    z = project(proj_params, h)
    if z.data.shape[-1] != softmax.W.data.shape[-1]:
        raise GeneratorError(
            f"projection dim {z.data.shape[-1]} does not match generated W {softmax.W.data.shape}")
    return ad.add(ad.matmul(z, ad.transpose(softmax.W, (1, 0))), softmax.b)


def predict(softmax, proj_params, h):
    """Class probability matrix (B, N); rows sum to 1."""
    return ad.softmax(class_logits(softmax, proj_params, h))


def argmax_lowest_tie(probs):
    """Predicted class indices; ties break toward the lowest class index."""
    return np.argmax(probs, axis=-1)
