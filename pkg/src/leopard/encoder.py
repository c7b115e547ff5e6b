"""Shared transformer text encoder and the prediction-side projection MLP.

Parameters live in a flat dict keyed by hierarchical paths whose layer
index is load-bearing for the task-agnostic / task-specific split:
embeddings (and their layer norm) are layer 0, transformer blocks are
layers 1..L, the projection MLP is its own group.
"""

import math
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PAD_ID


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 32
    vocab_size: int = 256
    attn_dropout: float = 0.0
    hidden_dropout: float = 0.0
    cls_dropout: float = 0.0
    class_embed_size: int = 32  # output dim of the projection / generator target

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "max_len", "vocab_size",
                     "class_embed_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _trunc_normal(rng, shape, std=0.02):
    # resample outside 2 std, the usual transformer init
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def _param(store, path, value):
    store[path] = Tensor(value, requires_grad=True, name=path)


def init_encoder_params(cfg, rng):
    """Fresh encoder + projection parameters as a flat path -> Tensor dict."""
    d, l = cfg.d_model, cfg.class_embed_size
    p = {}
    _param(p, "encoder.embed.tok", _trunc_normal(rng, (cfg.vocab_size, d)))
    _param(p, "encoder.embed.pos", _trunc_normal(rng, (cfg.max_len, d)))
    _param(p, "encoder.embed.ln.g", np.ones(d))
    _param(p, "encoder.embed.ln.b", np.zeros(d))
    for v in range(1, cfg.n_layers + 1):
        pre = f"encoder.layer{v}"
        for w in ("wq", "wk", "wv", "wo"):
            _param(p, f"{pre}.attn.{w}", _trunc_normal(rng, (d, d)))
        for b in ("bq", "bk", "bv", "bo"):
            _param(p, f"{pre}.attn.{b}", np.zeros(d))
        _param(p, f"{pre}.ln1.g", np.ones(d))
        _param(p, f"{pre}.ln1.b", np.zeros(d))
        _param(p, f"{pre}.ff.w1", _trunc_normal(rng, (d, cfg.d_ff)))
        _param(p, f"{pre}.ff.b1", np.zeros(cfg.d_ff))
        _param(p, f"{pre}.ff.w2", _trunc_normal(rng, (cfg.d_ff, d)))
        _param(p, f"{pre}.ff.b2", np.zeros(d))
        _param(p, f"{pre}.ln2.g", np.ones(d))
        _param(p, f"{pre}.ln2.b", np.zeros(d))
    # prediction-side projection h: two layers, tanh hidden, output dim l
    _param(p, "proj.w1", _trunc_normal(rng, (d, d)))
    _param(p, "proj.b1", np.zeros(d))
    _param(p, "proj.w2", _trunc_normal(rng, (d, l)))
    _param(p, "proj.b2", np.zeros(l))
    return p


_LAYER_RE = re.compile(r"^encoder\.layer(\d+)\.")


def layer_of(path):
    """Layer index of an encoder parameter path (embeddings are 0);
    None for non-encoder parameters."""
    if path.startswith("encoder.embed."):
        return 0
    m = _LAYER_RE.match(path)
    return int(m.group(1)) if m else None


def _attention(params, pre, x, mask, cfg, rng, training):
    B, T, d = x.shape
    H, dh = cfg.n_heads, d // cfg.n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    q = heads(ad.add(ad.matmul(x, params[f"{pre}.attn.wq"]), params[f"{pre}.attn.bq"]))
    k = heads(ad.add(ad.matmul(x, params[f"{pre}.attn.wk"]), params[f"{pre}.attn.bk"]))
    v = heads(ad.add(ad.matmul(x, params[f"{pre}.attn.wv"]), params[f"{pre}.attn.bv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, mask=mask)
    if training and cfg.attn_dropout > 0:
        attn = ad.dropout(attn, cfg.attn_dropout, rng)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, T, d))
    return ad.add(ad.matmul(ctx, params[f"{pre}.attn.wo"]), params[f"{pre}.attn.bo"])


def encode(params, token_ids, cfg, rng=None, training=False):
    """CLS representation of a padded id batch: (B, max_len) -> (B, d).

    [PAD] keys are masked out of every attention row; with dropout off
    this is a pure function of (params, ids).
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] != cfg.max_len:
        raise ad.ShapeError(f"encode expects (B, {cfg.max_len}) ids, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ad.ShapeError(
            f"token id out of range [0, {cfg.vocab_size}): min={ids.min()} max={ids.max()}")
    if training and rng is None:
        rng = np.random.default_rng(0)
    B, T = ids.shape
    # additive key mask for attention rows: (B, 1, 1, T)
    mask = np.where(ids == PAD_ID, -1e9, 0.0)[:, None, None, :]

    x = ad.add(ad.embedding(params["encoder.embed.tok"], ids), params["encoder.embed.pos"])
    x = ad.layer_norm(x, params["encoder.embed.ln.g"], params["encoder.embed.ln.b"])
    if training and cfg.hidden_dropout > 0:
        x = ad.dropout(x, cfg.hidden_dropout, rng)
    for v in range(1, cfg.n_layers + 1):
        pre = f"encoder.layer{v}"
        a = _attention(params, pre, x, mask, cfg, rng, training)
        if training and cfg.hidden_dropout > 0:
            a = ad.dropout(a, cfg.hidden_dropout, rng)
        x = ad.layer_norm(ad.add(x, a), params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        h = ad.tanh(ad.add(ad.matmul(x, params[f"{pre}.ff.w1"]), params[f"{pre}.ff.b1"]))
        h = ad.add(ad.matmul(h, params[f"{pre}.ff.w2"]), params[f"{pre}.ff.b2"])
        if training and cfg.hidden_dropout > 0:
            h = ad.dropout(h, cfg.hidden_dropout, rng)
        x = ad.layer_norm(ad.add(x, h), params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
    cls = ad.take_row0(x, axis=1)
    if training and cfg.cls_dropout > 0:
        cls = ad.dropout(cls, cfg.cls_dropout, rng)
    return cls


def project(params, h):
    """Prediction-side projection: two-layer MLP with tanh hidden, (B, d) -> (B, l)."""
    if h.data.shape[-1] != params["proj.w1"].data.shape[0]:
        raise ad.ShapeError(
            f"project: input dim {h.data.shape[-1]} does not match weight {params['proj.w1'].data.shape}")
    z = ad.tanh(ad.add(ad.matmul(h, params["proj.w1"]), params["proj.b1"]))
    return ad.add(ad.matmul(z, params["proj.w2"]), params["proj.b2"])
