"""Transformer decoder building blocks.

One decoding block = unmasked (or causally masked) self-attention, source
attention over the video memory, and a position-wise feed-forward net, each
sub-layer wrapped residually and followed by layer normalization (post-norm,
matching the original Transformer wiring). Stacks of these blocks plus
shared word/position embeddings are the whole backbone of the model.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(rng.uniform(-bound, bound, (fan_in, fan_out)))


def embedding_init(rng, rows, d):
    return T.parameter(rng.normal(0.0, 0.02, (rows, d)))


def zeros_param(*shape):
    return T.parameter(np.zeros(shape))


def ones_param(*shape):
    return T.parameter(np.ones(shape))


class AttentionParams:
    """Q/K/V/output projections of one multi-head attention block."""

    def __init__(self, rng, d_model):
        self.wq = glorot(rng, d_model, d_model)
        self.wk = glorot(rng, d_model, d_model)
        self.wv = glorot(rng, d_model, d_model)
        self.wo = glorot(rng, d_model, d_model)

    def named(self, prefix):
        return {f"{prefix}.q": self.wq, f"{prefix}.k": self.wk,
                f"{prefix}.v": self.wv, f"{prefix}.o": self.wo}


class TfmLayerParams:
    def __init__(self, rng, d_model, d_ff):
        self.self_attn = AttentionParams(rng, d_model)
        self.src_attn = AttentionParams(rng, d_model)
        self.ff_w1 = glorot(rng, d_model, d_ff)
        self.ff_b1 = zeros_param(d_ff)
        self.ff_w2 = glorot(rng, d_ff, d_model)
        self.ff_b2 = zeros_param(d_model)
        self.ln = [(ones_param(d_model), zeros_param(d_model)) for _ in range(3)]

    def named(self, prefix):
        out = {}
        out.update(self.self_attn.named(f"{prefix}.self"))
        out.update(self.src_attn.named(f"{prefix}.src"))
        out.update({f"{prefix}.ff.w1": self.ff_w1, f"{prefix}.ff.b1": self.ff_b1,
                    f"{prefix}.ff.w2": self.ff_w2, f"{prefix}.ff.b2": self.ff_b2})
        for i, (g, b) in enumerate(self.ln):
            out[f"{prefix}.ln{i}.g"] = g
            out[f"{prefix}.ln{i}.b"] = b
        return out


def multi_head_attention(q, k, v, params, n_heads, mask=None,
                         dropout_rate=0.0, rng=None):
    """Project, attend per head at scale 1/sqrt(d/h), merge, project out."""
    d = q.data.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"multi_head_attention: width {d} not divisible by {n_heads} heads")
    qp = T.matmul(q, params.wq)
    kp = T.matmul(k, params.wk)
    vp = T.matmul(v, params.wv)
    ctx = T.attention_core(qp, kp, vp, n_heads, mask=mask,
                           dropout_rate=dropout_rate, rng=rng)
    return T.matmul(ctx, params.wo)


def feed_forward(x, params, dropout_rate=0.0, rng=None):
    h = T.relu(T.broadcast_add_row(T.matmul(x, params.ff_w1), params.ff_b1))
    h = T.dropout(h, dropout_rate, rng)
    return T.broadcast_add_row(T.matmul(h, params.ff_w2), params.ff_b2)


def tfm_layer(x, mem, params, n_heads, self_mask=None, src_mask=None,
              dropout_rate=0.0, rng=None):
    """One decoder block over x[..., l, d] with memory mem[..., 2N, d]."""
    if x.data.shape[-1] != mem.data.shape[-1]:
        raise ShapeError(
            f"tfm_layer: sequence width {x.data.shape} != memory width {mem.data.shape}")
    h = T.add(x, multi_head_attention(x, x, x, params.self_attn, n_heads,
                                      mask=self_mask, dropout_rate=dropout_rate, rng=rng))
    h = T.layer_norm(h, *params.ln[0])
    h = T.add(h, multi_head_attention(h, mem, mem, params.src_attn, n_heads,
                                      mask=src_mask, dropout_rate=dropout_rate, rng=rng))
    h = T.layer_norm(h, *params.ln[1])
    h = T.add(h, feed_forward(h, params, dropout_rate=dropout_rate, rng=rng))
    return T.layer_norm(h, *params.ln[2])


class TfmStack:
    def __init__(self, rng, d_model, n_heads, d_ff, n_layers):
        self.n_heads = n_heads
        self.layers = [TfmLayerParams(rng, d_model, d_ff) for _ in range(n_layers)]

    def __call__(self, x, mem, self_mask=None, src_mask=None,
                 dropout_rate=0.0, rng=None):
        for layer in self.layers:
            x = tfm_layer(x, mem, layer, self.n_heads, self_mask=self_mask,
                          src_mask=src_mask, dropout_rate=dropout_rate, rng=rng)
        return x

    def named(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.{i}"))
        return out


class SequenceEmbeddings:
    """Word table (includes [MASK]/[PAD]/[UNK] rows) + learned positions."""

    def __init__(self, rng, vocab_size, l_max, d_model):
        self.word = embedding_init(rng, vocab_size, d_model)
        self.pos = embedding_init(rng, l_max, d_model)
        self.l_max = l_max

    def embed_tokens(self, ids):
        """Row i = word embedding of ids[..., i] plus position embedding e_i."""
        ids = np.asarray(ids)
        length = ids.shape[-1]
        if not 1 <= length <= self.l_max:
            raise ShapeError(f"sequence length {length} outside [1, {self.l_max}]")
        positions = np.broadcast_to(np.arange(length), ids.shape)
        return T.add(T.embedding_lookup(self.word, ids),
                     T.embedding_lookup(self.pos, positions))

    def embed_masked(self, length, mask_id):
        """The all-[MASK] input: row i = w_mask + e_i."""
        return self.embed_tokens(np.full(length, mask_id, dtype=np.int64))

    def named(self, prefix):
        return {f"{prefix}.word": self.word, f"{prefix}.pos": self.pos}


def causal_mask(length):
    """Additive mask forbidding attention to positions > i."""
    m = np.triu(np.full((length, length), T._NEG_INF), k=1)
    return m


def padding_mask(pad_positions):
    """Additive key mask from a boolean [..., lk] pad indicator.

    Returns [..., 1, 1, lk] so it broadcasts over heads and query positions.
    """
    pad = np.asarray(pad_positions, dtype=bool)
    m = np.where(pad, T._NEG_INF, 0.0)
    return m[..., None, None, :]
