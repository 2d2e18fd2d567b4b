"""Left-to-right baseline decoder used for latency comparison and teacher
re-scoring.

Same decoder block as the parallel model but with a causal self-attention
mask, BOS/EOS markers (kept private to this model's tables; the shared
vocabulary D never contains them) and standard next-token cross entropy.
"""

import numpy as np

from . import nn
from . import tensor as T
from .errors import DataError
from .model import IGNORE_ID


class ARModel:
    def __init__(self, dims, pad_id, rng):
        self.dims = dims
        self.pad_id = pad_id
        self.bos_id = dims.vocab_size
        self.eos_id = dims.vocab_size + 1
        d = dims.d_h
        self.proj_img = nn.glorot(rng, dims.d_image, d)
        self.proj_mot = nn.glorot(rng, dims.d_motion, d)
        # + BOS/EOS rows; +1 position for the shifted input
        self.emb = nn.SequenceEmbeddings(rng, dims.vocab_size + 2, dims.l_max + 1, d)
        self.tfm = nn.TfmStack(rng, d, dims.n_heads, dims.d_ff, dims.n_layers)
        self.out = nn.glorot(rng, d, dims.vocab_size + 2)

    def named_params(self):
        out = {"ar.out": self.out, "ar.proj.img": self.proj_img,
               "ar.proj.mot": self.proj_mot}
        out.update(self.emb.named("ar.emb"))
        out.update(self.tfm.named("ar.tfm"))
        return out

    def project_features(self, image, motion):
        img = image if isinstance(image, T.Tensor) else T.constant(image)
        mot = motion if isinstance(motion, T.Tensor) else T.constant(motion)
        return T.concat([T.matmul(img, self.proj_img), T.matmul(mot, self.proj_mot)],
                        axis=-2)

    def parameters(self):
        return list(self.named_params().values())

    def load_state(self, state):
        for name, p in self.named_params().items():
            if name not in state:
                raise DataError(f"AR checkpoint is missing tensor '{name}'")
            if tuple(state[name].shape) != tuple(p.data.shape):
                raise DataError(f"AR checkpoint tensor '{name}' has shape "
                                f"{state[name].shape}, expected {p.data.shape}")
            p.data = state[name].astype(np.float64).copy()

    def logits(self, tokens, v, train=False, rng=None):
        """Next-token logits for a BOS-prefixed batch under the causal mask."""
        tokens = np.asarray(tokens)
        mask = nn.causal_mask(tokens.shape[-1])
        if tokens.ndim == 2:
            mask = mask + nn.padding_mask(tokens == self.pad_id)
        x = self.emb.embed_tokens(tokens)
        drop = self.dims.dropout if train else 0.0
        h = self.tfm(x, v, self_mask=mask, dropout_rate=drop, rng=rng)
        return T.matmul(h, self.out)


def ar_loss(model, batch, train=True, rng=None):
    """Teacher-forced cross entropy: inputs [BOS, w..], targets [w.., EOS]."""
    b, width = batch.tokens.shape
    inputs = np.full((b, width + 1), model.pad_id, dtype=np.int64)
    targets = np.full((b, width + 1), IGNORE_ID, dtype=np.int64)
    inputs[:, 0] = model.bos_id
    for i, length in enumerate(batch.lengths):
        l = int(length)
        inputs[i, 1: l + 1] = batch.tokens[i, :l]
        targets[i, :l] = batch.tokens[i, :l]
        targets[i, l] = model.eos_id
    v = model.project_features(batch.image, batch.motion)
    logits = model.logits(inputs, v, train=train, rng=rng)
    return T.cross_entropy_rows(logits, targets, ignore_id=IGNORE_ID)
