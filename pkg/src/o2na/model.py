"""The captioning model: feature projection, object predictor, length
predictor, object generator and caption generator, plus all training losses.

Everything is batch-first. A single video travels as a batch of one. The
object generator and caption generator share the word/position embedding
tables but own separate decoder stacks, conditioning maps and output
projections. The refinement pass reuses the caption generator weights.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import DataError, ShapeError
from .tensor import Tensor

IGNORE_ID = -1  # loss target sentinel for padded positions


@dataclass
class ModelDims:
    """Width/vocabulary configuration. Paper-scale defaults; override freely."""

    n_objects: int
    vocab_size: int
    d_h: int = 512
    n_heads: int = 8
    d_ff: int = 2048
    n_layers: int = 1
    n_frames: int = 8
    d_image: int = 2048
    d_motion: int = 2048
    l_max: int = 30
    dropout: float = 0.1


@dataclass
class LossWeights:
    """Multipliers for the five loss terms; all 1.0 by default."""

    lp: float = 1.0
    op: float = 1.0
    og: float = 1.0
    cg: float = 1.0
    refine: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise DataError(f"loss weight {name} must be non-negative, got {value}")


@dataclass
class Batch:
    """One padded training batch; produced by datagen.batch_iter."""

    image: np.ndarray          # B x N x d_i
    motion: np.ndarray         # B x N x d_m
    tokens: np.ndarray         # B x L caption ids, PAD-padded
    targets: np.ndarray        # B x L caption ids with IGNORE_ID at pads
    obj_tokens: np.ndarray     # B x L object-masked caption, PAD-padded
    obj_targets: np.ndarray    # B x L object-masked targets, IGNORE_ID at pads
    lengths: np.ndarray        # B true caption lengths
    caption_objects: np.ndarray  # B x M multi-hot of this caption's objects
    union_objects: np.ndarray    # B x M multi-hot union over the video's captions
    sample_ids: list = field(default_factory=list)

    def __len__(self):
        return self.tokens.shape[0]


class O2NAModel:
    def __init__(self, dims: ModelDims, mask_id: int, pad_id: int, rng,
                 object_token_ids=None):
        self.dims = dims
        self.mask_id = mask_id
        self.pad_id = pad_id
        # maps object id -> surface token id in D; decoding uses it to pin
        # object positions when lock_objects is on
        self.object_token_ids = (None if object_token_ids is None
                                 else np.asarray(object_token_ids, dtype=np.int64))
        d = dims.d_h
        self.proj_img = nn.glorot(rng, dims.d_image, d)
        self.proj_mot = nn.glorot(rng, dims.d_motion, d)
        self.op_w1 = nn.glorot(rng, d, d)
        self.op_w2 = nn.glorot(rng, d, dims.n_objects)
        self.lp_w_v = nn.glorot(rng, d, d)
        self.lp_w_o = nn.glorot(rng, dims.n_objects, d)
        self.lp_w_l = nn.glorot(rng, 2 * d, dims.l_max)
        self.emb = nn.SequenceEmbeddings(rng, dims.vocab_size, dims.l_max, d)
        self.og_w_obj = nn.glorot(rng, dims.n_objects, d)
        self.og_tfm = nn.TfmStack(rng, d, dims.n_heads, dims.d_ff, dims.n_layers)
        self.og_out = nn.glorot(rng, d, dims.vocab_size)
        self.cg_w_obj = nn.glorot(rng, dims.n_objects, d)
        self.cg_tfm = nn.TfmStack(rng, d, dims.n_heads, dims.d_ff, dims.n_layers)
        self.cg_out = nn.glorot(rng, d, dims.vocab_size)

    # ---- parameter registry -------------------------------------------------

    def named_params(self):
        out = {"proj.img": self.proj_img, "proj.mot": self.proj_mot,
               "op.w1": self.op_w1, "op.w2": self.op_w2,
               "lp.w_v": self.lp_w_v, "lp.w_o": self.lp_w_o, "lp.w_l": self.lp_w_l,
               "og.w_obj": self.og_w_obj, "og.out": self.og_out,
               "cg.w_obj": self.cg_w_obj, "cg.out": self.cg_out}
        out.update(self.emb.named("emb"))
        out.update(self.og_tfm.named("og.tfm"))
        out.update(self.cg_tfm.named("cg.tfm"))
        return out

    def parameters(self):
        return list(self.named_params().values())

    def load_state(self, state):
        for name, p in self.named_params().items():
            if name not in state:
                raise DataError(f"checkpoint is missing tensor '{name}'")
            if tuple(state[name].shape) != tuple(p.data.shape):
                raise ShapeError(
                    f"checkpoint tensor '{name}' has shape {state[name].shape}, "
                    f"model expects {p.data.shape}")
            p.data = state[name].astype(np.float64).copy()

    def check_finite(self):
        for name, p in self.named_params().items():
            T.check_finite(p, f"parameter {name}")

    # ---- forward pieces -----------------------------------------------------

    def project_features(self, image, motion):
        """V = row-concatenation of the projected image and motion features."""
        img = T.constant(image) if not isinstance(image, Tensor) else image
        mot = T.constant(motion) if not isinstance(motion, Tensor) else motion
        if img.data.shape[-1] != self.dims.d_image or mot.data.shape[-1] != self.dims.d_motion:
            raise ShapeError(
                f"feature widths {img.data.shape[-1]}/{mot.data.shape[-1]} do not match "
                f"configured d_image={self.dims.d_image}, d_motion={self.dims.d_motion}")
        return T.concat([T.matmul(img, self.proj_img), T.matmul(mot, self.proj_mot)], axis=-2)

    def object_logits(self, v):
        """Pre-sigmoid object scores from mean-pooled video features."""
        return T.matmul(T.relu(T.matmul(T.mean_pool(v), self.op_w1)), self.op_w2)

    def predict_objects(self, v):
        z = self.object_logits(v)
        return z, T.sigmoid(z)

    def length_logits(self, v, objects):
        o = objects if isinstance(objects, Tensor) else T.constant(objects)
        h = T.concat([T.matmul(T.mean_pool(v), self.lp_w_v),
                      T.matmul(o, self.lp_w_o)], axis=-1)
        return T.matmul(T.relu(h), self.lp_w_l)

    def predict_length(self, v, objects):
        """Distribution over lengths 1..l_max (class c-1 means length c)."""
        logits = self.length_logits(v, objects)
        return logits, T.softmax(logits, axis=-1)

    def _conditioned(self, x, objects, w_obj):
        o = objects if isinstance(objects, Tensor) else T.constant(objects)
        bias = T.matmul(o, w_obj)
        # one conditioning vector per sequence, added to every row
        return T.add(x, T.reshape(bias, bias.data.shape[:-1] + (1, bias.data.shape[-1])))

    def og_logits(self, token_ids, v, objects, self_mask=None, train=False, rng=None):
        """Vocabulary logits of the object generator; input is all-[MASK]."""
        x = self._conditioned(self.emb.embed_tokens(token_ids), objects, self.og_w_obj)
        drop = self.dims.dropout if train else 0.0
        h = self.og_tfm(x, v, self_mask=self_mask, dropout_rate=drop, rng=rng)
        return T.matmul(h, self.og_out)

    def cg_logits(self, token_ids, v, objects, self_mask=None, train=False, rng=None):
        """Vocabulary logits of the caption generator (draft and refinement)."""
        x = self._conditioned(self.emb.embed_tokens(token_ids), objects, self.cg_w_obj)
        drop = self.dims.dropout if train else 0.0
        h = self.cg_tfm(x, v, self_mask=self_mask, dropout_rate=drop, rng=rng)
        return T.matmul(h, self.cg_out)

    def masked_input(self, length):
        """Token ids of the fully masked draft of a given length."""
        if not 1 <= length <= self.dims.l_max:
            raise DataError(f"length {length} outside [1, {self.dims.l_max}]")
        return np.full(length, self.mask_id, dtype=np.int64)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def object_loss(logits, true_objects, literal_labels=False):
    """Element-wise logistic loss on the pre-sigmoid object scores.

    Default signed convention: label +1 where the video carries the object,
    -1 otherwise. ``literal_labels=True`` keeps raw {0,1} labels, which makes
    absent objects contribute a constant log 2 with zero gradient (kept as a
    comparison mode only). Returns the per-sample sum over the object
    vocabulary, averaged over the batch when given 2-D inputs.
    """
    labels = np.asarray(true_objects, dtype=np.float64)
    signs = labels if literal_labels else 2.0 * labels - 1.0
    loss = T.logistic_loss(logits, signs)
    if logits.data.ndim == 2:
        loss = T.scale(loss, 1.0 / logits.data.shape[0])
    return loss


def length_loss(length_logits, true_lengths, l_max):
    lengths = np.atleast_1d(np.asarray(true_lengths))
    if lengths.min() < 1 or lengths.max() > l_max:
        bad = int(lengths.min()) if lengths.min() < 1 else int(lengths.max())
        raise DataError(f"caption length {bad} outside [1, {l_max}]")
    return T.cross_entropy_rows(length_logits, lengths - 1)


def sequence_loss(logits, targets):
    """Token-mean cross entropy; IGNORE_ID positions are excluded."""
    return T.cross_entropy_rows(logits, targets, ignore_id=IGNORE_ID)


def make_object_target(caption_ids, object_token_ids, mask_id):
    """Replace every non-object token by [MASK], keeping objects in place."""
    ids = np.asarray(caption_ids)
    keep = np.isin(ids, list(object_token_ids))
    return np.where(keep, ids, mask_id)


def refine_mask_count(length, ratio):
    return int(np.floor(length * ratio))


def make_refine_input_train(caption_ids, ratio, rng, mask_id):
    """Randomly mask floor(l*r) distinct positions of the reference caption."""
    if not 0.0 <= ratio <= 1.0:
        raise DataError(f"masking ratio {ratio} outside [0, 1]")
    ids = np.asarray(caption_ids).copy()
    n = refine_mask_count(ids.shape[-1], ratio)
    if n > 0:
        picks = rng.choice(ids.shape[-1], size=n, replace=False)
        ids[picks] = mask_id
    return ids


def full_loss(model, batch, weights=None, rng=None, ratio=0.5, train=True,
              literal_labels=False):
    """The joint objective: weighted sum of the five loss terms.

    The object-predictor term sees the per-video union of objects; length,
    object-generator and caption-generator terms see the per-caption object
    set. Returns (total, breakdown dict of plain floats).
    """
    weights = weights or LossWeights()
    drop_rng = rng if train else None
    v = model.project_features(batch.image, batch.motion)

    l_op = object_loss(model.object_logits(v), batch.union_objects,
                       literal_labels=literal_labels)
    objects = T.constant(batch.caption_objects)
    l_lp = length_loss(model.length_logits(v, objects), batch.lengths, model.dims.l_max)

    pad_rows = batch.tokens == model.pad_id
    self_mask = nn.padding_mask(pad_rows)
    x0 = np.full_like(batch.tokens, model.mask_id)
    x0[pad_rows] = model.pad_id
    l_og = sequence_loss(model.og_logits(x0, v, objects, self_mask=self_mask,
                                         train=train, rng=drop_rng),
                         batch.obj_targets)
    l_cg = sequence_loss(model.cg_logits(batch.obj_tokens, v, objects,
                                         self_mask=self_mask, train=train, rng=drop_rng),
                         batch.targets)

    x2 = batch.tokens.copy()
    for i, length in enumerate(batch.lengths):
        n = refine_mask_count(int(length), ratio)
        if n > 0 and rng is not None:
            picks = rng.choice(int(length), size=n, replace=False)
            x2[i, picks] = model.mask_id
    l_refine = sequence_loss(model.cg_logits(x2, v, objects, self_mask=self_mask,
                                             train=train, rng=drop_rng),
                             batch.targets)

    total = T.scale(l_lp, weights.lp)
    total = T.add(total, T.scale(l_op, weights.op))
    total = T.add(total, T.scale(l_og, weights.og))
    total = T.add(total, T.scale(l_cg, weights.cg))
    total = T.add(total, T.scale(l_refine, weights.refine))
    breakdown = {"lp": l_lp.item(), "op": l_op.item(), "og": l_og.item(),
                 "cg": l_cg.item(), "refine": l_refine.item()}
    return total, breakdown
