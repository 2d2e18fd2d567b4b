"""Training loops and checkpoint assembly.

Training is single-threaded and fully deterministic under the config seed:
one seed sequence feeds parameter init, per-epoch shuffling, dropout and
refinement masking, in a fixed consumption order. Loss histories carry the
per-epoch mean of every term.

Checkpoints store the parameter tensors plus byte-encoded metadata records
(meta.config, meta.vocab, meta.objects, meta.arch, meta.seed) so that
decoding and evaluation can be reproduced from the checkpoint file alone.
"""

import logging

import numpy as np

from . import tensor as T
from .baseline import ARModel, ar_loss
from .checkpoint import bytes_to_record, load_checkpoint, record_to_bytes, save_checkpoint
from .datagen import Vocab, ObjectVocab, batch_iter
from .errors import DataError, NumericError
from .model import LossWeights, ModelDims, O2NAModel, full_loss
from .optim import Adam

log = logging.getLogger(__name__)


def dims_from_config(cfg, n_objects, vocab_size):
    return ModelDims(n_objects=n_objects, vocab_size=vocab_size, d_h=cfg.d_h,
                     n_heads=cfg.heads, d_ff=cfg.d_ff, n_layers=cfg.n_layers,
                     n_frames=cfg.n_frames, d_image=cfg.d_image, d_motion=cfg.d_motion,
                     l_max=cfg.l_max, dropout=cfg.dropout)


def _derive(cfg, features):
    """Echo feature-file geometry into the effective config."""
    cfg.n_frames = features.shape[1] // 2
    if features.shape[1] != 2 * cfg.n_frames:
        raise DataError(f"feature rows {features.shape[1]} must be even (2N)")
    cfg.d_image = cfg.d_motion = features.shape[2]
    return cfg


def _rngs(seed):
    init_ss, data_ss, train_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(data_ss),
            np.random.default_rng(train_ss))


def train_o2na(cfg, features, manifest, vocab: Vocab, obj_vocab: ObjectVocab,
               progress=None):
    """Train the parallel captioner; returns (model, history).

    ``history`` is a list of per-epoch dicts with the mean of each loss term.
    A non-finite loss aborts with NumericError.
    """
    _derive(cfg, features)
    init_rng, data_rng, train_rng = _rngs(cfg.seed)
    dims = dims_from_config(cfg, len(obj_vocab), len(vocab))
    model = O2NAModel(dims, mask_id=vocab.mask_id, pad_id=vocab.pad_id, rng=init_rng,
                      object_token_ids=obj_vocab.token_ids)
    opt = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.adam_eps)
    weights = LossWeights(lp=cfg.lambda_lp, op=cfg.lambda_op, og=cfg.lambda_og,
                          cg=cfg.lambda_cg, refine=cfg.lambda_refine)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        shuffle_seed = int(data_rng.integers(2 ** 31))
        sums = {"lp": 0.0, "op": 0.0, "og": 0.0, "cg": 0.0, "refine": 0.0, "total": 0.0}
        n_batches = 0
        for batch in batch_iter(manifest, features, vocab, obj_vocab,
                                cfg.batch_size, seed=shuffle_seed, l_max=cfg.l_max,
                                n_frames=cfg.n_frames):
            with T.Tape() as tape:
                loss, parts = full_loss(model, batch, weights=weights, rng=train_rng,
                                        ratio=cfg.mask_ratio, train=True)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}, "
                                   f"batch {n_batches} (samples {batch.sample_ids[:3]}...)")
            opt.zero_grad()
            T.backward(loss, tape)
            opt.step()
            for key, part in parts.items():
                sums[key] += part
            sums["total"] += value
            n_batches += 1
        record = {"epoch": epoch}
        record.update({k: v / n_batches for k, v in sums.items()})
        history.append(record)
        if progress:
            progress(record)
    return model, history


def train_ar(cfg, features, manifest, vocab: Vocab, obj_vocab: ObjectVocab,
             progress=None):
    """Train the left-to-right baseline on the same corpus."""
    _derive(cfg, features)
    init_rng, data_rng, train_rng = _rngs(cfg.seed)
    dims = dims_from_config(cfg, len(obj_vocab), len(vocab))
    model = ARModel(dims, pad_id=vocab.pad_id, rng=init_rng)
    opt = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.adam_eps)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        shuffle_seed = int(data_rng.integers(2 ** 31))
        total, n_batches = 0.0, 0
        for batch in batch_iter(manifest, features, vocab, obj_vocab,
                                cfg.batch_size, seed=shuffle_seed, l_max=cfg.l_max,
                                n_frames=cfg.n_frames):
            with T.Tape() as tape:
                loss = ar_loss(model, batch, train=True, rng=train_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite AR loss at epoch {epoch}")
            opt.zero_grad()
            T.backward(loss, tape)
            opt.step()
            total += value
            n_batches += 1
        record = {"epoch": epoch, "ce": total / n_batches, "total": total / n_batches}
        history.append(record)
        if progress:
            progress(record)
    return model, history


# --------------------------------------------------------------------------
# Artifact assembly
# --------------------------------------------------------------------------

def save_trained(path, model, vocab: Vocab, obj_vocab: ObjectVocab, cfg, arch):
    """Checkpoint = parameters + byte-encoded config/vocab metadata records."""
    if arch not in ("o2na", "ar"):
        raise DataError(f"unknown architecture tag {arch!r}")
    records = dict(model.named_params())
    records["meta.config"] = bytes_to_record(cfg.to_text())
    records["meta.vocab"] = bytes_to_record("\n".join(vocab.words))
    records["meta.objects"] = bytes_to_record("\n".join(obj_vocab.words))
    records["meta.arch"] = bytes_to_record(arch)
    records["meta.seed"] = np.array([float(cfg.seed)])
    save_checkpoint(path, records)


def load_trained(path):
    """Rebuild (model, vocab, obj_vocab, cfg, arch) from a checkpoint file."""
    from .config import parse_config_text

    state = load_checkpoint(path)
    for key in ("meta.config", "meta.vocab", "meta.objects", "meta.arch"):
        if key not in state:
            raise DataError(f"{path}: checkpoint lacks the {key} record; "
                            "was it written by this tool?")
    cfg = parse_config_text(record_to_bytes(state["meta.config"]))
    words = record_to_bytes(state["meta.vocab"]).split("\n")
    vocab = Vocab.from_lines(words)
    obj_words = record_to_bytes(state["meta.objects"]).split("\n")
    obj_vocab = ObjectVocab([w for w in obj_words if w], vocab)
    arch = record_to_bytes(state["meta.arch"])
    dims = dims_from_config(cfg, len(obj_vocab), len(vocab))
    rng = np.random.default_rng(0)  # immediately overwritten by load_state
    if arch == "ar":
        model = ARModel(dims, pad_id=vocab.pad_id, rng=rng)
    else:
        model = O2NAModel(dims, mask_id=vocab.mask_id, pad_id=vocab.pad_id, rng=rng,
                          object_token_ids=obj_vocab.token_ids)
    model.load_state(state)
    return model, vocab, obj_vocab, cfg, arch
