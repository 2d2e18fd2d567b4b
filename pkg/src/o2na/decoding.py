"""Inference: object selection with user overrides, the three-step parallel
generation, confidence-based iterative refinement, de-duplication, length
beam candidate search, and greedy decoding for the AR baseline.

Every forward pass here is an exact fixed-length fill, so the number of
decoder invocations per video is 2 + T regardless of caption length. All
functions are read-only over the model and fully deterministic.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, NumericError

log = logging.getLogger(__name__)


@dataclass
class ControlSpec:
    """Knobs of one decode: object overrides, length, refinement budget."""

    forced_on: frozenset = frozenset()    # object ids forced to 1
    forced_off: frozenset = frozenset()   # object ids forced to 0
    gamma: float = 0.8
    length: int | None = None
    iterations: int = 1                   # refinement rounds T
    mask_ratio: float = 0.5
    lock_objects: bool = False
    npd_k: int = 5
    dedup: bool = True

    def validate(self, n_objects):
        if self.forced_on & self.forced_off:
            raise DataError("forced_on and forced_off overlap: "
                            f"{sorted(self.forced_on & self.forced_off)}")
        for oid in sorted(self.forced_on | self.forced_off):
            if not 0 <= oid < n_objects:
                raise DataError(f"unknown object id {oid} in override (vocabulary size {n_objects})")
        if self.iterations < 0:
            raise DataError(f"iterations must be >= 0, got {self.iterations}")
        if self.npd_k < 1:
            raise DataError(f"npd_k must be >= 1, got {self.npd_k}")


@dataclass
class DecodeTrace:
    video_id: str = ""
    objects: list = field(default_factory=list)        # selected object ids
    length: int = 0
    draft: list = field(default_factory=list)          # Y_obj token ids
    y1: list = field(default_factory=list)
    iterations: list = field(default_factory=list)     # [{"remasked": [...], "tokens": [...]}]
    final: list = field(default_factory=list)
    confidences: list = field(default_factory=list)
    candidate_scores: list = field(default_factory=list)
    stage_ms: dict = field(default_factory=dict)
    stripped_masks: int = 0
    remask_clamped: bool = False
    n_forwards: int = 0
    score: float = 0.0

    def to_record(self, vocab):
        words = lambda ids: [vocab.words[i] for i in ids]
        return {"video_id": self.video_id, "objects": self.objects,
                "length": self.length, "draft": words(self.draft),
                "iterations": [{"remasked": it["remasked"], "tokens": words(it["tokens"])}
                               for it in self.iterations],
                "final": words(self.final), "stage_ms": self.stage_ms}


def select_objects(probs, spec: ControlSpec):
    """Threshold at gamma (strictly greater), then apply overrides."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    spec.validate(probs.shape[0])
    chosen = (probs > spec.gamma).astype(np.float64)
    for oid in spec.forced_on:
        chosen[oid] = 1.0
    for oid in spec.forced_off:
        chosen[oid] = 0.0
    return chosen


def remask_lowest_confidence(tokens, confidences, n, mask_id, locked=frozenset()):
    """Mask the n least-confident positions; ties fall to the lower index.

    Locked positions are skipped (the next-lowest is taken instead); if fewer
    than n positions are available, n is clamped. Returns (new tokens,
    remasked position list, clamped flag).
    """
    tokens = np.asarray(tokens).copy()
    confidences = np.asarray(confidences, dtype=np.float64)
    if n < 0:
        raise DataError(f"remask count must be >= 0, got {n}")
    order = np.argsort(confidences, kind="stable")  # stable: ties by position
    available = [int(i) for i in order if int(i) not in locked]
    clamped = n > len(available)
    picks = available[: min(n, len(available))]
    tokens[picks] = mask_id
    return tokens, sorted(picks), clamped


def deduplicate(tokens):
    """Collapse consecutive runs of the identical token to one occurrence."""
    out = []
    for t in tokens:
        if not out or out[-1] != t:
            out.append(t)
    return type(tokens)(out) if isinstance(tokens, list) else np.array(out, dtype=np.asarray(tokens).dtype)


def _check_model(model):
    for name, p in model.named_params().items():
        if not np.isfinite(p.data).all():
            raise NumericError(f"model parameter {name} contains non-finite values; "
                               "refusing to decode")


def _argmax_with_prob(logits_row):
    probs = T.softmax(logits_row, axis=-1).data
    ids = probs.argmax(axis=-1)
    conf = np.take_along_axis(probs, ids[..., None], axis=-1)[..., 0]
    return ids, conf


def decode_o2na(model, v, spec: ControlSpec, video_id="", object_probs=None):
    """Three-step parallel decode plus T refinement rounds.

    v is the projected video memory, batch-of-one shaped (1, 2N, d_h).
    Returns (final token ids after stripping/de-dup, DecodeTrace).
    """
    _check_model(model)
    trace = DecodeTrace(video_id=video_id)
    clock = time.perf_counter

    t0 = clock()
    if object_probs is None:
        _, prob_t = model.predict_objects(v)
        object_probs = prob_t.data[0]
    objects = select_objects(object_probs, spec)
    trace.objects = [int(i) for i in np.nonzero(objects)[0]]
    o_row = objects[None, :]
    trace.stage_ms["op"] = (clock() - t0) * 1000

    t0 = clock()
    if spec.length is not None:
        if not 1 <= spec.length <= model.dims.l_max:
            raise DataError(f"requested length {spec.length} outside [1, {model.dims.l_max}]")
        length = int(spec.length)
    else:
        _, p_l = model.predict_length(v, o_row)
        length = int(p_l.data[0].argmax()) + 1
    trace.length = length
    trace.stage_ms["lp"] = (clock() - t0) * 1000

    t0 = clock()
    x0 = model.masked_input(length)[None, :]
    draft, _ = _argmax_with_prob(model.og_logits(x0, v, o_row))
    draft = draft[0]
    trace.draft = draft.tolist()
    trace.n_forwards += 1
    trace.stage_ms["og"] = (clock() - t0) * 1000

    t0 = clock()
    tokens, conf = _argmax_with_prob(model.cg_logits(draft[None, :], v, o_row))
    tokens, conf = tokens[0], conf[0]
    trace.y1 = tokens.tolist()
    trace.n_forwards += 1
    trace.stage_ms["cg"] = (clock() - t0) * 1000

    selected_token_ids = set()
    if spec.lock_objects:
        obj_token_ids = getattr(model, "object_token_ids", None)
        if obj_token_ids is not None:
            on = np.nonzero(objects)[0]
            selected_token_ids = {int(obj_token_ids[i]) for i in on}
    locked = {i for i, t in enumerate(draft) if int(t) in selected_token_ids}

    t0 = clock()
    n = int(np.floor(length * spec.mask_ratio))
    for _ in range(spec.iterations):
        x2, remasked, clamped = remask_lowest_confidence(
            tokens, conf, n, model.mask_id, locked=locked)
        trace.remask_clamped |= clamped
        new_tokens, new_conf = _argmax_with_prob(model.cg_logits(x2[None, :], v, o_row))
        step_tokens = tokens.copy()
        step_conf = conf.copy()
        step_tokens[remasked] = new_tokens[0][remasked]
        step_conf[remasked] = new_conf[0][remasked]
        tokens, conf = step_tokens, step_conf
        trace.n_forwards += 1
        trace.iterations.append({"remasked": remasked, "tokens": tokens.tolist()})
    trace.stage_ms["refine"] = (clock() - t0) * 1000

    trace.confidences = conf.tolist()
    trace.score = float(np.log(np.maximum(conf, 1e-300)).mean())
    keep = ~np.isin(tokens, [model.mask_id, model.pad_id])
    trace.stripped_masks = int((tokens == model.mask_id).sum())
    final = tokens[keep]
    if spec.dedup:
        final = deduplicate(final)
    trace.final = final.tolist()
    trace.stage_ms["total"] = sum(trace.stage_ms.values())
    return final, trace


def npd_decode(model, v, spec: ControlSpec, video_id="", teacher=None):
    """Decode the top-k candidate lengths in parallel form and keep the best.

    Candidates are scored by mean per-token log probability, or by the AR
    teacher's mean log-likelihood when one is supplied. Returns
    (best tokens, best trace, all (tokens, trace) candidates).
    """
    _check_model(model)
    k = spec.npd_k
    if k > model.dims.l_max:
        log.warning("npd_k %d exceeds l_max %d; clamping", k, model.dims.l_max)
        k = model.dims.l_max
    _, prob_t = model.predict_objects(v)
    object_probs = prob_t.data[0]
    objects = select_objects(object_probs, spec)
    if spec.length is not None:
        lengths = [int(spec.length)]
    else:
        _, p_l = model.predict_length(v, objects[None, :])
        order = np.argsort(-p_l.data[0], kind="stable")
        lengths = [int(c) + 1 for c in order[:k]]
    candidates = []
    scores = []
    for length in lengths:
        cand_spec = ControlSpec(forced_on=spec.forced_on, forced_off=spec.forced_off,
                                gamma=spec.gamma, length=length,
                                iterations=spec.iterations, mask_ratio=spec.mask_ratio,
                                lock_objects=spec.lock_objects, npd_k=1, dedup=spec.dedup)
        tokens, trace = decode_o2na(model, v, cand_spec, video_id=video_id,
                                    object_probs=object_probs)
        score = teacher_score(teacher, v, tokens) if teacher is not None else trace.score
        trace.score = score
        candidates.append((tokens, trace))
        scores.append(score)
    best = int(np.argmax(scores))
    best_tokens, best_trace = candidates[best]
    best_trace.candidate_scores = [float(s) for s in scores]
    return best_tokens, best_trace, candidates


def teacher_score(ar_model, v, tokens):
    """Mean AR log-likelihood of [w.., EOS] given BOS-prefixed input."""
    tokens = np.asarray(tokens, dtype=np.int64)
    inputs = np.concatenate([[ar_model.bos_id], tokens])[None, :]
    logits = ar_model.logits(inputs, v).data[0]
    targets = np.concatenate([tokens, [ar_model.eos_id]])
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(logp[np.arange(len(targets)), targets].mean())


def ar_decode(model, v, max_len, min_len=0):
    """Greedy left-to-right decode until EOS or max_len.

    One full forward per emitted token (plus the EOS-detecting pass), so the
    invocation count grows linearly with output length. ``min_len`` blocks
    EOS for benchmark runs that need an exact target length.
    """
    _check_model(model)
    t0 = time.perf_counter
    start = t0()
    seq = [model.bos_id]
    n_forwards = 0
    emitted = []
    while len(emitted) < max_len:
        logits = model.logits(np.array(seq, dtype=np.int64)[None, :], v).data[0, -1]
        n_forwards += 1
        if len(emitted) < min_len:
            logits = logits.copy()
            logits[model.eos_id] = -np.inf
        nxt = int(logits.argmax())
        if nxt == model.eos_id:
            break
        emitted.append(nxt)
        seq.append(nxt)
    elapsed_ms = (t0() - start) * 1000
    emitted = [t for t in emitted if t < model.dims.vocab_size]  # drop stray specials
    return np.array(emitted, dtype=np.int64), {"total_ms": elapsed_ms, "n_forwards": n_forwards}
