"""Synthetic toy-world corpus plus the dataset file formats and batcher.

The toy world draws 1-3 objects, an attribute, a relation and (for multi
object scenes) a preposition per video. Video "features" are the mean of
fixed random prototype vectors of the drawn concepts with per-row Gaussian
noise, replicated over 2N rows (image rows lean on the attribute, motion
rows on the relation). The first caption of a video mentions every drawn
object; the remaining captions mention random non-empty subsets, so the
object vector, not the video features, is what determines which objects a
caption contains. That is what makes object forcing work on held-out
videos. Captions come from fixed-length templates (length is a function of
the mentioned-object count, objects appear in canonical vocabulary order)
with a free trailing adverb slot, keeping the corpus learnable while
leaving genuine ambiguity for the refinement pass to clean up.

External datasets plug in through the same manifest (JSON lines) and
feature-file interfaces; feature extraction itself lives outside this
package.
"""

import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .model import IGNORE_ID, Batch, make_object_target

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"O2NAFEAT"
FEATURE_VERSION = 1

PAD, UNK, MASK = "[PAD]", "[UNK]", "[MASK]"

DEFAULT_OBJECTS = [
    "box", "ball", "dog", "cat", "car", "bird", "cup", "book",
    "tree", "fish", "chair", "table", "phone", "door", "star", "boat",
    "train", "plane", "horse", "sheep", "apple", "clock", "lamp", "drum",
]
DEFAULT_ATTRIBUTES = ["red", "blue", "green", "small", "big", "shiny", "old", "new"]
DEFAULT_RELATIONS = ["moves", "spins", "falls", "rolls", "jumps", "slides", "floats", "bounces"]
DEFAULT_PREPOSITIONS = ["near", "over", "under", "beside"]
DEFAULT_ADVERBS = ["quickly", "slowly", "silently"]


@dataclass
class WorldSpec:
    objects: list = field(default_factory=lambda: list(DEFAULT_OBJECTS))
    attributes: list = field(default_factory=lambda: list(DEFAULT_ATTRIBUTES))
    relations: list = field(default_factory=lambda: list(DEFAULT_RELATIONS))
    prepositions: list = field(default_factory=lambda: list(DEFAULT_PREPOSITIONS))
    adverbs: list = field(default_factory=lambda: list(DEFAULT_ADVERBS))
    n_videos: int = 2000
    captions_per_video: int = 3
    n_frames: int = 8          # N; feature files carry 2N rows
    feature_dim: int = 64
    noise_sigma: float = 0.1
    seed: int = 1

    def validate(self):
        for name in ("objects", "attributes", "relations", "prepositions", "adverbs"):
            if not getattr(self, name):
                raise ConfigError(f"world spec: empty {name} vocabulary")
        total_words = (len(self.objects) + len(self.attributes) + len(self.relations)
                       + len(self.prepositions) + len(self.adverbs) + 3)  # + a/the/and
        if total_words > 200:
            raise ConfigError(f"world spec: {total_words} words exceeds the 200-word budget")


def _caption(spec, obj_idx, attr_idx, rel_idx, prep_idx, adv_idx):
    """Template token list; length depends only on the object count."""
    det = "a" if attr_idx % 2 == 0 else "the"
    objs = [spec.objects[i] for i in sorted(obj_idx)]
    attr = spec.attributes[attr_idx]
    rel = spec.relations[rel_idx]
    adv = spec.adverbs[adv_idx]
    if len(objs) == 1:
        return [det, attr, objs[0], rel, adv]
    if len(objs) == 2:
        prep = spec.prepositions[prep_idx]
        return [det, attr, objs[0], rel, prep, det, objs[1], adv]
    return [det, attr, objs[0], det, objs[1], "and", det, objs[2], rel, adv]


def synth_corpus(spec: WorldSpec):
    """Deterministic corpus: (features [n, 2N, dim] float32, manifest records)."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    proto_rng, draw_rng, noise_rng = (np.random.default_rng(s) for s in root.spawn(3))

    def protos(words):
        return {w: proto_rng.normal(size=spec.feature_dim) for w in words}

    obj_p = protos(spec.objects)
    attr_p = protos(spec.attributes)
    rel_p = protos(spec.relations)
    prep_p = protos(spec.prepositions)

    n = spec.n_frames
    k_max = min(3, len(spec.objects))
    features = np.empty((spec.n_videos, 2 * n, spec.feature_dim), dtype=np.float32)
    manifest = []
    for vid in range(spec.n_videos):
        k = int(draw_rng.integers(1, k_max + 1))
        obj_idx = sorted(draw_rng.choice(len(spec.objects), size=k, replace=False).tolist())
        attr_idx = int(draw_rng.integers(len(spec.attributes)))
        rel_idx = int(draw_rng.integers(len(spec.relations)))
        prep_idx = int(draw_rng.integers(len(spec.prepositions)))

        obj_words = [spec.objects[i] for i in obj_idx]
        image_mean = np.mean([obj_p[w] for w in obj_words]
                             + [attr_p[spec.attributes[attr_idx]]], axis=0)
        motion_concepts = [obj_p[w] for w in obj_words] + [rel_p[spec.relations[rel_idx]]]
        if k >= 2:
            motion_concepts.append(prep_p[spec.prepositions[prep_idx]])
        motion_mean = np.mean(motion_concepts, axis=0)
        block = np.concatenate([np.tile(image_mean, (n, 1)), np.tile(motion_mean, (n, 1))])
        if spec.noise_sigma > 0:
            block = block + noise_rng.normal(0.0, spec.noise_sigma, block.shape)
        features[vid] = block.astype(np.float32)

        captions, per_caption = [], []
        for cap in range(spec.captions_per_video):
            if cap == 0:
                subset = list(obj_idx)  # first caption covers the union
            else:
                k_c = int(draw_rng.integers(1, k + 1))
                subset = sorted(draw_rng.choice(obj_idx, size=k_c, replace=False).tolist())
            adv_idx = int(draw_rng.integers(len(spec.adverbs)))
            captions.append(_caption(spec, subset, attr_idx, rel_idx, prep_idx, adv_idx))
            per_caption.append([spec.objects[i] for i in subset])
        manifest.append({
            "video_id": f"v{vid:05d}",
            "captions": captions,
            "objects": per_caption,
            "union_objects": list(obj_words),
        })
    return features, manifest


# --------------------------------------------------------------------------
# Vocabulary
# --------------------------------------------------------------------------

class Vocab:
    """Word list D; ids 0..2 are [PAD], [UNK], [MASK]."""

    def __init__(self, words):
        self.words = [PAD, UNK, MASK] + [w for w in words if w not in (PAD, UNK, MASK)]
        self.index = {w: i for i, w in enumerate(self.words)}
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.mask_id = self.index[MASK]

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def encode(self, tokens):
        return np.array([self.index.get(t, self.unk_id) for t in tokens], dtype=np.int64)

    def decode(self, ids, skip=()):
        skip = set(skip)
        return [self.words[i] for i in np.asarray(ids).tolist() if self.words[i] not in skip]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.words) + "\n")

    @classmethod
    def from_lines(cls, lines):
        words = [w.strip() for w in lines if w.strip()]
        if words[:3] != [PAD, UNK, MASK]:
            raise FormatError("vocab file must start with the [PAD]/[UNK]/[MASK] rows")
        return cls(words[3:])


class ObjectVocab:
    """The noun set defining object labels; ids are positions in the file."""

    def __init__(self, words, vocab: Vocab):
        kept = []
        for w in words:
            if w in vocab:
                kept.append(w)
            else:
                log.warning("object word %r is not in the caption vocabulary; dropped", w)
        self.words = kept
        self.index = {w: i for i, w in enumerate(kept)}
        self.token_ids = np.array([vocab.index[w] for w in kept], dtype=np.int64)
        self.token_id_set = set(self.token_ids.tolist())

    def __len__(self):
        return len(self.words)

    def multi_hot(self, words):
        out = np.zeros(len(self.words), dtype=np.float64)
        for w in words:
            if w in self.index:
                out[self.index[w]] = 1.0
        return out

    def ids_for(self, words):
        missing = [w for w in words if w not in self.index]
        if missing:
            raise DataError(f"unknown object word(s): {', '.join(missing)}")
        return [self.index[w] for w in words]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.words) + "\n")


def build_vocab(manifest, min_count=3, object_words=None):
    """Word vocabulary from caption counts plus the object vocabulary.

    Words below ``min_count`` fall back to [UNK]. The object list comes from
    the caller (the toy world's nouns, or a noun-list file for external
    data); entries that did not survive thresholding are dropped with a
    warning.
    """
    if not manifest:
        raise DataError("cannot build a vocabulary from an empty manifest")
    counts = Counter()
    for record in manifest:
        for caption in record["captions"]:
            counts.update(caption)
    kept = sorted((w for w, c in counts.items() if c >= min_count),
                  key=lambda w: (-counts[w], w))
    vocab = Vocab(kept)
    if object_words is None:
        object_words = []
        seen = set()
        for record in manifest:
            for w in record["union_objects"]:
                if w not in seen:
                    seen.add(w)
                    object_words.append(w)
    return vocab, ObjectVocab(object_words, vocab)


def tokenize(text):
    return text.lower().split()


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------

def save_features(path, data):
    """Little-endian float32 block with an O2NAFEAT header."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3:
        raise DataError(f"features must be [videos, rows, dim], got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIII", FEATURE_VERSION, *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def load_features(path):
    """Read features back, widened to float64."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected {FEATURE_MAGIC!r}")
    header_end = len(FEATURE_MAGIC) + 16
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated header at byte {len(blob)}")
    version, count, rows, dim = struct.unpack("<IIII", blob[len(FEATURE_MAGIC): header_end])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature-file version {version}")
    expected = header_end + 4 * count * rows * dim
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload size mismatch at byte {len(blob)}, expected {expected} bytes")
    data = np.frombuffer(blob[header_end:], dtype="<f4").reshape(count, rows, dim)
    return data.astype(np.float64)


def write_manifest(path, manifest):
    with open(path, "w", encoding="utf-8") as f:
        for record in manifest:
            f.write(json.dumps(record) + "\n")


def read_manifest(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: not valid JSON ({e})") from None
            for key in ("video_id", "captions", "objects", "union_objects"):
                if key not in record:
                    raise FormatError(f"{path}:{lineno}: manifest record missing '{key}'")
            records.append(record)
    return records


def read_word_list(path):
    with open(path, encoding="utf-8") as f:
        return [w.strip() for w in f if w.strip()]


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------

def expand_samples(manifest):
    """One training sample per (video, caption) pair."""
    samples = []
    for vid_pos, record in enumerate(manifest):
        for cap_pos in range(len(record["captions"])):
            samples.append((vid_pos, cap_pos))
    return samples


def batch_iter(manifest, features, vocab, obj_vocab, batch_size, seed, l_max=30,
               n_frames=None):
    """Yield padded training batches for one epoch, shuffled under ``seed``."""
    if len(manifest) != features.shape[0]:
        raise DataError(
            f"manifest has {len(manifest)} videos but feature file has {features.shape[0]}")
    n = n_frames if n_frames is not None else features.shape[1] // 2
    if features.shape[1] != 2 * n:
        raise DataError(f"feature rows {features.shape[1]} != 2*n_frames ({2 * n})")
    samples = expand_samples(manifest)
    order = np.random.default_rng(seed).permutation(len(samples))
    is_obj_token = np.zeros(len(vocab), dtype=bool)
    is_obj_token[obj_vocab.token_ids] = True

    for start in range(0, len(order), batch_size):
        chosen = [samples[i] for i in order[start: start + batch_size]]
        encoded, metas = [], []
        for vid_pos, cap_pos in chosen:
            record = manifest[vid_pos]
            sid = f"{record['video_id']}#{cap_pos}"
            ids = vocab.encode(record["captions"][cap_pos])
            if len(ids) > l_max:
                raise DataError(f"caption {sid} has {len(ids)} tokens, limit is {l_max}")
            if len(ids) == 0:
                raise DataError(f"caption {sid} is empty")
            encoded.append(ids)
            metas.append((vid_pos, cap_pos, sid))
        width = max(len(ids) for ids in encoded)
        b = len(chosen)
        tokens = np.full((b, width), vocab.pad_id, dtype=np.int64)
        targets = np.full((b, width), IGNORE_ID, dtype=np.int64)
        obj_tokens = np.full((b, width), vocab.pad_id, dtype=np.int64)
        obj_targets = np.full((b, width), IGNORE_ID, dtype=np.int64)
        lengths = np.zeros(b, dtype=np.int64)
        cap_obj = np.zeros((b, len(obj_vocab)), dtype=np.float64)
        uni_obj = np.zeros((b, len(obj_vocab)), dtype=np.float64)
        image = np.zeros((b, n, features.shape[2]))
        motion = np.zeros((b, n, features.shape[2]))
        sample_ids = []
        for row, (ids, (vid_pos, cap_pos, sid)) in enumerate(zip(encoded, metas)):
            record = manifest[vid_pos]
            l = len(ids)
            tokens[row, :l] = ids
            targets[row, :l] = ids
            masked = np.where(is_obj_token[ids], ids, vocab.mask_id)
            obj_tokens[row, :l] = masked
            obj_targets[row, :l] = masked
            lengths[row] = l
            cap_obj[row] = obj_vocab.multi_hot(record["objects"][cap_pos])
            uni_obj[row] = obj_vocab.multi_hot(record["union_objects"])
            image[row] = features[vid_pos, :n]
            motion[row] = features[vid_pos, n:]
            sample_ids.append(sid)
        yield Batch(image=image, motion=motion, tokens=tokens, targets=targets,
                    obj_tokens=obj_tokens, obj_targets=obj_targets, lengths=lengths,
                    caption_objects=cap_obj, union_objects=uni_obj, sample_ids=sample_ids)
