"""Caption quality and diversity metrics plus the throughput harness.

Hypotheses and references are token lists (already lowercased/whitespace
tokenized upstream). BLEU and ROUGE-L return scores on a 0-100 scale;
CIDEr follows the conventional 0-10 scaling (reports multiply by 10 again
for table-style presentation).
"""

import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from statistics import median

import numpy as np

from .errors import DataError


@dataclass
class EvalEntry:
    video_id: str
    hypothesis: list
    references: list  # list of token lists, at least one


@dataclass
class EvalCorpus:
    entries: list
    train_captions: set = field(default_factory=set)  # tuples of tokens

    def __post_init__(self):
        for e in self.entries:
            if not e.references:
                raise DataError(f"video {e.video_id} has no references")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


# --------------------------------------------------------------------------
# BLEU
# --------------------------------------------------------------------------

def bleu(corpus: EvalCorpus, n=4):
    """Corpus-level BLEU-n: clipped modified precision, geometric mean over
    orders, closest-reference-length brevity penalty, no smoothing."""
    if not corpus.entries:
        raise DataError("bleu: empty hypothesis set")
    correct = [0] * n
    total = [0] * n
    hyp_len = 0
    ref_len = 0
    for entry in corpus.entries:
        hyp = entry.hypothesis
        hyp_len += len(hyp)
        # closest reference length; ties go to the shorter reference
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in entry.references)[1]
        for k in range(1, n + 1):
            counts = _ngrams(hyp, k)
            max_ref = Counter()
            for ref in entry.references:
                for gram, c in _ngrams(ref, k).items():
                    max_ref[gram] = max(max_ref[gram], c)
            correct[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[k - 1] += max(len(hyp) - k + 1, 0)
    if any(t == 0 for t in total) or any(c == 0 for c in correct):
        return 0.0
    log_prec = sum(np.log(c / t) for c, t in zip(correct, total)) / n
    bp = 1.0 if hyp_len > ref_len else float(np.exp(1.0 - ref_len / max(hyp_len, 1)))
    return float(100.0 * bp * np.exp(log_prec))


# --------------------------------------------------------------------------
# ROUGE-L
# --------------------------------------------------------------------------

def _lcs_length(a, b):
    rows = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                rows[i][j] = rows[i - 1][j - 1] + 1
            else:
                rows[i][j] = max(rows[i - 1][j], rows[i][j - 1])
    return rows[-1][-1]


def rouge_l(corpus: EvalCorpus, beta=1.2):
    """LCS F-measure, best reference per video, averaged over the corpus."""
    scores = []
    for entry in corpus.entries:
        best = 0.0
        for ref in entry.references:
            lcs = _lcs_length(entry.hypothesis, ref)
            if lcs == 0 or not entry.hypothesis or not ref:
                continue
            p = lcs / len(entry.hypothesis)
            r = lcs / len(ref)
            best = max(best, ((1 + beta ** 2) * p * r) / (r + beta ** 2 * p))
        scores.append(best)
    return float(100.0 * np.mean(scores)) if scores else 0.0


# --------------------------------------------------------------------------
# CIDEr
# --------------------------------------------------------------------------

def cider(corpus: EvalCorpus, n=4):
    """tf-idf weighted n-gram cosine against each reference, averaged over
    references and orders, scaled by 10. Document frequency comes from the
    reference sets; no stemming."""
    if len(corpus.entries) < 2:
        raise DataError("cider needs at least 2 videos to estimate IDF; "
                        "evaluate on a larger set")
    n_docs = len(corpus.entries)
    df = [defaultdict(int) for _ in range(n)]
    for entry in corpus.entries:
        for k in range(1, n + 1):
            seen = set()
            for ref in entry.references:
                seen.update(_ngrams(ref, k))
            for gram in seen:
                df[k - 1][gram] += 1

    def tfidf(tokens, k):
        vec = {}
        for gram, c in _ngrams(tokens, k).items():
            idf = np.log(n_docs) - np.log(max(1.0, df[k - 1][gram]))
            vec[gram] = c * idf
        norm = float(np.sqrt(sum(w * w for w in vec.values())))
        return vec, norm

    scores = []
    for entry in corpus.entries:
        per_order = np.zeros(n)
        for k in range(1, n + 1):
            hyp_vec, hyp_norm = tfidf(entry.hypothesis, k)
            acc = 0.0
            for ref in entry.references:
                ref_vec, ref_norm = tfidf(ref, k)
                if hyp_norm == 0.0 or ref_norm == 0.0:
                    continue
                dot = sum(w * ref_vec.get(g, 0.0) for g, w in hyp_vec.items())
                acc += dot / (hyp_norm * ref_norm)
            per_order[k - 1] = acc / len(entry.references)
        scores.append(per_order.mean() * 10.0)
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# Diversity
# --------------------------------------------------------------------------

def diversity(corpus: EvalCorpus, lexicon=None, unique_words=False):
    """(novel %, unique %, vocab usage %) of the generated captions.

    Novel: share of hypotheses absent from the training captions. Unique:
    share of hypotheses occurring exactly once among all hypotheses
    (``unique_words=True`` switches to the share of distinct words confined
    to a single caption). Vocab usage needs ``lexicon``, the non-special
    vocabulary words.
    """
    hyps = [tuple(e.hypothesis) for e in corpus.entries]
    if not hyps:
        raise DataError("diversity: empty hypothesis set")
    novel = 100.0 * sum(h not in corpus.train_captions for h in hyps) / len(hyps)
    if unique_words:
        word_in_captions = defaultdict(int)
        for h in hyps:
            for w in set(h):
                word_in_captions[w] += 1
        distinct = set(w for h in hyps for w in h)
        unique = 100.0 * sum(word_in_captions[w] == 1 for w in distinct) / max(len(distinct), 1)
    else:
        counts = Counter(hyps)
        unique = 100.0 * sum(counts[h] == 1 for h in hyps) / len(hyps)
    used = set(w for h in hyps for w in h)
    vocab_usage = 100.0 * len(used) / len(lexicon) if lexicon else float("nan")
    return novel, unique, vocab_usage


# --------------------------------------------------------------------------
# Throughput
# --------------------------------------------------------------------------

@dataclass
class VpsReport:
    vps: float
    repeats: int
    n_videos: int
    per_length: dict  # output length -> videos per second


def measure_vps(decode_fn, videos, repeats=5):
    """Median videos/second of decode_fn over the corpus, single-threaded.

    Also times each video individually once to report a per-output-length
    breakdown (the AR/NA scaling signature).
    """
    if not videos:
        raise DataError("measure_vps: empty corpus")
    if repeats < 1:
        raise DataError("measure_vps: repeats must be >= 1")
    decode_fn(videos[0])  # warm-up
    rates = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for v in videos:
            decode_fn(v)
        rates.append(len(videos) / (time.perf_counter() - t0))
    bucket_time = defaultdict(list)
    for v in videos:
        t0 = time.perf_counter()
        out = decode_fn(v)
        bucket_time[len(out)].append(time.perf_counter() - t0)
    per_length = {l: len(ts) and 1.0 / float(np.mean(ts)) for l, ts in sorted(bucket_time.items())}
    return VpsReport(vps=float(median(rates)), repeats=repeats,
                     n_videos=len(videos), per_length=per_length)
