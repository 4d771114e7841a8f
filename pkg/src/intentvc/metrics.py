"""Caption metrics: BLEU@4, ROUGE-L, CIDEr and METEOR-lite, multi-reference.

All metrics share one tokenizer (lowercase, punctuation to spaces, split on
whitespace), so scores are comparable only within this package and will not
match the COCO caption server to the decimal.

METEOR-lite keeps the exact and Porter-stem matching stages of METEOR and
drops the WordNet synonym and paraphrase stages.  CIDEr is the plain variant
(no length penalty, no count clipping).
"""

from __future__ import annotations

import math
import re
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache

from nltk.stem.porter import PorterStemmer

from .errors import ConfigurationError, InputError, UndefinedScoreError

__all__ = [
    "TokenizedCaption",
    "tokenize",
    "ngrams",
    "bleu4",
    "lcs_length",
    "rouge_l",
    "DegenerateIDFWarning",
    "cider",
    "cider_per_video",
    "AlignmentBudgetWarning",
    "meteor_alignment",
    "meteor_lite",
    "MetricConfig",
    "ScoreReport",
    "score_all",
    "METRICS",
]

METRICS = ("bleu4", "rouge_l", "cider", "meteor")

_PUNCT = re.compile(r"[^\w\s]|_")


@dataclass(frozen=True)
class TokenizedCaption:
    source: str
    tokens: tuple


def tokenize(caption):
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    if isinstance(caption, TokenizedCaption):
        return caption
    return TokenizedCaption(caption, tuple(_PUNCT.sub(" ", caption.lower()).split()))


def _toks(caption):
    return tokenize(caption).tokens


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU -------------------------------------------------------------------

def _closest_ref_len(c, ref_lens):
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def bleu4(candidates, references, n_max=4):
    """Corpus BLEU with clipped n-gram precision and brevity penalty.

    ``candidates`` is a list of captions; ``references[i]`` is the list of
    reference captions for ``candidates[i]``.  Counts are summed over the
    corpus before dividing.  Without smoothing any zero precision makes the
    score 0.
    """
    if len(candidates) == 0:
        raise UndefinedScoreError("BLEU is undefined for an empty candidate corpus")
    if len(candidates) != len(references):
        raise InputError(f"{len(candidates)} candidates but {len(references)} reference sets")
    matched = [0] * n_max
    total = [0] * n_max
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise InputError("every candidate needs at least one reference")
        ct = _toks(cand)
        rts = [_toks(r) for r in refs]
        c_len += len(ct)
        r_len += _closest_ref_len(len(ct), [len(r) for r in rts])
        for n in range(1, n_max + 1):
            cg = ngrams(ct, n)
            max_ref = Counter()
            for rt in rts:
                max_ref |= ngrams(rt, n)
            matched[n - 1] += sum(min(k, max_ref[g]) for g, k in cg.items())
            total[n - 1] += sum(cg.values())
    if any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n_max
    bp = min(1.0, math.exp(1.0 - r_len / c_len))
    return bp * math.exp(log_p)


# -- ROUGE-L ----------------------------------------------------------------

def lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _rouge_single(ct, rt, beta):
    lcs = lcs_length(ct, rt)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(ct), lcs / len(rt)
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


def rouge_l(candidate, references, beta=1.2):
    """LCS F-measure against each reference; the best reference counts."""
    if isinstance(references, str):
        references = [references]
    ct = _toks(candidate)
    return max(_rouge_single(ct, _toks(r), beta) for r in references)


# -- CIDEr ------------------------------------------------------------------

class DegenerateIDFWarning(UserWarning):
    """Fewer than two videos: every IDF weight is log(1) = 0."""


def _cosine(u, v):
    dot = sum(w * v[g] for g, w in u.items() if g in v)
    nu = math.sqrt(sum(w * w for w in u.values()))
    nv = math.sqrt(sum(w * w for w in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return dot / (nu * nv)


def cider_per_video(candidates, references, n_max=4):
    """Per-video CIDEr scores in [0, 10].

    Document frequency of an n-gram is the number of videos whose reference
    set contains it; IDF is ``log(n_videos / max(df, 1))``.
    """
    if len(candidates) != len(references):
        raise InputError(f"{len(candidates)} candidates but {len(references)} reference sets")
    n_videos = len(references)
    if n_videos < 2:
        warnings.warn("CIDEr over fewer than two videos: all IDF weights are zero",
                      DegenerateIDFWarning, stacklevel=2)
    ref_grams = [[[ngrams(_toks(r), n) for r in refs] for n in range(1, n_max + 1)]
                 for refs in references]
    idf = []
    for n in range(n_max):
        df = Counter()
        for per_video in ref_grams:
            df.update(set().union(*per_video[n]) if per_video[n] else set())
        idf.append(df)

    def weigh(counts, n):
        df = idf[n]
        return {g: k * math.log(n_videos / max(df[g], 1)) for g, k in counts.items()}

    scores = []
    for cand, refs_g in zip(candidates, ref_grams):
        ct = _toks(cand)
        total = 0.0
        for n in range(n_max):
            vc = weigh(ngrams(ct, n + 1), n)
            sims = [_cosine(vc, weigh(rg, n)) for rg in refs_g[n]]
            total += sum(sims) / len(sims)
        scores.append(10.0 * total / n_max)
    return scores


def cider(candidates, references, n_max=4):
    """Corpus CIDEr: the mean of the per-video scores."""
    if len(candidates) == 0:
        raise UndefinedScoreError("CIDEr is undefined for an empty candidate corpus")
    scores = cider_per_video(candidates, references, n_max)
    return sum(scores) / len(scores)


# -- METEOR-lite ------------------------------------------------------------

_stemmer = PorterStemmer()


@lru_cache(maxsize=65536)
def _stem(word):
    return _stemmer.stem(word)


class AlignmentBudgetWarning(UserWarning):
    """METEOR alignment search gave up on exactness for a pathological pair."""


class _BudgetExceeded(Exception):
    pass


# Search states before falling back to the greedy aligner.  Ordinary
# captions (a few dozen tokens, common words repeated a handful of times)
# stay far below this; only heavy repetition of the same word reaches it.
MAX_ALIGNMENT_STATES = 200_000


def _best_alignment(n_cand, edges, fixed, max_states=MAX_ALIGNMENT_STATES):
    """Exact search over maximum one-to-one alignments of candidate positions.

    ``edges[i]`` lists the reference positions candidate ``i`` may match;
    positions with equal lists form a class (same word, or same stem), and
    classes never share reference slots.  ``fixed`` maps candidate positions
    to already-committed reference positions.

    A class with ``c`` candidate and ``r`` reference slots contributes
    exactly ``min(c, r)`` matches to every maximum alignment, so the search
    only visits those and among them minimizes chunks.  Ties go to the first
    alignment in (reference ascending, skip last) order.  Memoized over
    (position, reachable used slots, previous match, per-class quota left).
    Raises ``_BudgetExceeded`` past ``max_states`` memo entries.
    """
    options = [[fixed[i]] if i in fixed else list(edges[i]) for i in range(n_cand)]
    cls = [None if (i in fixed or not edges[i]) else tuple(edges[i]) for i in range(n_cand)]
    members = Counter(c for c in cls if c is not None)
    cap = {c: min(k, len(c)) for c, k in members.items()}
    later = [Counter() for _ in range(n_cand + 1)]  # class occurrences after i
    for i in range(n_cand - 1, -1, -1):
        later[i] = later[i + 1].copy()
        if cls[i] is not None:
            later[i][cls[i]] += 1
    reach = [frozenset()] * (n_cand + 1)
    for i in range(n_cand - 1, -1, -1):
        reach[i] = reach[i + 1] | frozenset(options[i])
    memo = {}

    def best(i, used, prev_j, taken):
        # -> (min chunks for positions i.., first optimal choice); taken maps
        # class -> matches so far.  prev_j is the slot matched at i-1 or None.
        if i == n_cand:
            return 0, None
        used = used & reach[i]
        if prev_j is not None and prev_j + 1 not in options[i]:
            prev_j = None
        c = cls[i]
        key = (i, used, prev_j, taken.get(c, 0) if c is not None else -1)
        hit = memo.get(key)
        if hit is not None:
            return hit
        top, choice = None, None
        need = cap[c] - taken.get(c, 0) if c is not None else 0
        if c is None or need > 0:
            for j in options[i]:
                if j in used:
                    continue
                nxt = taken if c is None else {**taken, c: taken.get(c, 0) + 1}
                sub, _ = best(i + 1, used | {j}, j, nxt)
                val = sub + (0 if prev_j == j - 1 else 1)
                if top is None or val < top:
                    top, choice = val, j
        skippable = later[i + 1][c] >= need if c is not None else i not in fixed
        if skippable:
            sub, _ = best(i + 1, used, None, taken)
            if top is None or sub < top:
                top, choice = sub, None
        memo[key] = (top, choice)
        if len(memo) > max_states:
            raise _BudgetExceeded
        return top, choice

    align, used, prev_j, taken = {}, frozenset(), None, {}
    for i in range(n_cand):
        _, j = best(i, used, prev_j, taken)
        if j is not None:
            align[i] = j
            used = used | {j}
            if cls[i] is not None:
                taken = {**taken, cls[i]: taken.get(cls[i], 0) + 1}
        prev_j = j
    return align


def _greedy_alignment(n_cand, edges, fixed):
    """Maximum alignment that extends the current chunk when it can."""
    align, used, prev_j = dict(fixed), set(fixed.values()), None
    quota = Counter()
    for i in range(n_cand):
        if i not in fixed and edges[i]:
            quota[tuple(edges[i])] += 1
    quota = {c: min(k, len(c)) for c, k in quota.items()}
    for i in range(n_cand):
        if i in fixed:
            prev_j = fixed[i]
            continue
        c = tuple(edges[i])
        free = [j for j in edges[i] if j not in used]
        if not c or quota[c] == 0 or not free:
            prev_j = None
            continue
        j = prev_j + 1 if prev_j is not None and prev_j + 1 in free else free[0]
        align[i], prev_j = j, j
        used.add(j)
        quota[c] -= 1
    return align


def _align(n_cand, edges, fixed):
    if n_cand <= 400:
        try:
            return _best_alignment(n_cand, edges, fixed)
        except _BudgetExceeded:
            pass
    warnings.warn(f"METEOR alignment of {n_cand} tokens exceeded the exact-search budget; "
                  "using the greedy aligner", AlignmentBudgetWarning, stacklevel=3)
    return _greedy_alignment(n_cand, edges, fixed)


def _chunks(align):
    chunks, prev = 0, None
    for i in sorted(align):
        j = align[i]
        if prev != (i - 1, j - 1):
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_alignment(cand_tokens, ref_tokens):
    """Exact-match stage, then a Porter-stem stage over what is left.

    Returns ``(alignment, chunks)`` where ``alignment`` maps candidate to
    reference positions.
    """
    exact = [[j for j, r in enumerate(ref_tokens) if r == c] for c in cand_tokens]
    stage1 = _align(len(cand_tokens), exact, {})
    cs = [_stem(c) for c in cand_tokens]
    rs = [_stem(r) for r in ref_tokens]
    taken = set(stage1.values())
    stem = [[] if i in stage1 else [j for j, r in enumerate(rs) if r == c and j not in taken]
            for i, c in enumerate(cs)]
    for i, j in stage1.items():
        stem[i] = [j]
    stage2 = _align(len(cand_tokens), stem, stage1)
    return stage2, _chunks(stage2)


def _meteor_single(ct, rt, alpha, beta, gamma):
    if not ct or not rt:
        return 0.0
    align, chunks = meteor_alignment(ct, rt)
    m = len(align)
    if m == 0:
        return 0.0
    p, r = m / len(ct), m / len(rt)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (chunks / m) ** beta
    return f_mean * (1 - penalty)


def meteor_lite(candidate, references, alpha=0.9, beta=3.0, gamma=0.5):
    if isinstance(references, str):
        references = [references]
    ct = _toks(candidate)
    return max(_meteor_single(ct, _toks(r), alpha, beta, gamma) for r in references)


# -- corpus report ----------------------------------------------------------

@dataclass(frozen=True)
class MetricConfig:
    bleu_n: int = 4
    cider_n: int = 4
    cider_variant: str = "plain"
    rouge_beta: float = 1.2
    meteor_alpha: float = 0.9
    meteor_beta: float = 3.0
    meteor_gamma: float = 0.5
    metrics: tuple = METRICS

    def __post_init__(self):
        if self.cider_variant != "plain":
            raise ConfigurationError(f"only plain CIDEr is implemented, got {self.cider_variant!r}")
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ConfigurationError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
        if self.bleu_n < 1 or self.cider_n < 1:
            raise ConfigurationError("n-gram orders must be at least 1")

    def to_dict(self):
        d = asdict(self)
        d["metrics"] = list(self.metrics)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "metrics" in d:
            d["metrics"] = tuple(d["metrics"])
        return cls(**d)


@dataclass
class ScoreReport:
    corpus: dict
    per_video: dict
    config: dict
    missing: list = field(default_factory=list)

    def to_dict(self):
        return {"corpus": self.corpus, "per_video": self.per_video,
                "config": self.config, "missing": self.missing}

    def percentages(self):
        return {k: 100.0 * v for k, v in self.corpus.items()}


def score_all(candidates, references, config=MetricConfig()):
    """Score ``candidates`` (video_id -> caption) against ``references``
    (video_id -> list of captions).

    Videos that have references but no candidate are listed in
    ``missing`` and left out of every score.
    """
    if not candidates:
        raise UndefinedScoreError("no candidates to score")
    orphans = sorted(v for v in candidates if not references.get(v))
    if orphans:
        raise InputError(f"candidates without references: {', '.join(orphans)}")
    ids = sorted(candidates)
    cands = [candidates[v] for v in ids]
    refs = [list(references[v]) for v in ids]
    corpus, per_video = {}, {v: {} for v in ids}
    if "bleu4" in config.metrics:
        corpus["bleu4"] = bleu4(cands, refs, config.bleu_n)
        for v, c, r in zip(ids, cands, refs):
            per_video[v]["bleu4"] = bleu4([c], [r], config.bleu_n)
    if "rouge_l" in config.metrics:
        vals = [rouge_l(c, r, config.rouge_beta) for c, r in zip(cands, refs)]
        corpus["rouge_l"] = sum(vals) / len(vals)
        for v, s in zip(ids, vals):
            per_video[v]["rouge_l"] = s
    if "cider" in config.metrics:
        vals = cider_per_video(cands, refs, config.cider_n)
        corpus["cider"] = sum(vals) / len(vals)
        for v, s in zip(ids, vals):
            per_video[v]["cider"] = s
    if "meteor" in config.metrics:
        vals = [meteor_lite(c, r, config.meteor_alpha, config.meteor_beta, config.meteor_gamma)
                for c, r in zip(cands, refs)]
        corpus["meteor"] = sum(vals) / len(vals)
        for v, s in zip(ids, vals):
            per_video[v]["meteor"] = s
    missing = sorted(v for v in references if v not in candidates)
    return ScoreReport(corpus, per_video, config.to_dict(), missing)
