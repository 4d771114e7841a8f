"""Consensus voting across captioning models, and length-routed fusion.

Each video gets one caption per model.  The caption with the highest mean
similarity to the other models' captions wins: it is the one the models
agree on most.  Similarity mixes character n-gram cosine with token F1;
sentence embeddings would need an external model and are not used.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .dataset import LENGTH_THRESHOLD, route_by_length
from .errors import ConfigurationError, InputError
from .metrics import tokenize

__all__ = [
    "METHODS",
    "SimilarityConfig",
    "normalize_text",
    "char_ngram_cosine",
    "token_f1",
    "similarity",
    "similarity_matrix",
    "consensus_scores",
    "select_by_consensus",
    "CandidatePool",
    "VoteAudit",
    "vote",
    "vote_with_audit",
    "vote_corpus",
    "fuse_by_length",
]

METHODS = ("char_ngram_cosine", "token_f1")


@dataclass(frozen=True)
class SimilarityConfig:
    n: int = 3
    weights: tuple = (("char_ngram_cosine", 0.5), ("token_f1", 0.5))

    def __post_init__(self):
        w = dict(self.weights)
        object.__setattr__(self, "weights", tuple(sorted(w.items())))
        if self.n < 1:
            raise ConfigurationError(f"character n-gram size must be >= 1, got {self.n}")
        unknown = set(w) - set(METHODS)
        if unknown:
            raise ConfigurationError(f"unknown similarity methods {sorted(unknown)}; choose from {METHODS}")
        if any(v < 0 for v in w.values()):
            raise ConfigurationError("similarity weights must be non-negative")
        if not math.isclose(sum(w.values()), 1.0, abs_tol=1e-9):
            raise ConfigurationError(f"similarity weights must sum to 1, got {sum(w.values())}")

    def to_dict(self):
        return {"n": self.n, "weights": dict(self.weights)}

    @classmethod
    def from_dict(cls, d):
        return cls(n=d.get("n", 3), weights=tuple(dict(d.get("weights", dict(cls().weights))).items()))


def normalize_text(s):
    """Casefold and collapse whitespace runs to single spaces."""
    return " ".join(s.casefold().split())


def _char_grams(s, n):
    if len(s) < n:
        return Counter([s])
    return Counter(s[i:i + n] for i in range(len(s) - n + 1))


def char_ngram_cosine(a, b, n=3):
    """Cosine of character n-gram count vectors of normalized text.

    A string shorter than ``n`` counts as its own single gram.
    """
    a, b = normalize_text(a), normalize_text(b)
    if not a or not b:
        return 1.0 if a == b else 0.0
    ga, gb = _char_grams(a, n), _char_grams(b, n)
    dot = sum(k * gb[g] for g, k in ga.items())
    if dot == 0:
        return 0.0
    norm = math.sqrt(sum(k * k for k in ga.values()) * sum(k * k for k in gb.values()))
    return min(1.0, dot / norm)


def token_f1(a, b):
    """F1 of token multisets (same tokenizer as the caption metrics)."""
    ta, tb = Counter(tokenize(a).tokens), Counter(tokenize(b).tokens)
    if not ta or not tb:
        return 1.0 if not ta and not tb else 0.0
    overlap = sum((ta & tb).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / sum(ta.values()), overlap / sum(tb.values())
    return 2 * p * r / (p + r)


def similarity(a, b, cfg=SimilarityConfig()):
    """Weighted mix of the configured methods, symmetric, in [0, 1].

    An empty caption (nothing left after normalization) scores 0 against
    everything except another empty caption.
    """
    na, nb = normalize_text(a), normalize_text(b)
    if not na or not nb:
        return 1.0 if na == nb else 0.0
    if na == nb:
        return 1.0
    total = 0.0
    for method, w in cfg.weights:
        if w == 0:
            continue
        s = char_ngram_cosine(na, nb, cfg.n) if method == "char_ngram_cosine" else token_f1(na, nb)
        total += w * s
    return min(1.0, max(0.0, total))


def similarity_matrix(captions, cfg=SimilarityConfig()):
    k = len(captions)
    m = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            m[i, j] = m[j, i] = similarity(captions[i], captions[j], cfg)
    return m


def consensus_scores(matrix):
    """Mean similarity of each entry to every other entry (self excluded).

    A single entry has nobody to agree with and scores 1.
    """
    m = np.asarray(matrix, dtype=float)
    k = m.shape[0]
    if k == 1:
        return np.ones(1)
    return (m.sum(axis=1) - np.diag(m)) / (k - 1)


def select_by_consensus(matrix):
    """Index of the highest consensus score; the earliest index wins ties."""
    scores = consensus_scores(matrix)
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best


@dataclass
class CandidatePool:
    video_id: str
    entries: list  # [(model_id, caption)] in priority order

    def __post_init__(self):
        self.entries = [(str(m), c) for m, c in self.entries]
        if not self.entries:
            raise InputError(f"{self.video_id}: candidate pool is empty")
        ids = [m for m, _ in self.entries]
        dup = sorted(m for m, k in Counter(ids).items() if k > 1)
        if dup:
            raise InputError(f"{self.video_id}: duplicate model ids {dup}")

    @property
    def model_ids(self):
        return [m for m, _ in self.entries]

    @property
    def captions(self):
        return [c for _, c in self.entries]


@dataclass
class VoteAudit:
    video_id: str
    model_ids: list
    captions: list
    matrix: np.ndarray
    averages: np.ndarray
    winner: str

    def to_dict(self):
        return {"video_id": self.video_id,
                "pool": [{"model_id": m, "caption": c} for m, c in zip(self.model_ids, self.captions)],
                "similarity": self.matrix.tolist(), "averages": self.averages.tolist(),
                "winner": self.winner}


def vote_with_audit(pool, cfg=SimilarityConfig()):
    m = similarity_matrix(pool.captions, cfg)
    avg = consensus_scores(m)
    w = select_by_consensus(m)
    return pool.entries[w], VoteAudit(pool.video_id, pool.model_ids, pool.captions, m, avg, pool.model_ids[w])


def vote(pool, cfg=SimilarityConfig()):
    """``(model_id, caption)`` of the consensus winner."""
    return vote_with_audit(pool, cfg)[0]


def vote_corpus(candidate_sets, cfg=SimilarityConfig(), model_ids=None, audit=False):
    """Vote per video across several caption sets (``video_id -> caption``).

    Pools are assembled in input order, which is also the tie-break
    priority.  With ``audit`` returns ``(captions, [VoteAudit, ...])``.
    """
    if not candidate_sets:
        raise InputError("need at least one caption set")
    if model_ids is None:
        model_ids = [f"model{i}" for i in range(len(candidate_sets))]
    if len(model_ids) != len(candidate_sets):
        raise InputError(f"{len(model_ids)} model ids for {len(candidate_sets)} caption sets")
    all_ids = set().union(*(set(s) for s in candidate_sets))
    gaps = []
    for mid, s in zip(model_ids, candidate_sets):
        missing = sorted(all_ids - set(s))
        if missing:
            gaps.append(f"{mid} lacks {', '.join(missing)}")
    if gaps:
        raise InputError("caption sets cover different videos: " + "; ".join(gaps))
    out, audits = {}, []
    for vid in sorted(all_ids):
        pool = CandidatePool(vid, [(m, s[vid]) for m, s in zip(model_ids, candidate_sets)])
        (_, caption), a = vote_with_audit(pool, cfg)
        out[vid] = caption
        audits.append(a)
    return (out, audits) if audit else out


def fuse_by_length(short_set, long_set, lengths, threshold=LENGTH_THRESHOLD):
    """Take each video's caption from the short-video or long-video model.

    ``lengths`` maps every video id to its frame count and defines the
    output's coverage.
    """
    out, missing = {}, []
    for vid in sorted(lengths):
        src = short_set if route_by_length(lengths[vid], threshold) == "short" else long_set
        if vid not in src:
            missing.append(vid)
        else:
            out[vid] = src[vid]
    if missing:
        raise InputError(f"videos missing from their routed caption set: {', '.join(missing)}")
    return out
