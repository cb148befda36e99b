"""Train/valid/test splits, top-K ranking metrics and review-word explanation metrics."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import FEATURE, InteractionRecord, Tckg

log = logging.getLogger(__name__)

SPLIT_MODES = ("normal", "sequential")
_EPS = 1e-9  # guards floor() against 0.3 * 10 = 2.9999...


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "normal"
    train_frac: float = 0.7
    valid_frac_of_train: float = 0.1
    sequential: tuple = (0.6, 0.1, 0.3)
    seed: int = 0
    min_interactions: int = 5

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ValueError(f"split mode must be one of {SPLIT_MODES}, got {self.mode!r}")
        if not 0 < self.train_frac <= 1 or not 0 <= self.valid_frac_of_train < 1:
            raise ValueError("split fractions out of range")
        if len(self.sequential) != 3 or abs(sum(self.sequential) - 1) > 1e-9 or min(self.sequential) < 0:
            raise ValueError("sequential fractions must be three non-negative numbers summing to 1")


def _floor(x: float) -> int:
    return int(math.floor(x + _EPS))


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    """(train, valid, test) counts for a user with ``n`` interactions."""
    if spec.mode == "normal":
        n_test = _floor((1 - spec.train_frac) * n)
        pool = n - n_test
        n_valid = _floor(spec.valid_frac_of_train * pool)
        return pool - n_valid, n_valid, n_test
    n_train = _floor(spec.sequential[0] * n)
    n_valid = _floor(spec.sequential[1] * n)
    return n_train, n_valid, n - n_train - n_valid


def split(interactions: Sequence[InteractionRecord], spec: SplitSpec = SplitSpec()) -> dict:
    """Per-user partition into train/valid/test; users below the core size are dropped."""
    by_user: dict = defaultdict(list)
    for rec in interactions:
        by_user[rec.user].append(rec)
    rng = np.random.default_rng(spec.seed)
    out = {"train": [], "valid": [], "test": []}
    dropped = 0
    for user in sorted(by_user):
        recs = by_user[user]
        if len(recs) < spec.min_interactions:
            dropped += 1
            continue
        if spec.mode == "normal":
            recs = [recs[i] for i in rng.permutation(len(recs))]
        else:
            recs = sorted(recs, key=lambda r: r.timestamp)  # stable: ties keep log order
        n_train, n_valid, _ = split_sizes(len(recs), spec)
        out["train"] += recs[:n_train]
        out["valid"] += recs[n_train : n_train + n_valid]
        out["test"] += recs[n_train + n_valid :]
    if dropped:
        log.warning("dropped %d users with fewer than %d interactions", dropped, spec.min_interactions)
    return out


# -- ranking --


def user_ranking_metrics(ranked: Sequence, relevant, k: int = 10) -> tuple[float, float, float, float]:
    """(ndcg, recall, precision, hit) for one user as fractions."""
    relevant = set(relevant)
    if not relevant:
        raise ValueError("user has no relevant items")
    top = list(ranked)[:k]
    if not top:
        return 0.0, 0.0, 0.0, 0.0
    gains = [1.0 if item in relevant else 0.0 for item in top]
    dcg = sum(gain / math.log2(pos + 2) for pos, gain in enumerate(gains))
    idcg = sum(1.0 / math.log2(pos + 2) for pos in range(min(len(relevant), k)))
    hits = sum(gains)
    return dcg / idcg, hits / len(relevant), hits / len(top), float(hits > 0)


def ranking_metrics(recommendations: Mapping, test: Mapping, k: int = 10) -> dict:
    """Macro-averaged NDCG/Recall/Precision/HR@k in percent over users with test items."""
    rows = []
    skipped = 0
    for user in sorted(test):
        relevant = set(test[user])
        if not relevant:
            skipped += 1
            continue
        rows.append(user_ranking_metrics(recommendations.get(user, ()), relevant, k))
    if skipped:
        log.info("%d users without test items left out of the average", skipped)
    means = np.mean(rows, axis=0) * 100.0 if rows else np.zeros(4)
    return {"ndcg": float(means[0]), "recall": float(means[1]), "precision": float(means[2]), "hr": float(means[3]), "users": len(rows)}


# -- explanations --


def user_explanation_metrics(found, truth) -> tuple[float, float, float]:
    found, truth = set(found), set(truth)
    tp = len(found & truth)
    recall = tp / (len(truth) + 1)
    precision = tp / (len(found) + 1)
    f1 = 2 * precision * recall / (precision + recall + 1)
    return recall, precision, f1


def explanation_metrics(path_words: Mapping, reasons: Mapping) -> dict:
    """Macro-averaged overlap between words on a user's paths and their review words, in percent.

    ``reasons`` maps each evaluated user to their ground-truth word set; users missing from
    ``path_words`` count with an empty set.
    """
    rows = [user_explanation_metrics(path_words.get(u, ()), reasons[u]) for u in sorted(reasons)]
    means = np.mean(rows, axis=0) * 100.0 if rows else np.zeros(3)
    return {"recall": float(means[0]), "precision": float(means[1]), "f1": float(means[2]), "users": len(rows)}


def words_on_paths(paths: Iterable, g: Tckg) -> set:
    """Local indices of word (feature) entities visited by the given paths."""
    words = set()
    lo = g.type_range(FEATURE)
    for p in paths:
        for _, e in p.hops:
            if e in lo:
                words.add(e - lo.start)
    return words


@dataclass
class GroundTruthReasons:
    pairs: dict = field(default_factory=dict)  # (user, item) -> frozenset of words
    removed: frozenset = frozenset()  # words dropped from at least one review

    def user_words(self, users: Iterable | None = None) -> dict:
        out: dict = {}
        wanted = None if users is None else set(users)
        for (u, _), words in self.pairs.items():
            if wanted is None or u in wanted:
                out.setdefault(u, set()).update(words)
        return out

    def for_pairs(self, pairs: Iterable) -> dict:
        """Per-user union of reason words restricted to the given (user, item) pairs."""
        out: dict = {}
        for u, i in pairs:
            out.setdefault(u, set()).update(self.pairs.get((u, i), ()))
        return out


def tf_idf(reviews: Sequence) -> list[dict]:
    """Per-review TF-IDF: count / review length times ln(N / document frequency)."""
    docs = [list(words) for words in reviews]
    n = len(docs)
    df = Counter(w for doc in docs for w in set(doc))
    out = []
    for doc in docs:
        counts = Counter(doc)
        out.append({w: (c / len(doc)) * math.log(n / df[w]) for w, c in counts.items()})
    return out


def build_ground_truth(reviews: Sequence, max_freq: int = 5000, min_tfidf: float = 0.1) -> GroundTruthReasons:
    """Filter review words; ``reviews`` holds (user, item, words) rows.

    A word is dropped from a review when its corpus frequency exceeds ``max_freq`` and its
    TF-IDF in that review is below ``min_tfidf``.
    """
    if not reviews:
        return GroundTruthReasons()
    freq = Counter(w for _, _, words in reviews for w in words)
    scores = tf_idf([words for _, _, words in reviews])
    pairs: dict = {}
    removed = set()
    for (u, i, words), tfidf in zip(reviews, scores):
        keep = set()
        for w in set(words):
            if freq[w] > max_freq and tfidf[w] < min_tfidf:
                removed.add(w)
            else:
                keep.add(w)
        pairs[(u, i)] = frozenset(pairs.get((u, i), frozenset()) | keep)
    return GroundTruthReasons(pairs, frozenset(removed))


def metrics_report(dataset: str, split_mode: str, k: int, ranking: dict, invalid_users: int, explanation: dict) -> dict:
    return {
        "dataset": dataset,
        "split": split_mode,
        "K": k,
        "ndcg": ranking["ndcg"],
        "recall": ranking["recall"],
        "precision": ranking["precision"],
        "hr": ranking["hr"],
        "invalid_users": int(invalid_users),
        "explanation": {key: explanation[key] for key in ("recall", "precision", "f1")},
    }
