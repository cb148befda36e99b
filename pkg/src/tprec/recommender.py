"""Recommend-time relation, candidate ranking and explained recommendation records."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .embedding import EmbeddingTable
from .graph import RelationCatalog, Tckg, UnknownEntityError
from .policy import PolicyParams
from .reasoner import PathEnvironment, PathResult, beam_search
from .temporal_features import TREND_GAPS, CalendarContext, DailyCountSeries, stat_features, struct_features
from .time_clustering import GmmModel, posterior

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecommendQuery:
    user: int
    recommend_time: int
    top_k: int = 10

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")


@dataclass(frozen=True)
class RecItem:
    item: int
    score: float
    path: PathResult


@dataclass
class RecResult:
    user: int
    recommend_time: int
    items: list
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.items)

    def to_records(self, g: Tckg) -> list:
        out = []
        for rank, it in enumerate(self.items, start=1):
            out.append(
                {
                    "user": g.entity_name(self.user),
                    "recommend_time": int(self.recommend_time),
                    "rank": rank,
                    "item": g.entity_name(it.item),
                    "score": float(it.score),
                    "path": [[g.catalog.name(r), g.entity_name(e)] for r, e in it.path.hops],
                }
            )
        return out


def time_weights(gmm: GmmModel, t_hat: int, ctx: CalendarContext, series: DailyCountSeries, gaps=TREND_GAPS) -> np.ndarray:
    """GMM posterior of the recommend time over the L clusters."""
    feat = np.concatenate([stat_features(t_hat, ctx), struct_features(series, t_hat, gaps)])
    return posterior(gmm, feat)


def purchase_relation_matrix(emb: EmbeddingTable, n_clusters: int) -> np.ndarray:
    """L x d block of time-aware purchase relation vectors."""
    catalog = RelationCatalog(n_clusters)
    if catalog.n_forward != emb.n_forward:
        raise ValueError(f"embedding has {emb.n_forward} relations, a {n_clusters}-cluster graph needs {catalog.n_forward}")
    return emb.relation[catalog.purchase_ids()]


def recommend_relation(
    gmm: GmmModel, emb: EmbeddingTable, t_hat: int, ctx: CalendarContext, series: DailyCountSeries, gaps=TREND_GAPS
) -> np.ndarray:
    w = time_weights(gmm, t_hat, ctx, series, gaps)
    return w @ purchase_relation_matrix(emb, gmm.n_components)


def _dedupe(candidates) -> dict:
    # keep the best path per item; ties go to the lexicographically smaller hop tuple so input order never matters
    best: dict = {}
    for item, path in candidates:
        item = int(item)
        cur = best.get(item)
        if cur is None or (-path.score, path.hops) < (-cur.score, cur.hops):
            best[item] = path
    return best


def rank_candidates(emb: EmbeddingTable, u: int, candidates: Sequence, r_time: np.ndarray, top_k: int = 10) -> list:
    """Rank (item, path) pairs by (e_u + r_time) . e_item, descending, ties to the smaller item id."""
    best = _dedupe(candidates)
    if not best:
        log.info("user %d has no candidates to rank", u)
        return []
    items = np.array(sorted(best), dtype=np.int64)
    query = emb.entity[u] + np.asarray(r_time)
    scores = emb.entity[items] @ query
    order = np.lexsort((items, -scores))[:top_k]
    return [RecItem(int(items[i]), float(scores[i]), best[int(items[i])]) for i in order]


def recommend_from_paths(
    g: Tckg,
    gmm: GmmModel,
    emb: EmbeddingTable,
    q: RecommendQuery,
    paths: Sequence[PathResult],
    ctx: CalendarContext,
    series: DailyCountSeries,
    gaps=TREND_GAPS,
) -> RecResult:
    """Rank the item-terminated beam paths of ``q.user`` at ``q.recommend_time``."""
    bought = g.user_items(q.user)
    candidates = [(p.terminal, p) for p in paths if p.valid and p.terminal not in bought]
    w = time_weights(gmm, q.recommend_time, ctx, series, gaps)
    r_time = w @ purchase_relation_matrix(emb, gmm.n_components)
    return RecResult(q.user, q.recommend_time, rank_candidates(emb, q.user, candidates, r_time, q.top_k), w)


def recommend(
    g: Tckg,
    gmm: GmmModel,
    emb: EmbeddingTable,
    params: PolicyParams,
    q: RecommendQuery,
    ctx: CalendarContext,
    series: DailyCountSeries,
    sizes: Sequence[int] = (25, 5, 1),
    env: Optional[PathEnvironment] = None,
    gaps=TREND_GAPS,
) -> RecResult:
    if not 0 <= q.user < g.n_entities or g.type_of(q.user) != "user":
        raise UnknownEntityError(f"{q.user} is not a user")
    env = env or PathEnvironment(
        g, emb, epsilon=params.cfg.n_actions - 1, max_steps=len(sizes), history_hops=params.cfg.history_hops
    )
    paths = beam_search(env, params, q.user, sizes)
    return recommend_from_paths(g, gmm, emb, q, paths, ctx, series, gaps)


def write_recommendations(path, results: Sequence[RecResult], g: Tckg) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for res in results:
            for rec in res.to_records(g):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
