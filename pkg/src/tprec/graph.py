"""Time-aware collaborative knowledge graph.

Entities are addressed either as ``EntityId(type, index)`` or by a global
integer id (type blocks laid out in ``ENTITY_TYPES`` order). Relations are
integers too: forward relations occupy ``[0, R)`` and the inverse of
relation ``r`` is ``r + R``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .artifacts import load_arrays, save_arrays

logger = logging.getLogger(__name__)

USER, ITEM, FEATURE, BRAND, CATEGORY = "user", "item", "feature", "brand", "category"
ENTITY_TYPES = (USER, ITEM, FEATURE, BRAND, CATEGORY)

STATIC_RELATIONS = {
    "bought_together": (ITEM, ITEM),
    "also_viewed": (ITEM, ITEM),
    "also_bought": (ITEM, ITEM),
    "belong_to": (ITEM, CATEGORY),
    "produced_by": (ITEM, BRAND),
}
TIME_AWARE_RELATIONS = {
    "purchase": (USER, ITEM),
    "mention": (USER, FEATURE),
    "described_by": (ITEM, FEATURE),
}
SCHEMA = {**STATIC_RELATIONS, **TIME_AWARE_RELATIONS}

GRAPH_FORMAT_VERSION = 1


class UnknownEntityError(KeyError):
    pass


class EntityId(NamedTuple):
    type: str
    index: int


@dataclass(frozen=True)
class Relation:
    base: str
    cluster: Optional[int] = None
    inverse: bool = False

    @property
    def name(self) -> str:
        name = self.base if self.cluster is None else f"{self.base}_{self.cluster}"
        return f"{name}_inv" if self.inverse else name


class RelationCatalog:
    """Relation ids for a graph with ``n_clusters`` time-aware clusters."""

    def __init__(self, n_clusters: int):
        if n_clusters < 1:
            raise ValueError("need at least one time cluster")
        self.n_clusters = n_clusters
        forward = [Relation(base) for base in STATIC_RELATIONS]
        for base in TIME_AWARE_RELATIONS:
            forward.extend(Relation(base, l) for l in range(n_clusters))
        self.forward = forward
        self.n_forward = len(forward)
        self._ids = {rel: i for i, rel in enumerate(forward)}

    def __len__(self) -> int:
        return 2 * self.n_forward

    def id_of(self, base: str, cluster: Optional[int] = None, inverse: bool = False) -> int:
        if base in TIME_AWARE_RELATIONS and cluster is None:
            raise ValueError(f"time-aware relation '{base}' needs a cluster index")
        if cluster is not None and not 0 <= cluster < self.n_clusters:
            raise ValueError(f"cluster {cluster} outside [0, {self.n_clusters})")
        rid = self._ids[Relation(base, cluster if base in TIME_AWARE_RELATIONS else None)]
        return rid + self.n_forward if inverse else rid

    def relation(self, rid: int) -> Relation:
        fwd = self.forward[rid % self.n_forward]
        return Relation(fwd.base, fwd.cluster, inverse=rid >= self.n_forward)

    def name(self, rid: int) -> str:
        return self.relation(rid).name

    def inverse(self, rid: int) -> int:
        return (rid + self.n_forward) % (2 * self.n_forward)

    def endpoint_types(self, rid: int) -> tuple[str, str]:
        rel = self.relation(rid)
        head, tail = SCHEMA[rel.base]
        return (tail, head) if rel.inverse else (head, tail)

    def purchase_ids(self) -> np.ndarray:
        return np.array([self.id_of("purchase", l) for l in range(self.n_clusters)])


@dataclass(frozen=True)
class InteractionRecord:
    user: int
    item: int
    timestamp: int
    words: tuple = ()


@dataclass(frozen=True)
class Triple:
    head: EntityId
    relation: str
    tail: EntityId


@dataclass
class BuildReport:
    interactions: int = 0
    purchase_triples_raw: int = 0
    static_triples_raw: int = 0
    review_triples_raw: int = 0
    duplicates_dropped: int = 0
    forward_triples: int = 0


class Tckg:
    """Frozen graph: entity tables, relation catalog, sorted CSR adjacency."""

    def __init__(
        self,
        entity_counts: Mapping[str, int],
        catalog: RelationCatalog,
        triples: np.ndarray,
        history: np.ndarray,
        names: Optional[Mapping[str, Sequence[str]]] = None,
        report: Optional[BuildReport] = None,
    ):
        self.entity_counts = {t: int(entity_counts.get(t, 0)) for t in ENTITY_TYPES}
        offsets, total = {}, 0
        for t in ENTITY_TYPES:
            offsets[t] = total
            total += self.entity_counts[t]
        self.offsets = offsets
        self.n_entities = total
        self.catalog = catalog
        self.names = {t: list(v) for t, v in (names or {}).items()}
        self.report = report or BuildReport()

        self.triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        self.triples.setflags(write=False)
        # per-user training history: columns user, item, timestamp, cluster
        self.history = np.asarray(history, dtype=np.int64).reshape(-1, 4)
        self.history.setflags(write=False)

        h, r, t = self.triples.T
        src = np.concatenate([h, t])
        rel = np.concatenate([r, r + catalog.n_forward])
        dst = np.concatenate([t, h])
        order = np.lexsort((dst, rel, src))
        self._src = src[order]
        self._rel = rel[order]
        self._dst = dst[order]
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(self._src, minlength=total))])
        for arr in (self._rel, self._dst, self._indptr):
            arr.setflags(write=False)
        self._type_of = np.repeat(np.arange(len(ENTITY_TYPES)), [self.entity_counts[t] for t in ENTITY_TYPES])
        self._user_items: Optional[dict] = None

    # -- entities --

    def gid(self, entity: EntityId) -> int:
        etype, index = entity
        if etype not in self.offsets or not 0 <= index < self.entity_counts[etype]:
            raise UnknownEntityError(f"unknown entity {etype}:{index}")
        return self.offsets[etype] + int(index)

    def entity(self, gid: int) -> EntityId:
        if not 0 <= gid < self.n_entities:
            raise UnknownEntityError(f"unknown global entity id {gid}")
        etype = ENTITY_TYPES[self._type_of[gid]]
        return EntityId(etype, int(gid - self.offsets[etype]))

    def type_of(self, gid: int) -> str:
        return ENTITY_TYPES[self._type_of[gid]]

    def type_range(self, etype: str) -> range:
        start = self.offsets[etype]
        return range(start, start + self.entity_counts[etype])

    def is_item(self, gid: int) -> bool:
        lo = self.offsets[ITEM]
        return lo <= gid < lo + self.entity_counts[ITEM]

    def entity_name(self, gid: int) -> str:
        etype, index = self.entity(gid)
        names = self.names.get(etype)
        label = names[index] if names and index < len(names) else str(index)
        return f"{etype}:{label}"

    # -- adjacency --

    def edges(self, gid: int) -> tuple[np.ndarray, np.ndarray]:
        """(relation ids, neighbor global ids) of all out-edges, sorted."""
        lo, hi = self._indptr[gid], self._indptr[gid + 1]
        return self._rel[lo:hi], self._dst[lo:hi]

    def neighbors(self, entity) -> list[tuple[int, int]]:
        gid = self.gid(entity) if isinstance(entity, tuple) else int(entity)
        if not 0 <= gid < self.n_entities:
            raise UnknownEntityError(f"unknown global entity id {gid}")
        rels, dsts = self.edges(gid)
        return list(zip(rels.tolist(), dsts.tolist()))

    def out_degree(self) -> np.ndarray:
        return np.diff(self._indptr)

    def has_edge(self, head: int, rel: int, tail: int) -> bool:
        rels, dsts = self.edges(head)
        lo = np.searchsorted(rels, rel, side="left")
        hi = np.searchsorted(rels, rel, side="right")
        if lo == hi:
            return False
        pos = lo + np.searchsorted(dsts[lo:hi], tail)
        return pos < hi and dsts[pos] == tail

    @property
    def n_directed_edges(self) -> int:
        return len(self._dst)

    # -- interaction history --

    def user_history(self, user_gid: int) -> np.ndarray:
        """Rows (item gid, timestamp, cluster) of a user's training interactions."""
        rows = self.history[self.history[:, 0] == user_gid]
        return rows[:, 1:]

    def user_items(self, user_gid: int) -> frozenset:
        if self._user_items is None:
            table: dict = {}
            for u, i in self.history[:, :2].tolist():
                table.setdefault(u, set()).add(i)
            self._user_items = {u: frozenset(s) for u, s in table.items()}
        return self._user_items.get(int(user_gid), frozenset())

    def cluster_counts(self) -> np.ndarray:
        """Users x L matrix of training-interaction counts per time cluster."""
        counts = np.zeros((self.entity_counts[USER], self.catalog.n_clusters))
        if len(self.history):
            users = self.history[:, 0] - self.offsets[USER]
            np.add.at(counts, (users, self.history[:, 3]), 1.0)
        return counts

    # -- persistence --

    def save(self, path) -> None:
        header = {
            "format_version": GRAPH_FORMAT_VERSION,
            "entity_counts": self.entity_counts,
            "n_clusters": self.catalog.n_clusters,
            "names": self.names,
            "report": self.report.__dict__,
        }
        save_arrays(path, {"triples": self.triples, "history": self.history}, header)

    @classmethod
    def load(cls, path) -> "Tckg":
        arrays, meta = load_arrays(path)
        if meta.get("format_version") != GRAPH_FORMAT_VERSION:
            raise ValueError(f"unsupported graph snapshot version {meta.get('format_version')}")
        return cls(
            meta["entity_counts"],
            RelationCatalog(meta["n_clusters"]),
            arrays["triples"],
            arrays["history"],
            names=meta["names"],
            report=BuildReport(**meta["report"]),
        )


def build_tckg(
    interactions: Iterable[tuple[InteractionRecord, int]],
    kg_triples: Iterable[Triple],
    n_clusters: int,
    entity_counts: Mapping[str, int],
    names: Optional[Mapping[str, Sequence[str]]] = None,
) -> Tckg:
    """Assemble the graph from clustered interactions and static KG triples.

    Each interaction becomes a ``purchase_<cluster>`` edge; words in its
    review become ``mention_<cluster>`` (user) and ``described_by_<cluster>``
    (item) edges. Static triples must use a static relation.
    """
    catalog = RelationCatalog(n_clusters)
    counts = {t: int(entity_counts.get(t, 0)) for t in ENTITY_TYPES}
    offsets, total = {}, 0
    for t in ENTITY_TYPES:
        offsets[t] = total
        total += counts[t]

    def gid(etype: str, index: int) -> int:
        if not 0 <= index < counts.get(etype, 0):
            raise UnknownEntityError(f"unknown entity {etype}:{index}")
        return offsets[etype] + int(index)

    report = BuildReport()
    seen: dict = {}
    history = []

    def add(h: int, rid: int, t: int) -> None:
        key = (h, rid, t)
        if key in seen:
            report.duplicates_dropped += 1
        else:
            seen[key] = None

    for record, cluster in interactions:
        if not 0 <= cluster < n_clusters:
            raise ValueError(f"cluster index {cluster} outside [0, {n_clusters})")
        u = gid(USER, record.user)
        v = gid(ITEM, record.item)
        report.interactions += 1
        report.purchase_triples_raw += 1
        add(u, catalog.id_of("purchase", cluster), v)
        for word in record.words:
            w = gid(FEATURE, word)
            report.review_triples_raw += 2
            add(u, catalog.id_of("mention", cluster), w)
            add(v, catalog.id_of("described_by", cluster), w)
        history.append((u, v, record.timestamp, cluster))

    for triple in kg_triples:
        if triple.relation in TIME_AWARE_RELATIONS:
            raise ValueError(f"time-aware relation '{triple.relation}' given without a timestamp")
        if triple.relation not in STATIC_RELATIONS:
            raise ValueError(f"unknown relation '{triple.relation}'")
        head_type, tail_type = STATIC_RELATIONS[triple.relation]
        if triple.head.type != head_type or triple.tail.type != tail_type:
            raise ValueError(
                f"{triple.relation} expects {head_type} -> {tail_type}, got {triple.head.type} -> {triple.tail.type}"
            )
        report.static_triples_raw += 1
        add(gid(*triple.head), catalog.id_of(triple.relation), gid(*triple.tail))

    report.forward_triples = len(seen)
    if report.duplicates_dropped:
        logger.info("dropped %d duplicate triples", report.duplicates_dropped)
    triples = np.array(list(seen), dtype=np.int64).reshape(-1, 3)
    hist = np.array(history, dtype=np.int64).reshape(-1, 4)
    return Tckg(counts, catalog, triples, hist, names=names, report=report)


def degree_report(g: Tckg) -> dict:
    """Max/mean out-degree per entity type and triple counts per relation."""
    degrees = g.out_degree()
    per_type = {}
    for etype in ENTITY_TYPES:
        rng = g.type_range(etype)
        if len(rng) == 0:
            continue
        d = degrees[rng.start : rng.stop]
        per_type[etype] = {"count": len(rng), "max_out_degree": int(d.max()), "mean_out_degree": float(d.mean())}
    rel_counts = Counter(g.triples[:, 1].tolist())
    per_relation = {g.catalog.name(r): int(c) for r, c in sorted(rel_counts.items())}
    purchase = sum(c for r, c in rel_counts.items() if g.catalog.relation(r).base == "purchase")
    return {
        "entities": per_type,
        "triples_per_relation": per_relation,
        "forward_triples": int(len(g.triples)),
        "directed_edges": int(g.n_directed_edges),
        "max_out_degree": int(degrees.max()) if len(degrees) else 0,
        "purchase_triples": int(purchase),
        "purchase_triples_raw": g.report.purchase_triples_raw,
        "duplicates_dropped": g.report.duplicates_dropped,
        "relation_types": g.catalog.n_forward,
    }
