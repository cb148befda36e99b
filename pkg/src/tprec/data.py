"""Tab-separated dataset files and their in-memory form.

interactions: ``user<TAB>item<TAB>timestamp``
kg:           ``type:head<TAB>relation<TAB>type:tail``
reviews:      ``user<TAB>item<TAB>space separated words``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .graph import ENTITY_TYPES, FEATURE, ITEM, STATIC_RELATIONS, USER, EntityId, InteractionRecord, Triple

log = logging.getLogger(__name__)


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    names: dict = field(default_factory=lambda: {t: [] for t in ENTITY_TYPES})
    interactions: list = field(default_factory=list)  # InteractionRecord, words attached from reviews
    kg: list = field(default_factory=list)

    def counts(self) -> dict:
        return {t: len(self.names.get(t, ())) for t in ENTITY_TYPES}

    def reviews(self) -> list:
        """(user, item, words) rows for interactions that carry review words."""
        words = self.names[FEATURE]
        return [(r.user, r.item, tuple(words[w] for w in r.words)) for r in self.interactions if r.words]


class _Vocab:
    def __init__(self, names=()):
        self.names = list(names)
        self.index = {n: i for i, n in enumerate(self.names)}

    def get(self, name: str) -> int:
        if name not in self.index:
            self.index[name] = len(self.names)
            self.names.append(name)
        return self.index[name]


def _rows(path: Path, n_fields: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise DataFormatError(f"{path}:{lineno}: expected {n_fields} tab-separated fields, got {len(parts)}")
            yield lineno, parts


def _entity(token: str, where: str) -> tuple[str, str]:
    etype, sep, name = token.partition(":")
    if not sep or etype not in ENTITY_TYPES or not name:
        raise DataFormatError(f"{where}: bad entity '{token}' (want type:name)")
    return etype, name


def read_dataset(interactions: Path, kg: Optional[Path] = None, reviews: Optional[Path] = None) -> Dataset:
    vocab = {t: _Vocab() for t in ENTITY_TYPES}
    records = []
    for lineno, (user, item, ts) in _rows(Path(interactions), 3):
        try:
            stamp = int(ts)
        except ValueError:
            raise DataFormatError(f"{interactions}:{lineno}: timestamp '{ts}' is not an integer") from None
        records.append([vocab[USER].get(user), vocab[ITEM].get(item), stamp])

    review_words: dict = {}
    if reviews is not None:
        for lineno, (user, item, text) in _rows(Path(reviews), 3):
            key = (vocab[USER].get(user), vocab[ITEM].get(item))
            review_words.setdefault(key, []).append(tuple(vocab[FEATURE].get(w) for w in text.split()))

    triples = []
    if kg is not None:
        for lineno, (head, rel, tail) in _rows(Path(kg), 3):
            where = f"{kg}:{lineno}"
            if rel not in STATIC_RELATIONS:
                raise DataFormatError(f"{where}: unknown relation '{rel}'")
            (ht, hn), (tt, tn) = _entity(head, where), _entity(tail, where)
            if (ht, tt) != STATIC_RELATIONS[rel]:
                raise DataFormatError(f"{where}: {rel} links {STATIC_RELATIONS[rel]}, got ({ht}, {tt})")
            triples.append(Triple(EntityId(ht, vocab[ht].get(hn)), rel, EntityId(tt, vocab[tt].get(tn))))

    # a (user, item) pair bought k times takes its reviews in order; extras go unreviewed
    used: dict = {}
    out = []
    for user, item, stamp in records:
        queue = review_words.get((user, item), [])
        k = used.get((user, item), 0)
        words = queue[k] if k < len(queue) else ()
        used[(user, item)] = k + 1
        out.append(InteractionRecord(user, item, stamp, words))
    return Dataset({t: vocab[t].names for t in ENTITY_TYPES}, out, triples)


def write_dataset(ds: Dataset, directory: Path) -> dict:
    """Write the three files; returns their paths keyed by kind."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {k: directory / f"{k}.tsv" for k in ("interactions", "kg", "reviews")}
    users, items, words = ds.names[USER], ds.names[ITEM], ds.names[FEATURE]
    with open(paths["interactions"], "w", encoding="utf-8") as fh:
        for r in ds.interactions:
            fh.write(f"{users[r.user]}\t{items[r.item]}\t{r.timestamp}\n")
    with open(paths["reviews"], "w", encoding="utf-8") as fh:
        for r in ds.interactions:
            if r.words:
                fh.write(f"{users[r.user]}\t{items[r.item]}\t{' '.join(words[w] for w in r.words)}\n")
    with open(paths["kg"], "w", encoding="utf-8") as fh:
        for t in ds.kg:
            head = f"{t.head.type}:{ds.names[t.head.type][t.head.index]}"
            tail = f"{t.tail.type}:{ds.names[t.tail.type][t.tail.index]}"
            fh.write(f"{head}\t{t.relation}\t{tail}\n")
    return paths

