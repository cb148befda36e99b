"""Translational embeddings of graph entities and relations.

A triple (h, r, t) is scored by the squared distance ||e_h + r - e_t||^2
and trained with the pairwise loss -ln sigmoid(g(h, t') - g(h, t)) against
tail-corrupted negatives. Inverse relations reuse the negated vector.

Entity biases only enter inner-product scores used downstream, so they are
trained through an auxiliary pairwise term on purchase triples with score
(e_u + r) . e_v + b_v.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .artifacts import load_arrays, save_arrays
from .graph import Tckg, UnknownEntityError
from .optim import Adam, clip_by_global_norm

logger = logging.getLogger(__name__)

EMBEDDING_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    d: int = 100
    learning_rate: float = 0.01
    batch_size: int = 256
    epochs: int = 50
    negatives_per_positive: int = 1
    seed: int = 0
    max_grad_norm: float = 10.0
    bias_aux_weight: float = 1.0
    renormalize: bool = True


@dataclass
class EmbeddingTable:
    entity: np.ndarray
    relation: np.ndarray
    bias: np.ndarray
    seed: int = 0
    epoch: int = 0
    log: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.entity.shape[1]

    @property
    def n_forward(self) -> int:
        return self.relation.shape[0]

    def relation_vector(self, rid: int) -> np.ndarray:
        if not 0 <= rid < 2 * self.n_forward:
            raise UnknownEntityError(f"unknown relation id {rid}")
        vec = self.relation[rid % self.n_forward]
        return -vec if rid >= self.n_forward else vec

    def signed_relations(self) -> np.ndarray:
        """(2R + 1) x d: forward vectors, their negations, and a zero row for self-loops."""
        return np.vstack([self.relation, -self.relation, np.zeros((1, self.d))])

    def entity_vector(self, gid: int) -> np.ndarray:
        if not 0 <= gid < self.entity.shape[0]:
            raise UnknownEntityError(f"unknown entity id {gid}")
        return self.entity[gid]

    def save(self, path) -> None:
        header = {
            "format_version": EMBEDDING_FORMAT_VERSION,
            "d": self.d,
            "n_entities": int(self.entity.shape[0]),
            "n_relations": self.n_forward,
            "seed": self.seed,
            "epoch": self.epoch,
            "log": self.log,
        }
        save_arrays(path, {"entity": self.entity, "relation": self.relation, "bias": self.bias}, header)

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        arrays, meta = load_arrays(path)
        if meta.get("format_version") != EMBEDDING_FORMAT_VERSION:
            raise ValueError(f"unsupported embedding version {meta.get('format_version')}")
        return cls(arrays["entity"], arrays["relation"], arrays["bias"], meta["seed"], meta["epoch"], meta["log"])


def score_triple(emb: EmbeddingTable, h: int, r: int, t: int) -> float:
    diff = emb.entity_vector(h) + emb.relation_vector(r) - emb.entity_vector(t)
    return float(diff @ diff)


def _neg_log_sigmoid(x):
    return np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pairwise_loss(eh, r, et, et_neg):
    """Batched -ln sigmoid(g(h,t') - g(h,t)) and its gradients.

    All inputs are B x d. Returns (losses[B], grads) with grads keyed
    ``eh``, ``r``, ``et``, ``et_neg``.
    """
    pos = eh + r - et
    neg = eh + r - et_neg
    margin = (neg * neg).sum(axis=1) - (pos * pos).sum(axis=1)
    losses = _neg_log_sigmoid(margin)
    coef = (-_sigmoid(-margin))[:, None]  # d loss / d margin
    g_neg = 2.0 * neg * coef
    g_pos = -2.0 * pos * coef
    grads = {"eh": g_neg + g_pos, "r": g_neg + g_pos, "et": -g_pos, "et_neg": -g_neg}
    return losses, grads


def inner_product_loss(eu, r, ev, ev_neg, bv, bv_neg):
    """Batched -ln sigmoid(s(v) - s(v')) with s(v) = (e_u + r) . e_v + b_v."""
    query = eu + r
    margin = (query * (ev - ev_neg)).sum(axis=1) + bv - bv_neg
    losses = _neg_log_sigmoid(margin)
    coef = -_sigmoid(-margin)
    grads = {
        "eu": coef[:, None] * (ev - ev_neg),
        "r": coef[:, None] * (ev - ev_neg),
        "ev": coef[:, None] * query,
        "ev_neg": -coef[:, None] * query,
        "bv": coef,
        "bv_neg": -coef,
    }
    return losses, grads


class NegativeSampler:
    """Tail corruption restricted to the schema-compatible entity type."""

    def __init__(self, g: Tckg, max_retries: int = 10):
        self.g = g
        self.max_retries = max_retries
        self.n = g.n_entities
        self.n_rel = g.catalog.n_forward
        self._keys = np.unique(self._encode(g.triples[:, 0], g.triples[:, 1], g.triples[:, 2]))
        lo = np.zeros(self.n_rel, dtype=np.int64)
        size = np.zeros(self.n_rel, dtype=np.int64)
        for rid in range(self.n_rel):
            tail_type = g.catalog.endpoint_types(rid)[1]
            rng = g.type_range(tail_type)
            lo[rid], size[rid] = rng.start, len(rng)
        self._lo, self._size = lo, size

    def _encode(self, h, r, t):
        return (np.asarray(h, dtype=np.int64) * self.n_rel + r) * self.n + t

    def is_positive(self, h, r, t) -> np.ndarray:
        keys = self._encode(h, r, t)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys if len(self._keys) else np.zeros(len(keys), dtype=bool)

    def _exhaustive(self, h, r, t, lo, size, rng) -> int:
        base = (h * self.n_rel + r) * self.n
        a, b = np.searchsorted(self._keys, [base + lo, base + lo + size])
        free = np.setdiff1d(np.arange(lo, lo + size), self._keys[a:b] - base)
        if len(free) == 0:
            # every compatible tail is already linked; settle for anything but t
            free = np.setdiff1d(np.arange(lo, lo + size), [t])
        return int(free[rng.integers(len(free))])

    def sample(self, h: np.ndarray, r: np.ndarray, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        h, r, t = (np.asarray(a, dtype=np.int64) for a in (h, r, t))
        size = self._size[r]
        if np.any(size < 2):
            raise ValueError("no schema-compatible alternative tail exists")
        lo = self._lo[r]
        out = lo + (rng.random(len(r)) * size).astype(np.int64)
        bad = self.is_positive(h, r, out)
        for _ in range(self.max_retries):
            if not bad.any():
                break
            idx = np.flatnonzero(bad)
            out[idx] = lo[idx] + (rng.random(len(idx)) * size[idx]).astype(np.int64)
            bad[idx] = self.is_positive(h[idx], r[idx], out[idx])
        for i in np.flatnonzero(bad):
            out[i] = self._exhaustive(h[i], r[i], t[i], lo[i], size[i], rng)
        return out


def sample_negative(g: Tckg, triple: tuple[int, int, int], rng: np.random.Generator, max_retries: int = 10):
    h, r, t = triple
    tail = NegativeSampler(g, max_retries).sample(np.array([h]), np.array([r]), np.array([t]), rng)[0]
    return h, r, int(tail)


def init_table(n_entities: int, n_relations: int, d: int, rng: np.random.Generator) -> EmbeddingTable:
    bound = 6.0 / np.sqrt(d)
    return EmbeddingTable(
        entity=rng.uniform(-bound, bound, size=(n_entities, d)),
        relation=rng.uniform(-bound, bound, size=(n_relations, d)),
        bias=np.zeros(n_entities),
    )


def _project_to_unit_ball(vecs: np.ndarray) -> None:
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    vecs /= np.maximum(norms, 1.0)


def train_embeddings(g: Tckg, cfg: TrainConfig = TrainConfig()) -> EmbeddingTable:
    rng = np.random.default_rng(cfg.seed)
    n_rel = g.catalog.n_forward
    table = init_table(g.n_entities, n_rel, cfg.d, rng)
    table.seed = cfg.seed
    if len(g.triples) == 0:
        logger.warning("graph has no triples; returning the initial table")
        return table

    params = {"entity": table.entity, "relation": table.relation, "bias": table.bias}
    opt = Adam(lr=cfg.learning_rate)
    sampler = NegativeSampler(g)
    purchase = np.zeros(2 * n_rel, dtype=bool)
    purchase[g.catalog.purchase_ids()] = True

    triples = np.repeat(g.triples, cfg.negatives_per_positive, axis=0)
    for epoch in range(cfg.epochs):
        if cfg.renormalize:
            _project_to_unit_ball(params["entity"])
        order = rng.permutation(len(triples))
        total, aux_total, count, aux_count = 0.0, 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = triples[order[start : start + cfg.batch_size]]
            h, r, t = batch.T
            t_neg = sampler.sample(h, r, t, rng)
            E, R = params["entity"], params["relation"]
            losses, gr = pairwise_loss(E[h], R[r], E[t], E[t_neg])
            scale = 1.0 / len(batch)
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            np.add.at(grads["entity"], h, gr["eh"] * scale)
            np.add.at(grads["entity"], t, gr["et"] * scale)
            np.add.at(grads["entity"], t_neg, gr["et_neg"] * scale)
            np.add.at(grads["relation"], r, gr["r"] * scale)
            batch_loss = losses.sum()

            mask = purchase[r]
            if cfg.bias_aux_weight > 0 and mask.any():
                hu, ru, tv, tn = h[mask], r[mask], t[mask], t_neg[mask]
                b = params["bias"]
                aux, ga = inner_product_loss(E[hu], R[ru], E[tv], E[tn], b[tv], b[tn])
                w = cfg.bias_aux_weight * scale
                np.add.at(grads["entity"], hu, ga["eu"] * w)
                np.add.at(grads["entity"], tv, ga["ev"] * w)
                np.add.at(grads["entity"], tn, ga["ev_neg"] * w)
                np.add.at(grads["relation"], ru, ga["r"] * w)
                np.add.at(grads["bias"], tv, ga["bv"] * w)
                np.add.at(grads["bias"], tn, ga["bv_neg"] * w)
                aux_total += float(aux.sum())
                aux_count += len(aux)

            if not np.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            clip_by_global_norm(grads, cfg.max_grad_norm)
            opt.step(params, grads)
            total += float(batch_loss)
            count += len(batch)

        entry = {"epoch": epoch, "loss": total / count}
        if aux_count:
            entry["aux_loss"] = aux_total / aux_count
        table.log.append(entry)
        logger.debug("embedding epoch %d loss %.5f", epoch, entry["loss"])

    if cfg.renormalize:
        _project_to_unit_ball(params["entity"])
    table.entity, table.relation, table.bias = params["entity"], params["relation"], params["bias"]
    table.epoch = cfg.epochs
    if not all(np.all(np.isfinite(a)) for a in (table.entity, table.relation, table.bias)):
        raise TrainingError("embedding table contains non-finite values after training")
    return table
