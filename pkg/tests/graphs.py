"""Small graphs and embedding tables shared by the reasoning tests."""

import numpy as np

from tprec.embedding import EmbeddingTable
from tprec.graph import ITEM, USER, EntityId, InteractionRecord, Triple, build_tckg


def random_shop(seed=0, n_users=6, n_items=15, n_clusters=3, d=8, interactions=60):
    rng = np.random.default_rng(seed)
    counts = {"user": n_users, "item": n_items, "feature": 6, "brand": 3, "category": 4}
    inter = []
    for k in range(interactions):
        words = tuple(int(w) for w in rng.choice(6, size=rng.integers(0, 3), replace=False))
        rec = InteractionRecord(int(rng.integers(n_users)), int(rng.integers(n_items)), 1_000 + k, words)
        inter.append((rec, int(rng.integers(n_clusters))))
    kg = [Triple(EntityId("item", i), "belong_to", EntityId("category", i % 4)) for i in range(n_items)]
    kg += [Triple(EntityId("item", i), "produced_by", EntityId("brand", i % 3)) for i in range(n_items)]
    kg += [
        Triple(EntityId("item", int(a)), "also_bought", EntityId("item", int(b)))
        for a, b in rng.integers(n_items, size=(2 * n_items, 2))
        if a != b
    ]
    g = build_tckg(inter, kg, n_clusters, counts)
    emb = EmbeddingTable(
        rng.normal(scale=0.5, size=(g.n_entities, d)),
        rng.normal(scale=0.5, size=(g.catalog.n_forward, d)),
        rng.normal(scale=0.3, size=g.n_entities),
    )
    return g, emb


def bandit(d=100, biases=(1.0, 0.1)):
    """One user who bought two items; with zero vectors the rewards are just the item biases."""
    inter = [(InteractionRecord(0, 0, 10), 0), (InteractionRecord(0, 1, 10), 0)]
    g = build_tckg(inter, [], 1, {USER: 1, ITEM: 2})
    emb = EmbeddingTable(np.zeros((3, d)), np.zeros((g.catalog.n_forward, d)), np.array([0.0, *biases]))
    return g, emb


def hub(n_neighbors=300, d=6, seed=0):
    """Item 0 linked to ``n_neighbors`` other items."""
    rng = np.random.default_rng(seed)
    kg = [Triple(EntityId("item", 0), "also_bought", EntityId("item", i)) for i in range(1, n_neighbors + 1)]
    g = build_tckg([(InteractionRecord(0, 0, 1), 0)], kg, 1, {USER: 1, ITEM: n_neighbors + 1})
    emb = EmbeddingTable(
        rng.normal(size=(g.n_entities, d)), rng.normal(size=(g.catalog.n_forward, d)), rng.normal(size=g.n_entities)
    )
    return g, emb


def chain(d=6, seed=0):
    """user -> item0 -> item1 -> item2, nothing else."""
    rng = np.random.default_rng(seed)
    kg = [Triple(EntityId("item", 0), "also_bought", EntityId("item", 1)), Triple(EntityId("item", 1), "also_bought", EntityId("item", 2))]
    g = build_tckg([(InteractionRecord(0, 0, 1), 0)], kg, 1, {USER: 1, ITEM: 3})
    emb = EmbeddingTable(
        rng.normal(size=(g.n_entities, d)), rng.normal(size=(g.catalog.n_forward, d)), rng.normal(size=g.n_entities)
    )
    return g, emb


def walk_probability(env, params, user, target):
    """Exact probability that a sampled walk ends at ``target``, by enumerating every walk."""
    from tprec.policy import actor_probs, encode_batch
    from tprec.reasoner import State

    total = 0.0

    def visit(s, p):
        nonlocal total
        if s.step == env.max_steps:
            total += p if s.current == target else 0.0
            return
        space = env.prune_actions(s)
        x, _ = encode_batch(params, env.sequence(s)[None])
        probs = actor_probs(params, x[0], space.mask)
        for a in space.actions:
            if probs[a.slot] > 0:
                visit(env.transition(s, a), p * probs[a.slot])

    visit(State(user), 1.0)
    return total
