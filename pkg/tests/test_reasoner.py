import json
import logging

import numpy as np
import pytest
from graphs import bandit, chain, hub, random_shop
from hypothesis import given, settings
from hypothesis import strategies as st

from tprec.embedding import EmbeddingTable
from tprec.graph import ITEM, USER, EntityId, InteractionRecord, build_tckg
from tprec.policy import PolicyConfig, PolicyParams, actor_probs, encode_batch
from tprec.reasoner import (
    Action,
    PathEnvironment,
    PathResult,
    ReasonerConfig,
    RewardModel,
    State,
    beam_search,
    discounted_returns,
    history_weights,
    invalid_user_count,
    personalized_relation,
    policy_gradients,
    prune_actions,
    reward_score,
    rollout,
    terminal_reward,
    train_policy,
    write_paths,
    _rollout_batch,
)


def tiny_policy(d, n_actions=251, seed=0, **kw):
    cfg = PolicyConfig(d=d, hidden=6, state_dim=5, n_actions=n_actions, **kw)
    return PolicyParams.init(cfg, np.random.default_rng(seed))


def oracle_scores(env, s, rels, dsts):
    q = env.E[s.user].copy()
    for r, _ in s.path:
        if r is not None:
            q += env.R[r]
    return [float((q + env.R[r]) @ env.E[e] + env.b[e]) for r, e in zip(rels, dsts)]


class TestPruning:
    def test_small_degree_keeps_everything(self):
        g, emb = random_shop(0)
        env = PathEnvironment(g, emb)
        u = g.gid(EntityId(USER, 1))
        space = env.prune_actions(State(u))
        assert len(space.actions) - 1 == g.out_degree()[u]
        assert space.actions[0] == Action(0, None, u)
        assert space.mask.sum() == len(space.actions)

    def test_top_epsilon_of_large_hub(self):
        g, emb = hub(300)
        u = g.gid(EntityId(USER, 0))
        item0 = g.gid(EntityId(ITEM, 0))
        p = g.catalog.id_of("purchase", 0)
        s = State(u, ((p, item0),))
        space = prune_actions(g, emb, s)
        env = PathEnvironment(g, emb)
        rels, dsts = g.edges(item0)
        keep = ~((rels == g.catalog.inverse(p)) & (dsts == u))
        scores = oracle_scores(env, s, rels[keep], dsts[keep])
        expect = sorted(zip(scores, dsts[keep].tolist()), key=lambda t: -t[0])[:250]
        assert len(space.actions) == 251
        assert [a.entity for a in space.actions[1:]] == [e for _, e in expect]

    def test_no_immediate_backtracking(self):
        g, emb = chain()
        env = PathEnvironment(g, emb)
        u = g.gid(EntityId(USER, 0))
        s1 = env.transition(State(u), env.prune_actions(State(u)).actions[1])
        entities = [a.entity for a in env.prune_actions(s1).actions[1:]]
        assert u not in entities and entities == [g.gid(EntityId(ITEM, 1))]

    def test_isolated_entity_only_stays(self):
        g = build_tckg([], [], 1, {USER: 1, ITEM: 1})
        emb = EmbeddingTable(np.zeros((2, 3)), np.zeros((g.catalog.n_forward, 3)), np.zeros(2))
        space = prune_actions(g, emb, State(0))
        assert len(space.actions) == 1 and space.mask.sum() == 1


class TestTransition:
    def test_edge_then_stays(self):
        g, emb = chain()
        env = PathEnvironment(g, emb)
        u = g.gid(EntityId(USER, 0))
        a = env.prune_actions(State(u)).actions[1]
        s = env.transition(State(u), a)
        assert s.current == a.entity and s.step == 1 and s.history() == ((a.relation, a.entity),)
        stay = State(u)
        for _ in range(3):
            stay = env.transition(stay, Action(0, None, stay.current))
        assert stay.current == u and stay.step == 3
        with pytest.raises(ValueError):
            env.transition(stay, Action(0, None, u))

    def test_rejects_missing_edge(self):
        g, emb = chain()
        env = PathEnvironment(g, emb)
        with pytest.raises(ValueError):
            env.transition(State(0), Action(1, 0, 3))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3))
    def test_random_walks_keep_short_history(self, seed, k):
        g, emb = random_shop(seed % 5)
        env = PathEnvironment(g, emb, history_hops=k)
        rng = np.random.default_rng(seed)
        s = State(g.gid(EntityId(USER, int(rng.integers(6)))))
        for _ in range(3):
            acts = env.prune_actions(s).actions
            s = env.transition(s, acts[rng.integers(len(acts))])
            assert len(s.history(k)) <= k
            for r, e in s.path:
                assert r is None or e in [n for _, n in g.neighbors(s.entity_before(s.path.index((r, e))))]
        assert env.sequence(s).shape == (2 + 2 * k, emb.d)


class TestSequence:
    def test_layout(self):
        g, emb = chain()
        env = PathEnvironment(g, emb)
        u = g.gid(EntityId(USER, 0))
        np.testing.assert_array_equal(env.sequence(State(u)), np.stack([emb.entity[u], np.zeros(6), np.zeros(6), emb.entity[u]]))
        a = env.prune_actions(State(u)).actions[1]
        s = env.transition(State(u), a)
        expect = np.stack([emb.entity[u], emb.entity[u], emb.relation_vector(a.relation), emb.entity[a.entity]])
        np.testing.assert_array_equal(env.sequence(s), expect)
        s2 = env.transition(s, Action(0, None, s.current))
        np.testing.assert_array_equal(env.sequence(s2)[2], np.zeros(6))


class TestReward:
    def test_history_weights(self):
        inter = [(InteractionRecord(0, i, 5), c) for i, c in enumerate([0, 0, 1, 3])]
        g = build_tckg(inter, [], 5, {USER: 2, ITEM: 4})
        np.testing.assert_allclose(history_weights(g, 0), [0.5, 0.25, 0, 0.25, 0])

    def test_one_hot_relation(self):
        inter = [(InteractionRecord(0, i, 5), 2) for i in range(3)]
        g = build_tckg(inter, [], 4, {USER: 1, ITEM: 3})
        emb = EmbeddingTable(np.ones((4, 3)), np.random.default_rng(0).normal(size=(g.catalog.n_forward, 3)), np.zeros(4))
        pr = personalized_relation(g, emb, 0)
        np.testing.assert_array_equal(pr.weights, [0, 0, 1, 0])
        np.testing.assert_array_equal(pr.vector, emb.relation[g.catalog.id_of("purchase", 2)])

    def test_no_history_is_uniform(self, caplog):
        g = build_tckg([(InteractionRecord(0, 0, 5), 0)], [], 4, {USER: 2, ITEM: 1})
        with caplog.at_level(logging.WARNING):
            w = history_weights(g, 1)
        np.testing.assert_array_equal(w, np.full(4, 0.25))
        assert "no training interactions" in caplog.text

    def test_weights_sum_to_one(self):
        g, _ = random_shop(3)
        for u in g.type_range(USER):
            assert history_weights(g, u).sum() == pytest.approx(1.0, abs=1e-12)

    def test_zero_embeddings_bias(self):
        g, emb = bandit(d=4, biases=(1.0, 0.1))
        pr = personalized_relation(g, emb, 0)
        assert reward_score(emb, 0, 1, pr) == 1.0

    def test_loop_oracle_and_item_check(self):
        g, emb = random_shop(2)
        rm = RewardModel(g, emb)
        items = g.type_range(ITEM)
        for u in g.type_range(USER):
            pr = rm.relation(u)
            for v in list(items)[:5]:
                acc = emb.bias[v]
                for k in range(emb.d):
                    acc += (emb.entity[u, k] + pr.vector[k]) * emb.entity[v, k]
                assert abs(reward_score(emb, u, v, pr, items) - acc) < 1e-12
        with pytest.raises(ValueError):
            reward_score(emb, 0, 0, rm.relation(0), items)

    def test_single_cluster_matches_multi_hop_score(self):
        inter = [(InteractionRecord(0, i, 5), 1) for i in range(2)]
        g = build_tckg(inter, [], 3, {USER: 1, ITEM: 3})
        rng = np.random.default_rng(1)
        emb = EmbeddingTable(rng.normal(size=(4, 5)), rng.normal(size=(g.catalog.n_forward, 5)), rng.normal(size=4))
        pr = personalized_relation(g, emb, 0)
        r = emb.relation_vector(g.catalog.id_of("purchase", 1))
        for v in g.type_range(ITEM):
            assert reward_score(emb, 0, v, pr) == pytest.approx((emb.entity[0] + r) @ emb.entity[v] + emb.bias[v], abs=1e-12)

    def test_terminal_brute_force(self):
        g, emb = random_shop(4)
        rm = RewardModel(g, emb)
        items = list(g.type_range(ITEM))
        for u in g.type_range(USER):
            pr = personalized_relation(g, emb, u)
            raw = [reward_score(emb, u, v, pr) for v in items]
            top = max(raw)
            for v, val in zip(items, raw):
                expect = min(max(val, 0) / top, 1.0) if top > 0 else 0.0
                assert abs(rm.terminal(u, v) - expect) < 1e-9
            best = items[int(np.argmax(raw))]
            if top > 0:
                assert rm.terminal(u, best) == 1.0
            assert rm.terminal(u, g.type_range("feature")[0]) == 0.0

    def test_degenerate_user(self, caplog):
        g, emb = bandit(d=2, biases=(-1.0, -0.5))
        rm = RewardModel(g, emb)
        with caplog.at_level(logging.WARNING):
            assert rm.terminal(0, 1) == 0.0 and rm.terminal(0, 2) == 0.0
        assert "no positively scored item" in caplog.text

    def test_terminal_reward_needs_full_walk(self):
        g, emb = bandit(d=2)
        with pytest.raises(ValueError):
            terminal_reward(RewardModel(g, emb), State(0))

    def test_average_mode(self):
        g, emb = random_shop(5)
        pr = personalized_relation(g, emb, 0, mode="average")
        np.testing.assert_allclose(pr.weights, np.full(3, 1 / 3))
        with pytest.raises(ValueError):
            personalized_relation(g, emb, 0, mode="nope")


class TestRollout:
    def test_chain_without_stays_is_unique(self):
        g, emb = chain()
        env = PathEnvironment(g, emb)
        params = tiny_policy(6)
        params.arrays["Wa"][:, 0] = -1e4
        u = g.gid(EntityId(USER, 0))
        traj = rollout(env, params, RewardModel(g, emb), u, np.random.default_rng(0))
        assert [s.current for s in traj.states] == [u, 1, 2, 3]
        assert len(traj.actions) == 3

    def test_recorded_log_probs_replay(self):
        g, emb = random_shop(6)
        env = PathEnvironment(g, emb)
        params = tiny_policy(emb.d, seed=3)
        traj = rollout(env, params, RewardModel(g, emb), 0, np.random.default_rng(1))
        assert len(traj.actions) == 3 and 0 <= traj.reward <= 1
        for s, a, lp in zip(traj.states, traj.actions, traj.log_probs):
            space = env.prune_actions(s)
            x, _ = encode_batch(params, env.sequence(s)[None])
            assert lp == pytest.approx(np.log(actor_probs(params, x[0], space.mask)[a.slot]), abs=1e-12)
            assert space.actions[a.slot] == a

    def test_returns_recurrence(self):
        G = discounted_returns(0.7, 3, 0.99)
        assert G[-1] == 0.7
        np.testing.assert_allclose(G[:-1], 0.99 * G[1:])

    def test_zero_reward_zero_gradient(self):
        g, emb = random_shop(7)
        env = PathEnvironment(g, emb)
        params = tiny_policy(emb.d)
        params.arrays["Wc"][:] = 0.0
        _, _, steps = _rollout_batch(env, params, [0, 1, 2], np.random.default_rng(0), True)
        grads, actor, critic = policy_gradients(params, steps, np.zeros(3), 0.99)
        assert actor == 0.0 and critic == 0.0
        assert all(not v.any() for v in grads.values())

    def test_training_is_deterministic_and_finite(self):
        g, emb = random_shop(8)
        cfg = ReasonerConfig(epochs=2, batch_size=4, hidden=6, state_dim=5, seed=3)
        users = list(g.type_range(USER))
        p1, _, log1 = train_policy(g, emb, users, cfg)
        p2, _, log2 = train_policy(g, emb, users, cfg)
        for k in p1.arrays:
            np.testing.assert_array_equal(p1[k], p2[k])
            assert np.isfinite(p1[k]).all()
        assert log1.epochs == log2.epochs and len(log1.epochs) == 2
        assert all(0 <= e["reward"] <= 1 for e in log1.epochs)

    def test_bandit_learns_quickly(self):
        # a cheap version of the full bandit check: small network, larger steps
        g, emb = bandit(d=4)
        cfg = ReasonerConfig(epochs=60, learning_rate=1e-2, hidden=8, state_dim=8, dropout=0.0, seed=1)
        params, _, _ = train_policy(g, emb, [0] * 32, cfg)
        from graphs import walk_probability

        assert walk_probability(PathEnvironment(g, emb), params, 0, 1) > 0.9


class TestBeam:
    def test_chain_gives_one_path(self):
        g, emb = chain()
        env = PathEnvironment(g, emb)
        params = tiny_policy(6)
        params.arrays["Wa"][:, 0] = -1e4
        out = beam_search(env, params, 0)
        assert len(out) == 1
        assert out[0].hops == ((g.catalog.id_of("purchase", 0), 1), (g.catalog.id_of("also_bought"), 2), (g.catalog.id_of("also_bought"), 3))
        assert out[0].valid and out[0].terminal == 3

    @pytest.mark.parametrize("seed", range(5))
    def test_contracts(self, seed):
        g, emb = random_shop(seed, n_items=40, interactions=150)
        env = PathEnvironment(g, emb)
        params = tiny_policy(emb.d, seed=seed)
        for u in g.type_range(USER):
            out = beam_search(env, params, u)
            assert len(out) <= 125
            scores = [p.score for p in out]
            assert scores == sorted(scores, reverse=True)
            for p in out:
                prev = u
                assert len(p.hops) <= 3
                for r, e in p.hops:
                    assert g.has_edge(prev, r, e)
                    prev = e
                assert p.terminal == prev and p.valid == g.is_item(prev)
            items = [p.terminal for p in out if p.valid]
            assert len(items) == len(set(items))
            assert out == beam_search(env, params, u)

    def test_width_per_hop(self):
        g, emb = chain()
        with pytest.raises(ValueError):
            beam_search(PathEnvironment(g, emb), tiny_policy(6), 0, sizes=(2, 2))

    def test_unknown_user(self):
        g, emb = chain()
        with pytest.raises(KeyError):
            beam_search(PathEnvironment(g, emb), tiny_policy(6), 1)

    def test_path_records(self, tmp_path):
        g, emb = chain()
        params = tiny_policy(6)
        out = {0: beam_search(PathEnvironment(g, emb), params, 0)}
        write_paths(tmp_path / "p.jsonl", out, g)
        rows = [json.loads(line) for line in (tmp_path / "p.jsonl").read_text().splitlines()]
        assert len(rows) == len(out[0])
        assert rows[0]["user"] == "user:0"
        assert set(rows[0]) == {"user", "hops", "path_score", "terminal_item", "valid"}


class TestInvalidUsers:
    @staticmethod
    def paths(n_valid, n_invalid=0):
        return [PathResult(0, (), -float(i), i, True) for i in range(n_valid)] + [
            PathResult(0, (), -1.0, 0, False) for _ in range(n_invalid)
        ]

    def test_boundary(self):
        assert invalid_user_count({1: self.paths(9, 50)}) == 1
        assert invalid_user_count({1: self.paths(10)}) == 0
        assert invalid_user_count([self.paths(125), self.paths(125)]) == 0
        assert invalid_user_count([[], self.paths(3), self.paths(11)]) == 2
