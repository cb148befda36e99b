"""Walking the graph: states, pruned actions, rewards, policy training and beam search.

A walk starts at a user and takes at most ``max_steps`` hops. Each hop is
either an out-edge of the current entity or the stay action in slot 0.
Only the terminal state is rewarded: the item reached is scored against the
user with a relation mixed from the user's purchase-time clusters and
normalised by the user's best possible item.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .embedding import EmbeddingTable
from .graph import Tckg, UnknownEntityError
from .optim import Adam
from .policy import (
    PolicyConfig,
    PolicyParams,
    apply_gradients,
    concat_caches,
    encode_backward,
    encode_batch,
    head_backward,
    masked_log_softmax,
)

logger = logging.getLogger(__name__)

REWARD_MODES = ("personalized", "average")


@dataclass(frozen=True)
class ReasonerConfig:
    epsilon: int = 250
    max_steps: int = 3
    history_hops: int = 1
    gamma: float = 0.99
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    beam: tuple = (25, 5, 1)
    hidden: int = 256
    state_dim: int = 256
    dropout: float = 0.5
    encoder: str = "lstm"
    dtype: str = "float32"
    reward_mode: str = "personalized"
    seed: int = 0

    def policy_config(self, d: int) -> PolicyConfig:
        return PolicyConfig(
            d=d,
            hidden=self.hidden,
            state_dim=self.state_dim,
            n_actions=self.epsilon + 1,
            history_hops=self.history_hops,
            dropout=self.dropout,
            encoder=self.encoder,
            dtype=self.dtype,
        )


@dataclass(frozen=True)
class State:
    """A walk so far. ``path`` holds (relation or None, entity) hops; None marks a stay."""

    user: int
    path: tuple = ()

    @property
    def current(self) -> int:
        return self.path[-1][1] if self.path else self.user

    @property
    def step(self) -> int:
        return len(self.path)

    def entity_before(self, hop: int) -> int:
        return self.path[hop - 1][1] if hop > 0 else self.user

    def last_edge_hop(self) -> Optional[int]:
        for j in range(len(self.path) - 1, -1, -1):
            if self.path[j][0] is not None:
                return j
        return None

    def history(self, hops: int = 1) -> tuple:
        return self.path[-hops:] if hops else ()


@dataclass(frozen=True)
class Action:
    slot: int
    relation: Optional[int]  # None for the stay action
    entity: int


@dataclass
class ActionSpace:
    actions: list
    mask: np.ndarray


class PathEnvironment:
    """Graph + frozen embeddings, with the per-state operations the agent needs."""

    def __init__(self, g: Tckg, emb: EmbeddingTable, epsilon: int = 250, max_steps: int = 3, history_hops: int = 1):
        if emb.entity.shape[0] != g.n_entities or emb.n_forward != g.catalog.n_forward:
            raise ValueError("embedding table does not match the graph")
        self.g = g
        self.emb = emb
        self.epsilon = epsilon
        self.max_steps = max_steps
        self.history_hops = history_hops
        self.E = emb.entity
        self.b = emb.bias
        self.R = emb.signed_relations()
        self.stay = len(self.R) - 1  # zero row

    def _rel_row(self, rel: Optional[int]) -> int:
        return self.stay if rel is None else rel

    def prune_actions(self, s: State) -> ActionSpace:
        rels, dsts = self.g.edges(s.current)
        keep = np.ones(len(rels), dtype=bool)
        last = s.last_edge_hop()
        if last is not None:
            # stays do not move the agent, so the edge it arrived by is still the one to not undo
            back = self.g.catalog.inverse(s.path[last][0])
            keep &= ~((rels == back) & (dsts == s.entity_before(last)))
        rels, dsts = rels[keep], dsts[keep]
        query = self.E[s.user] + self.R[[self._rel_row(r) for r, _ in s.path]].sum(axis=0)
        scores = ((query + self.R[rels]) * self.E[dsts]).sum(axis=1) + self.b[dsts]
        order = np.lexsort((np.arange(len(rels)), -scores))[: self.epsilon]
        actions = [Action(0, None, s.current)]
        actions += [Action(i + 1, int(rels[j]), int(dsts[j])) for i, j in enumerate(order)]
        mask = np.zeros(self.epsilon + 1, dtype=bool)
        mask[: len(actions)] = True
        return ActionSpace(actions, mask)

    def transition(self, s: State, a: Action) -> State:
        if s.step >= self.max_steps:
            raise ValueError(f"walk already has {s.step} hops (limit {self.max_steps})")
        if a.relation is None:
            return State(s.user, s.path + ((None, s.current),))
        if not self.g.has_edge(s.current, a.relation, a.entity):
            raise ValueError(f"no edge {s.current} -[{a.relation}]-> {a.entity}")
        return State(s.user, s.path + ((a.relation, a.entity),))

    def sequence(self, s: State) -> np.ndarray:
        k = self.history_hops
        seq = np.zeros((2 + 2 * k, self.E.shape[1]))
        seq[0] = self.E[s.user]
        start = max(0, s.step - k)
        pos = 1 + 2 * (k - (s.step - start))
        for hop in range(start, s.step):
            seq[pos] = self.E[s.entity_before(hop)]
            seq[pos + 1] = self.R[self._rel_row(s.path[hop][0])]
            pos += 2
        seq[-1] = self.E[s.current]
        return seq

    def sequences(self, states: Sequence[State]) -> np.ndarray:
        return np.stack([self.sequence(s) for s in states])


def prune_actions(g: Tckg, emb: EmbeddingTable, s: State, epsilon: int = 250) -> ActionSpace:
    return PathEnvironment(g, emb, epsilon).prune_actions(s)


def transition(env: PathEnvironment, s: State, a: Action) -> State:
    return env.transition(s, a)


# -- reward -------------------------------------------------------------------


@dataclass(frozen=True)
class PersonalizedRelation:
    weights: np.ndarray
    vector: np.ndarray


def history_weights(g: Tckg, user: int) -> np.ndarray:
    L = g.catalog.n_clusters
    clusters = g.user_history(user)[:, 2]
    if len(clusters) == 0:
        logger.warning("user %d has no training interactions; using uniform cluster weights", user)
        return np.full(L, 1.0 / L)
    return np.bincount(clusters, minlength=L) / len(clusters)


def mix_purchase_relations(g: Tckg, emb: EmbeddingTable, weights: np.ndarray) -> np.ndarray:
    return np.asarray(weights) @ emb.relation[g.catalog.purchase_ids()]


def personalized_relation(g: Tckg, emb: EmbeddingTable, user: int, mode: str = "personalized") -> PersonalizedRelation:
    if mode == "personalized":
        w = history_weights(g, user)
    elif mode == "average":
        L = g.catalog.n_clusters
        w = np.full(L, 1.0 / L)
    else:
        raise ValueError(f"reward mode must be one of {REWARD_MODES}")
    return PersonalizedRelation(w, mix_purchase_relations(g, emb, w))


def reward_score(emb: EmbeddingTable, u: int, v: int, pr: PersonalizedRelation, items: Optional[range] = None) -> float:
    if items is not None and v not in items:
        raise ValueError(f"entity {v} is not an item")
    return float((emb.entity[u] + pr.vector) @ emb.entity[v] + emb.bias[v])


class RewardModel:
    """Terminal rewards with the per-user relation and normaliser cached."""

    def __init__(self, g: Tckg, emb: EmbeddingTable, mode: str = "personalized"):
        self.g, self.emb, self.mode = g, emb, mode
        self.items = g.type_range("item")
        self._relations: dict = {}
        self._max: dict = {}
        self._scores: dict = {}

    def relation(self, u: int) -> PersonalizedRelation:
        if u not in self._relations:
            self._relations[u] = personalized_relation(self.g, self.emb, u, self.mode)
        return self._relations[u]

    def item_scores(self, u: int) -> np.ndarray:
        """Reward scores of every item for ``u``, cached; the normaliser is taken from the same vector."""
        if u not in self._scores:
            items = np.arange(self.items.start, self.items.stop)
            vec = self.emb.entity[u] + self.relation(u).vector
            self._scores[u] = self.emb.entity[items] @ vec + self.emb.bias[items]
        return self._scores[u]

    def max_score(self, u: int) -> float:
        if u not in self._max:
            scores = self.item_scores(u)
            best = float(scores.max()) if len(scores) else 0.0
            if best <= 0:
                logger.warning("user %d has no positively scored item; all rewards are 0", u)
            self._max[u] = best
        return self._max[u]

    def terminal(self, u: int, entity: int) -> float:
        if entity not in self.items:
            return 0.0
        top = self.max_score(u)
        if top <= 0:
            return 0.0
        raw = float(self.item_scores(u)[entity - self.items.start])
        return float(min(max(raw, 0.0) / top, 1.0))


def terminal_reward(rewards: RewardModel, s: State, max_steps: int = 3) -> float:
    if s.step != max_steps:
        raise ValueError(f"terminal reward needs a {max_steps}-hop state, got {s.step}")
    return rewards.terminal(s.user, s.current)


# -- rollouts and training ----------------------------------------------------


@dataclass
class Trajectory:
    states: list
    actions: list
    log_probs: np.ndarray
    values: np.ndarray
    reward: float


@dataclass
class _Step:
    x: np.ndarray
    cache: object
    masks: np.ndarray
    slots: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray


def _sample_slots(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cum[:, -1]
    slots = (cum <= u[:, None]).sum(axis=1)
    # guard against landing on a trailing masked slot through rounding
    last_valid = probs.shape[1] - 1 - np.argmax((probs > 0)[:, ::-1], axis=1)
    return np.minimum(slots, last_valid)


def _rollout_batch(env: PathEnvironment, params: PolicyParams, users, rng, train_mode: bool):
    states = [State(int(u)) for u in users]
    history = [states]
    chosen = []
    steps = []
    for _ in range(env.max_steps):
        spaces = [env.prune_actions(s) for s in states]
        masks = np.stack([sp.mask for sp in spaces])
        x, cache = encode_batch(params, env.sequences(states), train_mode, rng)
        logp = masked_log_softmax((x @ params["Wa"]).astype(np.float64), masks)
        slots = _sample_slots(np.exp(logp), rng)
        rows = np.arange(len(states))
        steps.append(_Step(x, cache, masks, slots, logp[rows, slots], (x @ params["Wc"][:, 0]).astype(np.float64)))
        acts = [sp.actions[a] for sp, a in zip(spaces, slots)]
        chosen.append(acts)
        states = [env.transition(s, a) for s, a in zip(states, acts)]
        history.append(states)
    return history, chosen, steps


def rollout(env: PathEnvironment, params: PolicyParams, rewards: RewardModel, u: int, rng, train_mode: bool = False) -> Trajectory:
    history, chosen, steps = _rollout_batch(env, params, [u], rng, train_mode)
    final = history[-1][0]
    return Trajectory(
        states=[h[0] for h in history],
        actions=[c[0] for c in chosen],
        log_probs=np.array([st.log_probs[0] for st in steps]),
        values=np.array([st.values[0] for st in steps]),
        reward=rewards.terminal(u, final.current),
    )


def discounted_returns(reward: float, n_steps: int, gamma: float) -> np.ndarray:
    return reward * gamma ** np.arange(n_steps - 1, -1, -1, dtype=float)


def policy_gradients(params: PolicyParams, steps: list, rewards: np.ndarray, gamma: float):
    """Batch-mean actor-critic gradients for one batch of rollouts."""
    B = len(rewards)
    K = len(steps)
    G = np.concatenate([rewards * gamma ** (K - 1 - k) for k in range(K)])
    x = np.concatenate([st.x for st in steps])
    values = np.concatenate([st.values for st in steps])
    masks = np.concatenate([st.masks for st in steps])
    slots = np.concatenate([st.slots for st in steps])
    grads, dx, actor, critic = head_backward(params, x, masks, slots, G - values, G)
    grads.update(encode_backward(params, concat_caches([st.cache for st in steps]), dx))
    for g in grads.values():
        g /= B
    return grads, float(actor.sum()) / B, float(critic.sum()) / B


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    skipped_batches: int = 0


def train_policy(
    g: Tckg,
    emb: EmbeddingTable,
    users: Sequence[int],
    cfg: ReasonerConfig = ReasonerConfig(),
    params: Optional[PolicyParams] = None,
):
    """REINFORCE with a learned baseline; embeddings stay frozen. Returns (params, optimizer, log)."""
    rng = np.random.default_rng(cfg.seed)
    env = PathEnvironment(g, emb, cfg.epsilon, cfg.max_steps, cfg.history_hops)
    rewards = RewardModel(g, emb, cfg.reward_mode)
    if params is None:
        params = PolicyParams.init(cfg.policy_config(emb.d), rng, cfg.seed)
    opt = Adam(lr=cfg.learning_rate)
    log = TrainLog()
    users = np.asarray(users, dtype=np.int64)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(users))
        stats = {"reward": 0.0, "actor_loss": 0.0, "critic_loss": 0.0, "batches": 0}
        for start in range(0, len(order), cfg.batch_size):
            batch = users[order[start : start + cfg.batch_size]]
            history, _, steps = _rollout_batch(env, params, batch, rng, True)
            R = np.array([rewards.terminal(s.user, s.current) for s in history[-1]])
            grads, actor, critic = policy_gradients(params, steps, R, cfg.gamma)
            if not (np.isfinite(actor) and np.isfinite(critic)) or not apply_gradients(params, grads, opt):
                log.skipped_batches += 1
                logger.warning("skipped batch at epoch %d (non-finite loss or gradient)", epoch)
                continue
            stats["reward"] += float(R.mean())
            stats["actor_loss"] += actor
            stats["critic_loss"] += critic
            stats["batches"] += 1
        n = max(stats.pop("batches"), 1)
        entry = {"epoch": epoch, **{k: v / n for k, v in stats.items()}}
        log.epochs.append(entry)
        logger.debug("policy epoch %d reward %.4f", epoch, entry["reward"])
    return params, opt, log


# -- inference ----------------------------------------------------------------


@dataclass(frozen=True)
class PathResult:
    user: int
    hops: tuple  # ((relation id, entity gid), ...) with stays dropped
    score: float
    terminal: int
    valid: bool

    def to_record(self, g: Tckg) -> dict:
        return {
            "user": g.entity_name(self.user),
            "hops": [[g.catalog.name(r), g.entity_name(e)] for r, e in self.hops],
            "path_score": self.score,
            "terminal_item": g.entity_name(self.terminal) if self.valid else None,
            "valid": self.valid,
        }


def beam_search(env: PathEnvironment, params: PolicyParams, u: int, sizes: Sequence[int] = (25, 5, 1)) -> list:
    if len(sizes) != env.max_steps:
        raise ValueError(f"need one beam width per hop ({env.max_steps}), got {len(sizes)}")
    if not 0 <= u < env.g.n_entities or env.g.type_of(u) != "user":
        raise UnknownEntityError(f"{u} is not a user")
    beams = [(State(u), 0.0)]
    for width in sizes:
        states = [s for s, _ in beams]
        spaces = [env.prune_actions(s) for s in states]
        masks = np.stack([sp.mask for sp in spaces])
        x, _ = encode_batch(params, env.sequences(states), False)
        logp = masked_log_softmax((x @ params["Wa"]).astype(np.float64), masks)
        nxt = []
        for (s, score), sp, lp in zip(beams, spaces, logp):
            # slots whose probability underflows to 0 can never be sampled, so they are not expanded
            valid = np.flatnonzero(sp.mask & (np.exp(lp) > 0))
            best = valid[np.lexsort((valid, -lp[valid]))][:width]
            nxt.extend((env.transition(s, sp.actions[a]), score + float(lp[a])) for a in best)
        beams = nxt

    best_by_key: dict = {}
    for s, score in beams:
        hops = tuple((r, e) for r, e in s.path if r is not None)
        valid = env.g.is_item(s.current)
        key = ("item", s.current) if valid else ("walk", hops)
        if key not in best_by_key or score > best_by_key[key].score:
            best_by_key[key] = PathResult(u, hops, score, s.current, valid)
    return sorted(best_by_key.values(), key=lambda p: (-p.score, p.hops))


def invalid_user_count(results: Mapping[int, Sequence[PathResult]] | Iterable[Sequence[PathResult]], threshold: int = 10) -> int:
    groups = results.values() if isinstance(results, Mapping) else results
    return sum(1 for paths in groups if sum(p.valid for p in paths) < threshold)


def write_paths(path, results: Mapping[int, Sequence[PathResult]], g: Tckg) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in sorted(results):
            for p in results[u]:
                fh.write(json.dumps(p.to_record(g), sort_keys=True) + "\n")


def config_dict(cfg: ReasonerConfig) -> dict:
    out = asdict(cfg)
    out["beam"] = list(cfg.beam)
    return out
