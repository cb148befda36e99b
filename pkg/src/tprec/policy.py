"""Actor-critic network over path states.

A state is fed as a short sequence of d-dimensional vectors. A bidirectional
LSTM summarises it, the two final hidden states are concatenated, projected
by W1 and squashed with a logistic sigmoid, then dropped out during training.
The actor reads logits x @ Wa over the action slots (masked softmax) and the
critic reads x @ Wc. Every gradient is written out by hand.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .artifacts import load_arrays, save_arrays
from .optim import Adam

logger = logging.getLogger(__name__)

POLICY_FORMAT_VERSION = 1
ENCODERS = ("lstm", "mlp")


@dataclass(frozen=True)
class PolicyConfig:
    d: int = 100
    hidden: int = 256
    state_dim: int = 256
    n_actions: int = 251
    history_hops: int = 1
    dropout: float = 0.5
    encoder: str = "lstm"  # "mlp" swaps the recurrent encoder for one dense layer
    dtype: str = "float64"

    @property
    def seq_len(self) -> int:
        return 2 + 2 * self.history_hops


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _glorot(rng, shape):
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


class PolicyParams:
    """Named parameter arrays plus the config that shaped them."""

    def __init__(self, cfg: PolicyConfig, arrays: dict, seed: int = 0, step: int = 0):
        self.cfg = cfg
        self.arrays = arrays
        self.seed = seed
        self.step = step

    @classmethod
    def init(cls, cfg: PolicyConfig, rng: np.random.Generator, seed: int = 0) -> "PolicyParams":
        if cfg.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {cfg.encoder!r}")
        H, D = cfg.hidden, cfg.d
        arrays = {}
        if cfg.encoder == "lstm":
            for side in ("fw", "bw"):
                arrays[f"{side}_W"] = _glorot(rng, (D + H, 4 * H))
                b = np.zeros(4 * H)
                b[H : 2 * H] = 1.0  # forget gate starts open
                arrays[f"{side}_b"] = b
        else:
            arrays["mlp_W"] = _glorot(rng, (cfg.seq_len * D, 2 * H))
            arrays["mlp_b"] = np.zeros(2 * H)
        arrays["W1"] = _glorot(rng, (2 * H, cfg.state_dim))
        arrays["Wa"] = _glorot(rng, (cfg.state_dim, cfg.n_actions))
        arrays["Wc"] = _glorot(rng, (cfg.state_dim, 1))
        arrays = {k: v.astype(cfg.dtype) for k, v in arrays.items()}
        return cls(cfg, arrays, seed)

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()}, self.seed, self.step)

    def save(self, path, optimizer: Optional[Adam] = None) -> None:
        arrays = dict(self.arrays)
        header = {"format_version": POLICY_FORMAT_VERSION, "config": asdict(self.cfg), "seed": self.seed, "step": self.step}
        if optimizer is not None:
            arrays.update({f"adam/{k}": v for k, v in optimizer.state_arrays().items()})
            header["adam"] = {"t": optimizer.t, "lr": optimizer.lr, "skipped": optimizer.skipped}
        header["shapes"] = {k: list(v.shape) for k, v in sorted(self.arrays.items())}
        save_arrays(path, arrays, header)

    @classmethod
    def load(cls, path, with_optimizer: bool = False):
        arrays, meta = load_arrays(path)
        if meta.get("format_version") != POLICY_FORMAT_VERSION:
            raise ValueError(f"unsupported policy version {meta.get('format_version')}")
        params = cls(
            PolicyConfig(**meta["config"]),
            {k: v for k, v in arrays.items() if not k.startswith("adam/")},
            meta["seed"],
            meta["step"],
        )
        if not with_optimizer:
            return params
        opt = None
        if "adam" in meta:
            opt = Adam(lr=meta["adam"]["lr"])
            opt.load_state_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("adam/")}, meta["adam"]["t"])
            opt.skipped = meta["adam"]["skipped"]
        return params, opt


# -- encoder ------------------------------------------------------------------


def _lstm_forward(X, W, b, H):
    """Run one direction. Returns (final hidden state, cache of per-step activations)."""
    B, T, D = X.shape
    dt = W.dtype
    X = np.ascontiguousarray(X, dtype=dt)
    xw = (X.reshape(B * T, D) @ W[:D] + b).reshape(B, T, 4 * H)  # every step's input projection at once
    Wh = W[D:]
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    hs = np.empty((B, T, H), dtype=dt)
    cs = np.empty((B, T, H), dtype=dt)
    gates = np.empty((B, T, 4 * H), dtype=dt)
    tcs = np.empty((B, T, H), dtype=dt)
    for t in range(T):
        hs[:, t] = h
        cs[:, t] = c
        z = xw[:, t] + h @ Wh
        z[:, 2 * H : 3 * H] *= 2.0
        act = _sigmoid(z)
        act[:, 2 * H : 3 * H] = 2.0 * act[:, 2 * H : 3 * H] - 1.0  # tanh(z) = 2 sigmoid(2z) - 1
        i, f, g, o = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[:, t] = act
        tcs[:, t] = tc
    return h, (X, hs, cs, gates, tcs)


def _lstm_backward(dh, cache, W, H, D):
    X, hs, cs, gates, tcs = cache
    B, T, _ = X.shape
    Wh_t = W[D:].T
    dz_all = np.empty((B, T, 4 * H), dtype=W.dtype)
    dc = np.zeros_like(dh)
    for t in range(T - 1, -1, -1):
        act = gates[:, t]
        i, f, g, o = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H], act[:, 3 * H :]
        tc = tcs[:, t]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * cs[:, t] * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
        if t == 0:
            break  # the initial state is a constant
        dc = dc * f
        dh = dz @ Wh_t
    flat = dz_all.reshape(B * T, 4 * H)
    dW = np.empty_like(W)
    dW[:D] = X.reshape(B * T, D).T @ flat
    dW[D:] = hs.reshape(B * T, H).T @ flat
    return dW, flat.sum(axis=0)


@dataclass
class EncoderCache:
    X: np.ndarray
    hcat: np.ndarray
    s: np.ndarray
    keep: Optional[np.ndarray]
    fw: Optional[tuple] = None
    bw: Optional[tuple] = None


def encode_batch(params: PolicyParams, X: np.ndarray, train_mode: bool = False, rng=None):
    """Encode B sequences of shape (T, d). Returns (x[B, state_dim], cache)."""
    cfg = params.cfg
    X = np.asarray(X, dtype=params["W1"].dtype)
    if X.ndim != 3 or X.shape[2] != cfg.d:
        raise ValueError(f"expected (B, T, {cfg.d}) input, got {X.shape}")
    H = cfg.hidden
    cache = EncoderCache(X, None, None, None)
    if cfg.encoder == "lstm":
        h_fw, cache.fw = _lstm_forward(X, params["fw_W"], params["fw_b"], H)
        h_bw, cache.bw = _lstm_forward(X[:, ::-1], params["bw_W"], params["bw_b"], H)
        hcat = np.concatenate([h_fw, h_bw], axis=1)
    else:
        hcat = np.tanh(X.reshape(len(X), -1) @ params["mlp_W"] + params["mlp_b"])
    s = _sigmoid(hcat @ params["W1"])
    x = s
    if train_mode and cfg.dropout > 0:
        if rng is None:
            raise ValueError("train_mode needs an rng for dropout")
        keep = ((rng.random(s.shape) >= cfg.dropout) / (1.0 - cfg.dropout)).astype(s.dtype)
        cache.keep = keep
        x = s * keep
    cache.hcat, cache.s = hcat, s
    return x, cache


def encode_backward(params: PolicyParams, cache: EncoderCache, dx: np.ndarray) -> dict:
    cfg = params.cfg
    H, D = cfg.hidden, cfg.d
    ds = dx * cache.keep if cache.keep is not None else dx
    da = ds * cache.s * (1.0 - cache.s)
    grads = {"W1": cache.hcat.T @ da}
    dh = da @ params["W1"].T
    if cfg.encoder == "lstm":
        grads["fw_W"], grads["fw_b"] = _lstm_backward(dh[:, :H], cache.fw, params["fw_W"], H, D)
        grads["bw_W"], grads["bw_b"] = _lstm_backward(dh[:, H:], cache.bw, params["bw_W"], H, D)
    else:
        dpre = dh * (1.0 - cache.hcat**2)
        grads["mlp_W"] = cache.X.reshape(len(cache.X), -1).T @ dpre
        grads["mlp_b"] = dpre.sum(axis=0)
    return grads


def concat_caches(caches: list) -> EncoderCache:
    """Join caches of several encode_batch calls so one backward pass serves them all."""
    if len(caches) == 1:
        return caches[0]

    def join(parts):
        return None if parts[0] is None else np.concatenate(parts)

    def join_steps(seqs):
        if seqs[0] is None:
            return None
        return tuple(np.concatenate(parts) for parts in zip(*seqs))

    return EncoderCache(
        X=join([c.X for c in caches]),
        hcat=join([c.hcat for c in caches]),
        s=join([c.s for c in caches]),
        keep=join([c.keep for c in caches]),
        fw=join_steps([c.fw for c in caches]),
        bw=join_steps([c.bw for c in caches]),
    )


def state_sequence(e_u, history, e_k, history_hops: int = 1) -> np.ndarray:
    """Stack [e_u, history..., e_k] with the history zero-padded at the front."""
    e_u = np.asarray(e_u, dtype=float)
    d = len(e_u)
    hist = [np.asarray(v, dtype=float) for v in history]
    if len(hist) > 2 * history_hops:
        raise ValueError(f"history has {len(hist)} vectors, at most {2 * history_hops} allowed")
    pad = [np.zeros(d)] * (2 * history_hops - len(hist))
    return np.stack([e_u, *pad, *hist, np.asarray(e_k, dtype=float)])


def encode_state(params: PolicyParams, e_u, history, e_k, train_mode: bool = False, rng=None) -> np.ndarray:
    seq = state_sequence(e_u, history, e_k, params.cfg.history_hops)
    return encode_batch(params, seq[None], train_mode, rng)[0][0]


# -- heads --------------------------------------------------------------------


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("action mask has no valid slot")
    z = np.where(mask, logits, -np.inf)
    top = z.max(axis=-1, keepdims=True)
    lse = top + np.log(np.exp(z - top).sum(axis=-1, keepdims=True))
    return z - lse


def actor_probs(params: PolicyParams, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked softmax of x @ Wa. Works on a single state or a batch."""
    logits = (np.asarray(x) @ params["Wa"]).astype(np.float64)  # heads always run in double precision
    return np.exp(masked_log_softmax(logits, mask))


def critic_value(params: PolicyParams, x: np.ndarray):
    v = np.asarray(x) @ params["Wc"][:, 0]
    return float(v) if np.ndim(v) == 0 else v


def head_backward(params: PolicyParams, x, mask, actions, advantages, returns):
    """Gradients of sum_b [-A_b log pi(a_b|s_b) + (G_b - c(s_b))^2].

    Advantages are constants here. Returns (grads for Wa and Wc, dx, loss terms).
    """
    logits = (x @ params["Wa"]).astype(np.float64)
    logp = masked_log_softmax(logits, mask)
    probs = np.exp(logp)
    rows = np.arange(len(x))
    chosen = logp[rows, actions]
    if not np.all(np.isfinite(chosen)):
        raise ValueError("an action was taken from a masked slot")
    dlogits = probs.copy()
    dlogits[rows, actions] -= 1.0
    dlogits *= advantages[:, None]  # masked slots stay at exactly zero
    values = (x @ params["Wc"][:, 0]).astype(np.float64)
    dv = -2.0 * (returns - values)
    dt = params["Wa"].dtype
    grads = {"Wa": (x.T @ dlogits).astype(dt), "Wc": (x.T @ dv)[:, None].astype(dt)}
    dx = (dlogits @ params["Wa"].T + dv[:, None] * params["Wc"][:, 0]).astype(dt)
    actor_loss = -(advantages * chosen)
    critic_loss = (returns - values) ** 2
    return grads, dx, actor_loss, critic_loss


def apply_gradients(params: PolicyParams, grads: dict, optimizer_state: Adam, lr: Optional[float] = None) -> bool:
    grads = {k: np.asarray(g, dtype=params[k].dtype) for k, g in grads.items()}
    ok = optimizer_state.step(params.arrays, grads, lr)
    if ok:
        params.step += 1
    return ok
