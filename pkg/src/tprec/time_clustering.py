"""Diagonal Gaussian mixture over temporal features, fitted by EM.

The number of components is chosen by BIC. A fitted model maps a feature
vector to a posterior over components; its argmax is the time-aware
interaction relation index.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GmmConfig:
    max_iter: int = 200
    tol: float = 1e-6
    seed: int = 0
    variance_floor: float = 1e-6
    n_init: int = 1


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray, scale_floor: float = 1e-12) -> "Normalizer":
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        # a constant column is left unscaled rather than blown up
        scale = np.where(std > scale_floor, std, 1.0)
        return cls(mean=mean, scale=scale)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.scale + self.mean


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    normalizer: Normalizer
    seed: int = 0
    log_likelihoods: list = field(default_factory=list)
    n_reseeds: int = 0
    converged: bool = False
    bic: Optional[float] = None

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def raw_means(self) -> np.ndarray:
        return self.normalizer.inverse(self.means)

    def raw_variances(self) -> np.ndarray:
        return self.variances * self.normalizer.scale**2

    def n_parameters(self) -> int:
        return self.n_components * (2 * self.dim + 1) - 1

    def component_log_density(self, features: np.ndarray) -> np.ndarray:
        """log(pi_l) + log N(x; mu_l, diag var_l) in normalized space, n x L."""
        z = self.normalizer.transform(np.atleast_2d(features))
        return _weighted_log_density(z, self.weights, self.means, self.variances)

    def log_likelihood(self, features: np.ndarray) -> float:
        """Total data log-likelihood in raw feature space."""
        features = np.atleast_2d(features)
        norm_ll = _logsumexp_rows(self.component_log_density(features)).sum()
        # change of variables from the standardized space
        return float(norm_ll - features.shape[0] * np.log(self.normalizer.scale).sum())

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "L": self.n_components,
            "m": self.dim,
            "seed": self.seed,
            "bic": self.bic,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "normalizer": {"mean": self.normalizer.mean.tolist(), "scale": self.normalizer.scale.tolist()},
            "log_likelihoods": list(self.log_likelihoods),
            "n_reseeds": self.n_reseeds,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GmmModel":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported GMM document version {doc.get('format_version')}")
        norm = Normalizer(np.asarray(doc["normalizer"]["mean"]), np.asarray(doc["normalizer"]["scale"]))
        return cls(
            weights=np.asarray(doc["weights"]),
            means=np.asarray(doc["means"]),
            variances=np.asarray(doc["variances"]),
            normalizer=norm,
            seed=doc["seed"],
            log_likelihoods=list(doc["log_likelihoods"]),
            n_reseeds=doc["n_reseeds"],
            converged=doc["converged"],
            bic=doc["bic"],
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "GmmModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    peak = a.max(axis=1)
    safe = np.where(np.isfinite(peak), peak, 0.0)
    return safe + np.log(np.exp(a - safe[:, None]).sum(axis=1))


def _weighted_log_density(z, weights, means, variances) -> np.ndarray:
    # sum_d (x_d - mu_d)^2 / var_d expanded to avoid an n x L x m temporary
    inv = 1.0 / variances
    maha = (z**2) @ inv.T - 2.0 * z @ (means * inv).T + (means**2 * inv).sum(axis=1)
    log_norm = -0.5 * (z.shape[1] * LOG_2PI + np.log(variances).sum(axis=1))
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return log_w + log_norm - 0.5 * maha


def _kmeanspp_means(z: np.ndarray, n_components: int, rng: np.random.Generator) -> np.ndarray:
    n = z.shape[0]
    centers = [z[rng.integers(n)]]
    closest = ((z - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, n_components):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(z[idx])
        closest = np.minimum(closest, ((z - z[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _em(z: np.ndarray, n_components: int, cfg: GmmConfig, rng: np.random.Generator):
    n = z.shape[0]
    floor = cfg.variance_floor
    weights = np.full(n_components, 1.0 / n_components)
    means = _kmeanspp_means(z, n_components, rng)
    variances = np.tile(np.maximum(z.var(axis=0), floor), (n_components, 1))

    history = []
    reseeds = 0
    converged = False
    for _ in range(cfg.max_iter):
        log_dens = _weighted_log_density(z, weights, means, variances)
        log_norm = _logsumexp_rows(log_dens)
        ll = float(log_norm.sum())
        if history and abs(ll - history[-1]) < cfg.tol:
            history.append(ll)
            converged = True
            break
        history.append(ll)

        resp = np.exp(log_dens - log_norm[:, None])
        mass = resp.sum(axis=0)
        new_weights = mass / n
        new_means = means.copy()
        new_vars = variances.copy()
        alive = mass > 1e-10 * n
        new_means[alive] = (resp[:, alive].T @ z) / mass[alive, None]
        for l in np.flatnonzero(alive):
            diff = z - new_means[l]
            new_vars[l] = np.maximum(resp[:, l] @ diff**2 / mass[l], floor)

        if not alive.all():
            new_weights, new_means, new_vars, accepted = _reseed(
                z, new_weights, new_means, new_vars, ~alive, rng, floor
            )
            reseeds += accepted
        weights, means, variances = new_weights, new_means, new_vars
    return weights, means, variances, history, reseeds, converged


def _reseed(z, weights, means, variances, dead, rng, floor):
    """Move empty components onto random points; keep the move only if it does not lower the likelihood."""
    trial_w, trial_m, trial_v = weights.copy(), means.copy(), variances.copy()
    n = z.shape[0]
    for l in np.flatnonzero(dead):
        trial_m[l] = z[rng.integers(n)]
        trial_v[l] = np.maximum(z.var(axis=0), floor)
        trial_w[l] = 1.0 / n
    trial_w /= trial_w.sum()
    plain_ll = _logsumexp_rows(_weighted_log_density(z, weights, means, variances)).sum()
    trial_ll = _logsumexp_rows(_weighted_log_density(z, trial_w, trial_m, trial_v)).sum()
    if trial_ll >= plain_ll:
        return trial_w, trial_m, trial_v, 1
    return weights, means, variances, 0


def fit_gmm(features: np.ndarray, n_components: int, config: GmmConfig = GmmConfig()) -> GmmModel:
    """Fit an ``n_components`` diagonal mixture by EM on standardized features."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be an n x m matrix")
    n = features.shape[0]
    if n_components < 1:
        raise ValueError("need at least one component")
    if n < n_components:
        raise ValueError(f"{n} rows cannot support {n_components} components")
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite values")

    normalizer = Normalizer.fit(features)
    z = normalizer.transform(features)
    best = None
    for attempt in range(max(config.n_init, 1)):
        rng = np.random.default_rng([config.seed, n_components, attempt])
        result = _em(z, n_components, config, rng)
        if best is None or result[3][-1] > best[3][-1]:
            best = result
    weights, means, variances, history, reseeds, converged = best
    model = GmmModel(
        weights=weights,
        means=means,
        variances=variances,
        normalizer=normalizer,
        seed=config.seed,
        log_likelihoods=history,
        n_reseeds=reseeds,
        converged=converged,
    )
    model.bic = bic(model, features)
    return model


def bic(model: GmmModel, features: np.ndarray) -> float:
    """p ln n - 2 ln L-hat; lower is better."""
    features = np.atleast_2d(features)
    n = features.shape[0]
    return float(model.n_parameters() * np.log(n) - 2.0 * model.log_likelihood(features))


def select_cluster_count(
    features: np.ndarray,
    l_range: Iterable[int],
    config: GmmConfig = GmmConfig(),
    fit: Callable[..., GmmModel] = fit_gmm,
) -> tuple[int, GmmModel]:
    """Fit every L in ``l_range`` once and return the BIC minimizer (smaller L on ties)."""
    candidates = sorted(set(int(l) for l in l_range))
    if not candidates:
        raise ValueError("empty cluster-count range")
    n = np.atleast_2d(features).shape[0]
    best_l, best_model = None, None
    for l in candidates:
        if l > n:
            logger.warning("skipping L=%d: only %d rows", l, n)
            continue
        model = fit(features, l, config)
        logger.info("L=%d BIC=%.3f", l, model.bic)
        if best_model is None or model.bic < best_model.bic:
            best_l, best_model = l, model
    if best_model is None:
        raise ValueError("no cluster count in range fits the data")
    return best_l, best_model


def posterior(model: GmmModel, feature: np.ndarray) -> np.ndarray:
    """Component responsibilities for one feature vector (or rows of a matrix)."""
    feature = np.asarray(feature, dtype=np.float64)
    single = feature.ndim == 1
    rows = np.atleast_2d(feature)
    if rows.shape[1] != model.dim:
        raise ValueError(f"feature dim {rows.shape[1]} != model dim {model.dim}")
    with np.errstate(over="ignore", invalid="ignore"):
        log_dens = model.component_log_density(rows)
    log_dens = np.where(np.isnan(log_dens), -np.inf, log_dens)
    peak = log_dens.max(axis=1)
    out = np.empty_like(log_dens)
    ok = np.isfinite(peak)
    if ok.any():
        shifted = np.exp(log_dens[ok] - peak[ok, None])
        out[ok] = shifted / shifted.sum(axis=1, keepdims=True)
    if not ok.all():
        # every density underflowed: hard-assign to the nearest mean
        z = model.normalizer.transform(rows[~ok])
        diff = (z[:, None, :] - model.means[None]) / np.sqrt(model.variances[None])
        # rescale per row so the squared distances stay finite; argmin is unchanged
        diff /= np.abs(diff).max(axis=(1, 2), keepdims=True)
        maha = (diff**2).sum(axis=2)
        out[~ok] = 0.0
        out[~ok, maha.argmin(axis=1)] = 1.0
    return out[0] if single else out


def assign_relation(weights: np.ndarray) -> int:
    """Index of the most probable component; ties go to the smallest index."""
    return int(np.argmax(np.asarray(weights)))
