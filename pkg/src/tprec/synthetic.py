"""Seasonal shopping simulator used for desk-scale end-to-end runs.

Every (user, item, day) is a Poisson process with rate

    base_rate / n_items * activity[u, season] * taste[u, category(i)] * affinity[i, season] * burst(day)

Items have a home season; categories, brands and also_bought links follow it, and review
words are drawn from a per-season pool plus a generic pool.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .graph import BRAND, CATEGORY, FEATURE, ITEM, USER, EntityId, InteractionRecord, Triple
from .temporal_features import SECONDS_PER_DAY, season_of_month

log = logging.getLogger(__name__)

N_SEASONS = 4
SEASON_LABELS = ("winter", "spring", "summer", "autumn")


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 200
    n_items: int = 100
    horizon_days: int = 730
    start: int = 1_577_836_800  # 2020-01-01 00:00 UTC
    base_rate: float = 0.05  # expected purchases per user-day at unit multipliers
    in_season: float = 4.0  # affinity of an item in its home season
    off_season: float = 0.25
    user_focus: float = 3.0  # activity multiplier of a user's favourite season (others 1)
    festivals: tuple = ((11, 27, 6.0), (12, 24, 3.0))  # (month, day, burst multiplier), every year
    brands_per_season: int = 3
    categories_per_season: int = 2
    words_per_season: int = 6
    generic_words: int = 16
    also_bought_per_item: int = 2
    seed: int = 0
    affinity: Optional[tuple] = field(default=None, compare=False)  # explicit n_items x 4 override

    def __post_init__(self):
        if self.horizon_days < 365:
            raise ValueError("horizon must cover at least one year")
        if min(self.base_rate, self.in_season, self.off_season, self.user_focus) < 0:
            raise ValueError("rates and multipliers must be non-negative")
        if any(m < 0 for _, _, m in self.festivals):
            raise ValueError("festival multipliers must be non-negative")
        if self.n_users < 1 or self.n_items < 1:
            raise ValueError("need at least one user and one item")


@dataclass
class SeasonalWorld:
    """Latent structure behind a synthetic dataset."""

    home_season: np.ndarray  # per item, 0..3
    category: np.ndarray
    brand: np.ndarray
    affinity: np.ndarray  # n_items x 4
    activity: np.ndarray  # n_users x 4
    taste: np.ndarray  # n_users x n_categories
    day_season: np.ndarray  # per day, 0..3
    day_burst: np.ndarray  # per day

    def rates(self, spec: SyntheticSpec, day: int) -> np.ndarray:
        """n_users x n_items Poisson rates on ``day``."""
        s = self.day_season[day]
        return (
            spec.base_rate
            / spec.n_items
            * self.day_burst[day]
            * self.activity[:, s, None]
            * self.taste[:, self.category]
            * self.affinity[None, :, s]
        )


def _calendar(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    seasons = np.empty(spec.horizon_days, dtype=np.int64)
    burst = np.ones(spec.horizon_days)
    fest = {(m, d): mult for m, d, mult in spec.festivals}
    first = dt.datetime.fromtimestamp(spec.start, tz=dt.timezone.utc).date()
    for k in range(spec.horizon_days):
        date = first + dt.timedelta(days=k)
        seasons[k] = season_of_month(date.month) - 1
        burst[k] = fest.get((date.month, date.day), 1.0)
    return seasons, burst


def build_world(spec: SyntheticSpec, rng: np.random.Generator) -> SeasonalWorld:
    home = np.arange(spec.n_items) % N_SEASONS
    rng.shuffle(home)
    category = home * spec.categories_per_season + rng.integers(spec.categories_per_season, size=spec.n_items)
    brand = home * spec.brands_per_season + rng.integers(spec.brands_per_season, size=spec.n_items)
    if spec.affinity is not None:
        affinity = np.asarray(spec.affinity, dtype=float)
        if affinity.shape != (spec.n_items, N_SEASONS) or np.any(affinity < 0):
            raise ValueError("affinity override must be a non-negative n_items x 4 table")
    else:
        affinity = np.where(np.arange(N_SEASONS)[None, :] == home[:, None], spec.in_season, spec.off_season)
    favourite = rng.integers(N_SEASONS, size=spec.n_users)
    activity = np.ones((spec.n_users, N_SEASONS))
    activity[np.arange(spec.n_users), favourite] = spec.user_focus
    activity *= N_SEASONS / activity.sum(axis=1, keepdims=True)
    n_cat = N_SEASONS * spec.categories_per_season
    taste = rng.gamma(1.0, size=(spec.n_users, n_cat))
    taste *= n_cat / taste.sum(axis=1, keepdims=True)
    seasons, burst = _calendar(spec)
    return SeasonalWorld(home, category, brand, affinity, activity, taste, seasons, burst)


def _review_words(spec: SyntheticSpec, season: int, rng: np.random.Generator) -> tuple:
    n = int(rng.integers(1, 4))
    out = []
    for _ in range(n):
        if rng.random() < 0.7:
            out.append(season * spec.words_per_season + int(rng.integers(spec.words_per_season)))
        else:
            out.append(N_SEASONS * spec.words_per_season + int(rng.integers(spec.generic_words)))
    return tuple(sorted(set(out)))


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> tuple[Dataset, SeasonalWorld]:
    rng = np.random.default_rng(spec.seed)
    world = build_world(spec, rng)
    records = []
    for day in range(spec.horizon_days):
        rates = world.rates(spec, day)
        counts = rng.poisson(rates)
        for u, i in zip(*np.nonzero(counts)):
            for _ in range(counts[u, i]):
                ts = spec.start + day * SECONDS_PER_DAY + int(rng.integers(SECONDS_PER_DAY))
                words = _review_words(spec, int(world.home_season[i]), rng)
                records.append(InteractionRecord(int(u), int(i), ts, words))
    records.sort(key=lambda r: (r.timestamp, r.user, r.item))

    kg = []
    for i in range(spec.n_items):
        kg.append(Triple(EntityId(ITEM, i), "belong_to", EntityId(CATEGORY, int(world.category[i]))))
        kg.append(Triple(EntityId(ITEM, i), "produced_by", EntityId(BRAND, int(world.brand[i]))))
        peers = np.flatnonzero((world.home_season == world.home_season[i]) & (np.arange(spec.n_items) != i))
        k = min(spec.also_bought_per_item, len(peers))
        for j in rng.choice(peers, size=k, replace=False) if k else ():
            kg.append(Triple(EntityId(ITEM, i), "also_bought", EntityId(ITEM, int(j))))

    words = [f"{SEASON_LABELS[s]}_{k}" for s in range(N_SEASONS) for k in range(spec.words_per_season)]
    words += [f"generic_{k}" for k in range(spec.generic_words)]
    names = {
        USER: [f"u{k}" for k in range(spec.n_users)],
        ITEM: [f"i{k}" for k in range(spec.n_items)],
        FEATURE: words,
        BRAND: [f"b{k}" for k in range(N_SEASONS * spec.brands_per_season)],
        CATEGORY: [f"c{k}" for k in range(N_SEASONS * spec.categories_per_season)],
    }
    log.info("synthetic log: %d interactions, %d KG triples", len(records), len(kg))
    return Dataset(names, records, kg), world


def season_rate_check(spec: SyntheticSpec, item: int, draws: int = 10_000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Empirical vs expected per-season purchase counts of ``item``, pooled over users.

    Draws ``draws`` random days per season from the horizon and samples the item's Poisson
    counts on them. Returns (empirical mean per day, expected mean per day), each of length 4.
    """
    world = build_world(spec, np.random.default_rng(spec.seed))
    rng = np.random.default_rng(seed)
    per_day = np.array([world.rates(spec, d)[:, item].sum() for d in range(spec.horizon_days)])
    empirical = np.zeros(N_SEASONS)
    expected = np.zeros(N_SEASONS)
    for s in range(N_SEASONS):
        days = np.flatnonzero(world.day_season == s)
        lam = per_day[rng.choice(days, size=draws)]
        empirical[s] = rng.poisson(lam).mean()
        expected[s] = lam.mean()
    return empirical, expected
