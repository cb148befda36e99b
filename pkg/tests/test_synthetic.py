import numpy as np
import pytest

from tprec.graph import ITEM
from tprec.synthetic import N_SEASONS, SyntheticSpec, build_world, generate_synthetic, season_rate_check
from tprec.temporal_features import day_index, season_of_month, utc_date

SMALL = dict(n_users=30, n_items=20, horizon_days=400)


def test_zero_multipliers_give_empty_log():
    ds, _ = generate_synthetic(SyntheticSpec(in_season=0.0, off_season=0.0, **SMALL))
    assert ds.interactions == []
    ds, _ = generate_synthetic(SyntheticSpec(base_rate=0.0, **SMALL))
    assert ds.interactions == []


def test_fixed_seed_is_reproducible():
    a, _ = generate_synthetic(SyntheticSpec(seed=3, **SMALL))
    b, _ = generate_synthetic(SyntheticSpec(seed=3, **SMALL))
    c, _ = generate_synthetic(SyntheticSpec(seed=4, **SMALL))
    assert a.interactions == b.interactions and a.kg == b.kg
    assert a.interactions != c.interactions


class TestSeasonalRates:
    def setup_method(self):
        self.spec = SyntheticSpec(**SMALL)
        self.world = build_world(self.spec, np.random.default_rng(self.spec.seed))

    def test_winter_item_sells_more_in_winter(self):
        item = int(np.flatnonzero(self.world.home_season == 0)[0])
        empirical, expected = season_rate_check(self.spec, item, draws=10_000)
        assert empirical[0] > empirical[2]
        assert expected[0] > expected[2]

    @pytest.mark.parametrize("season", range(N_SEASONS))
    def test_empirical_matches_rates(self, season):
        item = int(np.flatnonzero(self.world.home_season == season)[0])
        empirical, expected = season_rate_check(self.spec, item, draws=10_000, seed=season)
        # Poisson mixture: the variance of the mean is at most (E[lam] + Var[lam]) / n; 5 sigma band
        sigma = np.sqrt(expected * 2 / 10_000) + 1e-12
        assert np.all(np.abs(empirical - expected) < 5 * sigma + 1e-3)

    def test_rates_follow_the_formula(self):
        day = 40
        s = self.world.day_season[day]
        rates = self.world.rates(self.spec, day)
        u, i = 3, 7
        want = (
            self.spec.base_rate
            / self.spec.n_items
            * self.world.day_burst[day]
            * self.world.activity[u, s]
            * self.world.taste[u, self.world.category[i]]
            * self.world.affinity[i, s]
        )
        assert rates[u, i] == pytest.approx(want)

    def test_festival_days_burst(self):
        spec = SyntheticSpec(festivals=((1, 5, 7.0),), **SMALL)
        world = build_world(spec, np.random.default_rng(0))
        assert world.day_burst[4] == 7.0 and world.day_burst[370] == 7.0  # 2020 is a leap year
        assert np.count_nonzero(world.day_burst != 1.0) == 2


def test_log_shape_and_kg_correlation():
    spec = SyntheticSpec(**SMALL)
    ds, world = generate_synthetic(spec)
    ts = [r.timestamp for r in ds.interactions]
    assert ts == sorted(ts)
    assert min(ts) >= spec.start and max(ts) < spec.start + spec.horizon_days * 86_400
    for r in ds.interactions:
        assert 0 <= r.user < spec.n_users and 0 <= r.item < spec.n_items and r.words
    # every KG edge stays within one home season
    for t in ds.kg:
        if t.relation == "also_bought":
            assert world.home_season[t.head.index] == world.home_season[t.tail.index]
        if t.relation == "belong_to":
            assert t.tail.index // spec.categories_per_season == world.home_season[t.head.index]
    assert {t.head.type for t in ds.kg} == {ITEM}


def test_purchases_concentrate_in_home_season():
    spec = SyntheticSpec(**SMALL)
    ds, world = generate_synthetic(spec)
    hits = sum(world.home_season[r.item] == season_of_month(utc_date(r.timestamp).month) - 1 for r in ds.interactions)
    assert hits / len(ds.interactions) > 0.6
    assert all(day_index(r.timestamp) >= day_index(spec.start) for r in ds.interactions)


@pytest.mark.parametrize("bad", [dict(horizon_days=100), dict(base_rate=-1.0), dict(festivals=((1, 1, -2.0),))])
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        SyntheticSpec(**bad)
