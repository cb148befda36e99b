import numpy as np
import pytest

from tprec.time_clustering import (
    GmmConfig,
    GmmModel,
    assign_relation,
    bic,
    fit_gmm,
    posterior,
    select_cluster_count,
)


def two_blobs(seed, n=150):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(0.0, 1.0, n), rng.normal(100.0, 1.0, n)])
    return x[:, None]


def is_monotone(history, tol=1e-9):
    return all(b >= a - tol for a, b in zip(history, history[1:]))


def test_single_component_closed_form():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 3)) * [1.0, 5.0, 0.2] + [3.0, -1.0, 7.0]
    model = fit_gmm(x, 1)
    np.testing.assert_allclose(model.raw_means()[0], x.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(model.raw_variances()[0], x.var(axis=0), rtol=1e-9)
    np.testing.assert_allclose(model.weights, [1.0])


def test_two_blobs_recovered():
    x = two_blobs(0)
    model = fit_gmm(x, 2, GmmConfig(seed=0))
    means = np.sort(model.raw_means()[:, 0])
    assert abs(means[0] - 0.0) < 0.5 and abs(means[1] - 100.0) < 0.5


@pytest.mark.parametrize("seed", range(5))
def test_em_monotone(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(size=(80, 4)), rng.normal(2.0, 0.5, size=(60, 4))])
    for l in (1, 2, 3, 5):
        model = fit_gmm(x, l, GmmConfig(seed=seed))
        assert is_monotone(model.log_likelihoods)
        assert abs(model.weights.sum() - 1.0) < 1e-9
        assert np.all(model.variances >= 1e-6)


def test_too_few_rows():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((2, 3)), 3)


def test_bic_penalty_grows_with_components():
    x = two_blobs(3)
    m2 = fit_gmm(x, 2)
    m3 = fit_gmm(x, 3)
    n = x.shape[0]
    assert m3.n_parameters() * np.log(n) > m2.n_parameters() * np.log(n)
    assert m2.n_parameters() == 2 * (2 * 1 + 1) - 1


def test_bic_formula():
    x = two_blobs(4)
    model = fit_gmm(x, 2)
    expected = model.n_parameters() * np.log(len(x)) - 2 * model.log_likelihood(x)
    assert bic(model, x) == pytest.approx(expected)


def test_select_single_candidate():
    l, model = select_cluster_count(two_blobs(0), [1])
    assert l == 1 and model.n_components == 1


def test_select_two_blobs_and_counter():
    calls = []

    def counting_fit(features, l, cfg):
        calls.append(l)
        return fit_gmm(features, l, cfg)

    l, _ = select_cluster_count(two_blobs(5), range(1, 7), GmmConfig(seed=5), fit=counting_fit)
    assert l == 2
    assert sorted(calls) == [1, 2, 3, 4, 5, 6]


def test_posterior_at_component_mean():
    x = two_blobs(2)
    model = fit_gmm(x, 2)
    raw = model.raw_means()
    for l in range(2):
        assert posterior(model, raw[l])[l] > 0.99


def test_posterior_matches_direct_density():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(120, 3))
    model = fit_gmm(x, 3, GmmConfig(seed=2))
    probe = rng.normal(size=3)
    z = model.normalizer.transform(probe)
    dens = [
        w * np.prod(np.exp(-0.5 * (z - mu) ** 2 / v) / np.sqrt(2 * np.pi * v))
        for w, mu, v in zip(model.weights, model.means, model.variances)
    ]
    np.testing.assert_allclose(posterior(model, probe), np.array(dens) / sum(dens), atol=1e-12)


def test_posterior_rows_sum_to_one():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(100, 5)) * 3
    model = fit_gmm(x, 4)
    w = posterior(model, rng.normal(size=(300, 5)) * 20)
    assert np.all(w >= 0) and np.all(w <= 1)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)
    assert posterior(fit_gmm(x, 1), x[0]).tolist() == [1.0]


def test_posterior_underflow_falls_back_to_nearest_mean():
    model = fit_gmm(two_blobs(0), 2)
    far = np.array([1e200])
    w = posterior(model, far)
    assert sorted(w.tolist()) == [0.0, 1.0]
    assert w[np.argmax(model.raw_means()[:, 0])] == 1.0


def test_assign_relation():
    assert assign_relation([0.1, 0.7, 0.2]) == 1
    assert assign_relation([0.5, 0.5]) == 0


def test_assignment_scale_and_permutation():
    rng = np.random.default_rng(0)
    dens = rng.random(6)
    assert assign_relation(dens) == assign_relation(dens * 17.3)
    x = two_blobs(7)
    model = fit_gmm(x, 2)
    perm = [1, 0]
    swapped = GmmModel(model.weights[perm], model.means[perm], model.variances[perm], model.normalizer)
    for row in x[::25]:
        assert perm[assign_relation(posterior(swapped, row))] == assign_relation(posterior(model, row))


def test_normalizer_round_trip():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 4)) * [1, 1e4, 1e-3, 5] + [1e6, -3, 0, 2]
    model = fit_gmm(x, 2)
    raw = model.raw_means()
    np.testing.assert_allclose(model.normalizer.transform(raw), model.means, atol=1e-9)


def test_deterministic_and_serializable(tmp_path):
    x = two_blobs(1)
    a = fit_gmm(x, 3, GmmConfig(seed=4))
    b = fit_gmm(x, 3, GmmConfig(seed=4))
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(a.variances, b.variances)
    a.save(tmp_path / "gmm.json")
    c = GmmModel.load(tmp_path / "gmm.json")
    np.testing.assert_array_equal(c.means, a.means)
    assert c.bic == a.bic
    np.testing.assert_array_equal(posterior(c, x[:5]), posterior(a, x[:5]))
