import numpy as np
import pytest
from scipy import stats

from pshurdle.exceptions import InvalidArgumentError
from pshurdle.grid import build_grid, build_precision, projection_matrix, reparam_interpretable_to_internal
from pshurdle.likelihood import HyperParams
from pshurdle.simulate import (
    SCENARIOS,
    ScenarioConfig,
    link_fields,
    make_scenario,
    make_truth,
    sample_gmrf,
    sample_hpp,
    sample_hurdle,
    sample_ipp,
)


@pytest.fixture(scope="module")
def grid60():
    return build_grid(60, 60)


@pytest.fixture(scope="module")
def truth60(grid60):
    return make_truth(ScenarioConfig.preset(3, seed=99), grid60)


def test_presets():
    assert SCENARIOS == {1: (0, 2), 2: (1, 0.5), 3: (1, 1), 4: (1, 2), 5: (2, 0)}
    cfg = ScenarioConfig.preset(5)
    assert (cfg.beta_prime, cfg.beta) == (2, 0)
    with pytest.raises(InvalidArgumentError):
        ScenarioConfig.preset(6)


def test_gmrf_deterministic():
    q = build_precision(build_grid(10, 10), reparam_interpretable_to_internal(0.3, 1.0))
    np.testing.assert_array_equal(sample_gmrf(q, 4), sample_gmrf(q, 4))
    assert not np.array_equal(sample_gmrf(q, 4), sample_gmrf(q, 5))


def test_gmrf_interior_variance_and_correlation():
    # 20 x 20 block inside a 10-node pad, unit sd, range of exactly 8 lattice steps
    lag, n, pad = 8, 40, 10
    h = 0.15 / lag
    g = build_grid(n, n, (0.0, (n - 1) * h, 0.0, (n - 1) * h))
    q = build_precision(g, reparam_interpretable_to_internal(0.15, 1.0))
    rng = np.random.default_rng(31)
    draws = np.array([sample_gmrf(q, rng) for _ in range(500)]).reshape(500, n, n)
    inner = draws[:, pad:pad + 20, pad:pad + 20]
    var = np.mean(inner**2)
    assert 0.85 <= var <= 1.15
    corr = 0.5 * (np.mean(inner[:, :, :-lag] * inner[:, :, lag:])
                  + np.mean(inner[:, :-lag, :] * inner[:, lag:, :])) / var
    assert 0.09 <= corr <= 0.19


def test_links():
    pi, mu = link_fields(0.0, 0.0, [0.0, np.log(3)], [0.0, 0.0])
    np.testing.assert_allclose(pi, [0.5, 0.75], rtol=1e-15)
    np.testing.assert_array_equal(mu, [1.0, 1.0])


def test_hurdle_structural_zeros():
    z, y, s = sample_hurdle(np.zeros(100), np.full(100, 3.0), 1.0, 0)
    assert np.all(s == 0) and np.all(z == 0)
    assert np.all(y > 0)


def test_hurdle_gamma_moments():
    _, y, _ = sample_hurdle(np.ones(200_000), np.full(200_000, 2.0), 1.0, 1)
    # shape 4, scale 0.5: mean 2, variance 1
    assert y.mean() == pytest.approx(2.0, abs=0.01)
    assert y.var() == pytest.approx(1.0, abs=0.02)
    assert stats.kstest(y[:5000], stats.gamma(a=4, scale=0.5).cdf).pvalue > 0.001


def test_hurdle_mean_of_s():
    _, _, s = sample_hurdle(np.full(100_000, 0.5), np.full(100_000, 4.0), 1.0, 2)
    assert 1.9 <= s.mean() <= 2.1


def test_hurdle_rejects_bad_upsilon():
    with pytest.raises(InvalidArgumentError):
        sample_hurdle([0.5], [1.0], 0.0, 0)


def test_hpp_empty_and_deterministic():
    g = build_grid(5, 5)
    assert sample_hpp(0, g, 0).shape == (0, 2)
    np.testing.assert_array_equal(sample_hpp(20, g, 3), sample_hpp(20, g, 3))


def test_hpp_quadrants():
    pts = sample_hpp(10_000, build_grid(5, 5), 8)
    counts = np.histogram2d(pts[:, 0], pts[:, 1], bins=2, range=[[0, 1], [0, 1]])[0].ravel()
    assert np.all(np.abs(counts - 2500) <= 150)


def _quadrant_counts(pts):
    return np.histogram2d(pts[:, 0], pts[:, 1], bins=4, range=[[0, 1], [0, 1]])[0].ravel()


def test_ipp_without_preference_matches_hpp(grid60, truth60):
    theta = HyperParams()
    pvals = []
    for seed in range(50):
        a = _quadrant_counts(sample_hpp(400, grid60, seed))
        b = _quadrant_counts(sample_ipp(400, truth60.v_field, truth60.u_field, theta, grid60, 1000 + seed))
        pvals.append(stats.chi2_contingency(np.vstack([a, b]))[1])
    assert stats.combine_pvalues(pvals).pvalue > 0.01


def test_ipp_strong_preference_top_quartile(grid60, truth60):
    u = truth60.u_field
    top = u >= np.quantile(u, 0.75)
    theta = HyperParams(beta=5.0)
    # exact multinomial mass of the top quartile under the normalized intensity
    w = np.exp(5 * (u - u.max())) * grid60.node_weights
    mass = w[top].sum() / w.sum()
    assert mass > 0.8
    for replace in (True, False):
        pts = sample_ipp(500, np.zeros_like(u), u, theta, grid60, 7, replace=replace)
        share = top[grid60.nearest_node(pts)].mean()
        assert share >= 0.8


def test_ipp_with_replacement_matches_multinomial(grid60, truth60):
    u = truth60.u_field
    theta = HyperParams(beta=1.0)
    w = np.exp(u - u.max()) * grid60.node_weights
    p_top = (w[u >= np.median(u)]).sum() / w.sum()
    pts = sample_ipp(20_000, np.zeros_like(u), u, theta, grid60, 3, replace=True)
    share = (u >= np.median(u))[grid60.nearest_node(pts)].mean()
    assert abs(share - p_top) < 4 * np.sqrt(p_top * (1 - p_top) / 20_000)


def test_ipp_points_stay_in_cells(grid60, truth60):
    pts = sample_ipp(300, truth60.v_field, truth60.u_field, HyperParams(beta=1.0), grid60, 1)
    assert np.all(grid60.contains(pts))


def test_ipp_monotone_in_beta(grid60, truth60):
    v, u = truth60.v_field, truth60.u_field
    means = []
    for beta in (0.0, 0.5, 1.0, 2.0):
        vals = [projection_matrix(grid60, sample_ipp(100, v, u, HyperParams(beta=beta), grid60, s)) @ u
                for s in range(50)]
        means.append(np.mean([x.mean() for x in vals]))
    assert np.all(np.diff(means) > 0)


def test_ipp_larger_sample_reaches_lower_biomass(grid60, truth60):
    v, u = truth60.v_field, truth60.u_field
    theta = HyperParams(beta_prime=1.0, beta=1.0)
    s = truth60.s_field
    small = np.mean([s[grid60.nearest_node(sample_ipp(100, v, u, theta, grid60, k))].mean() for k in range(20)])
    large = np.mean([s[grid60.nearest_node(sample_ipp(500, v, u, theta, grid60, k))].mean() for k in range(20)])
    assert large < small


def test_ipp_negative_count():
    g = build_grid(3, 3)
    with pytest.raises(InvalidArgumentError):
        sample_ipp(-1, np.zeros(9), np.zeros(9), HyperParams(), g, 0)


def test_make_scenario_bookkeeping(grid60):
    cfg = ScenarioConfig.preset(4, n_s=100, n_c=100, seed=17)
    truth, data = make_scenario(cfg, grid60)
    assert len(data) == 200 and data.n_fid == 100 and data.n_fdd == 100
    assert np.all(np.isnan(data.y[data.z == 0]))
    assert np.all(data.y[data.z == 1] > 0)
    # truth invariants hold exactly
    pi, mu = link_fields(cfg.alpha_prime, cfg.alpha, truth.v_field, truth.u_field)
    np.testing.assert_array_equal(truth.pi_field, pi)
    np.testing.assert_array_equal(truth.mu_field, mu)
    np.testing.assert_array_equal(truth.s_field, truth.z_field * truth.y_field)
    assert np.all(truth.s_field[truth.z_field == 0] == 0)
    # presence at a site is the truth's nearest-node presence
    np.testing.assert_array_equal(data.z, truth.z_field[grid60.nearest_node(data.locations)])


def test_make_scenario_deterministic():
    g = build_grid(20, 20)
    cfg = ScenarioConfig.preset(2, n_s=30, n_c=50, seed=123)
    _, a = make_scenario(cfg, g)
    _, b = make_scenario(cfg, g)
    for name in ("locations", "z", "y", "is_fdd", "vessel_id"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    _, c = make_scenario(cfg.with_seed(124), g)
    assert not np.array_equal(a.locations, c.locations)


def test_scenario4_fdd_presence_exceeds_fid(grid60):
    fid, fdd = [], []
    for rep in range(20):
        _, data = make_scenario(ScenarioConfig.preset(4, n_s=100, n_c=100, seed=500 + rep), grid60)
        zs = data.zero_summary()
        fid.append(zs["FID"]["positive_share"])
        fdd.append(zs["FDD"]["positive_share"])
    assert np.mean(fdd) > np.mean(fid)
