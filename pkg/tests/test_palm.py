import math

import numpy as np
import pytest
from scipy import stats

from snakelab.mechanism import BranchingMechanism, UnsupportedMechanism
from snakelab.palm import (
    GraftedForest,
    count_hitting,
    graft,
    last_exit,
    palm_mass_profile,
    positive_stable,
    sample_last_exits,
    sample_spine,
    t_gamma_samples,
    t_gamma_target,
)
from snakelab.trees import sigma_tail

QUAD = BranchingMechanism.quadratic()
STAB = BranchingMechanism.stable(1.5)


def test_spine_quadratic():
    sp = sample_spine(QUAD, 1.0, 1e-3, np.random.default_rng(0), d=4)
    assert np.all(sp.xi[0] == 0)
    assert sp.V[-1] == pytest.approx(2.0, rel=1e-12)
    assert sp.horizon == pytest.approx(1.0)
    assert np.all(np.diff(sp.V) >= 0)


def test_spine_stable_laplace():
    rng = np.random.default_rng(1)
    v = np.array([sample_spine(STAB, 1.0, 0.05, rng, d=4).V[-1] for _ in range(4000)])
    z = np.exp(-v)
    assert abs(z.mean() - math.exp(-1.5)) < 3 * z.std(ddof=1) / math.sqrt(z.size)


def test_positive_stable_laplace():
    # E exp(-s X) = exp(-s^index) for the standard positive stable law
    x = positive_stable(0.5, 200_000, np.random.default_rng(2))
    for s in (0.5, 1.0, 2.0):
        z = np.exp(-s * x)
        assert abs(z.mean() - math.exp(-(s**0.5))) < 3 * z.std(ddof=1) / math.sqrt(z.size)


def test_spine_rejects_tabulated():
    with pytest.raises(UnsupportedMechanism):
        sample_spine(BranchingMechanism.tabulated([(1.0, 1.0)], beta=1.0), 1.0, 0.1, np.random.default_rng(0))


def test_graft_empty_for_huge_truncation():
    rng = np.random.default_rng(3)
    sp = sample_spine(QUAD, 1.0, 1e-2, rng)
    f = graft(sp, QUAD, 1e13, rng)
    assert f.expected_count < 1e-6 and f.count == 0
    prof = palm_mass_profile(f, [0.1, 1.0])
    assert np.all(prof.mass == 0)


def test_graft_count_is_poisson_mean():
    rng = np.random.default_rng(4)
    counts = []
    for _ in range(150):
        sp = sample_spine(QUAD, 1.0, 1e-2, rng)
        f = graft(sp, QUAD, 0.01, rng, n_tree=100)
        counts.append(f.count)
        assert all(0 <= g.time <= 1.0 for g in f.grafts)
        assert all(g.sigma > 0.01 for g in f.grafts)
    counts = np.array(counts)
    mean = 2.0 / math.sqrt(math.pi * 0.01)
    assert abs(counts.mean() - mean) < 3 * math.sqrt(mean / counts.size)


def test_graft_rejects_tiny_truncation():
    rng = np.random.default_rng(5)
    sp = sample_spine(QUAD, 1.0, 1e-2, rng)
    with pytest.raises(ValueError):
        graft(sp, QUAD, 1e-20, rng)


def test_palm_profile_against_rescan():
    rng = np.random.default_rng(6)
    sp = sample_spine(QUAD, 0.05, 1e-4, rng, d=5)
    f = graft(sp, QUAD, 1e-4, rng)
    assert f.count > 0
    r = np.geomspace(1e-3, 1.0, 15)
    prof = palm_mass_profile(f, r)
    brute = np.zeros_like(r)
    for g in f.grafts:
        d = np.linalg.norm(g.snake.path, axis=1)
        brute += np.array([g.occupation.cloud.weights[d <= rk].sum() for rk in r])
    assert np.allclose(prof.mass, brute, rtol=1e-12, atol=0)
    assert np.all(np.diff(prof.mass) >= 0)
    big = palm_mass_profile(f, [1e6])
    assert big.mass[0] == pytest.approx(f.sigma_total, rel=1e-12)
    # restricting to earlier grafts can only lower the mass
    early = palm_mass_profile(f, r, a=0.02)
    assert np.all(early.mass <= prof.mass)


def test_palm_single_graft_total():
    rng = np.random.default_rng(7)
    sp = sample_spine(QUAD, 0.05, 1e-4, rng, d=4)
    f = graft(sp, QUAD, 1e-4, rng)
    one = GraftedForest(f.grafts[:1], f.eps_trunc, f.expected_count, f.horizon)
    assert palm_mass_profile(one, [1e6]).mass[0] == pytest.approx(f.grafts[0].sigma, rel=1e-12)


def test_palm_profiles_exchangeable_given_spine():
    rng = np.random.default_rng(8)
    sp = sample_spine(QUAD, 0.05, 1e-4, rng, d=5)
    a = [palm_mass_profile(graft(sp, QUAD, 1e-4, rng, n_tree=100), [0.1]).mass[0] for _ in range(150)]
    b = [palm_mass_profile(graft(sp, QUAD, 1e-4, rng, n_tree=100), [0.1]).mass[0] for _ in range(150)]
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_count_hitting():
    rng = np.random.default_rng(9)
    sp = sample_spine(QUAD, 0.2, 1e-4, rng, d=5)
    f = graft(sp, QUAD, 1e-4, rng)
    assert count_hitting(f, 1e6, 0.0, 1.0) == sum(1 for g in f.grafts if 0 < g.time < 1)
    far = GraftedForest([g for g in f.grafts if g.min_norm > 0], f.eps_trunc, f.expected_count, f.horizon)
    assert count_hitting(far, 0.0, 0.0, 1.0) == 0
    with pytest.raises(ValueError):
        count_hitting(f, 0.1, 1.0, 0.5)


def test_hitting_probability_trend():
    rng = np.random.default_rng(10)
    radii = [0.1, 0.03, 0.01]
    zero = np.zeros(len(radii))
    n = 80
    for _ in range(n):
        sp = sample_spine(QUAD, 0.3, 1e-4, rng, d=5)
        f = graft(sp, QUAD, 1e-3, rng, n_tree=100)
        for k, r in enumerate(radii):
            zero[k] += count_hitting(f, r, 0.1, 0.3) == 0
    p = zero / n
    assert p[0] <= p[1] <= p[2]


def test_last_exit_properties():
    rng = np.random.default_rng(11)
    sp = sample_spine(QUAD, 4.0, 1e-3, rng, d=4)
    rec = last_exit(sp, [0.0, 0.1, 0.3, 0.6])
    assert rec.theta[0] == 0 and rec.gamma[0] == 0
    assert np.all(np.diff(rec.theta) >= 0) and np.all(np.diff(rec.gamma) >= 0)
    assert np.all(rec.theta <= rec.gamma)


def test_sample_last_exits_monotone_and_one_dim_oracle():
    rng = np.random.default_rng(12)
    ex = sample_last_exits([0.2, 0.5, 1.0], 500, rng)
    assert np.all(np.diff(ex, axis=1) >= 0)
    # 3-d Bessel last exit from B(0, r): E exp(-lam L) = exp(-r sqrt(2 lam))
    z = np.exp(-ex[:, 2])
    assert abs(z.mean() - math.exp(-math.sqrt(2))) < 3 * z.std(ddof=1) / math.sqrt(z.size)


def test_t_gamma_basic():
    rng = np.random.default_rng(13)
    res = t_gamma_samples(QUAD, 4, [0.0, 0.1, 0.2], 200, rng, eps_trunc=1e-4)
    assert np.all(res.samples[:, 0] == 0)
    assert np.all(np.diff(res.samples, axis=1) >= 0)
    with pytest.raises(ValueError):
        t_gamma_samples(QUAD, 3, [0.1], 10, rng)
    assert t_gamma_target(QUAD, 0.5) == pytest.approx(math.exp(-1.0), rel=1e-12)
    # truncation lowers the exponent, so the truncated target is larger
    assert t_gamma_target(QUAD, 0.5, eps_trunc=1e-3) > t_gamma_target(QUAD, 0.5)


def test_sigma_tail_matches_graft_mean():
    assert 2.0 * sigma_tail(QUAD, 0.01) == pytest.approx(2.0 / math.sqrt(math.pi * 0.01))
