import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from snakelab.mechanism import BranchingMechanism, UnsupportedMechanism
from snakelab.packing import ball_masses
from snakelab.trees import (
    HeightExcursion,
    ball_mass,
    contour_from_offspring,
    csbp_from_gw,
    first_hitting,
    laplace_flow,
    occupation_and_range,
    offspring_law,
    sample_durations,
    sample_height_excursion,
    sample_snake,
    sigma_tail,
    snake_paths,
    tree_distance,
    tree_distances_from,
    truncated_duration_exponent,
    uniform_dyck_max,
)

QUAD = BranchingMechanism.quadratic()
STAB = BranchingMechanism.stable(1.5)


def random_excursion(rng, m):
    steps = rng.choice([-1, 1], size=2 * m)
    h = np.concatenate([[0], np.cumsum(steps)])
    h = np.abs(h) + 1
    h[0] = h[-1] = 0
    return h.astype(float)


@pytest.mark.parametrize("mech", [QUAD, STAB], ids=["quadratic", "stable"])
def test_excursion_invariants(mech):
    rng = np.random.default_rng(1)
    exc = sample_height_excursion(mech, 100, rng)
    H = exc.heights
    assert H[0] == 0 and H[-1] == 0 and np.all(H[1:-1] > 0)
    assert np.all(np.abs(np.diff(H)) <= exc.provenance["height_step"] * (1 + 1e-12))
    k = exc.provenance["vertices"]
    assert 101 <= k <= 201
    # duration is a fixed multiple of the vertex count
    assert exc.sigma == pytest.approx((k - 1) / (100 * exc.provenance["time_change"]), rel=1e-12)


def test_excursion_sigma_exact_and_floor():
    rng = np.random.default_rng(2)
    assert sample_height_excursion(QUAD, 200, rng, sigma=0.37).sigma == pytest.approx(0.37, rel=1e-12)
    exc = sample_height_excursion(QUAD, 100, rng, sigma_floor=1.4)
    assert exc.sigma > 1.4
    with pytest.raises(ValueError):
        sample_height_excursion(QUAD, 50, rng)


def test_contour_small_tree():
    # root with two children, the first of which has one child
    offs = np.array([2, 1, 0, 0])
    assert contour_from_offspring(offs).tolist() == [0, 1, 2, 3, 2, 1, 2, 1, 0]


def test_max_height_matches_dyck_oracle():
    # geometric(1/2) trees of fixed size are uniform, so their contours are uniform Dyck paths
    rng = np.random.default_rng(11)
    gw, oracle = [], []
    for _ in range(200):
        exc = sample_height_excursion(QUAD, 10_000, rng)
        steps = exc.heights / exc.provenance["height_step"]
        gw.append(steps.max())
        oracle.append(1 + uniform_dyck_max(exc.provenance["vertices"] - 2, rng))
    gw, oracle = np.array(gw), np.array(oracle)
    se = math.sqrt(gw.var(ddof=1) / gw.size + oracle.var(ddof=1) / oracle.size)
    assert abs(gw.mean() - oracle.mean()) < 3 * se


def test_stable_offspring_law_is_critical():
    law = offspring_law(STAB)
    x = law.sample(np.random.default_rng(0), 2_000_000)
    # heavy tail: compare the truncated mean with its exact value
    k = np.arange(1, 10_001)
    table = np.diff(np.concatenate([[0.0], law.table[:10_001]]))
    assert np.mean(np.where(x <= 10_000, x, 0)) == pytest.approx(float(table @ np.concatenate([[0], k])), rel=0.02)
    with pytest.raises(UnsupportedMechanism):
        offspring_law(BranchingMechanism(alpha=1.0, beta=1.0))


@given(st.integers(0, 10_000))
def test_tree_distance_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    H = random_excursion(rng, 200)
    for _ in range(30):
        s, t, u = rng.integers(0, H.size, 3)
        assert tree_distance(H, s, t) == tree_distance(H, t, s)
        assert tree_distance(H, s, s) == 0
        assert tree_distance(H, s, t) >= 0
        assert tree_distance(H, s, u) <= tree_distance(H, s, t) + tree_distance(H, t, u) + 1e-12


def test_tree_distance_monotone_segment():
    H = np.array([0.0, 1.0, 2.0, 3.5, 4.0, 0.0])
    assert tree_distance(H, 1, 4) == pytest.approx(3.0)


@given(st.integers(0, 10_000))
def test_distances_from_and_ball_mass_brute_force(seed):
    rng = np.random.default_rng(seed)
    H = random_excursion(rng, 300) * 0.1
    exc = HeightExcursion(H, 0.01, {})
    t = int(rng.integers(0, H.size))
    brute = np.array([tree_distance(H, s, t) for s in range(H.size)])
    assert np.allclose(tree_distances_from(H, t), brute, atol=1e-12)
    r = np.sort(rng.random(4) * H.max())
    assert np.allclose(ball_mass(exc, t, r), exc.grid_weight * (brute[:, None] <= r[None, :]).sum(axis=0))
    assert ball_mass(exc, t, 2 * H.max()) == pytest.approx(exc.grid_weight * H.size)
    assert np.all(np.diff(ball_mass(exc, t, np.linspace(0, H.max(), 20))) >= 0)


def test_snake_on_zero_heights_is_constant():
    exc = HeightExcursion(np.zeros(50), 0.1, {})
    snake = sample_snake(exc, np.array([1.0, -2.0]), 2, np.random.default_rng(0))
    assert np.all(snake.path == np.array([1.0, -2.0]))


def test_snake_starts_at_origin_and_coordinates_uncorrelated():
    rng = np.random.default_rng(4)
    exc = sample_height_excursion(QUAD, 300, rng)
    paths = snake_paths(exc.heights, np.zeros(3), 3, rng, replicas=4000)
    assert np.all(paths[:, 0, :] == 0)
    s, t = 10, exc.heights.size // 2
    inc = paths[:, t, :] - paths[:, s, :]
    for a, b in ((0, 1), (0, 2), (1, 2)):
        x, y = inc[:, a], inc[:, b]
        prod = x * y
        assert abs(prod.mean()) < 3 * prod.std(ddof=1) / math.sqrt(prod.size)


def test_snake_covariance_small():
    rng = np.random.default_rng(7)
    exc = sample_height_excursion(QUAD, 200, rng)
    paths = snake_paths(exc.heights, np.zeros(1), 1, rng, replicas=20_000)
    for s, t in ((5, 60), (30, 31), (0, exc.heights.size - 1), (40, 200)):
        v = np.var(paths[:, t, 0] - paths[:, s, 0])
        d = tree_distance(exc.heights, s, t)
        assert v == pytest.approx(d, rel=0.05, abs=1e-12)


def test_occupation_cloud():
    rng = np.random.default_rng(5)
    exc = sample_height_excursion(QUAD, 150, rng)
    snake = sample_snake(exc, np.zeros(2), 2, rng)
    occ = occupation_and_range(snake)
    assert occ.cloud.total_mass == pytest.approx(exc.sigma, rel=1e-12)
    # ball mass from the cloud equals the grid time-integral count
    x, r = snake.path[17], 0.05
    direct = exc.grid_weight * np.sum(np.linalg.norm(snake.path - x, axis=1) <= r)
    assert ball_masses(occ.cloud, x, [r])[0] == pytest.approx(direct, rel=1e-12)
    const = occupation_and_range(sample_snake(HeightExcursion(np.zeros(9), 0.5, {}), np.ones(2), 2, rng))
    assert const.range_points.shape[0] == 1 and const.cloud.total_mass == pytest.approx(4.0)


def test_first_hitting():
    rng = np.random.default_rng(6)
    exc = sample_height_excursion(QUAD, 150, rng)
    snake = sample_snake(exc, np.zeros(2), 2, rng)
    assert first_hitting(snake, np.zeros(2), 0.1) == 0
    assert first_hitting(snake, np.array([1e3, 0.0]), 1.0) is None
    c = snake.path[40] + 0.01
    hit = first_hitting(snake, c, 0.02)
    scan = np.flatnonzero(np.linalg.norm(snake.path - c, axis=1) <= 0.02)
    assert hit == scan[0]


def test_csbp_zero_and_absorption():
    rng = np.random.default_rng(8)
    z = csbp_from_gw(QUAD, 0.0, 1.0, 100, rng, replicas=3)
    assert np.all(z.values == 0)
    p = csbp_from_gw(QUAD, 0.05, 3.0, 100, rng, replicas=200)
    for row in p.values:
        zero = np.flatnonzero(row == 0)
        if zero.size:
            assert np.all(row[zero[0]:] == 0)


def test_csbp_quadratic_laplace():
    rng = np.random.default_rng(9)
    p = csbp_from_gw(QUAD, 1.0, 1.0, 2000, rng, replicas=2000)
    z = np.exp(-p.values[:, -1])
    target = math.exp(-1.0 / 2.0)
    assert abs(z.mean() - target) < 3 * z.std(ddof=1) / math.sqrt(z.size)


def test_laplace_flow_closed_form():
    for lam, t in ((1.0, 1.0), (3.0, 0.2), (0.5, 5.0)):
        assert laplace_flow(QUAD, lam, t) == pytest.approx(lam / (1 + lam * t), rel=1e-10)
    # stable 1.5: u^{-1/2} grows linearly at rate 1/2
    assert laplace_flow(STAB, 4.0, 2.0) == pytest.approx((0.5 + 1.0) ** -2, rel=1e-10)


def test_sigma_tail_values():
    assert sigma_tail(QUAD, 1.0) == pytest.approx(1 / math.sqrt(math.pi), rel=1e-14)
    t = np.geomspace(1e-3, 1e3, 20)
    assert np.all(np.diff(sigma_tail(STAB, t)) < 0)
    with pytest.raises(UnsupportedMechanism):
        sigma_tail(BranchingMechanism(alpha=1.0, beta=1.0), 1.0)


@pytest.mark.parametrize("mech,expect", [(QUAD, 1.0), (STAB, 1.0)], ids=["quadratic", "stable"])
def test_sigma_tail_reproduces_psi_inverse(mech, expect):
    # int (1 - e^{-lam s}) N(sigma in ds) = psi^{-1}(lam), with lam = 1
    h = 1e-7
    dens = lambda s: -(sigma_tail(mech, s + h) - sigma_tail(mech, s - h)) / (2 * h) if s > 10 * h else None
    a = 0.5 if mech is QUAD else 1 / 1.5
    k = sigma_tail(mech, 1.0)
    f = lambda s: -math.expm1(-s) * k * a * s ** (-a - 1)
    val = integrate.quad(f, 0, 1, limit=200)[0] + integrate.quad(f, 1, math.inf, limit=200)[0]
    assert val == pytest.approx(expect, rel=1e-6)
    assert dens(2.0) == pytest.approx(k * a * 2.0 ** (-a - 1), rel=1e-5)
    assert truncated_duration_exponent(mech, 1.0, 1e-12) == pytest.approx(expect, rel=1e-4)


def test_sample_durations_tail():
    rng = np.random.default_rng(10)
    x = sample_durations(QUAD, 0.01, 200_000, rng)
    assert x.min() > 0.01
    # P(sigma > 0.04 | sigma > 0.01) = (0.04/0.01)^{-1/2}
    p = np.mean(x > 0.04)
    assert p == pytest.approx(0.5, abs=4 * math.sqrt(0.25 / x.size))
