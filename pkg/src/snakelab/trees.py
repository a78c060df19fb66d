"""Galton-Watson height excursions, tree geometry, snakes and CSBP paths.

Scaling conventions
-------------------
A critical offspring law whose Lukasiewicz walk converges, after dividing
``n`` steps by ``n**(1/gamma)``, to the spectrally positive Levy process with
exponent ``c_X * lam**gamma`` is matched to a target ``c * lam**gamma`` by the
time change ``b = c / c_X``. With ``n`` vertices per unit of Levy time before
that change, one vertex lasts ``1/(n b)`` and one generation of height is
``n**(1/gamma - 1) / b``. The contour visits every vertex twice, so a contour
step lasts ``1/(2 n b)``.

Quadratic mechanisms use geometric(1/2) offspring, variance 2, so
``c_X = 1``. The stable law is ``P(k) = k**(-1-gamma) / zeta(gamma)`` for
``k >= 1`` with the remaining mass at 0. Its tail gives
``c_X = Gamma(-gamma) / zeta(gamma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .mechanism import BranchingMechanism, UnsupportedMechanism
from .packing import PointCloud

REJECTION_BUDGET = 100_000
POPULATION_CAP = 100_000_000


# ---------------------------------------------------------------------------
# offspring laws


@dataclass(frozen=True)
class OffspringLaw:
    name: str
    index: float  # 2 for finite variance, gamma for the stable law
    c_levy: float  # Laplace-exponent constant of the limiting Levy process
    table: np.ndarray | None = field(default=None, repr=False, compare=False)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.name == "geometric":
            return rng.geometric(0.5, size) - 1
        return _sample_table(self.table, self.index, rng, size)

    def sum_of(self, rng: np.random.Generator, counts: np.ndarray) -> np.ndarray:
        """Total offspring of ``counts[i]`` independent individuals, per i."""
        counts = np.asarray(counts, dtype=np.int64)
        if self.name == "geometric":
            out = np.zeros_like(counts)
            pos = counts > 0
            out[pos] = rng.negative_binomial(counts[pos], 0.5)
            return out
        return _sum_table(self.table, self.index, rng, counts)


_TABLE_SIZE = 1 << 16


def _stable_table(gamma: float) -> np.ndarray:
    """CDF over k = 0.._TABLE_SIZE of the discretised stable offspring law."""
    k = np.arange(1, _TABLE_SIZE + 1, dtype=float)
    z = special.zeta(gamma, 1)
    pk = k ** (-1.0 - gamma) / z
    p0 = 1.0 - special.zeta(1.0 + gamma, 1) / z
    return np.cumsum(np.concatenate([[p0], pk]))


def _tail_draw(gamma: float, rng: np.random.Generator, size: int) -> np.ndarray:
    # beyond the table, k^{-1-gamma} is replaced by its continuous Pareto analogue
    u = rng.random(size)
    return np.floor((_TABLE_SIZE + 0.5) * u ** (-1.0 / gamma) + 0.5).astype(np.int64)


def _sample_table(cdf: np.ndarray, gamma: float, rng: np.random.Generator, size: int) -> np.ndarray:
    u = rng.random(size)
    k = np.searchsorted(cdf, u, side="right").astype(np.int64)
    over = k > _TABLE_SIZE
    if np.any(over):
        k[over] = _tail_draw(gamma, rng, int(over.sum()))
    return k


def _sum_table(cdf: np.ndarray, gamma: float, rng: np.random.Generator, counts: np.ndarray) -> np.ndarray:
    """Offspring totals via multinomial counts of the values 0..K and
    individual draws above K."""
    total = int(counts.sum())
    if total > POPULATION_CAP:
        raise OverflowError(f"population {total} exceeds the cap {POPULATION_CAP}")
    k0 = 256
    pvals = np.diff(np.concatenate([[0.0], cdf[: k0 + 1]]))
    pvals = np.concatenate([pvals, [1.0 - cdf[k0]]])
    m = rng.multinomial(counts, pvals)
    out = m[:, : k0 + 1] @ np.arange(k0 + 1, dtype=np.int64)
    n_big = m[:, -1]
    if n_big.sum():
        u = cdf[k0] + (1.0 - cdf[k0]) * rng.random(int(n_big.sum()))
        k = np.searchsorted(cdf, u, side="right").astype(np.int64)
        over = k > _TABLE_SIZE
        if np.any(over):
            k[over] = _tail_draw(gamma, rng, int(over.sum()))
        k = np.maximum(k, k0 + 1)
        out = out + np.bincount(np.repeat(np.arange(counts.size), n_big), weights=k, minlength=counts.size).astype(np.int64)
    return out


def offspring_law(mech: BranchingMechanism) -> OffspringLaw:
    if mech.is_pure_quadratic:
        return OffspringLaw("geometric", 2.0, 1.0)
    if mech.is_pure_stable:
        g = mech.levy.gamma
        c_x = special.gamma(-g) / special.zeta(g, 1)
        return OffspringLaw(f"stable({g})", g, float(c_x), _stable_table(g))
    raise UnsupportedMechanism("tree samplers cover pure quadratic and pure stable mechanisms")


def _target_c(mech: BranchingMechanism) -> float:
    return mech.beta if mech.is_pure_quadratic else mech.levy.c


def time_change(mech: BranchingMechanism, law: OffspringLaw) -> float:
    return _target_c(mech) / law.c_levy


# ---------------------------------------------------------------------------
# excursions


@dataclass
class HeightExcursion:
    heights: np.ndarray  # on the uniform grid i * dt, i = 0..m
    dt: float
    provenance: dict

    @property
    def sigma(self) -> float:
        return (self.heights.size - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.heights.size) * self.dt

    @property
    def grid_count(self) -> int:
        return self.heights.size

    @property
    def grid_weight(self) -> float:
        return self.sigma / self.heights.size

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,H\n")
            for t, h in zip(self.times, self.heights):
                fh.write(f"{t!r},{h!r}\n")


def _forest_tree_sizes(steps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start offsets and sizes of the consecutive trees coded by one
    Lukasiewicz sequence (complete trees only)."""
    s = np.concatenate([[0], np.cumsum(steps)])
    running_min = np.minimum.accumulate(s)
    # tree boundaries: first visits of new minima -1, -2, ...
    ends = np.flatnonzero(np.diff(running_min) < 0)
    starts = np.concatenate([[0], ends[:-1] + 1])
    return starts, ends - starts + 1


def _draw_tree(law: OffspringLaw, n_lo: int, n_hi: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Offspring counts (depth-first order) of a tree with n_lo <= size <= n_hi."""
    tries = 0
    chunk = max(16 * n_hi, 1 << 16)
    carry = np.empty(0, dtype=np.int64)
    while True:
        offs = np.concatenate([carry, law.sample(rng, chunk)])
        starts, sizes = _forest_tree_sizes(offs - 1)
        ok = np.flatnonzero((sizes >= n_lo) & (sizes <= n_hi))
        if ok.size:
            j = ok[0]
            tries += j + 1
            if tries > REJECTION_BUDGET:
                break
            a = starts[j]
            return offs[a : a + sizes[j]], tries
        tries += sizes.size
        if tries > REJECTION_BUDGET:
            break
        done = starts[-1] + sizes[-1] if sizes.size else 0
        carry = offs[done:]
        if carry.size > n_hi:  # unfinished tree already too large: drop it
            carry = np.empty(0, dtype=np.int64)
            tries += 1
    raise RuntimeError(f"rejection budget of {REJECTION_BUDGET} trees exhausted")


def contour_from_offspring(offspring: np.ndarray) -> np.ndarray:
    """Integer contour of the planted tree: 0, 1, ..., 1, 0 with 2k+1 entries."""
    k = offspring.size
    out = np.empty(2 * k + 1, dtype=np.int64)
    out[0] = 0
    pos = 1
    depth = 1
    out[pos] = depth
    pos += 1
    stack = [int(offspring[0])]
    nxt = 1
    off = offspring.tolist()
    while stack:
        if stack[-1] > 0:
            stack[-1] -= 1
            depth += 1
            stack.append(off[nxt])
            nxt += 1
        else:
            stack.pop()
            depth -= 1
        out[pos] = depth
        pos += 1
    return out


def sample_height_excursion(
    mech: BranchingMechanism,
    n_target: int,
    rng: np.random.Generator,
    sigma_floor: float | None = None,
    sigma: float | None = None,
) -> HeightExcursion:
    """Scaled contour of a Galton-Watson tree with n_target..2 n_target vertices.

    The tree is planted on an extra root edge so the excursion is strictly
    positive inside. By default one vertex lasts ``1/(n_target b)``. Passing
    ``sigma`` rescales time and height together so that the duration equals
    sigma exactly. ``sigma_floor`` resamples until the duration exceeds it.
    """
    if n_target < 100:
        raise ValueError("n_target must be at least 100")
    law = offspring_law(mech)
    b = time_change(mech, law)
    total_tries = 0
    while True:
        offs, tries = _draw_tree(law, n_target, 2 * n_target, rng)
        total_tries += tries
        k = offs.size + 1  # planted root included
        # the contour has 2 (k - 1) steps, so the duration is (k - 1) / (norm b)
        norm = n_target if sigma is None else (k - 1) / (sigma * b)
        dt = 1.0 / (2.0 * norm * b)
        dh = norm ** (1.0 / law.index - 1.0) / b
        contour = contour_from_offspring(offs)
        exc = HeightExcursion(
            contour * dh,
            dt,
            {
                "offspring_law": law.name,
                "vertices": int(k),
                "normalisation": float(norm),
                "time_change": float(b),
                "c_levy_limit": law.c_levy,
                "height_step": float(dh),
                "time_step": float(dt),
                "trees_examined": int(total_tries),
            },
        )
        if sigma_floor is None or exc.sigma > sigma_floor:
            return exc
        if total_tries > REJECTION_BUDGET:
            raise RuntimeError("rejection budget exhausted while enforcing sigma_floor")


def uniform_dyck_max(m: int, rng: np.random.Generator) -> int:
    """Maximum of a uniform Dyck path with 2m steps (cycle lemma)."""
    steps = np.concatenate([np.ones(m, dtype=np.int64), -np.ones(m + 1, dtype=np.int64)])
    rng.shuffle(steps)
    s = np.cumsum(steps)
    cut = int(np.argmin(s)) + 1  # first minimum
    rot = np.concatenate([steps[cut:], steps[:cut]])[:-1]
    return int(np.cumsum(rot).max()) if m > 0 else 0


# ---------------------------------------------------------------------------
# tree geometry


def tree_distance(H: np.ndarray, s: int, t: int) -> float:
    lo, hi = (s, t) if s <= t else (t, s)
    return float(H[s] + H[t] - 2.0 * H[lo : hi + 1].min())


def tree_distances_from(H: np.ndarray, t: int) -> np.ndarray:
    """d(s, t) for every grid index s, via running minima."""
    H = np.asarray(H, dtype=float)
    out = np.empty_like(H)
    right = np.minimum.accumulate(H[t:])
    left = np.minimum.accumulate(H[: t + 1][::-1])[::-1]
    out[t:] = H[t:] + H[t] - 2.0 * right
    out[: t + 1] = H[: t + 1] + H[t] - 2.0 * left
    return out


def ball_mass(exc: HeightExcursion, t: int, r) -> np.ndarray | float:
    d = tree_distances_from(exc.heights, t)
    rr = np.asarray(r, dtype=float)
    counts = np.searchsorted(np.sort(d), rr, side="right")
    out = exc.grid_weight * counts
    return float(out) if rr.ndim == 0 else out


# ---------------------------------------------------------------------------
# snakes


@dataclass
class SnakeSample:
    excursion: HeightExcursion
    path: np.ndarray  # (grid, d)
    origin: np.ndarray


def snake_paths(H: np.ndarray, x, d: int, rng: np.random.Generator, replicas: int = 1) -> np.ndarray:
    """Endpoint process of ``replicas`` independent snakes driven by lifetime H.

    Returns an array of shape (replicas, len(H), d). The ancestral line is kept
    as a stack of (level, value) knots. Moving from H_i to H_{i+1} first cuts
    the line back to b = min(H_i, H_{i+1}), interpolating by a Brownian bridge
    between knots if b falls strictly between two, then extends it by fresh
    Gaussian noise of variance H_{i+1} - b.
    """
    H = np.asarray(H, dtype=float)
    x0 = np.broadcast_to(np.asarray(x, dtype=float), (d,))
    m = H.size
    out = np.empty((replicas, m, d))
    base = np.broadcast_to(x0, (replicas, d)).copy()
    levels = [H[0]]
    values = [base]
    out[:, 0] = base
    for i in range(m - 1):
        h0, h1 = H[i], H[i + 1]
        b = min(h0, h1)
        popped = None
        while levels[-1] > b:
            popped = (levels.pop(), values.pop())
            if not levels:
                break
        if not levels:
            # the path is cut below its own start: restart from the popped origin
            levels.append(b)
            values.append(popped[1])
        elif levels[-1] < b:
            l0, v0 = levels[-1], values[-1]
            l1, v1 = popped
            w = (b - l0) / (l1 - l0)
            sd = math.sqrt((b - l0) * (l1 - b) / (l1 - l0))
            levels.append(b)
            values.append(v0 + w * (v1 - v0) + sd * rng.standard_normal((replicas, d)))
        if h1 > b:
            levels.append(h1)
            values.append(values[-1] + math.sqrt(h1 - b) * rng.standard_normal((replicas, d)))
        out[:, i + 1] = values[-1]
    return out


def sample_snake(exc: HeightExcursion, x, d: int, rng: np.random.Generator) -> SnakeSample:
    x0 = np.broadcast_to(np.asarray(x, dtype=float), (d,)).copy()
    return SnakeSample(exc, snake_paths(exc.heights, x0, d, rng, 1)[0], x0)


@dataclass
class OccupationCloud:
    cloud: PointCloud
    sigma: float

    @property
    def range_points(self) -> np.ndarray:
        return np.unique(self.cloud.points, axis=0)


def occupation_and_range(snake: SnakeSample) -> OccupationCloud:
    exc = snake.excursion
    pts = snake.path
    w = np.full(pts.shape[0], exc.grid_weight)
    return OccupationCloud(PointCloud(pts, w), exc.sigma)


def first_hitting(snake: SnakeSample, center, radius: float) -> int | None:
    if not radius > 0:
        raise ValueError("radius must be positive")
    hit = np.flatnonzero(np.linalg.norm(snake.path - np.asarray(center, dtype=float), axis=1) <= radius)
    return int(hit[0]) if hit.size else None


# ---------------------------------------------------------------------------
# CSBP


@dataclass
class CsbpPath:
    times: np.ndarray
    values: np.ndarray  # (replicas, len(times))
    x0: float
    provenance: dict


def csbp_from_gw(
    mech: BranchingMechanism,
    x0: float,
    horizon: float,
    n_scale: int,
    rng: np.random.Generator,
    replicas: int = 1,
) -> CsbpPath:
    """Rescaled Galton-Watson generation sizes approximating the CSBP.

    ceil(x0 n_scale) ancestors; one generation lasts
    ``1/(n_scale**(index-1) b)``; sizes are divided by n_scale.
    """
    if x0 < 0:
        raise ValueError("x0 must be nonnegative")
    law = offspring_law(mech)
    b = time_change(mech, law)
    gens_per_time = n_scale ** (law.index - 1.0) * b
    n_gen = max(1, int(round(horizon * gens_per_time)))
    step = horizon / n_gen
    pop = np.full(replicas, int(math.ceil(x0 * n_scale)), dtype=np.int64)
    vals = np.empty((replicas, n_gen + 1))
    vals[:, 0] = pop / n_scale
    for g in range(1, n_gen + 1):
        alive = pop > 0
        if np.any(alive):
            if int(pop.sum()) > POPULATION_CAP:
                raise OverflowError(f"population exceeds the cap {POPULATION_CAP}")
            pop[alive] = law.sum_of(rng, pop[alive])
        vals[:, g] = pop / n_scale
    return CsbpPath(
        np.arange(n_gen + 1) * step,
        vals,
        float(x0),
        {"offspring_law": law.name, "generation_time": step, "n_scale": n_scale, "time_change": b},
    )


def laplace_flow(mech: BranchingMechanism, lam: float, t: float) -> float:
    """u_t solving du/dt = -psi(u), u_0 = lam, by an adaptive integrator."""
    if t == 0:
        return float(lam)
    sol = integrate.solve_ivp(lambda _s, u: -mech.psi(np.maximum(u, 0.0)), (0.0, t), [lam], method="DOP853", rtol=1e-12, atol=1e-14)
    return float(sol.y[0, -1])


def sigma_tail(mech: BranchingMechanism, t):
    """Excursion-measure tail of the duration, from the Levy measure of psi^{-1}."""
    tt = np.asarray(t, dtype=float)
    if np.any(tt <= 0):
        raise ValueError("t must be positive")
    if mech.is_pure_quadratic:
        out = 1.0 / np.sqrt(math.pi * mech.beta * tt)
    elif mech.is_pure_stable:
        g, c = mech.levy.gamma, mech.levy.c
        out = c ** (-1.0 / g) * tt ** (-1.0 / g) / special.gamma(1.0 - 1.0 / g)
    else:
        raise UnsupportedMechanism("duration tail is available for pure quadratic or pure stable mechanisms")
    return float(out) if tt.ndim == 0 else out


def duration_index(mech: BranchingMechanism) -> float:
    """Exponent a with N(sigma > t) proportional to t^{-a}."""
    if mech.is_pure_quadratic:
        return 0.5
    if mech.is_pure_stable:
        return 1.0 / mech.levy.gamma
    raise UnsupportedMechanism("duration tail is available for pure quadratic or pure stable mechanisms")


def sample_durations(mech: BranchingMechanism, eps: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Durations drawn from N(sigma in . | sigma > eps)."""
    a = duration_index(mech)
    return eps * rng.random(size) ** (-1.0 / a)


def truncated_duration_exponent(mech: BranchingMechanism, lam: float, eps: float) -> float:
    """int_eps^inf (1 - e^{-lam s}) N(sigma in ds), the truncated psi^{-1}(lam)."""
    a = duration_index(mech)
    k = float(sigma_tail(mech, 1.0))  # tail = k s^{-a}, density k a s^{-a-1}
    f = lambda s: -math.expm1(-lam * s) * k * a * s ** (-a - 1.0)
    head, _ = integrate.quad(f, eps, 1.0, epsabs=0, epsrel=1e-12, limit=200)
    tail, _ = integrate.quad(f, 1.0, math.inf, epsabs=0, epsrel=1e-12, limit=200)
    return head + tail

