"""Spine, grafted forest and last-exit simulations for the Palm picture."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mechanism import BranchingMechanism, UnsupportedMechanism, invert
from .packing import ball_masses
from .trees import (
    OccupationCloud,
    SnakeSample,
    duration_index,
    occupation_and_range,
    sample_durations,
    sample_height_excursion,
    sample_snake,
    sigma_tail,
    truncated_duration_exponent,
)

MAX_EXPECTED_GRAFTS = 1e6


def _check_spine_mech(mech: BranchingMechanism) -> None:
    if (mech.levy is None and mech.beta > 0) or mech.family == "stable":
        return
    raise UnsupportedMechanism("spine subordinator needs a quadratic and/or stable mechanism")


def positive_stable(index: float, size, rng: np.random.Generator) -> np.ndarray:
    """Kanter / Chambers-Mallows-Stuck draw with E exp(-lam S) = exp(-lam^index)."""
    u = rng.uniform(0.0, math.pi, size)
    e = rng.exponential(1.0, size)
    a = index
    return (np.sin(a * u) / np.sin(u) ** (1.0 / a)) * (np.sin((1.0 - a) * u) / e) ** ((1.0 - a) / a)


def subordinator_increments(mech: BranchingMechanism, dt, rng: np.random.Generator) -> np.ndarray:
    """Increments of the subordinator with Laplace exponent psi' - alpha."""
    _check_spine_mech(mech)
    dt = np.asarray(dt, dtype=float)
    out = 2.0 * mech.beta * dt
    if mech.family == "stable":
        g, c = mech.levy.gamma, mech.levy.c
        out = out + (c * g * dt) ** (1.0 / (g - 1.0)) * positive_stable(g - 1.0, dt.shape, rng)
    return out


@dataclass
class SpineSample:
    times: np.ndarray
    xi: np.ndarray  # (m, d)
    V: np.ndarray
    mech: BranchingMechanism

    @property
    def horizon(self) -> float:
        return float(self.times[-1])


def sample_spine(mech: BranchingMechanism, a: float, grid_step: float, rng: np.random.Generator, d: int = 4) -> SpineSample:
    _check_spine_mech(mech)
    m = max(1, int(round(a / grid_step)))
    dt = a / m
    times = np.arange(m + 1) * dt
    xi = np.zeros((m + 1, d))
    xi[1:] = np.cumsum(math.sqrt(dt) * rng.standard_normal((m, d)), axis=0)
    V = np.zeros(m + 1)
    V[1:] = np.cumsum(subordinator_increments(mech, np.full(m, dt), rng))
    return SpineSample(times, xi, V, mech)


# ---------------------------------------------------------------------------
# grafting


@dataclass
class Graft:
    time: float
    origin: np.ndarray
    snake: SnakeSample
    occupation: OccupationCloud = field(repr=False)

    @property
    def sigma(self) -> float:
        return self.occupation.sigma

    @property
    def min_norm(self) -> float:
        return float(np.linalg.norm(self.snake.path, axis=1).min())


@dataclass
class GraftedForest:
    grafts: list[Graft]
    eps_trunc: float
    expected_count: float
    horizon: float

    @property
    def count(self) -> int:
        return len(self.grafts)

    @property
    def sigma_total(self) -> float:
        return float(sum(g.sigma for g in self.grafts))

    def summary(self) -> dict:
        return {"count": self.count, "sigma_total": self.sigma_total, "eps_trunc": self.eps_trunc}


def graft(spine: SpineSample, mech: BranchingMechanism, eps_trunc: float, rng: np.random.Generator, n_tree: int = 100) -> GraftedForest:
    """Poisson forest of snakes with sigma > eps_trunc grafted along the spine at rate dV."""
    tail = float(sigma_tail(mech, eps_trunc))
    mean = float(spine.V[-1]) * tail
    if mean > MAX_EXPECTED_GRAFTS:
        raise ValueError(f"expected graft count {mean:.3g} too large; raise eps_trunc")
    n = int(rng.poisson(mean))
    u = np.sort(rng.uniform(0.0, spine.V[-1], n))
    # inverse of V along the grid (linear inside a step)
    idx = np.clip(np.searchsorted(spine.V, u, side="left"), 1, spine.V.size - 1)
    v0, v1 = spine.V[idx - 1], spine.V[idx]
    frac = np.where(v1 > v0, (u - v0) / np.where(v1 > v0, v1 - v0, 1.0), 1.0)
    t = spine.times[idx - 1] + frac * (spine.times[idx] - spine.times[idx - 1])
    sig = sample_durations(mech, eps_trunc, n, rng)
    d = spine.xi.shape[1]
    grafts = []
    for tj, sj, kj in zip(t, sig, idx - 1):
        origin = spine.xi[kj]
        exc = sample_height_excursion(mech, n_tree, rng, sigma=float(sj))
        snake = sample_snake(exc, origin, d, rng)
        grafts.append(Graft(float(tj), origin, snake, occupation_and_range(snake)))
    return GraftedForest(grafts, eps_trunc, mean, spine.horizon)


@dataclass
class PalmProfile:
    r: np.ndarray
    mass: np.ndarray
    ratio: np.ndarray | None

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("r,mass,ratio\n")
            for i in range(self.r.size):
                ratio = "" if self.ratio is None else repr(float(self.ratio[i]))
                fh.write(f"{float(self.r[i])!r},{float(self.mass[i])!r},{ratio}\n")


def palm_mass_profile(forest: GraftedForest, r_grid, gauge=None, a: float | None = None) -> PalmProfile:
    """Grafted occupation mass of B(0, r) from grafts with t_j <= a."""
    r = np.asarray(r_grid, dtype=float)
    if r.size == 0:
        raise ValueError("empty radius grid")
    a = forest.horizon if a is None else a
    mass = np.zeros_like(r)
    for g in forest.grafts:
        if g.time <= a:
            mass += ball_masses(g.occupation.cloud, np.zeros(g.origin.size), r)
    ratio = None if gauge is None else mass / np.asarray(gauge(r), dtype=float)
    return PalmProfile(r, mass, ratio)


def count_hitting(forest: GraftedForest, r: float, s: float, t: float) -> int:
    if s > t:
        raise ValueError("need s <= t")
    return sum(1 for g in forest.grafts if s < g.time < t and g.min_norm <= r)


# ---------------------------------------------------------------------------
# last exits


@dataclass
class ExitRecord:
    r: np.ndarray
    theta: np.ndarray  # full-norm last exits
    gamma: np.ndarray  # three-coordinate last exits
    censored: bool


def last_exit(spine: SpineSample, r_list) -> ExitRecord:
    r = np.asarray(r_list, dtype=float)
    full = np.linalg.norm(spine.xi, axis=1)
    three = np.linalg.norm(spine.xi[:, :3], axis=1)

    def last(norms):
        out = np.empty(r.size)
        for k, rk in enumerate(r):
            inside = np.flatnonzero(norms <= rk)
            out[k] = spine.times[inside[-1]] if inside.size else 0.0
        return out

    rmax = float(r.max()) if r.size else 0.0
    censored = bool(min(full[-1], three[-1]) < 4.0 * rmax)
    return ExitRecord(r, last(full), last(three), censored)


def sample_last_exits(
    r_list,
    replicas: int,
    rng: np.random.Generator,
    dim: int = 3,
    dt_min: float = 1e-4,
    far: float = 1e4,
) -> np.ndarray:
    """Last-exit times of a dim-dimensional Brownian motion from the balls B(0, r).

    Time steps shrink to ``dt_min`` near any sphere and grow like
    ``(distance/5)^2`` away from them, so crossings inside a step are
    negligible. Near a sphere a Brownian-bridge test (half-space
    approximation) catches excursions between grid points. A path stops once
    its norm reaches ``far * max(r)``; it would return with probability at
    most ``1/far`` (dim = 3).
    """
    r = np.sort(np.asarray(r_list, dtype=float))
    if dim < 3:
        raise ValueError("last exits are finite only for dim >= 3")
    out = np.zeros((replicas, r.size))
    x = np.zeros((replicas, dim))
    t = np.zeros(replicas)
    act = np.arange(replicas)
    stop = far * r.max()
    while act.size:
        xa = x[act]
        nrm = np.linalg.norm(xa, axis=1)
        gap = np.abs(nrm[:, None] - r[None, :]).min(axis=1)
        h = np.clip((gap / 5.0) ** 2, dt_min, None)
        xn = xa + np.sqrt(h)[:, None] * rng.standard_normal(xa.shape)
        nn = np.linalg.norm(xn, axis=1)
        tn = t[act] + h
        inside = nn[:, None] <= r[None, :]
        d0 = nrm[:, None] - r[None, :]
        d1 = nn[:, None] - r[None, :]
        both_out = (d0 > 0) & (d1 > 0)
        p_cross = np.where(both_out, np.exp(-2.0 * np.clip(d0, 0, None) * np.clip(d1, 0, None) / h[:, None]), 0.0)
        crossed = rng.random(p_cross.shape) < p_cross
        hit = inside | crossed
        rows, cols = np.nonzero(hit)
        out[act[rows], cols] = tn[rows]
        x[act] = xn
        t[act] = tn
        act = act[nn < stop]
    return out


# ---------------------------------------------------------------------------
# T_{gamma(r)}


@dataclass
class TGammaResult:
    r: np.ndarray
    samples: np.ndarray  # (replicas, len(r))
    exits: np.ndarray
    eps_trunc: float
    capped: int

    def laplace(self, lam: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        z = np.exp(-lam * self.samples)
        return z.mean(axis=0), z.std(axis=0, ddof=1) / math.sqrt(z.shape[0])


def t_gamma_target(mech: BranchingMechanism, r, lam: float = 1.0, eps_trunc: float | None = None):
    """exp(-r sqrt(2 psi*'(Phi))) with Phi = psi^{-1}(lam), or its truncated form."""
    if eps_trunc is None:
        phi = float(invert(mech, "psi", lam))
    else:
        phi = truncated_duration_exponent(mech, lam, eps_trunc)
    return np.exp(-np.asarray(r, dtype=float) * math.sqrt(2.0 * float(mech.psi_star_prime(phi))))


def t_gamma_samples(
    mech: BranchingMechanism,
    d: int,
    r_grid,
    replicas: int,
    rng: np.random.Generator,
    eps_trunc: float = 1e-6,
    dt_min: float = 1e-4,
    cap: int = 1_000_000,
) -> TGammaResult:
    """Total duration of grafts made before gamma(r), per replica and radius.

    Only the first three spine coordinates enter gamma(r), so d >= 4 affects
    nothing but the precondition. Graft counts between consecutive exits are
    Poisson given the subordinator increment; a count above ``cap`` is summed
    over ``cap`` draws plus ``eps_trunc`` per remaining graft, which is a lower
    bound far beyond any Laplace-relevant scale.
    """
    if d < 4:
        raise ValueError("t_gamma_samples needs d >= 4")
    r = np.sort(np.asarray(r_grid, dtype=float))
    pos = r > 0
    exits = np.zeros((replicas, r.size))
    if np.any(pos):
        exits[:, pos] = sample_last_exits(r[pos], replicas, rng, dim=3, dt_min=dt_min)
    tail = float(sigma_tail(mech, eps_trunc))
    dgam = np.diff(np.concatenate([np.zeros((replicas, 1)), exits], axis=1), axis=1)
    dV = subordinator_increments(mech, dgam, rng)
    counts = rng.poisson(dV * tail)
    capped = 0
    inc = np.zeros_like(dgam)
    for i, j in zip(*np.nonzero(counts)):
        n = int(counts[i, j])
        k = min(n, cap)
        capped += n > cap
        inc[i, j] = sample_durations(mech, eps_trunc, k, rng).sum() + (n - k) * eps_trunc
    samples = np.cumsum(inc, axis=1)
    return TGammaResult(r, samples, exits, eps_trunc, capped)


__all__ = [
    "SpineSample",
    "GraftedForest",
    "Graft",
    "PalmProfile",
    "ExitRecord",
    "TGammaResult",
    "positive_stable",
    "subordinator_increments",
    "sample_spine",
    "graft",
    "palm_mass_profile",
    "count_hitting",
    "last_exit",
    "sample_last_exits",
    "t_gamma_samples",
    "t_gamma_target",
    "duration_index",
]
