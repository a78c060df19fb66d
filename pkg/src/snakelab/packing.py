"""Packing and covering estimators on weighted point clouds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .mechanism import DomainError

BRUTE_FORCE_BELOW = 2000


@dataclass
class PointCloud:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.points.shape[0] != self.weights.shape[0]:
            raise ValueError("one weight per point is required")
        if not np.all(np.isfinite(self.points)) or not np.all(np.isfinite(self.weights)):
            raise ValueError("point cloud must be finite")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")

    @classmethod
    def from_points(cls, points, total_mass: float | None = None) -> "PointCloud":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        mass = float(n) if total_mass is None else float(total_mass)
        return cls(pts, np.full(n, mass / n))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def total_mass(self) -> float:
        return float(math.fsum(self.weights))

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], self.weights[idx])

    def to_csv(self, path) -> None:
        write_cloud_csv(self, path)


def write_cloud_csv(cloud: PointCloud, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(cloud.dim)] + ["weight"])
        for p, m in zip(cloud.points, cloud.weights):
            w.writerow([repr(float(v)) for v in p] + [repr(float(m))])


def read_cloud_csv(path) -> PointCloud:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    d = len(header) - 1
    if header != [f"x{j + 1}" for j in range(d)] + ["weight"]:
        raise ValueError(f"unexpected cloud header {header}")
    data = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float).reshape(-1, d + 1)
    return PointCloud(data[:, :d], data[:, d])


@dataclass(frozen=True)
class PowerGauge:
    """g(r) = scale * r**exponent, defined for every r > 0."""

    exponent: float
    scale: float = 1.0
    r0: float = math.inf

    def __call__(self, r):
        return self.scale * np.asarray(r, dtype=float) ** self.exponent


def _gauge_r0(gauge) -> float:
    return float(getattr(gauge, "r0", math.inf))


# ---------------------------------------------------------------------------
# greedy packings


@dataclass
class PackingResult:
    sum: float
    count: int
    centers: np.ndarray
    eps: float
    restarts: int = 1


def _greedy_order(points: np.ndarray, eps: float, order: np.ndarray) -> np.ndarray:
    """Indices accepted by the greedy scan: each is > 2 eps from earlier ones."""
    n = points.shape[0]
    blocked = np.zeros(n, dtype=bool)
    chosen = []
    if n < BRUTE_FORCE_BELOW:
        for i in order:
            if blocked[i]:
                continue
            chosen.append(i)
            blocked |= np.linalg.norm(points - points[i], axis=1) <= 2 * eps
    else:
        tree = cKDTree(points)
        for i in order:
            if blocked[i]:
                continue
            chosen.append(i)
            blocked[tree.query_ball_point(points[i], 2 * eps)] = True
    return np.asarray(chosen, dtype=int)


def greedy_packing(
    cloud: PointCloud,
    eps: float,
    gauge: Callable,
    seed: int = 0,
    restarts: int = 8,
    order: str = "shuffle",
) -> PackingResult:
    """Greedy packing by closed balls of radius eps centred at cloud points.

    The best of ``restarts`` seeded random scan orders is kept; ``order="given"``
    scans the points as stored and ignores ``restarts``.
    """
    if not eps > 0:
        raise DomainError("eps must be positive")
    if not eps < _gauge_r0(gauge):
        raise DomainError("eps lies outside the gauge domain")
    pts = cloud.points
    if order == "given":
        orders = [np.arange(cloud.size)]
    elif order == "shuffle":
        rng = np.random.default_rng(seed)
        orders = [rng.permutation(cloud.size) for _ in range(restarts)]
    else:
        raise ValueError(f"unknown order {order!r}")
    best = None
    for o in orders:
        idx = _greedy_order(pts, eps, o)
        if best is None or idx.size > best.size:
            best = idx
    centers = pts[best]
    assert_valid_packing(centers, eps)
    count = int(best.size)
    return PackingResult(count * float(gauge(eps)), count, centers, eps, len(orders))


def assert_valid_packing(centers: np.ndarray, eps: float) -> None:
    if centers.shape[0] < 2:
        return
    close = cKDTree(centers).query_pairs(2 * eps)
    if close:
        raise AssertionError(f"{len(close)} center pairs closer than 2*eps")


# ---------------------------------------------------------------------------
# dyadic cubes


def dyadic_p(d: int) -> int:
    """Smallest-gap exponent p = floor(log2(4 sqrt d)), computed exactly."""
    # 2^p <= 4 sqrt(d)  <=>  4^p <= 16 d
    p = 0
    while 4 ** (p + 1) <= 16 * d:
        p += 1
    return p


def level_for_radius(r: float, d: int) -> int:
    """n(r): the level with c 2^{-n}/2 < r <= c 2^{-n}, c = (1 + 2^{-p}) sqrt d."""
    if not r > 0:
        raise DomainError("radius must be positive")
    p = dyadic_p(d)
    c = (1.0 + 2.0**-p) * math.sqrt(d)
    n = math.floor(math.log2(c / r))
    while c * 2.0**-n < r:
        n -= 1
    while c * 2.0 ** -(n + 1) >= r:
        n += 1
    return n


@dataclass(frozen=True)
class DyadicCube:
    level: int
    index: tuple[int, ...]  # center = index * 2^{-level-p}

    @property
    def d(self) -> int:
        return len(self.index)

    @property
    def p(self) -> int:
        return dyadic_p(self.d)

    @property
    def fine_step(self) -> float:
        return 2.0 ** -(self.level + self.p)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.index, dtype=float) * self.fine_step

    @property
    def outer_side(self) -> float:
        return 2.0**-self.level

    @property
    def inner_side(self) -> float:
        return self.fine_step

    def _inside(self, x, side: float) -> bool:
        z = np.asarray(x, dtype=float) - self.center
        return bool(np.all((-side / 2 <= z) & (z < side / 2)))

    def outer_contains(self, x) -> bool:
        return self._inside(x, self.outer_side)

    def inner_contains(self, x) -> bool:
        return self._inside(x, self.inner_side)

    def outer_corners(self) -> np.ndarray:
        d = self.d
        signs = np.array(np.meshgrid(*[[-0.5, 0.5]] * d, indexing="ij")).reshape(d, -1).T
        return self.center + signs * self.outer_side


def dyadic_locate(x, r: float) -> tuple[int, np.ndarray]:
    """Level n(r) and the fine-lattice centre y whose inner cube holds x."""
    x = np.asarray(x, dtype=float).reshape(-1)
    d = x.size
    if not 0 < r < 1.0 / (2 * d):
        raise DomainError("dyadic_locate needs 0 < r < 1/(2d)")
    n = level_for_radius(r, d)
    scale = 2.0 ** (n + dyadic_p(d))
    y = np.floor(x * scale + 0.5) / scale
    return n, y


def dyadic_cube_of(x, r: float) -> DyadicCube:
    x = np.asarray(x, dtype=float).reshape(-1)
    n, _ = dyadic_locate(x, r)
    scale = 2.0 ** (n + dyadic_p(x.size))
    idx = tuple(int(v) for v in np.floor(x * scale + 0.5))
    return DyadicCube(n, idx)


def box_count(cloud: PointCloud, eps: float) -> int:
    """Number of occupied side-2^{-n} cubes at level n = n(eps).

    The cubes are [k, k+1) 2^{-n}; their centres lie on the fine lattice
    2^{-n-p} Z^d (p >= 1), so they are outer cubes of the dyadic scheme, and
    they nest across levels, which makes counts monotone in eps.
    """
    n = level_for_radius(eps, cloud.dim)
    keys = np.floor(cloud.points * 2.0**n).astype(np.int64)
    return int(np.unique(keys, axis=0).shape[0])


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class Regression:
    slope: float
    intercept: float
    half_width: float
    rows: int
    window: tuple[float, float]


def dim_regress(rows: Sequence[tuple[float, float]], window: tuple[float, float] | None = None, mode: str = "box") -> Regression:
    """Least-squares scaling exponent with a two-standard-error half width.

    ``mode="box"`` regresses log(count) on log(1/eps); ``mode="packing"``
    regresses log(sum) on log(eps).
    """
    arr = np.asarray(rows, dtype=float).reshape(-1, 2)
    lo, hi = (arr[:, 0].min(), arr[:, 0].max()) if window is None else window
    keep = (arr[:, 0] >= lo) & (arr[:, 0] <= hi) & (arr[:, 1] > 0)
    arr = arr[keep]
    if arr.shape[0] < 5:
        raise ValueError("dimension regression needs at least 5 rows inside the window")
    if mode == "box":
        x, y = -np.log(arr[:, 0]), np.log(arr[:, 1])
    elif mode == "packing":
        x, y = np.log(arr[:, 0]), np.log(arr[:, 1])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0:
        raise ValueError("degenerate window: all eps equal")
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (intercept + slope * x)
    dof = x.size - 2
    se = math.sqrt(float(resid @ resid) / dof / sxx)
    return Regression(slope, intercept, 2.0 * se, int(x.size), (float(lo), float(hi)))


@dataclass
class PackingReport:
    gauge_id: str
    eps: list[float]
    counts: list[int]
    sums: list[float]
    regression: Regression | None
    method: str = "box"

    def to_json(self) -> dict:
        reg = self.regression
        return {
            "gauge": self.gauge_id,
            "method": self.method,
            "eps": self.eps,
            "count": self.counts,
            "sum": self.sums,
            "slope": None if reg is None else reg.slope,
            "intercept": None if reg is None else reg.intercept,
            "half_width": None if reg is None else reg.half_width,
            "window": None if reg is None else list(reg.window),
        }


def grid_box_count(points: np.ndarray, side: float) -> int:
    """Occupied cubes of the lattice side * Z^d (no dyadic level snapping)."""
    if not side > 0:
        raise DomainError("side must be positive")
    return int(np.unique(np.floor(np.asarray(points) / side).astype(np.int64), axis=0).shape[0])


def range_box_report(points: np.ndarray, sides=None, side_points: int = 12, window_steps=(2.0, 0.25)) -> PackingReport:
    """Box-counting regression for one sampled range.

    Default sides run geometrically from ``window_steps[0]`` times the median
    step between consecutive points up to ``window_steps[1]`` times the
    largest coordinate extent: below that the discretisation shows, above it
    a handful of boxes covers everything.
    """
    pts = np.asarray(points, dtype=float)
    if sides is None:
        step = float(np.median(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
        extent = float(np.ptp(pts, axis=0).max())
        if not (step > 0 and window_steps[1] * extent > window_steps[0] * step):
            raise ValueError("range too small for a box-counting window")
        sides = np.geomspace(window_steps[0] * step, window_steps[1] * extent, side_points)
    sides = [float(s) for s in np.asarray(sides, dtype=float)]
    counts = [grid_box_count(pts, s) for s in sides]
    reg = dim_regress(list(zip(sides, counts)), mode="box")
    return PackingReport("box", sides, counts, [], reg, method="grid-box")


# ---------------------------------------------------------------------------
# densities


@dataclass
class DensityProfile:
    r: np.ndarray
    mass: np.ndarray
    ratio: np.ndarray

    @property
    def min_ratio(self) -> float:
        return float(self.ratio.min())


def ball_masses(cloud: PointCloud, x, r_grid) -> np.ndarray:
    """Cloud mass of the closed balls B(x, r) for every r in r_grid."""
    r = np.asarray(r_grid, dtype=float)
    dist = np.linalg.norm(cloud.points - np.asarray(x, dtype=float), axis=1)
    order = np.argsort(dist, kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(cloud.weights[order])])
    return cum[np.searchsorted(dist[order], r, side="right")]


def local_density(cloud: PointCloud, gauge: Callable, x, r_grid) -> DensityProfile:
    r = np.asarray(r_grid, dtype=float)
    if r.size == 0:
        raise ValueError("empty radius grid")
    mass = ball_masses(cloud, x, r)
    return DensityProfile(r, mass, mass / np.asarray(gauge(r), dtype=float))


@dataclass
class ComparisonReport:
    kappa: float
    above: np.ndarray  # sample indices whose min-ratio exceeds kappa
    below: np.ndarray
    mass_above: float
    mass_below: float
    packing_above: float
    packing_below: float
    doubling_constant: float
    consistent_lower: bool  # mass >= kappa * packing on the 'above' class
    consistent_upper: bool  # mass <= C^2 kappa * packing on the 'below' class
    min_ratios: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))


def comparison_check(
    cloud: PointCloud,
    sample_idx,
    gauge: Callable,
    kappa: float,
    r_grid,
    eps: float,
    seed: int = 0,
) -> ComparisonReport:
    """Split sample points by their empirical lower density and compare
    class masses with kappa times greedy packing sums.

    Sample points are cloud indices drawn from the measure, so a class mass is
    estimated as total mass times the class frequency. Packing sums are greedy
    lower bounds at scale eps. The upper verdict uses the doubling constant
    max g(2r)/g(r) over r_grid.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    idx = np.asarray(sample_idx, dtype=int)
    r = np.asarray(r_grid, dtype=float)
    mins = np.array([local_density(cloud, gauge, cloud.points[i], r).min_ratio for i in idx])
    above, below = idx[mins > kappa], idx[mins <= kappa]
    total = cloud.total_mass
    m_above = total * above.size / idx.size
    m_below = total * below.size / idx.size

    def pack(sel):
        if sel.size == 0:
            return 0.0
        sub = PointCloud.from_points(cloud.points[sel])
        return greedy_packing(sub, eps, gauge, seed=seed).sum

    p_above, p_below = pack(above), pack(below)
    doubling = float(np.max(np.asarray(gauge(2 * r)) / np.asarray(gauge(r))))
    return ComparisonReport(
        kappa=kappa,
        above=above,
        below=below,
        mass_above=m_above,
        mass_below=m_below,
        packing_above=p_above,
        packing_below=p_below,
        doubling_constant=doubling,
        consistent_lower=bool(m_above >= kappa * p_above),
        consistent_upper=bool(m_below <= doubling**2 * kappa * p_below),
        min_ratios=mins,
    )


def cantor_dust(levels: int, d: int = 2, ratio: float = 0.25) -> PointCloud:
    """Corners-of-the-cube self-similar set at a finite level, unit mass."""
    pts = np.zeros((1, d))
    corners = np.array(np.meshgrid(*[[0.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
    scale = 1.0
    for _ in range(levels):
        step = scale * (1 - ratio)
        pts = (pts[:, None, :] + step * corners[None, :, :]).reshape(-1, d)
        scale *= ratio
    return PointCloud.from_points(pts, total_mass=1.0)
