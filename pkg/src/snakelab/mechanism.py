"""Branching mechanisms and their calculus.

A mechanism is ``psi(lam) = alpha*lam + beta*lam**2 + levy(lam)`` where the
Levy part is either absent, a stable term ``c*lam**gamma`` stored in closed
form, or a finite list of jump atoms contributing
``mass*(exp(-lam*r) - 1 + lam*r)``.

Besides plain evaluation the module offers log-space versions of the hot
functions. Several radius ladders used elsewhere in the package sit far below
the smallest positive double, so their gauges and inverse functions are only
representable through logarithms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Literal

import numpy as np

E_E = math.exp(-math.e)  # upper limit of the loglog domain

__all__ = [
    "DomainError",
    "UnsupportedMechanism",
    "Stable",
    "Tabulated",
    "BranchingMechanism",
    "GaugeFunction",
    "ExponentReport",
    "psi_eval",
    "psi_prime",
    "invert",
    "phi_eval",
    "gauge_eval",
    "exponents",
    "divided_difference",
    "mu_rq",
    "log_mu_rq",
    "doubling_ratio",
    "loglog_inv",
    "mechanism_from_dict",
    "mechanism_to_dict",
]


class DomainError(ValueError):
    """Argument outside the domain of a function."""


class UnsupportedMechanism(ValueError):
    """Operation has no implementation for this mechanism family."""


@dataclass(frozen=True)
class Stable:
    c: float
    gamma: float

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("stable coefficient c must be > 0")
        if not 1.0 < self.gamma < 2.0:
            raise ValueError("stable index gamma must lie in (1, 2)")


@dataclass(frozen=True)
class Tabulated:
    atoms: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.atoms) == 0:
            raise ValueError("tabulated Levy measure needs at least one atom")
        for r, m in self.atoms:
            if not (r > 0 and m >= 0 and math.isfinite(r) and math.isfinite(m)):
                raise ValueError(f"invalid atom (r={r}, mass={m})")

    @property
    def sizes(self) -> np.ndarray:
        return np.array([a[0] for a in self.atoms], dtype=float)

    @property
    def masses(self) -> np.ndarray:
        return np.array([a[1] for a in self.atoms], dtype=float)


def _em1x(x: np.ndarray) -> np.ndarray:
    """exp(-x) - 1 + x without cancellation for small x >= 0."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < 1e-2
    xs = x[small]
    # alternating series up to x^7; truncation error below 1e-16 relative
    out[small] = xs * xs * (0.5 - xs * (1 / 6 - xs * (1 / 24 - xs * (1 / 120 - xs * (1 / 720 - xs / 5040)))))
    xl = x[~small]
    out[~small] = np.expm1(-xl) + xl
    return out


def _scalar_or_array(a: np.ndarray, like: Any):
    if np.ndim(like) == 0:
        return float(a)
    return a


@dataclass(frozen=True)
class BranchingMechanism:
    alpha: float = 0.0
    beta: float = 0.0
    levy: Stable | Tabulated | None = None

    def __post_init__(self):
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ValueError("alpha must be a finite nonnegative number")
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError("beta must be a finite nonnegative number")
        if self.alpha == 0 and self.beta == 0 and self.levy is None:
            raise ValueError("mechanism is identically zero")

    # constructors ---------------------------------------------------------
    @classmethod
    def quadratic(cls, beta: float = 1.0, alpha: float = 0.0) -> "BranchingMechanism":
        return cls(alpha=alpha, beta=beta)

    @classmethod
    def stable(cls, gamma: float, c: float = 1.0, alpha: float = 0.0, beta: float = 0.0) -> "BranchingMechanism":
        return cls(alpha=alpha, beta=beta, levy=Stable(c, gamma))

    @classmethod
    def tabulated(cls, atoms, alpha: float = 0.0, beta: float = 0.0) -> "BranchingMechanism":
        return cls(alpha=alpha, beta=beta, levy=Tabulated(tuple((float(r), float(m)) for r, m in atoms)))

    # family info ----------------------------------------------------------
    @property
    def family(self) -> str:
        if isinstance(self.levy, Tabulated):
            return "tabulated"
        if isinstance(self.levy, Stable):
            return "stable"
        return "quadratic" if self.beta > 0 else "linear"

    @property
    def is_pure_quadratic(self) -> bool:
        return self.levy is None and self.alpha == 0 and self.beta > 0

    @property
    def is_pure_stable(self) -> bool:
        return isinstance(self.levy, Stable) and self.alpha == 0 and self.beta == 0

    @property
    def growth_index(self) -> float:
        """Power of the dominant term of psi at infinity."""
        if self.beta > 0:
            return 2.0
        if isinstance(self.levy, Stable):
            return self.levy.gamma
        return 1.0

    @property
    def psi_prime_sup(self) -> float:
        """sup of psi' on [0, inf); finite only without quadratic or stable parts."""
        if self.beta > 0 or isinstance(self.levy, Stable):
            return math.inf
        s = self.alpha
        if isinstance(self.levy, Tabulated):
            s += float(np.sum(self.levy.sizes * self.levy.masses))
        return s

    # evaluation -----------------------------------------------------------
    def psi(self, lam):
        x = np.asarray(lam, dtype=float)
        if np.any(x < 0):
            raise DomainError("psi is evaluated on lam >= 0 only")
        out = self.alpha * x + self.beta * x * x
        if isinstance(self.levy, Stable):
            out = out + self.levy.c * x**self.levy.gamma
        elif isinstance(self.levy, Tabulated):
            r, m = self.levy.sizes, self.levy.masses
            out = out + (_em1x(np.multiply.outer(x, r)) * m).sum(axis=-1)
        return _scalar_or_array(out, lam)

    def psi_prime(self, lam):
        x = np.asarray(lam, dtype=float)
        if np.any(x < 0):
            raise DomainError("psi' is evaluated on lam >= 0 only")
        out = self.alpha + 2.0 * self.beta * x
        if isinstance(self.levy, Stable):
            g = self.levy.gamma
            out = out + self.levy.c * g * x ** (g - 1.0)
        elif isinstance(self.levy, Tabulated):
            r, m = self.levy.sizes, self.levy.masses
            out = out + (-np.expm1(-np.multiply.outer(x, r)) * r * m).sum(axis=-1)
        out = out + np.zeros_like(x)
        return _scalar_or_array(out, lam)

    def psi_star(self, lam):
        """psi minus its linear drift part."""
        return self.psi(lam) - self.alpha * np.asarray(lam, dtype=float)

    def psi_star_prime(self, lam):
        return self.psi_prime(lam) - self.alpha

    def psi_tilde(self, lam):
        """psi(lam)/lam, continued by alpha at 0."""
        x = np.asarray(lam, dtype=float)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(x > 0, np.asarray(self.psi(x)) / np.where(x > 0, x, 1.0), self.alpha)
        return _scalar_or_array(out, lam)

    def psi_antiderivative(self, x):
        """Integral of psi over [0, x]."""
        x = np.asarray(x, dtype=float)
        out = 0.5 * self.alpha * x * x + self.beta * x**3 / 3.0
        if isinstance(self.levy, Stable):
            g = self.levy.gamma
            out = out + self.levy.c * x ** (g + 1.0) / (g + 1.0)
        elif isinstance(self.levy, Tabulated):
            r, m = self.levy.sizes, self.levy.masses
            xr = np.multiply.outer(x, r)
            # int_0^x (e^{-lr}-1+lr) dl = (xr^2/2 - xr + 1 - e^{-xr}) / r
            out = out + ((0.5 * xr * xr - _em1x(xr)) / r * m).sum(axis=-1)
        return _scalar_or_array(out, x)

    def phi(self, lam):
        return phi_eval(self, lam)

    # log-space evaluation -------------------------------------------------
    def log_psi(self, loglam: float) -> float:
        if loglam == -math.inf:
            return -math.inf
        terms = []
        if self.alpha > 0:
            terms.append(math.log(self.alpha) + loglam)
        if self.beta > 0:
            terms.append(math.log(self.beta) + 2.0 * loglam)
        if isinstance(self.levy, Stable):
            terms.append(math.log(self.levy.c) + self.levy.gamma * loglam)
        elif isinstance(self.levy, Tabulated):
            r, m = self.levy.sizes, self.levy.masses
            if loglam > 600:
                terms.append(math.log(float(np.sum(r * m))) + loglam)
            elif loglam < -600:
                terms.append(math.log(0.5 * float(np.sum(r * r * m))) + 2.0 * loglam)
            else:
                v = float((_em1x(math.exp(loglam) * r) * m).sum())
                if v > 0:
                    terms.append(math.log(v))
        return _logsumexp(terms)

    def log_psi_prime(self, loglam: float) -> float:
        terms = []
        if self.alpha > 0:
            terms.append(math.log(self.alpha))
        if loglam == -math.inf:
            return _logsumexp(terms)
        if self.beta > 0:
            terms.append(math.log(2.0 * self.beta) + loglam)
        if isinstance(self.levy, Stable):
            g = self.levy.gamma
            terms.append(math.log(self.levy.c * g) + (g - 1.0) * loglam)
        elif isinstance(self.levy, Tabulated):
            r, m = self.levy.sizes, self.levy.masses
            if loglam > 600:
                terms.append(math.log(float(np.sum(r * m))))
            elif loglam < -600:
                terms.append(math.log(float(np.sum(r * r * m))) + loglam)
            else:
                v = float((-np.expm1(-math.exp(loglam) * r) * r * m).sum())
                if v > 0:
                    terms.append(math.log(v))
        return _logsumexp(terms)


def _logsumexp(terms: list[float]) -> float:
    if not terms:
        return -math.inf
    m = max(terms)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(t - m) for t in terms))


# ---------------------------------------------------------------------------
# inversion


def _bisect_increasing(f: Callable[[np.ndarray], np.ndarray], y: np.ndarray, cap: float = 1e300) -> np.ndarray:
    """Solve f(lam) = y for increasing f with f(0) <= y, elementwise."""
    y = np.asarray(y, dtype=float)
    lo = np.zeros_like(y)
    hi = np.ones_like(y)
    # grow the bracket geometrically
    need = f(hi) < y
    while np.any(need):
        lo = np.where(need, hi, lo)
        hi = np.where(need, hi * 2.0, hi)
        if np.any(hi[need] > cap):
            raise DomainError("value beyond the range of the function")
        need = f(hi) < y
    # shrink from above when the root lies below 1
    shrink = (lo == 0) & (y > 0)
    while np.any(shrink):
        half = hi * 0.5
        ok = shrink & (f(half) >= y) & (half > 1e-300)
        hi = np.where(ok, half, hi)
        lo = np.where(shrink & ~ok, half, lo)
        shrink = ok
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        up = f(mid) < y
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
        if np.all(hi - lo <= 4e-16 * hi):
            break
    return 0.5 * (lo + hi)


def _bisect_log(f: Callable[[float], float], target: float) -> float:
    """Solve f(l) = target for increasing f on the real line."""
    lo, hi = -1.0, 1.0
    while f(lo) > target:
        hi = lo
        lo *= 2.0
        if lo < -1e7:
            return -math.inf
    while f(hi) < target:
        lo = hi
        hi *= 2.0
        if hi > 1e15:
            raise DomainError("value beyond the range of the function")
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 2e-16 * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


Which = Literal["psi", "psi_prime", "phi"]


def invert(mech: BranchingMechanism, which: Which, y):
    """Inverse of psi, psi' or phi = psi' o psi^{-1}.

    phi^{-1} is evaluated as psi o psi'^{-1}, which is the same function and
    avoids nesting two bisections.
    """
    yy = np.asarray(y, dtype=float)
    if which == "psi":
        if np.any(yy < 0):
            raise DomainError("psi^{-1} needs y >= 0")
        out = _bisect_increasing(mech.psi, yy)
        out = np.where(yy == 0, 0.0, out)
    elif which in ("psi_prime", "phi"):
        if np.any(yy < mech.alpha):
            raise DomainError(f"{which}^{{-1}} needs y >= alpha = {mech.alpha}")
        if np.any(yy >= mech.psi_prime_sup):
            raise DomainError(f"{which}^{{-1}} needs y < sup psi' = {mech.psi_prime_sup}")
        out = _bisect_increasing(mech.psi_prime, yy)
        out = np.where(yy == mech.alpha, 0.0, out)
        if which == "phi":
            out = np.asarray(mech.psi(out))
    else:
        raise ValueError(f"unknown function {which!r}")
    return _scalar_or_array(out, y)


def log_invert(mech: BranchingMechanism, which: Which, logy: float) -> float:
    """log of invert(mech, which, exp(logy)), valid far outside float range."""
    if which == "psi":
        return _bisect_log(mech.log_psi, logy)
    if mech.alpha > 0 and logy < math.log(mech.alpha):
        raise DomainError(f"{which}^{{-1}} needs y >= alpha")
    if mech.psi_prime_sup < math.inf and logy >= math.log(mech.psi_prime_sup):
        raise DomainError(f"{which}^{{-1}} needs y < sup psi'")
    if mech.alpha > 0 and logy == math.log(mech.alpha):
        lp = -math.inf
    else:
        lp = _bisect_log(mech.log_psi_prime, logy)
    if which == "psi_prime":
        return lp
    if which == "phi":
        return mech.log_psi(lp)
    raise ValueError(f"unknown function {which!r}")


def psi_eval(mech: BranchingMechanism, lam):
    return mech.psi(lam)


def psi_prime(mech: BranchingMechanism, lam):
    return mech.psi_prime(lam)


def phi_eval(mech: BranchingMechanism, lam):
    x = np.asarray(lam, dtype=float)
    if np.any(x < 0):
        raise DomainError("phi is evaluated on lam >= 0 only")
    return _scalar_or_array(np.asarray(mech.psi_prime(invert(mech, "psi", x))), lam)


def divided_difference(mech: BranchingMechanism, lam1: float, lam2: float) -> float:
    if lam1 < 0 or lam2 < 0:
        raise DomainError("divided difference needs nonnegative arguments")
    if abs(lam1 - lam2) <= 1e-12 * max(1.0, lam1):
        return float(mech.psi_prime(lam1))
    return float((mech.psi(lam1) - mech.psi(lam2)) / (lam1 - lam2))


# ---------------------------------------------------------------------------
# gauges


def loglog_inv(r):
    """log(log(1/r)) for 0 < r < exp(-e)."""
    rr = np.asarray(r, dtype=float)
    if np.any(rr <= 0) or np.any(rr >= E_E):
        raise DomainError("loglog(1/r) is used on 0 < r < exp(-e) only")
    return _scalar_or_array(np.log(-np.log(rr)), r)


@dataclass(frozen=True)
class GaugeFunction:
    """The gauges g (packing gauge) and k (tree-mass gauge) of a mechanism."""

    mechanism: BranchingMechanism
    kind: Literal["g", "k"] = "g"

    def __post_init__(self):
        if self.kind not in ("g", "k"):
            raise ValueError("gauge kind must be 'g' or 'k'")

    @property
    def r0(self) -> float:
        a = self.mechanism.alpha
        if self.kind == "g":
            bound = a ** -0.5 if a > 0 else math.inf
        else:
            bound = 1.0 / a if a > 0 else math.inf
        return min(bound, E_E)

    def _check(self, r: np.ndarray):
        if np.any(r <= 0) or np.any(r >= self.r0):
            raise DomainError(f"gauge {self.kind} is defined for 0 < r < {self.r0}")

    def __call__(self, r):
        rr = np.asarray(r, dtype=float)
        self._check(rr)
        ll = np.log(-np.log(rr))
        with np.errstate(over="ignore"):
            y = ll / rr
            if self.kind == "g":
                y = y * y
        if np.all(np.isfinite(y)):
            out = ll / np.asarray(invert(self.mechanism, "phi", y))
        else:
            out = np.exp(np.vectorize(self.log_value_from_log_r)(np.log(rr)))
        return _scalar_or_array(out, r)

    def log_value_from_log_r(self, log_r: float) -> float:
        """log of the gauge at r = exp(log_r); works for any log_r < -e."""
        if not log_r < min(-math.e, math.log(self.r0)):
            raise DomainError("radius outside the gauge domain")
        lL = math.log(math.log(-log_r))
        logy = lL - log_r
        if self.kind == "g":
            logy *= 2.0
        return lL - log_invert(self.mechanism, "phi", logy)


def gauge_eval(gauge: GaugeFunction, r):
    return gauge(r)


def mu_rq(mech: BranchingMechanism, r: float, q: float) -> float:
    """phi^{-1}(q (loglog(1/r)/r)^2)."""
    if not 0 < r < E_E:
        raise DomainError("mu_rq needs 0 < r < exp(-e)")
    if q < 1:
        raise DomainError("mu_rq needs q >= 1")
    ll = math.log(math.log(1.0 / r))
    return float(invert(mech, "phi", q * (ll / r) ** 2))


def log_mu_rq(mech: BranchingMechanism, log_r: float, q: float) -> float:
    if not log_r < -math.e:
        raise DomainError("log_mu_rq needs r < exp(-e)")
    if q < 1:
        raise DomainError("log_mu_rq needs q >= 1")
    lL = math.log(math.log(-log_r))
    return log_invert(mech, "phi", math.log(q) + 2.0 * (lL - log_r))


def doubling_ratio(gauge: GaugeFunction, r):
    rr = np.asarray(r, dtype=float)
    if np.any(2 * rr >= gauge.r0):
        raise DomainError("doubling ratio needs 2r inside the gauge domain")
    hi, lo = np.asarray(gauge(2 * rr), dtype=float), np.asarray(gauge(rr), dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = hi / lo
    bad = ~(np.isfinite(out) & (lo > 0))
    if np.any(bad):
        # values underflow: take the ratio in log space
        f = np.vectorize(lambda x: math.exp(gauge.log_value_from_log_r(math.log(2 * x)) - gauge.log_value_from_log_r(math.log(x))))
        out = np.where(bad, f(np.where(bad, rr, gauge.r0 / 4)), out)
    return _scalar_or_array(out, r)


# ---------------------------------------------------------------------------
# exponents


@dataclass(frozen=True)
class ExponentReport:
    gamma_lower: float
    eta_upper: float
    delta: float | None
    method: Literal["analytic", "fitted"]
    grid: tuple[float, float, int] | None = None

    def ordered(self, tol: float = 0.0) -> bool:
        d = self.delta if self.delta is not None else 1.0
        chain = (1.0, d, self.gamma_lower, self.eta_upper, 2.0)
        return all(a <= b + tol for a, b in zip(chain, chain[1:]))


def _analytic_index(mech: BranchingMechanism) -> float | None:
    if isinstance(mech.levy, Tabulated):
        return None
    return mech.growth_index


def exponents(mech: BranchingMechanism, grid: tuple[float, float] = (1.0, 1e6), method: str | None = None) -> ExponentReport:
    """Lower index, upper index and delta.

    ``method=None`` picks analytic values whenever the family has them.
    Fitted indices are the extreme two-point log-slopes of psi over the
    dyadic points in the upper half (on a log scale) of ``grid``.
    """
    lo, hi = float(grid[0]), float(grid[1])
    if not (lo > 0 and hi / lo >= 1e6):
        raise ValueError("exponent grid must span at least 6 decades")
    analytic = _analytic_index(mech)
    if method is None:
        method = "analytic" if analytic is not None else "fitted"
    if method == "analytic":
        if analytic is None:
            raise UnsupportedMechanism("no analytic exponents for tabulated mechanisms")
        return ExponentReport(analytic, analytic, analytic, "analytic", None)
    if method != "fitted":
        raise ValueError(f"unknown method {method!r}")
    start = math.sqrt(lo * hi)
    k = int(math.floor(math.log2(hi / start)))
    lam = start * 2.0 ** np.arange(k)
    slopes = np.log2(np.asarray(mech.psi(2 * lam)) / np.asarray(mech.psi(lam)))
    return ExponentReport(float(slopes.min()), float(slopes.max()), analytic, "fitted", (lo, hi, int(lam.size)))


# ---------------------------------------------------------------------------
# JSON


_TOP = {"alpha", "beta", "levy"}


def mechanism_from_dict(doc: dict) -> BranchingMechanism:
    if not isinstance(doc, dict):
        raise ValueError("mechanism must be a JSON object")
    extra = set(doc) - _TOP
    if extra:
        raise ValueError(f"unknown mechanism fields: {sorted(extra)}")
    alpha = float(doc.get("alpha", 0.0))
    beta = float(doc.get("beta", 0.0))
    levy_doc = doc.get("levy", {"kind": "none"}) or {"kind": "none"}
    kind = levy_doc.get("kind")
    if kind == "none":
        keys, levy = {"kind"}, None
    elif kind == "stable":
        keys = {"kind", "c", "gamma"}
        levy = Stable(float(levy_doc.get("c", 1.0)), float(levy_doc["gamma"]))
    elif kind == "tabulated":
        keys = {"kind", "atoms"}
        levy = Tabulated(tuple((float(a[0]), float(a[1])) for a in levy_doc["atoms"]))
    else:
        raise ValueError(f"unknown levy kind {kind!r}")
    extra = set(levy_doc) - keys
    if extra:
        raise ValueError(f"unknown levy fields: {sorted(extra)}")
    return BranchingMechanism(alpha=alpha, beta=beta, levy=levy)


def mechanism_to_dict(mech: BranchingMechanism) -> dict:
    if isinstance(mech.levy, Stable):
        levy: dict = {"kind": "stable", "c": mech.levy.c, "gamma": mech.levy.gamma}
    elif isinstance(mech.levy, Tabulated):
        levy = {"kind": "tabulated", "atoms": [list(a) for a in mech.levy.atoms]}
    else:
        levy = {"kind": "none"}
    return {"alpha": mech.alpha, "beta": mech.beta, "levy": levy}
