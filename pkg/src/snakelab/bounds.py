"""Deterministic checks of the analytic estimates.

Contents, roughly in dependency order:

* ``integral_I`` and the energy integrals behind it;
* radial blow-up profiles inside and outside a ball, solved by shooting;
* the Keller bracket and the derived constants ``C_delta``, ``K_c``,
  ``c1`` and ``C2`` (all computed, each carrying its recipe);
* ``q_and_J`` and the theta-indexed radii ``r_theta`` / ``rho_n``;
* the ``s_n`` sequence with its Markov terms;
* subordinator tail bounds and the two series built from them;
* exit-time Laplace transforms with an optional Monte Carlo;
* the threshold function ``F(mu, r, kappa)``.

Radii ladders such as ``rho_n = r_{exp(n^2)}`` leave double precision after
a few dozen terms, so the sequence code works with ``log r`` throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize, stats

from .mechanism import (
    BranchingMechanism,
    DomainError,
    GaugeFunction,
    UnsupportedMechanism,
    _bisect_increasing,
    exponents,
    invert,
    log_invert,
    log_mu_rq,
)

__all__ = [
    "DivergenceError",
    "RadialSolveError",
    "Constant",
    "RadialProfile",
    "KellerVerdict",
    "LemmaConstants",
    "RadiiSequences",
    "SnSequence",
    "BoundReport",
    "ExitTimeResult",
    "FExplorerReport",
    "integral_I",
    "solve_radial_interior",
    "solve_radial_exterior",
    "keller_check",
    "comparison_constant",
    "power_integral_constant",
    "lemma_constants",
    "exterior_bound_check",
    "q_and_J",
    "log_J",
    "radii_theta",
    "sn_sequence",
    "subordinator_tail_bounds",
    "subordinator_series",
    "exit_time_laplace",
    "brownian_ball_constant",
    "mu_ratio_constant",
    "f_explorer",
    "convex_gauge_check",
]


class DivergenceError(ValueError):
    """The requested integral or series is infinite for this mechanism."""


class RadialSolveError(RuntimeError):
    """Shooting failed to bracket or converge."""


@dataclass(frozen=True)
class Constant:
    name: str
    value: float
    recipe: str

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "recipe": self.recipe}


# ---------------------------------------------------------------------------
# energy integrals

_GL_X, _GL_W = np.polynomial.legendre.leggauss(32)


def _leading_power(mech: BranchingMechanism):
    """(K, q, lower) with Psi(b) = K b^q + lower(b) and q the top power."""
    if mech.growth_index <= 1.0:
        raise DivergenceError("integral diverges: psi grows at most linearly")
    levy_part = BranchingMechanism(levy=mech.levy) if mech.levy is not None else None
    a = mech.alpha
    if mech.beta > 0:
        K, q = mech.beta / 3.0, 3.0

        def lower(b):
            out = 0.5 * a * b * b
            if levy_part is not None:
                out = out + float(levy_part.psi_antiderivative(b))
            return out
    else:
        g = mech.levy.gamma
        K, q = mech.levy.c / (g + 1.0), g + 1.0

        def lower(b):
            return 0.5 * a * b * b

    return K, q, lower


def _mean_psi(mech: BranchingMechanism, lo: float, hi: float) -> float:
    x = 0.5 * (hi + lo) + 0.5 * (hi - lo) * _GL_X
    return 0.5 * float(np.dot(_GL_W, mech.psi(x)))


def _energy_integral(mech: BranchingMechanism, x0: float, k: float = 1.0, A: float = 0.0, rtol: float = 1e-11) -> float:
    """Integral over b > x0 of (A + k*(Psi(b) - Psi(x0)))^{-1/2}.

    Near x0 the substitution b = x0(1+u^2) removes the square-root
    singularity and the inner integral of psi is done by Gauss-Legendre, so
    nothing cancels. Beyond a cutoff B the top power of Psi takes over and the
    remainder is integrated in closed form; B is raised until the lower-order
    terms are negligible there.
    """
    if not x0 > 0:
        raise DomainError("energy integral needs x0 > 0")
    K, q, lower = _leading_power(mech)
    psi0 = float(mech.psi_antiderivative(x0))

    def near(u):
        if u == 0.0:
            return 0.0 if A > 0 else 2.0 * x0 / math.sqrt(k * x0 * float(mech.psi(x0)))
        m = _mean_psi(mech, x0, x0 * (1.0 + u * u))
        return 2.0 * x0 / math.sqrt(A / (u * u) + k * x0 * m)

    part_near = integrate.quad(near, 0.0, 1.0, epsabs=0.0, epsrel=rtol, limit=200)[0]

    log_cap = 690.0 / q  # keeps K*B^q well inside double range
    B = 1e6 * x0
    while True:
        rel = abs(A / k - psi0 + lower(B)) / (K * B**q)
        if rel < 1e-10 or math.log(B * 10.0) > log_cap:
            break
        B *= 10.0

    def mid(t):
        b = math.exp(t)
        gap = A + k * (float(mech.psi_antiderivative(b)) - psi0)
        return b / math.sqrt(gap)

    part_mid = integrate.quad(mid, math.log(2.0 * x0), math.log(B), epsabs=0.0, epsrel=rtol, limit=400)[0]
    part_tail = 2.0 * B ** (1.0 - 0.5 * q) / ((q - 2.0) * math.sqrt(k * K))
    return part_near + part_mid + part_tail


def integral_I(mech: BranchingMechanism, v: float) -> float:
    """I(v) = int_v^inf db / sqrt(int_v^b psi)."""
    return _energy_integral(mech, float(v))


# ---------------------------------------------------------------------------
# radial profiles


@dataclass
class RadialProfile:
    kind: str  # "interior" or "exterior"
    r: float
    d: int
    s: np.ndarray
    values: np.ndarray
    shooting: float
    blowup: float
    residual: float
    tail_ratio: float | None = None

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.s, self.values]), delimiter=",", header="s,value", comments="", fmt="%.17g")


def _psi_scale(mech: BranchingMechanism, r: float) -> float:
    """Value U with psi(U)/U = r^{-2}, the natural size of a profile at radius r."""
    target = r ** -2
    if mech.alpha >= target:
        return 1.0
    return float(_bisect_increasing(mech.psi_tilde, np.asarray(target)))


def _end_value(mech: BranchingMechanism, scale: float) -> float:
    _, q, _ = _leading_power(mech)
    return min(scale * 1e10 ** (1.0 / (0.5 * q - 1.0)), 10.0 ** (280.0 / q - 6.0))


_ODE = dict(method="DOP853", rtol=1e-12)


def _interior_shot(mech: BranchingMechanism, d: int, c: float, want_solution: bool = False):
    psi_c = float(mech.psi(c))
    ell = math.sqrt(c / psi_c)
    A2 = psi_c / d
    A4 = float(mech.psi_prime(c)) * A2 / (2.0 * (d + 2))
    s0 = 1e-3 * ell
    y0 = [c + A2 * s0**2 + A4 * s0**4, 2 * A2 * s0 + 4 * A4 * s0**3]

    def rhs_s(s, y):
        return [y[1], 2.0 * float(mech.psi(y[0])) - (d - 1) * y[1] / s]

    v_switch = 10.0 * c

    def hit(s, y):
        return y[0] - v_switch

    hit.terminal, hit.direction = True, 1
    sol1 = integrate.solve_ivp(rhs_s, (s0, s0 + 1e4 * ell), y0, events=hit, dense_output=want_solution,
                               atol=[1e-14 * c, 1e-14 * c / ell], **_ODE)
    if sol1.status != 1:
        raise RadialSolveError(f"interior shot from v(0)={c} did not reach {v_switch}")
    s1, p1 = sol1.t_events[0][0], sol1.y_events[0][0][1]

    def rhs_tau(tau, y):
        v = math.exp(tau)
        s, w = y
        p = math.exp(w)
        return [v / p, v * (2.0 * float(mech.psi(v)) - (d - 1) * p / s) / (p * p)]

    v_end = _end_value(mech, c)
    sol2 = integrate.solve_ivp(rhs_tau, (math.log(v_switch), math.log(v_end)), [s1, math.log(p1)],
                               dense_output=want_solution, atol=[1e-14 * ell, 1e-13], **_ODE)
    if not sol2.success:
        raise RadialSolveError(f"interior shot from v(0)={c} failed near blow-up: {sol2.message}")
    s_end, w_end = sol2.y[:, -1]
    R = s_end + _energy_integral(mech, v_end, k=4.0, A=math.exp(2 * w_end))
    return R, (sol1, sol2, s0)


def _bracket_log(f: Callable[[float], float], x0: float, step: float = math.log(4.0), max_iter: int = 200):
    """Bracket a sign change of an increasing function f of a log-variable."""
    lo = hi = x0
    flo = fhi = f(x0)
    it = 0
    while flo > 0:
        hi, fhi = lo, flo
        lo -= step
        flo = f(lo)
        it += 1
        if it > max_iter:
            raise RadialSolveError("could not bracket the shooting parameter from below")
    while fhi < 0:
        lo, flo = hi, fhi
        hi += step
        fhi = f(hi)
        it += 1
        if it > max_iter:
            raise RadialSolveError("could not bracket the shooting parameter from above")
    return lo, hi


def _fd4(fun, x, h):
    """Four-point central difference of a vector-valued function."""
    return (-fun(x + 2 * h) + 8 * fun(x + h) - 8 * fun(x - h) + fun(x - 2 * h)) / (12 * h)


def _fd_residual_interior(mech, d, r, sols) -> float:
    sol1, sol2, s0 = sols
    worst = 0.0
    # phase in s
    s_a, s_b = sol1.t[0], sol1.t[-1]
    for s in np.linspace(s_a, s_b, 60)[1:-1]:
        h = 5e-4 * min(r - s, s - s_a, s_b - s)
        if h <= 0:
            continue
        pm2, pm1, pp1, pp2 = (sol1.sol(s + k * h)[1] for k in (-2, -1, 1, 2))
        v2 = (-pp2 + 8 * pp1 - 8 * pm1 + pm2) / (12 * h)
        v, p = sol1.sol(s)
        psi_v = float(mech.psi(v))
        worst = max(worst, abs(0.5 * (v2 + (d - 1) * p / s) - psi_v) / psi_v)
    # phase in log v, stopping short of the boundary layer
    h = 1e-2
    taus = np.linspace(sol2.t[0] + 2 * h, sol2.t[-1] - 2 * h, 200)
    for tau in taus:
        s, w = sol2.sol(tau)
        if s > r * (1 - 1e-3):
            break
        ds, dw = _fd4(sol2.sol, tau, h)
        p = math.exp(w)
        v2 = p * dw / ds
        v = math.exp(tau)
        psi_v = float(mech.psi(v))
        worst = max(worst, abs(0.5 * (v2 + (d - 1) * p / s) - psi_v) / psi_v)
    return worst


def solve_radial_interior(mech: BranchingMechanism, d: int, r: float) -> tuple[RadialProfile, float]:
    """Radial solution of (1/2) Lap v = psi(v) in B(0, r) blowing up at |x| = r.

    Shoots from the centre with v(0) = c, v'(0) = 0 and solves for log c so
    that the blow-up radius equals r. Returns the profile and v_r(0).
    """
    if d < 1 or not r > 0:
        raise DomainError("interior problem needs d >= 1 and r > 0")
    log_r = math.log(r)

    def f(logc):
        return log_r - math.log(_interior_shot(mech, d, math.exp(logc))[0])

    guess = math.log(max(_psi_scale(mech, r), 1e-300))
    lo, hi = _bracket_log(f, guess)
    logc = optimize.brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    c = math.exp(logc)
    R, sols = _interior_shot(mech, d, c, want_solution=True)
    if abs(R / r - 1) > 1e-4:
        raise RadialSolveError(f"blow-up radius {R} misses r={r}")
    sol1, sol2, s0 = sols
    s_a = np.linspace(s0, sol1.t[-1], 200)
    v_a = sol1.sol(s_a)[0]
    tau = np.linspace(sol2.t[0], sol2.t[-1], 400)
    s_b = sol2.sol(tau)[0]
    keep = s_b < r
    s = np.concatenate([[0.0], s_a, s_b[keep][1:]])
    v = np.concatenate([[c], v_a, np.exp(tau[keep][1:])])
    res = _fd_residual_interior(mech, d, r, sols)
    return RadialProfile("interior", r, d, s, v, c, R, res), c


def _exterior_shot(mech: BranchingMechanism, d: int, r: float, s_max: float, C: float, u_end: float, want_solution=False):
    u0 = C * s_max ** (2 - d)
    pneg0 = (d - 2) * C * s_max ** (1 - d)
    s_floor = 1e-2 * r

    def rhs(tau, y):
        u = math.exp(tau)
        s, w = y
        q = math.exp(w)  # q = -u'
        return [-u / q, u * (2.0 * float(mech.psi(u)) + (d - 1) * q / s) / (q * q)]

    def floor(tau, y):
        return y[0] - s_floor

    floor.terminal, floor.direction = True, -1
    if u0 >= u_end:
        return s_max, None
    sol = integrate.solve_ivp(rhs, (math.log(u0), math.log(u_end)), [s_max, math.log(pneg0)], events=floor,
                              dense_output=want_solution, atol=[1e-14 * r, 1e-13], **_ODE)
    if sol.status == 1:
        return s_floor * 0.5, sol  # blow-up lies below the floor
    if not sol.success:
        raise RadialSolveError(f"exterior shot failed: {sol.message}")
    s_end, w_end = sol.y[:, -1]
    R = s_end - _energy_integral(mech, u_end, k=4.0, A=math.exp(2 * w_end))
    return R, sol


def solve_radial_exterior(mech: BranchingMechanism, d: int, r: float, s_max: float | None = None) -> RadialProfile:
    """Radial solution of (1/2) Lap u = psi(u) outside B(0, r), infinite on |x| = r.

    Shoots inward from ``s_max`` with the harmonic tail u = C s^{2-d} and
    solves for log C. ``tail_ratio`` is psi(u)/(u/s^2) at s_max: when it is not
    small the harmonic tail is not a consistent far field.
    """
    if d < 3:
        raise DomainError("exterior problem needs d >= 3")
    s_max = 1e3 * r if s_max is None else float(s_max)
    if s_max < 10 * r:
        raise DomainError("s_max must be at least 10 r")
    U = _psi_scale(mech, r)
    u_end = _end_value(mech, U)
    log_r = math.log(r)

    def f(logC):
        R, _ = _exterior_shot(mech, d, r, s_max, math.exp(logC), u_end)
        return math.log(R) - log_r

    guess = math.log(U * r ** (d - 2))
    lo, hi = _bracket_log(f, guess)
    logC = optimize.brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    C = math.exp(logC)
    R, sol = _exterior_shot(mech, d, r, s_max, C, u_end, want_solution=True)
    if not (r <= R * (1 + 1e-12) and R <= r * (1 + 1e-4)) and abs(R / r - 1) > 1e-4:
        raise RadialSolveError(f"exterior blow-up radius {R} misses r={r}")
    tau = np.linspace(sol.t[0], sol.t[-1], 600)
    s = sol.sol(tau)[0]
    u = np.exp(tau)
    order = np.argsort(s)
    s, u = s[order], u[order]
    keep = s > r
    s, u = s[keep], u[keep]

    worst = 0.0
    h = 1e-2
    for t in np.linspace(sol.t[0] + 2 * h, sol.t[-1] - 2 * h, 300):
        s0, w0 = sol.sol(t)
        if s0 < r * (1 + 1e-3):
            continue
        q = math.exp(w0)
        ds, dw = _fd4(sol.sol, t, h)
        u2 = -q * dw / ds  # u'' = dp/ds with p = -q
        ut = math.exp(t)
        psi_u = float(mech.psi(ut))
        lap = abs(u2) + (d - 1) * q / s0
        res = abs(0.5 * (u2 - (d - 1) * q / s0) - psi_u) / max(psi_u, 0.5 * lap)
        worst = max(worst, res)
    u_far = C * s_max ** (2 - d)
    tail_ratio = float(mech.psi(u_far)) * s_max**2 / u_far
    return RadialProfile("exterior", r, d, s, u, C, R, worst, tail_ratio)


# ---------------------------------------------------------------------------
# Keller bracket and constants


@dataclass(frozen=True)
class KellerVerdict:
    r: float
    d: int
    v0: float
    I_value: float
    lower: float
    upper: float
    residual: float

    @property
    def holds(self) -> bool:
        return self.lower <= self.I_value <= self.upper

    @property
    def width_ratio(self) -> float:
        return self.upper / self.lower


def keller_check(mech: BranchingMechanism, d: int, r: float) -> KellerVerdict:
    profile, v0 = solve_radial_interior(mech, d, r)
    return KellerVerdict(r, d, v0, integral_I(mech, v0), 2.0 * r / math.sqrt(d), 2.0 * r, profile.residual)


def comparison_constant(mech: BranchingMechanism, c: float, grid: tuple[float, float] = (1.0, 1e8), n: int = 121) -> float:
    """inf over v, a in the grid of psi(v a) / (psi(v) a^c)."""
    v = np.geomspace(grid[0], grid[1], n)
    a = v / grid[0]
    lv = np.log(np.asarray(mech.psi(v)))
    lva = np.log(np.asarray(mech.psi(np.multiply.outer(v, a))))
    ratio = lva - lv[:, None] - c * np.log(a)[None, :]
    return float(np.exp(ratio.min()))


def power_integral_constant(c: float) -> float:
    """int_1^inf db / sqrt(int_1^b a^c da) for c in (1, 2]."""
    if not 1 < c <= 2:
        raise DomainError("power integral constant needs 1 < c <= 2")
    m = BranchingMechanism.quadratic(1.0) if c == 2 else BranchingMechanism.stable(c)
    return integral_I(m, 1.0)


@dataclass(frozen=True)
class LemmaConstants:
    d: int
    varrho: float
    c: float
    C_delta: float
    K_c: float
    c1: float
    C2: float

    def records(self) -> list[Constant]:
        return [
            Constant("c", self.c, "midpoint of (1, delta) unless given"),
            Constant("C_delta", self.C_delta, "inf over a log grid of psi(v a)/(psi(v) a^c), v, a in [1, 1e8]"),
            Constant("K_c", self.K_c, "int_1^inf db / sqrt((b^(c+1)-1)/(c+1))"),
            Constant("c1", self.c1, "K_c^2 / C_delta"),
            Constant("C2", self.C2, "c1 * d / varrho^2"),
        ]


def lemma_constants(mech: BranchingMechanism, d: int, varrho: float = 0.25, c: float | None = None) -> LemmaConstants:
    if c is None:
        delta = exponents(mech).delta if mech.family != "tabulated" else None
        if delta is None:
            raise UnsupportedMechanism("no analytic delta for this mechanism; pass c explicitly")
        if delta <= 1:
            raise DomainError("constants need delta > 1")
        c = 0.5 * (1.0 + delta)
    C_delta = comparison_constant(mech, c)
    K_c = power_integral_constant(c)
    c1 = K_c**2 / C_delta
    return LemmaConstants(d, varrho, c, C_delta, K_c, c1, c1 * d / varrho**2)


def exterior_bound_check(mech: BranchingMechanism, d: int, r: float, varrho: float, C2: float,
                         layer: float = 1e-3, profile: RadialProfile | None = None) -> dict:
    """Compare the exterior profile with ((1+varrho) r/s)^{d-2} psi'^{-1}(C2 r^-2)."""
    prof = profile if profile is not None else solve_radial_exterior(mech, d, r)
    cut = (1.0 + varrho) * r * (1.0 + layer)
    sel = prof.s >= cut
    q = float(invert(mech, "psi_prime", C2 * r ** -2))
    bound = ((1.0 + varrho) * r / prof.s[sel]) ** (d - 2) * q
    ratio = prof.values[sel] / bound
    return {"r": r, "varrho": varrho, "C2": C2, "points": int(sel.sum()),
            "violations": int(np.sum(ratio > 1.0)), "max_ratio": float(ratio.max())}


# ---------------------------------------------------------------------------
# q_r, J(r), theta radii


def log_J(mech: BranchingMechanism, d: int, log_r: float, C2: float) -> tuple[float, float]:
    """(log q_r, log J(r)) evaluated entirely in log space."""
    if d <= 2:
        raise DomainError("J needs d > 2")
    lq = log_invert(mech, "psi_prime", math.log(C2) - 2.0 * log_r)
    if lq < 0:
        raise DomainError("J is defined for r < (C2/psi'(1))^(1/2)")
    e = 2.0 / (d - 2)
    f = lambda t: mech.log_psi_prime(t) - e * t
    top = max(f(0.0), f(lq))
    val = integrate.quad(lambda t: math.exp(f(t) - top), 0.0, lq, epsabs=0.0, epsrel=1e-11, limit=400)[0]
    if val == 0.0:
        return lq, -math.inf
    return lq, 2.0 * log_r + e * lq + top + math.log(val)


def q_and_J(mech: BranchingMechanism, d: int, r: float, C2: float | LemmaConstants) -> tuple[float, float]:
    C2v = C2.C2 if isinstance(C2, LemmaConstants) else float(C2)
    lq, lj = log_J(mech, d, math.log(r), C2v)
    return math.exp(lq), math.exp(lj)


@dataclass
class RadiiSequences:
    d: int
    c: float
    C2: float
    theta_log: np.ndarray
    lambda_log: np.ndarray
    r_log: np.ndarray
    rho_index: np.ndarray | None = None
    rho_log: np.ndarray | None = None
    checks: dict = field(default_factory=dict)

    @property
    def r(self) -> np.ndarray:
        return np.exp(self.r_log)

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.lambda_log)


def admissible_c_window(mech: BranchingMechanism, d: int) -> tuple[float, float]:
    gam = exponents(mech).gamma_lower
    lo, hi = 2.0 / (d - 2), gam - 1.0
    if not lo < hi:
        raise DomainError(f"empty window (2/(d-2), gamma-1) = ({lo:.4g}, {hi:.4g}); d is too small")
    return lo, hi


def _lambda_theta_log(mech: BranchingMechanism, c: float, log_theta: float) -> float:
    h = lambda t: mech.log_psi_prime(t) - c * t
    if h(0.0) >= log_theta:
        raise DomainError("theta must exceed psi'(1)")
    lo, step = 0.0, math.log(2.0)
    hi = lo + step
    while h(hi) < log_theta:
        lo, hi = hi, hi + step
        if hi > 1e12:
            raise DomainError("no root for lambda_theta")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if h(mid) < log_theta:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def radii_theta(mech: BranchingMechanism, d: int, c_choice: float | None, theta_list=None, C2: float = 1.0,
                log_theta_list=None, rho_n: int = 8) -> RadiiSequences:
    """lambda_theta, r_theta over a theta list, and rho_n = r_{e^{n^2}} for n <= rho_n.

    theta values can be given directly or through their logarithms.
    """
    lo, hi = admissible_c_window(mech, d)
    c = 0.5 * (lo + hi) if c_choice is None else float(c_choice)
    if not lo < c < hi:
        raise DomainError(f"c={c} outside the admissible window ({lo:.4g}, {hi:.4g})")
    if log_theta_list is None:
        log_theta_list = np.log(np.asarray(theta_list, dtype=float))
    lt = np.asarray(log_theta_list, dtype=float)
    lam = np.array([_lambda_theta_log(mech, c, x) for x in lt])
    rl = 0.5 * (math.log(C2) - np.array([mech.log_psi_prime(x) for x in lam]))
    out = RadiiSequences(d, c, C2, lt, lam, rl)
    out.checks["decreasing"] = bool(np.all(np.diff(rl) < 0)) if np.all(np.diff(lt) > 0) else None
    # ratio bound r_{theta'}/r_theta <= (theta/theta')^{1/2}
    pair = rl[None, :] - rl[:, None] - 0.5 * (lt[:, None] - lt[None, :])
    upper = np.triu(np.ones_like(pair, dtype=bool), 1)
    out.checks["ratio_bound_max_excess"] = float(pair[upper].max()) if upper.any() else 0.0

    lp1 = mech.log_psi_prime(0.0)
    n = np.arange(0, rho_n + 1)
    n = n[n.astype(float) ** 2 > lp1]
    if n.size:
        lam_n = np.array([_lambda_theta_log(mech, c, float(k * k)) for k in n])
        rho = 0.5 * (math.log(C2) - np.array([mech.log_psi_prime(x) for x in lam_n]))
        out.rho_index, out.rho_log = n, rho
        steps = rho[1:] - rho[:-1] + n[:-1]
        out.checks["miam_step_max"] = float(steps.max()) if steps.size else -math.inf
        pos = n > 0
        out.checks["miam_growth"] = (-rho[pos] / n[pos] ** 2).tolist()
        out.checks["miam_growth_sup"] = float(np.max(-rho[pos] / n[pos] ** 2)) if pos.any() else None
    if lt.size >= 2:
        slope = -np.polyfit(lt, rl, 1)[0]
        c2_fit = max(slope, float(np.max(-rl / np.maximum(lt, 1e-300)))) if np.all(lt > 0) else slope
        c1_fit = float(np.exp(np.min(rl + c2_fit * lt)))
        out.checks["lower_power_fit"] = {"c1": c1_fit, "c2": c2_fit}
    return out


# ---------------------------------------------------------------------------
# s_n sequence


def _log_phi_star(mech: BranchingMechanism, log_lam: float) -> float:
    lp = mech.log_psi_prime(log_invert(mech, "psi", log_lam))
    if mech.alpha > 0:
        return lp + math.log1p(-mech.alpha * math.exp(-lp))
    return lp


@dataclass
class SnSequence:
    u: float
    u_prime: float
    a: float
    eps: float
    n: np.ndarray
    lambda_log: np.ndarray
    s_log: np.ndarray
    markov: np.ndarray
    fitted_c: float

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.s_log)

    @property
    def complement(self) -> np.ndarray:
        return 1.0 - self.markov


def sn_sequence(mech: BranchingMechanism, u_exponent: float, n_max: int = 400, scan_step: float = 2.0 ** 0.25) -> SnSequence:
    """Radii s_n = phi*(lambda_n)^{-(1+eps)/2} with lambda_n >= 2^n in the sandwich window.

    a is the midpoint of (0, (gamma-1)/gamma), the admissible range for the
    lower index of phi* = psi*' o psi^{-1}.
    """
    gam = exponents(mech).gamma_lower
    top = 2.0 * gam / (gam - 1.0)
    u = float(u_exponent)
    if not 0 < u < top:
        raise DomainError(f"u must lie in (0, {top:.6g})")
    u_p = 0.5 * (u + top)
    a = 0.5 * (gam - 1.0) / gam
    eps = 0.5 * (u_p / u - 1.0)
    ls = math.log(scan_step)
    lam_l, s_l = [], []
    prev = -math.inf
    for k in range(1, n_max + 1):
        x = max(k * math.log(2.0), prev + ls)  # keep lambda_n strictly increasing
        for _ in range(100000):
            lp = _log_phi_star(mech, x)
            if a * x <= lp <= (2.0 / u_p) * x:
                break
            x += ls
        else:
            raise DomainError(f"no lambda_n found for n={k}")
        prev = x
        lam_l.append(x)
        s_l.append(-(1.0 + eps) / 2.0 * lp)
    lam_l, s_l = np.array(lam_l), np.array(s_l)
    lp_arr = -2.0 / (1.0 + eps) * s_l
    # Markov term for P(T_{gamma(2 s_n)} > s_n^u)
    num = -np.expm1(-2.0 * math.sqrt(2.0) * np.exp(s_l + 0.5 * lp_arr))
    den = -np.expm1(-np.exp(lam_l + u * s_l))
    markov = np.minimum(1.0, num / den)
    n = np.arange(1, n_max + 1)
    fitted = float(np.max(markov * 2.0 ** (n * a * eps / 2.0)))
    return SnSequence(u, u_p, a, eps, n, lam_l, s_l, markov, fitted)


# ---------------------------------------------------------------------------
# subordinator tails


def _tail_terms(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bounds from x = rho*Phi(lam) and y = lam*a."""
    den = -np.expm1(-y)
    lower = (np.exp(-x) - np.exp(-y)) / den
    upper = -np.expm1(-x) / den
    return np.clip(lower, 0.0, 1.0), np.clip(upper, 0.0, 1.0)


def subordinator_tail_bounds(Phi: Callable[[float], float], rho: float, a: float, lam: float) -> tuple[float, float]:
    """Lower bound on P(S_rho <= a) and Markov upper bound on P(S_rho >= a)."""
    if not (rho > 0 and a > 0 and lam > 0):
        raise DomainError("rho, a and lam must be positive")
    lo, up = _tail_terms(np.asarray(rho * Phi(lam)), np.asarray(lam * a))
    return float(lo), float(up)


@dataclass
class BoundReport:
    n: np.ndarray
    rho_log: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    lower_partial: np.ndarray
    upper_partial: np.ndarray
    threshold: float
    first_exceed: int | None
    upper_tail_after: dict
    lower_decay_fit: float
    constants: list[Constant] = field(default_factory=list)

    @property
    def diverges(self) -> bool:
        return self.first_exceed is not None

    def to_json(self) -> str:
        return json.dumps({
            "n": self.n.tolist(),
            "rho_log": self.rho_log.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "lower_partial": self.lower_partial.tolist(),
            "upper_partial": self.upper_partial.tolist(),
            "threshold": self.threshold,
            "first_exceed": self.first_exceed,
            "diverges": self.diverges,
            "upper_tail_after": self.upper_tail_after,
            "lower_decay_fit": self.lower_decay_fit,
            "constants": [c.to_dict() for c in self.constants],
        }, indent=2)


def default_rho_ladder(n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """log rho_n = -(n^2 + 4), n >= 1, a ladder meeting both growth conditions."""
    n = np.arange(1, n_max + 1)
    return n, -(n.astype(float) ** 2 + 4.0)


def subordinator_series(mech: BranchingMechanism, rho_log: Sequence[float] | None = None, threshold: float = 5.0,
                        budget: int = 10_000, tail_from: int = 50, upper_terms: int = 400) -> BoundReport:
    """Lower and upper series for the subordinator with exponent sqrt(psi*' o psi^{-1}).

    Lower terms bound P(S_{rho_n} <= g(4 rho_n)) from below with
    lambda_n = Phi^{-1}(loglog(1/(4 rho_n)) / (4 rho_n)); they are summed until
    the partial sum exceeds ``threshold`` or ``budget`` terms are used. Upper
    terms bound P(S_{rho_{n+1}} >= g(4 rho_n)) and are summed over
    ``upper_terms`` indices.
    """
    if rho_log is None:
        n_idx, rl = default_rho_ladder(max(budget, upper_terms) + 1)
    else:
        rl = np.asarray(rho_log, dtype=float)
        n_idx = np.arange(1, rl.size + 1)
    gauge = GaugeFunction(mech, "g")
    log4 = math.log(4.0)

    def pieces(k):
        l4 = rl[k] + log4
        L = math.log(-l4)
        ly = math.log(L) - l4
        target = 2.0 * ly if mech.alpha == 0 else float(np.logaddexp(2.0 * ly, math.log(mech.alpha)))
        log_lam = log_invert(mech, "phi", target)
        y = math.exp(log_lam + gauge.log_value_from_log_r(l4))
        return L, y

    lower, lp, first = [], [], None
    s = 0.0
    for k in range(min(budget, rl.size)):
        L, y = pieces(k)
        lo, _ = _tail_terms(np.asarray(L / 4.0), np.asarray(y))
        lower.append(float(lo))
        s += float(lo)
        lp.append(s)
        if s > threshold and first is None:
            first = int(n_idx[k])
            break
    upper, up = [], []
    s = 0.0
    for k in range(min(upper_terms, rl.size - 1)):
        L, y = pieces(k)
        x = math.exp(rl[k + 1] - rl[k] - log4 + math.log(L))
        _, hi = _tail_terms(np.asarray(x), np.asarray(y))
        upper.append(float(hi))
        s += float(hi)
        up.append(s)
    upper = np.array(upper)
    tail = float(upper[tail_from:].sum()) if upper.size > tail_from else 0.0
    lower = np.array(lower)
    m = lower.size
    fit = float(np.polyfit(np.log(n_idx[:m]), np.log(lower), 1)[0]) if m >= 3 else math.nan
    return BoundReport(n_idx[: max(m, upper.size)], rl[: max(m, upper.size)], lower, upper, np.array(lp), np.array(up),
                       threshold, first, {"index": tail_from, "sum": tail}, fit)


# ---------------------------------------------------------------------------
# exit times


@dataclass(frozen=True)
class ExitTimeResult:
    d: int
    r: float
    lam: float
    exact_1d: float
    upper_dd: float
    mc_mean: float | None = None
    mc_se: float | None = None
    paths: int = 0
    dt: float | None = None


def _mc_exit_laplace(d, r, lam, paths, dt, rng, block=128, chunk=20000):
    t_max = 30.0 / lam
    sq = math.sqrt(dt)
    vals = np.empty(paths)
    done = 0
    while done < paths:
        m = min(chunk, paths - done)
        x = np.zeros((m, d))
        t_exit = np.full(m, np.inf)
        alive = np.arange(m)
        t = 0.0
        while alive.size and t < t_max:
            steps = rng.standard_normal((alive.size, block, d))
            steps *= sq
            path = np.cumsum(steps, axis=1)
            path += x[alive][:, None, :]
            norm = np.abs(path[:, :, 0]) if d == 1 else np.sqrt(np.einsum("ijk,ijk->ij", path, path))
            gap1 = r - norm
            gap0 = np.concatenate([(r - np.sqrt((x[alive] ** 2).sum(axis=1)))[:, None], gap1[:, :-1]], axis=1)
            # Brownian-bridge crossing chance against the tangent half-space
            with np.errstate(over="ignore"):
                p_cross = np.exp(-2.0 * np.maximum(gap0, 0) * np.maximum(gap1, 0) / dt)
            out = (gap1 <= 0) | (rng.random(gap1.shape) < p_cross)
            hit = out.any(axis=1)
            first = np.argmax(out, axis=1)
            idx = alive[hit]
            t_exit[idx] = t + (first[hit] + 1) * dt
            stay = ~hit
            x[alive[stay]] = path[stay, -1, :]
            alive = alive[stay]
            t += block * dt
        vals[done:done + m] = np.exp(-lam * t_exit)
        done += m
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(paths))


def exit_time_laplace(d: int, r: float, lam: float, mc_paths: int = 0, dt: float = 1e-4,
                      rng: np.random.Generator | None = None) -> ExitTimeResult:
    """E[exp(-lam * exit time of B(0,r))] for Brownian motion from 0.

    ``exact_1d`` is 1/cosh(r sqrt(2 lam)) and ``upper_dd`` is
    2d exp(-r sqrt(2 lam/d)). With ``mc_paths`` > 0 a random-walk estimate in
    dimension d is added; each step also tests for an unobserved crossing with
    the Brownian-bridge probability against the tangent half-space, which
    removes most of the discrete-monitoring bias. Paths alive at time 30/lam
    contribute 0 (error below e^-30).
    """
    if not (r > 0 and lam >= 0):
        raise DomainError("need r > 0 and lam >= 0")
    exact = 1.0 / math.cosh(r * math.sqrt(2.0 * lam))
    upper = 2.0 * d * math.exp(-r * math.sqrt(2.0 * lam / d))
    if mc_paths <= 0:
        return ExitTimeResult(d, r, lam, exact, upper)
    if lam == 0:
        return ExitTimeResult(d, r, lam, exact, upper, 1.0, 0.0, mc_paths, dt)
    rng = np.random.default_rng() if rng is None else rng
    mean, se = _mc_exit_laplace(d, r, lam, mc_paths, dt, rng)
    return ExitTimeResult(d, r, lam, exact, upper, mean, se, mc_paths, dt)


# ---------------------------------------------------------------------------
# threshold algebra


def brownian_ball_constant(d: int) -> float:
    """int_0^inf P(|B_c| <= 1) e^{-c} dc for d-dimensional Brownian motion."""
    f = lambda c: stats.chi2.cdf(1.0 / c, d) * math.exp(-c) if c > 0 else 1.0
    return integrate.quad(f, 0.0, np.inf, epsrel=1e-10, limit=200)[0]


def mu_ratio_constant(mech: BranchingMechanism, a: float, log_r_grid=None, q_grid=None) -> float:
    """sup of mu_{r,q} / (q^a mu_{r,1}) over the grids."""
    lr = np.linspace(-1e5, -math.exp(8.0), 12) if log_r_grid is None else np.asarray(log_r_grid)
    qs = np.geomspace(1.0, 1e6, 25) if q_grid is None else np.asarray(q_grid)
    worst = -math.inf
    for x in lr:
        base = log_mu_rq(mech, float(x), 1.0)
        for q in qs:
            worst = max(worst, log_mu_rq(mech, float(x), float(q)) - base - a * math.log(q))
    return math.exp(worst)


@dataclass(frozen=True)
class FExplorerReport:
    log_r: float
    kappa: float
    q: float
    F: float
    kappa0: float
    q_kappa: float | None
    F_at_q_kappa: float | None
    F_bound: float | None
    C: float
    a: float
    mu_ratio: float

    @property
    def negative(self) -> bool | None:
        return None if self.F_at_q_kappa is None else self.F_at_q_kappa < 0


def f_explorer(mech: BranchingMechanism, log_r: float, kappa: float, q: float = 1.0, d: int = 3,
               mu_ratio: float | None = None) -> FExplorerReport:
    """F(mu_{r,q}, r, kappa) = kappa mu g(r) - C r sqrt(phi(mu)), with its kappa_0 / q_kappa algebra.

    Uses g(r) = loglog(1/r)/mu_{r,1} and r sqrt(phi(mu_{r,q})) = sqrt(q) loglog(1/r),
    so F = (kappa mu_{r,q}/mu_{r,1} - C sqrt(q)) loglog(1/r); all in log space.
    """
    if not log_r < -math.exp(8.0):
        raise DomainError("f_explorer needs r < exp(-e^8); pass log r")
    if not kappa > 0:
        raise DomainError("kappa must be positive")
    rep = exponents(mech)
    delta = rep.delta if rep.delta is not None else rep.gamma_lower
    delta_phi = (delta - 1.0) / delta
    a = 2.0 / delta_phi
    C = math.sqrt(brownian_ball_constant(d) / (32.0 * d))
    cm = mu_ratio_constant(mech, a) if mu_ratio is None else mu_ratio
    L = math.log(-log_r)
    base = log_mu_rq(mech, log_r, 1.0)

    def F_of(qq):
        return (kappa * math.exp(log_mu_rq(mech, log_r, qq) - base) - C * math.sqrt(qq)) * L

    kappa0 = C / (2.0 * cm)
    if kappa < kappa0:
        qk = (kappa0 / kappa) ** (1.0 / (a - 0.5))
        Fk = F_of(qk)
        bound = -0.5 * C * (kappa0 / kappa) ** (1.0 / (2.0 * a - 1.0)) * L
    else:
        qk = Fk = bound = None
    return FExplorerReport(log_r, kappa, q, F_of(q), kappa0, qk, Fk, bound, C, a, cm)


def convex_gauge_check(mech: BranchingMechanism, c: float, r) -> np.ndarray:
    """g(r) psi'^{-1}(c/r^2) / (4 r^2); at most 1 below the lemma threshold."""
    rr = np.asarray(r, dtype=float)
    gauge = GaugeFunction(mech, "g")

    def one(x):
        # log space: c / r^2 overflows long before the ladders end
        lr = math.log(x)
        lq = log_invert(mech, "psi_prime", math.log(c) - 2.0 * lr)
        return math.exp(gauge.log_value_from_log_r(lr) + lq - math.log(4.0) - 2.0 * lr)

    out = np.array([one(float(x)) for x in rr.reshape(-1)]).reshape(rr.shape)
    return float(out) if rr.ndim == 0 else out


def convex_gauge_threshold(c: float) -> float:
    """Largest r with loglog(1/r) >= max(1, sqrt(c))."""
    return math.exp(-math.exp(max(1.0, math.sqrt(c))))
