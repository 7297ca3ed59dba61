"""The limiting gap constant: the f functional, the programs P, P' and Q, support
enumeration and the end-to-end computation.

For a harmonic-mod-1 function xi on Z^2, f(xi) = sum (1 - cos 2 pi xi(x)).  The
constant is the infimum of f(G * v) over nonzero reduced frequencies; it is
located by ruling out large prevector heights with separable trigonometric
programs and then evaluating f on the surviving candidate configurations.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from itertools import combinations, product

import numba
import numpy as np
from scipy.optimize import linprog, minimize

from . import greens
from .lattice import Domain, SparseIntField

TWO_PI = 2.0 * math.pi
QUARTER = 0.25
THRESHOLD = 2.869
DIHEDRAL = ((1, 0, 0, 1), (-1, 0, 0, 1), (1, 0, 0, -1), (-1, 0, 0, -1),
            (0, 1, 1, 0), (0, -1, 1, 0), (0, 1, -1, 0), (0, -1, -1, 0))
STEPS = ((1, 0), (-1, 0), (0, 1), (0, -1))


class PipelineError(RuntimeError):
    """A numerical guard of the gap pipeline failed; ``step`` names the stage."""

    def __init__(self, step: str, message: str):
        super().__init__(f"[{step}] {message}")
        self.step = step


class InfeasibleProgram(ValueError):
    pass


def cost(x):
    return 1.0 - np.cos(TWO_PI * np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# f functional


@dataclass
class FValue:
    value: float
    tail_bound: float
    l2_squared: float
    l2_error: float
    window: int

    def to_json(self) -> dict:
        return {"value": self.value, "tail_bound": self.tail_bound, "l2_squared": self.l2_squared,
                "l2_error": self.l2_error, "window": self.window}


_INV_SYMBOL: dict = {}


def _inverse_symbol_squared(m: int) -> np.ndarray:
    """Weights w / lambda^2 on the half grid of a real FFT (w = 2 for paired columns)."""
    if m not in _INV_SYMBOL:
        c = np.cos(np.arange(m) * (TWO_PI / m))
        h = m // 2 + 1
        lam = 4.0 - 2.0 * c[:, None] - 2.0 * c[None, :h]
        lam[0, 0] = 1.0
        w = np.full(h, 2.0)
        w[0] = 1.0
        if m % 2 == 0:
            w[-1] = 1.0
        inv = w[None, :] / lam ** 2
        inv[0, 0] = 0.0
        _INV_SYMBOL[m] = inv
    return _INV_SYMBOL[m]


def _symbol_sum(m: int, entries: dict) -> float:
    """Riemann sum of |v_hat|^2 / lambda^2 on the m x m frequency grid."""
    grid = np.zeros((m, m))
    for (i, j), val in entries.items():
        grid[i % m, j % m] += val
    vh = np.fft.rfft2(grid)
    q = (vh.real ** 2 + vh.imag ** 2) * _inverse_symbol_squared(m)
    # pairwise summation keeps the rounding near 1e-16 relative
    return float(q.sum()) / (m * m)


def l2_norm_squared(entries: dict, tol: float = 1e-12, m0: int = 64, max_m: int = 8192):
    """||G * v||_2^2 over Z^2 by Parseval: torus sums with two Richardson levels in m.

    Returns (value, estimated error).
    """
    sums = []
    m = m0
    best, err = None, math.inf
    while m <= max_m:
        sums.append(_symbol_sum(m, entries))
        if len(sums) >= 3:
            a, b, c = sums[-3:]
            r1 = (4 * b - a) / 3
            r2 = (4 * c - b) / 3
            ext = (16 * r2 - r1) / 15
            if best is not None:
                err = abs(ext - best)
                if err <= tol:
                    return ext, err
            best = ext
        m *= 2
    return best, err


def _check_c2(v: SparseIntField):
    if v.total() != 0 or any(v.moments()):
        raise ValueError("f is defined for vectors with vanishing sum and first moments")


def harmonic_field(v: SparseIntField, M: int, tol: float = 1e-11) -> np.ndarray:
    """G_Z2 * v on the square [-M, M]^2 (row index i + M, column j + M)."""
    reach = max(max(abs(i), abs(j)) for i, j in v.entries)
    L = M + reach
    square = _cached_square(L, tol)
    out = np.zeros((2 * M + 1, 2 * M + 1))
    for (a, b), val in v.entries.items():
        out += val * square[L - M - a:L + M + 1 - a, L - M - b:L + M + 1 - b]
    return out


def f_functional(v: SparseIntField, M: int = 64, l2_tol: float = 1e-12) -> FValue:
    """f(G * v) from a window sum of the quartic remainder plus the exact l2 norm."""
    if v.domain.is_torus:
        raise ValueError("f is defined on Z^2")
    _check_c2(v)
    if not v:
        return FValue(0.0, 0.0, 0.0, 0.0, M)
    xi = harmonic_field(v, M)
    quartic = cost(xi) - 2.0 * math.pi ** 2 * xi ** 2
    l2, l2_err = l2_norm_squared(dict(v.entries), tol=l2_tol)
    inside = math.fsum((xi ** 2).ravel())
    outside = max(l2 - inside, 0.0)
    value = math.fsum(quartic.ravel()) + 2.0 * math.pi ** 2 * l2
    tail = 2.0 * math.pi ** 4 / 3.0 * outside ** 2
    return FValue(value, tail, l2, l2_err, M)


def delta12(domain: Domain | None = None) -> SparseIntField:
    """delta_1 * delta_2 on Z^2: +1 at (0,0) and (-1,-1), -1 at (-1,0) and (0,-1)."""
    domain = domain or Domain.window(64)
    return SparseIntField.from_pairs(domain, [(0, 0, 1), (-1, -1, 1), (-1, 0, -1), (0, -1, -1)])


# ---------------------------------------------------------------------------
# convex core: separable 1 - cos cost on boxes inside [-1/4, 1/4]


@numba.njit(cache=True)
def _primal(c, lo, hi, x, d):
    n = c.shape[0]
    for i in range(n):
        s = c[i] / TWO_PI
        if s > 1.0:
            s = 1.0
        elif s < -1.0:
            s = -1.0
        xi = math.asin(s) / TWO_PI
        if xi <= lo[i]:
            x[i] = lo[i]
            d[i] = 0.0
        elif xi >= hi[i]:
            x[i] = hi[i]
            d[i] = 0.0
        else:
            x[i] = xi
            cs = math.cos(TWO_PI * xi)
            d[i] = 1.0 / (TWO_PI * TWO_PI * cs) if cs > 1e-300 else 0.0


@numba.njit(cache=True)
def _dual_value(A, b, lam, lo, hi, x, d):
    c = A.T @ lam
    _primal(c, lo, hi, x, d)
    g = 0.0
    for i in range(x.shape[0]):
        g += 1.0 - math.cos(TWO_PI * x[i]) - c[i] * x[i]
    for k in range(b.shape[0]):
        g += lam[k] * b[k]
    return g


@numba.njit(cache=True)
def _residual(A, b, eq, lam, x):
    r = b - A @ x
    worst = 0.0
    for k in range(b.shape[0]):
        if eq[k]:
            e = abs(r[k])
        else:
            e = max(r[k], 0.0)
            comp = abs(lam[k] * r[k])
            if comp > e:
                e = comp
        if e > worst:
            worst = e
    return worst


@numba.njit(cache=True)
def _dual_newton(A, b, eq, lo, hi, lam0, tol, max_iter):
    """Maximise the concave dual of min sum(1 - cos 2 pi x) s.t. A x >= b (or = b
    on rows flagged eq), lo <= x <= hi.  Returns (x, lam, residual, iterations, status)
    with status 0 converged, 1 iteration cap, 2 dual unbounded (infeasible)."""
    K, n = A.shape
    lam = lam0.copy()
    for k in range(K):
        if not eq[k] and lam[k] < 0.0:
            lam[k] = 0.0
    x = np.zeros(n)
    d = np.zeros(n)
    xt = np.zeros(n)
    dt = np.zeros(n)
    g = _dual_value(A, b, lam, lo, hi, x, d)
    for it in range(max_iter):
        res = _residual(A, b, eq, lam, x)
        if res <= tol:
            return x, lam, res, it, 0
        grad = b - A @ x
        free = np.ones(K, np.bool_)
        for k in range(K):
            if not eq[k] and lam[k] <= 1e-14 and grad[k] < 0.0:
                free[k] = False
        H = np.zeros((K, K))
        for p in range(K):
            if not free[p]:
                H[p, p] = 1.0
                continue
            for q in range(K):
                if not free[q]:
                    continue
                s = 0.0
                for i in range(n):
                    s += A[p, i] * d[i] * A[q, i]
                H[p, q] = s
        scale = 0.0
        for p in range(K):
            scale = max(scale, H[p, p])
        mu = 1e-12 * max(scale, 1.0)
        rhs = np.zeros(K)
        for p in range(K):
            H[p, p] += mu
            if free[p]:
                rhs[p] = grad[p]
        step = np.linalg.solve(H, rhs)
        alpha = 1.0
        improved = False
        for _ in range(60):
            trial = lam + alpha * step
            for k in range(K):
                if not eq[k] and trial[k] < 0.0:
                    trial[k] = 0.0
            gt = _dual_value(A, b, trial, lo, hi, xt, dt)
            gain = 0.0
            for k in range(K):
                gain += grad[k] * (trial[k] - lam[k])
            # the slack absorbs rounding once gains fall below the resolution of g
            if gt >= g + 1e-4 * gain - 1e-15 * (1.0 + abs(g)):
                improved = True
                lam = trial
                g = gt
                x[:] = xt
                d[:] = dt
                break
            alpha *= 0.5
        if not improved:
            # projected gradient fallback
            alpha = 1.0
            for _ in range(80):
                trial = lam + alpha * grad
                for k in range(K):
                    if not eq[k] and trial[k] < 0.0:
                        trial[k] = 0.0
                gt = _dual_value(A, b, trial, lo, hi, xt, dt)
                if gt > g:
                    lam = trial
                    g = gt
                    x[:] = xt
                    d[:] = dt
                    break
                alpha *= 0.5
        big = 0.0
        for k in range(K):
            big = max(big, abs(lam[k]))
        if big > 1e9:
            return x, lam, _residual(A, b, eq, lam, x), it, 2
    return x, lam, _residual(A, b, eq, lam, x), max_iter, 1


# ---------------------------------------------------------------------------
# programs


def enlargement(sites) -> tuple:
    """All lattice points within l1 distance 1 of the given sites, sorted."""
    out = set()
    for i, j in sites:
        out.add((i, j))
        for di, dj in STEPS:
            out.add((i + di, j + dj))
    return tuple(sorted(out))


@dataclass(frozen=True)
class ProgramSpec:
    """Support S with targets v on S; kind is "P", "P'" or "Q"."""

    sites: tuple
    targets: tuple
    kind: str = "P"

    def __post_init__(self):
        if self.kind not in ("P", "P'", "Q"):
            raise ValueError("kind must be 'P', \"P'\" or 'Q'")
        if len(self.sites) != len(self.targets) or len(set(self.sites)) != len(self.sites):
            raise ValueError("sites must be distinct and match the targets")

    @classmethod
    def make(cls, sites, v=1, kind: str = "P") -> "ProgramSpec":
        sites = [tuple(map(int, s)) for s in sites]
        if isinstance(v, dict):
            pairs = sorted((tuple(map(int, s)), int(v[s])) for s in v)
            if sorted(sites) != [s for s, _ in pairs]:
                raise ValueError("targets must be given on exactly the support")
        else:
            pairs = sorted((s, int(v)) for s in sites)
        return cls(tuple(s for s, _ in pairs), tuple(t for _, t in pairs), kind)

    @property
    def N(self) -> tuple:
        return enlargement(self.sites)

    def matrices(self):
        cols = {p: k for k, p in enumerate(self.N)}
        K = len(self.sites)
        A = np.zeros((K, len(cols)))
        b = np.zeros(K)
        neighbour = -1.0 if self.kind == "Q" else 1.0
        for r, ((i, j), t) in enumerate(zip(self.sites, self.targets)):
            A[r, cols[(i, j)]] = 4.0
            for di, dj in STEPS:
                A[r, cols[(i + di, j + dj)]] = neighbour
            b[r] = t if self.kind == "Q" else abs(t)
        eq = np.full(K, self.kind == "Q")
        return A, b, eq

    def transformed(self, g) -> "ProgramSpec":
        a, bb, c, d = g
        return ProgramSpec.make([(a * i + bb * j, c * i + d * j) for i, j in self.sites],
                                {(a * i + bb * j, c * i + d * j): t for (i, j), t in zip(self.sites, self.targets)},
                                self.kind)

    def translated(self, di: int, dj: int) -> "ProgramSpec":
        return ProgramSpec.make([(i + di, j + dj) for i, j in self.sites],
                                {(i + di, j + dj): t for (i, j), t in zip(self.sites, self.targets)}, self.kind)


@dataclass
class NLPResult:
    value: float
    minimizer: dict
    kkt_residual: float
    boundary_cells: tuple
    big_variables: tuple
    certified_lower: float
    exact: bool
    solves: int = 0

    def to_json(self) -> dict:
        return {"value": self.value, "kkt_residual": self.kkt_residual,
                "minimizer": [[i, j, x] for (i, j), x in sorted(self.minimizer.items())],
                "boundary_cells": [list(p) for p in self.boundary_cells],
                "big_variables": [list(p) for p in self.big_variables],
                "certified_lower": self.certified_lower, "exact": self.exact, "solves": self.solves}


@dataclass
class _Solution:
    value: float  # objective at a feasible point (nan when none was recovered)
    x: np.ndarray
    lam: np.ndarray
    lower: float  # dual value: a lower bound on the minimum
    slope: np.ndarray  # derivative of the dual bound in the held values
    residual: float


def _active_set_polish(A, b, eq, lo, hi, x, iters: int = 30):
    """Newton on the KKT system with the bound and constraint activity of x frozen."""
    x = np.clip(x.copy(), lo, hi)
    at_lo = x <= lo + 1e-7
    at_hi = x >= hi - 1e-7
    x[at_lo] = lo[at_lo]
    x[at_hi] = hi[at_hi]
    free = ~(at_lo | at_hi)
    active = np.ones(len(b), bool) if eq.all() else (b - A @ x > -1e-7)
    if not free.any() or not active.any():
        return x
    Af = A[np.ix_(active, free)]
    k, nf = Af.shape
    for _ in range(iters):
        r = b[active] - A[active] @ x
        xf = x[free]
        g = TWO_PI * np.sin(TWO_PI * xf)
        h = TWO_PI ** 2 * np.cos(TWO_PI * xf)
        kkt = np.zeros((nf + k, nf + k))
        kkt[:nf, :nf] = np.diag(h)
        kkt[:nf, nf:] = -Af.T
        kkt[nf:, :nf] = Af
        lam_ls = np.linalg.lstsq(Af.T, g, rcond=None)[0]
        rhs = np.concatenate([-(g - Af.T @ lam_ls), r])
        step = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:nf]
        x[free] = np.clip(xf + step, lo[free], hi[free])
        if np.abs(step).max() < 1e-16:
            break
    return x


def _multipliers(A, b, eq, lo, hi, x):
    """Least-squares multipliers from stationarity on the variables off their bounds."""
    free = (x > lo + 1e-9) & (x < hi - 1e-9)
    r = b - A @ x
    active = np.ones(len(b), bool) if eq.all() else (r > -1e-9)
    lam = np.zeros(len(b))
    if free.any() and active.any():
        lam[active] = np.linalg.lstsq(A[np.ix_(active, free)].T, TWO_PI * np.sin(TWO_PI * x[free]),
                                      rcond=None)[0]
    if not eq.all():
        lam = np.maximum(lam, 0.0)
    return lam


def _infeasibility(A, b, eq, x) -> float:
    r = b - A @ x
    return float(np.abs(r).max() if eq.all() else max(r.max(), 0.0)) if len(b) else 0.0


class _Subproblem:
    """Convex remainder with a chosen set of variables held above 1/4 in modulus."""

    def __init__(self, A, b, eq, big, kind, tol):
        n = A.shape[1]
        self.big = list(big)
        held = set(self.big)
        self.small = [i for i in range(n) if i not in held]
        self.A_small = np.ascontiguousarray(A[:, self.small])
        self.A_big = A[:, self.big]
        self.b = b
        self.eq = eq
        lo = 0.0 if kind in ("P", "P'") else -QUARTER
        self.lo = np.full(len(self.small), lo)
        self.hi = np.full(len(self.small), QUARTER)
        self.tol = tol
        self.lam = np.zeros(len(b))
        self.solves = 0
        self._scratch = (np.zeros(len(self.small)), np.zeros(len(self.small)))

    def solve(self, t) -> _Solution | None:
        """Minimum of the remainder with held values t; None when provably infeasible."""
        rhs = self.b - self.A_big @ t if self.big else self.b
        if not self.small:
            ok = _infeasibility(self.A_small, rhs, self.eq, np.zeros(0)) <= 1e-12
            z = np.zeros(len(rhs))
            return _Solution(0.0, np.zeros(0), z, 0.0, np.zeros(len(t)), 0.0) if ok else None
        self.solves += 1
        x, lam, res, _, status = _dual_newton(self.A_small, rhs, self.eq, self.lo, self.hi,
                                              self.lam, self.tol, 200)
        if status == 2:
            return None
        xs, ds = self._scratch
        lower = _dual_value(self.A_small, rhs, lam, self.lo, self.hi, xs, ds)
        if res > 1e-11:
            # the dual optimum sits where a variable meets 1/4 with vanishing curvature;
            # recover the primal point on the frozen active set
            x = _active_set_polish(self.A_small, rhs, self.eq, self.lo, self.hi, x)
            res = _infeasibility(self.A_small, rhs, self.eq, x)
            if res <= 1e-11:
                lam_ls = _multipliers(self.A_small, rhs, self.eq, self.lo, self.hi, x)
                xs2, ds2 = np.zeros_like(xs), np.zeros_like(ds)
                low2 = _dual_value(self.A_small, rhs, lam_ls, self.lo, self.hi, xs2, ds2)
                if low2 > lower:
                    lower, lam = low2, lam_ls
        else:
            self.lam = lam
        value = math.fsum(cost(x)) if res <= 1e-11 else math.nan
        slope = -(self.A_big.T @ lam) if self.big else np.zeros(0)
        return _Solution(value, x, lam, lower, slope, res)

    def feasible_box(self, t_lo, t_hi) -> bool:
        """LP feasibility with the held variables free inside a box."""
        A = np.hstack([self.A_small, self.A_big])
        bounds = list(zip(self.lo, self.hi)) + list(zip(t_lo, t_hi))
        return _lp_feasible(A, self.b, self.eq, bounds)


def _lp_feasible(A, b, eq, bounds) -> bool:
    n = A.shape[1]
    if eq.all():
        res = linprog(np.zeros(n), A_eq=A, b_eq=b, bounds=bounds, method="highs")
    else:
        res = linprog(np.zeros(n), A_ub=-A, b_ub=-b, bounds=bounds, method="highs")
    return res.status == 0


def _held_ranges(kind: str, big_count: int):
    """Sign patterns for variables held above 1/4 in modulus."""
    if kind == "Q":
        return list(product((1, -1), repeat=big_count))
    return [(1,) * big_count]


def _branch_and_bound(sub: _Subproblem, signs, grid: float, level: float):
    """Minimise V(t) + sum cost(t) over the held variables on a grid of spacing ``grid``.

    For any multiplier the dual value is affine in t and bounds V from below
    everywhere, so each evaluated corner gives a plane under V on a cell; the
    held costs increase with |t| on [1/4, 1/2].  Returns (best value, best t)
    or (inf, None) when nothing beats ``level``.
    """
    dim = len(signs)
    steps = int(round(QUARTER / grid))
    sg = np.array(signs, float)
    cache = {}

    def t_of(idx):
        return sg * (QUARTER + grid * np.asarray(idx, float))

    def corner(idx):
        if idx not in cache:
            cache[idx] = sub.solve(t_of(idx))
        return cache[idx]

    best, best_t = math.inf, None

    def bound(lo, hi):
        nonlocal best, best_t
        tl, th = t_of(lo), t_of(hi)
        tmin, tmax = np.minimum(tl, th), np.maximum(tl, th)
        held = math.fsum(cost(np.minimum(np.abs(tl), np.abs(th))))
        lb = -math.inf
        any_feasible = False
        for c in product(*zip(lo, hi)):
            sol = corner(c)
            if sol is None:
                continue
            any_feasible = True
            tc = t_of(c)
            if not math.isnan(sol.value):
                F = sol.value + math.fsum(cost(tc))
                if F < best:
                    best, best_t = F, tc
            plane = sol.lower + math.fsum(min(ga * (a - ta), ga * (bb - ta))
                                          for ga, a, bb, ta in zip(sol.slope, tmin, tmax, tc))
            lb = max(lb, plane)
        if not any_feasible:
            if all(h - l <= 1 for l, h in zip(lo, hi)) or not sub.feasible_box(tmin, tmax):
                return None
            lb = 0.0
        return held + max(lb, 0.0)

    root = (tuple([0] * dim), tuple([steps] * dim))
    lb = bound(*root)
    heap = [] if lb is None else [(lb, root)]
    while heap:
        lb, (lo, hi) = heapq.heappop(heap)
        if lb >= min(best, level) - 1e-13:
            break
        widths = [h - l for l, h in zip(lo, hi)]
        if max(widths) <= 1:
            continue
        a = int(np.argmax(widths))
        mid = (lo[a] + hi[a]) // 2
        for nlo, nhi in ((lo, hi[:a] + (mid,) + hi[a + 1:]), (lo[:a] + (mid,) + lo[a + 1:], hi)):
            cl = bound(nlo, nhi)
            if cl is not None and cl < min(best, level) - 1e-13:
                heapq.heappush(heap, (cl, (nlo, nhi)))
    return best, best_t


def _polish(sub: _Subproblem, signs, t0, grid: float):
    """Local continuous refinement of the held values around a grid optimum."""
    sg = np.array(signs, float)
    u0 = np.abs(t0)
    lo = np.maximum(u0 - grid, QUARTER)
    hi = np.minimum(u0 + grid, 0.5)

    def fun(u):
        t = sg * u
        sol = sub.solve(t)
        if sol is None or math.isnan(sol.value):
            return 1e6, np.zeros_like(u)
        val = sol.value + math.fsum(cost(t))
        grad = sg * sol.slope + TWO_PI * np.sin(TWO_PI * u)
        return val, grad

    start = fun(u0)[0]
    res = minimize(fun, u0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                   options={"ftol": 1e-16, "gtol": 1e-13, "maxiter": 200})
    u = res.x if res.fun < start else u0
    return sg * u


def _held_excess(A, base: _Subproblem, sol: _Solution) -> np.ndarray:
    """Per-variable increase of the base Lagrangian bound when that variable is held.

    Row 0 is for values in [1/4, 1/2], row 1 for [-1/2, -1/4].  With the base
    multipliers fixed, the Lagrangian bounds every configuration from below;
    moving one variable to the held interval replaces its minimum over the
    small box by the minimum of the concave 1 - cos(2 pi x) - c x on the held
    interval, attained at an endpoint.
    """
    c = A.T @ sol.lam
    x = np.clip(np.arcsin(np.clip(c / TWO_PI, -1.0, 1.0)) / TWO_PI, base.lo[0], QUARTER)
    small = cost(x) - c * x
    pos = np.minimum(1.0 - c * QUARTER, 2.0 - c * 0.5)
    neg = np.minimum(1.0 + c * QUARTER, 2.0 + c * 0.5)
    # rounding margin on the bound
    return np.vstack([pos - small, neg - small]) - 1e-12


def _true_box(kind: str):
    lo = 0.0 if kind in ("P", "P'") else -0.5
    hi = QUARTER if kind == "P'" else 0.5
    return lo, hi


def _kkt(A, b, eq, x, lam, kind) -> float:
    lo, hi = _true_box(kind)
    s = TWO_PI * np.sin(TWO_PI * x) - A.T @ lam
    worst = float(_residual(A, b, eq, lam, x))
    for xi, si in zip(x, s):
        if xi <= lo + 1e-12:
            e = max(-si, 0.0)
        elif xi >= hi - 1e-12:
            e = max(si, 0.0)
        else:
            e = abs(si)
        worst = max(worst, e)
    if not eq.all():
        worst = max(worst, float(np.maximum(-lam, 0.0).max()))
    return worst


def solve_program(spec: ProgramSpec, max_big: int = 2, grid: float = 1e-3, cutoff: float | None = None,
                  tol: float = 1e-13) -> NLPResult:
    """Global minimum of P, P' or Q.

    Variables above 1/4 in modulus cost more than 1 each, so configurations with
    more than ``max_big`` of them cost more than max_big + 1; the minimum is
    exact whenever it lies below that level (and below ``cutoff`` if given).
    Each choice of held variables is searched on a grid with branch and bound
    and the best point is refined locally.
    """
    if len(spec.sites) > 12:
        raise ValueError("programs are limited to 12 support sites")
    A, b, eq = spec.matrices()
    N = spec.N
    n = len(N)
    lo_true, hi_true = _true_box(spec.kind)
    if not _lp_feasible(A, b, eq, [(lo_true, hi_true)] * n):
        raise InfeasibleProgram(f"no feasible point for {spec}")
    if spec.kind == "P'":
        max_big = 0
    # P' lives in the convex range |x| <= 1/4, so only a cutoff caps it
    cap = math.inf if spec.kind == "P'" else max_big + 1.0
    level = min(math.inf if cutoff is None else cutoff, cap)
    best_val, best_held, best_t = math.inf, None, None
    solves = 0
    base = _Subproblem(A, b, eq, (), spec.kind, tol)
    sol = base.solve(np.zeros(0))
    solves += base.solves
    if sol is not None and not math.isnan(sol.value):
        best_val, best_held, best_t = sol.value, (), np.zeros(0)
    excess = _held_excess(A, base, sol) if sol is not None else None
    for size in range(1, max_big + 1):
        if size >= min(best_val, level):
            break
        for held in combinations(range(n), size):
            patterns = _held_ranges(spec.kind, size)
            if excess is not None:
                patterns = [sg for sg in patterns
                            if sol.lower + sum(excess[int(s < 0), h] for s, h in zip(sg, held))
                            < min(best_val, level)]
                if not patterns:
                    continue
            sub = _Subproblem(A, b, eq, held, spec.kind, tol)
            for signs in patterns:
                val, t = _branch_and_bound(sub, signs, grid, min(best_val, level))
                if t is None or val >= best_val:
                    continue
                t = _polish(sub, signs, t, grid)
                sol = sub.solve(t)
                val = sol.value + math.fsum(cost(t))
                if val < best_val:
                    best_val, best_held, best_t = val, held, t
            solves += sub.solves
    if best_held is None:
        # nothing below the level: every feasible point costs at least that much
        return NLPResult(math.inf, {}, 0.0, (), (), level, False, solves)
    sub = _Subproblem(A, b, eq, best_held, spec.kind, tol)
    sol = sub.solve(np.asarray(best_t, float))
    x = np.zeros(n)
    x[sub.small] = sol.x
    if best_held:
        x[list(best_held)] = best_t
    value = math.fsum(cost(x))
    lam_ls = _multipliers(A, b, eq, np.full(n, lo_true), np.full(n, hi_true), x)
    kkt = min(_kkt(A, b, eq, x, sol.lam, spec.kind), _kkt(A, b, eq, x, lam_ls, spec.kind))
    exact = value < level - 1e-12
    if exact and kkt > 1e-8:
        raise ArithmeticError(f"KKT residual {kkt:.3g} above 1e-8 for {spec}")
    boundary = tuple(N[i] for i in range(n) if x[i] <= lo_true + 1e-12 or x[i] >= hi_true - 1e-12)
    return NLPResult(value, {N[i]: float(x[i]) for i in range(n)}, kkt, boundary,
                     tuple(N[i] for i in best_held), value if exact else level, exact, solves)


def program_value(sites, v=1, kind: str = "P", **kw) -> float:
    return solve_program(ProgramSpec.make(sites, v, kind), **kw).value


# ---------------------------------------------------------------------------
# structural properties of the programs


def _local_p_prime(spec: ProgramSpec, x0) -> np.ndarray:
    """Local primal solve of P' from a given start (SLSQP, then an active-set polish)."""
    A, b, eq = spec.matrices()
    n = A.shape[1]
    lo, hi = np.zeros(n), np.full(n, QUARTER)
    res = minimize(lambda x: (math.fsum(cost(x)), TWO_PI * np.sin(TWO_PI * x)), np.clip(x0, lo, hi),
                   jac=True, method="SLSQP", bounds=list(zip(lo, hi)),
                   constraints=[{"type": "ineq", "fun": lambda x: A @ x - b, "jac": lambda x: A}],
                   options={"ftol": 1e-16, "maxiter": 1000})
    return _active_set_polish(A, b, eq, lo, hi, res.x)


def program_properties_check(S, T, v=1, rng: np.random.Generator | None = None, kind: str = "P") -> dict:
    """Additivity for well separated supports, monotonicity under inclusion and
    uniqueness of the local minimum of the quarter-box program."""
    rng = rng or np.random.default_rng(0)
    S, T = [tuple(p) for p in S], [tuple(p) for p in T]
    vmap = v if isinstance(v, dict) else None

    def targets(sites):
        return {p: (vmap[p] if vmap else v) for p in sites}

    report = {}
    sep = min(abs(a[0] - b[0]) + abs(a[1] - b[1]) for a in S for b in T)
    pS = solve_program(ProgramSpec.make(S, targets(S), kind)).value
    pT = solve_program(ProgramSpec.make(T, targets(T), kind)).value
    union = sorted(set(S) | set(T))
    pU = solve_program(ProgramSpec.make(union, targets(union), kind)).value
    if sep >= 3:
        report["additivity_error"] = abs(pU - pS - pT)
        report["additive"] = report["additivity_error"] <= 1e-8
    report["monotone"] = pU >= max(pS, pT) - 1e-10
    report["monotonicity_slack"] = pU - max(pS, pT)
    spec = ProgramSpec.make(S, targets(S), "P'")
    A, b, _ = spec.matrices()
    starts = []
    while len(starts) < 2:
        x0 = rng.uniform(0.0, QUARTER, A.shape[1])
        if np.all(A @ x0 >= b):
            starts.append(x0)
    xs = [_local_p_prime(spec, x0) for x0 in starts]
    ref = solve_program(spec)
    ref_x = np.array([ref.minimizer[p] for p in spec.N])
    report["p_prime_spread"] = float(max(np.abs(xs[0] - xs[1]).max(), np.abs(xs[0] - ref_x).max()))
    report["p_prime_unique"] = report["p_prime_spread"] <= 1e-8
    report.update({"P_S": pS, "P_T": pT, "P_union": pU, "separation": sep})
    return report


# ---------------------------------------------------------------------------
# supports


def canonical_set(points) -> tuple:
    """Least image of a finite point set under translations and the dihedral group."""
    best = None
    for a, b, c, d in DIHEDRAL:
        pts = [(a * i + b * j, c * i + d * j) for i, j in points]
        oi, oj = min(pts)
        img = tuple(sorted((i - oi, j - oj) for i, j in pts))
        if best is None or img < best:
            best = img
    return best


def canonical_config(entries: dict) -> tuple:
    """Least image of a signed configuration under translations, the dihedral group and sign."""
    best = None
    for a, b, c, d in DIHEDRAL:
        pts = [((a * i + b * j, c * i + d * j), val) for (i, j), val in entries.items()]
        oi, oj = min(p for p, _ in pts)
        for s in (1, -1):
            img = tuple(sorted(((i - oi, j - oj), s * val) for (i, j), val in pts))
            if best is None or img < best:
                best = img
    return best


def is_connected(points) -> bool:
    """Connectivity of the distance-1 enlargement in the nearest-neighbour graph."""
    nb = set(enlargement(points))
    start = next(iter(nb))
    seen = {start}
    stack = [start]
    while stack:
        i, j = stack.pop()
        for di, dj in STEPS:
            q = (i + di, j + dj)
            if q in nb and q not in seen:
                seen.add(q)
                stack.append(q)
    return len(seen) == len(nb)


def components(points) -> list:
    """Maximal connected pieces (pieces at l1 distance >= 4 from each other)."""
    pts = list(points)
    parent = list(range(len(pts)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for x in range(len(pts)):
        for y in range(x + 1, len(pts)):
            if abs(pts[x][0] - pts[y][0]) + abs(pts[x][1] - pts[y][1]) <= 3:
                parent[find(x)] = find(y)
    groups = {}
    for x, p in enumerate(pts):
        groups.setdefault(find(x), []).append(p)
    return sorted(sorted(g) for g in groups.values())


@dataclass
class SupportSurvey:
    threshold: float
    survivors: dict  # canonical set -> P(S, 1)
    examined: int
    rejected: dict  # canonical set -> value (or certified lower bound) at or above threshold

    @property
    def max_size(self) -> int:
        return max(len(s) for s in self.survivors)


def enumerate_supports(threshold: float = THRESHOLD, max_size: int = 12) -> SupportSurvey:
    """Every connected support (up to symmetry) with P(S, 1) below the threshold.

    Grows supports one site at a time from a single site; since the program is
    increasing under inclusion and every connected support has a connected
    subset with one site fewer, only survivors need to be extended.
    """
    survivors, rejected = {}, {}
    seen = set()
    start = canonical_set([(0, 0)])
    frontier = []
    seen.add(start)
    res = solve_program(ProgramSpec.make(start, 1, "P"), cutoff=threshold)
    if res.value < threshold:
        survivors[start] = res.value
        frontier.append(start)
    else:
        rejected[start] = res.certified_lower
    while frontier:
        nxt = []
        for S in frontier:
            if len(S) >= max_size:
                continue
            near = set()
            for i, j in S:
                for di in range(-3, 4):
                    for dj in range(-3 + abs(di), 4 - abs(di)):
                        near.add((i + di, j + dj))
            for y in sorted(near - set(S)):
                C = canonical_set(list(S) + [y])
                if C in seen:
                    continue
                seen.add(C)
                res = solve_program(ProgramSpec.make(C, 1, "P"), cutoff=threshold)
                if res.value < threshold:
                    survivors[C] = res.value
                    nxt.append(C)
                else:
                    rejected[C] = res.value if res.exact else res.certified_lower
        frontier = sorted(nxt)
    return SupportSurvey(threshold, dict(sorted(survivors.items())), len(seen), rejected)


def brute_force_supports(radius: int = 2, threshold: float = THRESHOLD) -> dict:
    """Unpruned survey: every connected subset of the l1 ball containing the origin."""
    ball = [(i, j) for i in range(-radius, radius + 1) for j in range(-radius, radius + 1)
            if abs(i) + abs(j) <= radius and (i, j) != (0, 0)]
    found = {}
    done = set()
    for mask in range(1 << len(ball)):
        S = [(0, 0)] + [ball[k] for k in range(len(ball)) if mask >> k & 1]
        C = canonical_set(S)
        if C in done:
            continue
        done.add(C)
        if not is_connected(S):
            continue
        if len(S) > 12:
            # the full 13-site ball: bounded below by any 12-site subset (monotonicity)
            continue
        val = solve_program(ProgramSpec.make(S, 1, "P"), cutoff=threshold).value
        if val < threshold:
            found[C] = val
    return found


def fits_ball(points, radius: int) -> bool:
    """Whether some translate of the set lies in the l1 ball of the given radius."""
    u = [i + j for i, j in points]
    w = [i - j for i, j in points]
    du, dw = max(u) - min(u), max(w) - min(w)
    if du > 2 * radius or dw > 2 * radius:
        return False
    # a translate (a, b) shifts u and w by a + b and a - b, which share a parity
    for su in range(-max(u) - radius, -min(u) + radius + 1):
        if max(u) + su > radius or min(u) + su < -radius:
            continue
        for sw in range(-max(w) - radius, -min(w) + radius + 1):
            if (su - sw) % 2 or max(w) + sw > radius or min(w) + sw < -radius:
                continue
            return True
    return False


# ---------------------------------------------------------------------------
# candidate configurations and the gap constant


def sign_configurations(S) -> list:
    """+-1 patterns on S with vanishing sum and first moments, one per symmetry class."""
    S = list(S)
    out = {}
    for signs in product((1, -1), repeat=len(S) - 1):
        vals = (1,) + signs
        if sum(vals):
            continue
        if sum(v * i for v, (i, j) in zip(vals, S)) or sum(v * j for v, (i, j) in zip(vals, S)):
            continue
        ent = dict(zip(S, vals))
        out.setdefault(canonical_config(ent), ent)
    return [out[k] for k in sorted(out)]


_SQUARES: dict = {}


def _cached_square(L: int, tol: float):
    key = (L, tol)
    if key not in _SQUARES:
        _SQUARES[key] = greens.z2_square(L, tol=tol)[0]
    return _SQUARES[key]


def _z2(entries: dict) -> SparseIntField:
    reach = max(max(abs(i), abs(j)) for i, j in entries)
    return SparseIntField(Domain.window(2 * reach + 2), dict(entries))


def f_to_precision(entries: dict, precision: float = 1e-6, M0: int = 16, M_max: int = 512) -> FValue:
    """f with the window doubled until the quartic tail bound is below ``precision``."""
    M = M0
    l2_tol = max(1e-12, 1e-3 * precision)
    while True:
        fv = f_functional(_z2(entries), M, l2_tol=l2_tol)
        if fv.tail_bound <= precision or M >= M_max:
            return fv
        M *= 2


def _component_states(S) -> dict:
    """(sum, first moment) -> oriented signed placements of a component."""
    states = {}
    for a, b, c, d in DIHEDRAL:
        pts = [(a * i + b * j, c * i + d * j) for i, j in S]
        oi, oj = min(pts)
        pts = [(i - oi, j - oj) for i, j in pts]
        for signs in product((1, -1), repeat=len(pts)):
            s = sum(signs)
            M = (sum(v * i for v, (i, j) in zip(signs, pts)), sum(v * j for v, (i, j) in zip(signs, pts)))
            states.setdefault((s, M), []).append(dict(zip(pts, signs)))
    return states


def _separated(A: dict, B: dict, offset) -> bool:
    return min(abs(i + offset[0] - k) + abs(j + offset[1] - l) for i, j in A for k, l in B) >= 4


def disconnected_audit(survey: SupportSurvey, threshold: float = THRESHOLD, max_offset: int = 8,
                       precision: float = 1e-3) -> dict:
    """Configurations whose support splits into pieces at distance >= 4.

    Pieces are connected supports, so each costs at least its own program value
    and the costs add.  Every multiset of pieces with total below the threshold
    is checked for an arrangement with vanishing sum and first moments; the
    arrangements that exist have f evaluated directly (over a range of
    separations when the placement is not forced).
    """
    pieces = sorted(survey.survivors.items(), key=lambda kv: (kv[1], kv[0]))
    multisets = []

    def grow(start, chosen, total):
        if len(chosen) >= 2:
            multisets.append((tuple(chosen), total))
        for k in range(start, len(pieces)):
            S, p = pieces[k]
            if total + p >= threshold:
                break
            grow(k, chosen + [S], total + p)

    grow(0, [], 0.0)
    families = []
    evaluations = {}
    for chosen, total in multisets:
        if len(chosen) != 2:
            # three or more pieces: only single sites are cheap enough, and an odd
            # number of +-1 values cannot sum to zero
            if all(len(S) == 1 for S in chosen) and len(chosen) % 2:
                families.append({"pieces": [list(map(list, S)) for S in chosen], "cost": total,
                                 "admissible": False, "reason": "odd number of unit values"})
                continue
            raise PipelineError("disconnected", f"unhandled multiset of {len(chosen)} pieces")
        sa, sb = (_component_states(S) for S in chosen)
        admissible = []
        for (s1, M1), places1 in sa.items():
            for (s2, M2), places2 in sb.items():
                if s1 + s2:
                    continue
                tot = (M1[0] + M2[0], M1[1] + M2[1])
                if s1 == 0:
                    if tot != (0, 0):
                        continue
                    offsets = [(di, dj) for di in range(-max_offset, max_offset + 1)
                               for dj in range(-max_offset, max_offset + 1)]
                else:
                    if tot[0] % s1 or tot[1] % s1:
                        continue
                    offsets = [(-tot[0] // s1, -tot[1] // s1)]
                for A in places1:
                    for B in places2:
                        for off in offsets:
                            if not _separated(A, B, off):
                                continue
                            ent = dict(B)
                            for (i, j), val in A.items():
                                ent[(i + off[0], j + off[1])] = val
                            admissible.append(canonical_config(ent))
        admissible = sorted(set(admissible))
        fam = {"pieces": [list(map(list, S)) for S in chosen], "cost": total,
               "admissible": bool(admissible), "arrangements": len(admissible)}
        if admissible:
            vals = []
            for form in admissible:
                if form not in evaluations:
                    evaluations[form] = f_to_precision(dict(form), precision).value
                vals.append(evaluations[form])
            fam["min_f"] = min(vals)
            fam["argmin"] = [[i, j, v] for (i, j), v in admissible[int(np.argmin(vals))]]
        families.append(fam)
    worst = min((f["min_f"] for f in families if "min_f" in f), default=math.inf)
    return {"multisets": len(multisets), "families": families, "min_f": worst,
            "max_offset": max_offset, "passes": worst >= threshold}


@dataclass
class GammaResult:
    gamma: float
    c0: float
    minimizer: tuple  # canonical signed configuration
    margin: float  # next-best candidate value minus gamma
    f_star: FValue
    audit: list = field(repr=False)

    def to_json(self) -> dict:
        return {"gamma": self.gamma, "c0": self.c0,
                "minimizer": [[i, j, v] for (i, j), v in self.minimizer],
                "margin": self.margin, "f_star": self.f_star.to_json(), "audit": self.audit}


def compute_gamma(threshold: float = THRESHOLD, precision: float = 1e-6, audit_path=None,
                  survey: SupportSurvey | None = None, max_offset: int = 8) -> GammaResult:
    """The five-stage search for the gap constant; raises PipelineError naming a failed stage."""
    audit = []

    def log(step, **data):
        audit.append({"step": step, **data})

    # 1: the candidate optimum
    star = {(0, 0): 1, (-1, -1): 1, (-1, 0): -1, (0, -1): -1}
    fs = f_to_precision(star, precision)
    log("f_star", **fs.to_json())
    if fs.tail_bound > precision or fs.l2_error > 1e-9:
        raise PipelineError("f_star", f"tail {fs.tail_bound:.3g} or l2 error {fs.l2_error:.3g} too large")
    if fs.value >= threshold:
        raise PipelineError("f_star", f"f = {fs.value} is not below the threshold {threshold}")

    # 2: heights of modulus 3
    r3 = solve_program(ProgramSpec.make([(0, 0)], 3, "P"))
    log("height3", program="P", sites=[[0, 0]], target=3, value=r3.value, certified_lower=r3.certified_lower)
    if r3.certified_lower < threshold:
        raise PipelineError("height3", f"P = {r3.certified_lower} below {threshold}")

    # 3: height 2 (and -2 by the sign symmetry)
    allowed = []
    for w in (-2, -1, 0, 1, 2):
        r = solve_program(ProgramSpec.make([(0, 0), (1, 0)], {(0, 0): 2, (1, 0): w}, "Q"), cutoff=threshold)
        below = r.value < threshold
        log("height2_pair", program="Q", neighbour_value=w, value=r.value,
            certified_lower=r.certified_lower, below=below)
        if below:
            allowed.append(w)
    plus = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
    for ws in product(allowed, repeat=4):
        v = {(0, 0): 2, **dict(zip(plus[1:], ws))}
        r = solve_program(ProgramSpec.make(plus, v, "Q"), cutoff=threshold)
        lower = r.value if r.exact else r.certified_lower
        log("height2_plus", program="Q", neighbour_values=list(ws), value=r.value, certified_lower=lower)
        if lower < threshold:
            raise PipelineError("height2", f"Q = {lower} below {threshold} for neighbours {ws}")

    # 4: connected supports with unit heights
    if survey is None:
        survey = enumerate_supports(threshold)
    log("supports", survivors=len(survey.survivors), examined=survey.examined, max_size=survey.max_size,
        values=[[list(map(list, S)), p] for S, p in survey.survivors.items()])

    # 5: disconnected supports, then the candidates on connected ones
    dis = disconnected_audit(survey, threshold, max_offset=max_offset)
    log("disconnected", **dis)
    if not dis["passes"]:
        raise PipelineError("disconnected", f"a disconnected configuration reaches f = {dis['min_f']}")
    candidates = []
    for S in survey.survivors:
        for ent in sign_configurations(S):
            fv = f_to_precision(ent, precision)
            candidates.append((fv.value, canonical_config(ent)))
            log("candidate", support=list(map(list, S)), config=[[i, j, v] for (i, j), v in sorted(ent.items())],
                f=fv.value, tail_bound=fv.tail_bound)
    candidates.sort()
    nonzero = [c for c in candidates if c[0] > 1e-9]
    if not nonzero:
        raise PipelineError("candidates", "no candidate configuration")
    gamma, best = nonzero[0]
    margin = nonzero[1][0] - gamma if len(nonzero) > 1 else math.inf
    if abs(gamma - fs.value) > precision:
        raise PipelineError("candidates", f"best candidate {gamma} differs from f_star {fs.value}")
    result = GammaResult(gamma, 1.0 / gamma, best, margin, fs, audit)
    log("result", gamma=gamma, c0=1.0 / gamma, margin=margin)
    if audit_path is not None:
        with open(audit_path, "w") as fh:
            json.dump(result.to_json(), fh, indent=1)
    return result
