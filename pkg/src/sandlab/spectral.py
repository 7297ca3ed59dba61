"""Characters of the sandpile group, eigenvalues of the chain and the spectral gap.

A frequency is a function on the torus, zero at the sink, whose Laplacian is
integer valued.  Its eigenvalue is the normalised character sum mu_hat, and
1 - |mu_hat| is the total savings divided by the number of sites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product

import numba
import numpy as np

from . import greens, smith
from .sandpile import reduced_laplacian_dense
from .lattice import ClassLevel, Domain, Field, SparseIntField, class_membership, laplacian

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# frequencies and eigenvalues


def wrap_unit(x):
    """Reduce reals mod 1 into [-1/2, 1/2)."""
    return x - np.floor(np.asarray(x) + 0.5)


@dataclass(frozen=True)
class Frequency:
    m: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(self.m, self.m)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def harmonic_residual(self) -> float:
        lap = laplacian(Field(Domain.torus(self.m), self.values)).values
        return float(np.abs(lap - np.rint(lap)).max())

    def validate(self, tol: float = 1e-8) -> "Frequency":
        if abs(self.values[0, 0]) > tol:
            raise ValueError("a frequency vanishes at the sink")
        if self.values.min() < -0.5 - tol or self.values.max() >= 0.5 + tol:
            raise ValueError("frequency values must lie in [-1/2, 1/2)")
        if self.harmonic_residual() > tol:
            raise ValueError("Laplacian of a frequency must be integer valued")
        return self

    def is_zero(self, tol: float = 1e-9) -> bool:
        return float(np.abs(self.values).max()) < tol

    def __neg__(self):
        return Frequency(self.m, wrap_unit(-self.values))

    def __sub__(self, other: "Frequency") -> "Frequency":
        return Frequency(self.m, wrap_unit(self.values - other.values))

    def __add__(self, other: "Frequency") -> "Frequency":
        return Frequency(self.m, wrap_unit(self.values + other.values))


def character_sum(values) -> complex:
    """Sum of e(x) = exp(2 pi i x) over the given reals, with exact-rounding summation."""
    phase = TWO_PI * np.asarray(values, dtype=float).ravel()
    return complex(math.fsum(np.cos(phase)), math.fsum(np.sin(phase)))


def mu_hat(xi) -> complex:
    """Eigenvalue attached to a frequency (or to any real field on the torus)."""
    values = xi.values if hasattr(xi, "values") else np.asarray(xi, dtype=float)
    return character_sum(values) / values.size


@dataclass(frozen=True)
class SavingsReport:
    sites: int
    savings: float
    total_savings: float
    modulus: float


def savings(xi, sites=None) -> SavingsReport:
    """|S| - |sum over S of e(xi)|; ``sites`` is a boolean mask or an iterable of (i, j)."""
    values = xi.values if hasattr(xi, "values") else np.asarray(xi, dtype=float)
    n_total = values.size
    total = character_sum(values)
    if sites is None:
        selected = values.ravel()
    elif isinstance(sites, np.ndarray) and sites.dtype == bool:
        selected = values[sites]
    else:
        m = values.shape[0]
        idx = sorted({(i % m, j % m) for i, j in sites})
        selected = np.array([values[i, j] for i, j in idx], dtype=float)
    part = character_sum(selected)
    n = selected.size
    return SavingsReport(
        sites=n,
        savings=n - abs(part),
        total_savings=n_total - abs(total),
        modulus=abs(total) / n_total,
    )


def frequency_from_prevector(v: SparseIntField) -> Frequency:
    """G_T * v shifted to vanish at the sink and reduced mod 1."""
    if not v.domain.is_torus:
        raise ValueError("prevectors live on a torus")
    if v.total() != 0:
        raise ValueError("a prevector must have mean zero")
    m = v.domain.size
    xi_bar = greens.apply_greens_torus(v.to_field().values)
    return Frequency(m, wrap_unit(xi_bar - xi_bar[0, 0]))


def distinguished_prevector(xi: Frequency, tol: float = 1e-6) -> SparseIntField:
    """Integer Laplacian of the lift of xi centred on the phase of its eigenvalue."""
    mu = mu_hat(xi)
    centre = math.atan2(mu.imag, mu.real) / TWO_PI if abs(mu) > 0 else 0.0
    t = xi.values - centre + 0.5
    lift = xi.values - (np.ceil(t) - 1.0)
    lap = laplacian(Field(Domain.torus(xi.m), lift)).values
    rounded = np.rint(lap)
    residual = float(np.abs(lap - rounded).max())
    if residual > tol:
        raise ValueError(f"not a valid frequency: Laplacian residual {residual:.3g}")
    return SparseIntField.from_field(Field(Domain.torus(xi.m), rounded))


# ---------------------------------------------------------------------------
# clusters and reduction


def r_cluster(v: SparseIntField, R: int) -> list[list[tuple[int, int]]]:
    """Partition the support by the transitive closure of l1 distance <= 2R."""
    pts = v.support()
    parent = list(range(len(pts)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(len(pts)):
        for b in range(a + 1, len(pts)):
            if v.domain.distance(pts[a], pts[b]) <= 2 * R:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list] = {}
    for a, p in enumerate(pts):
        groups.setdefault(find(a), []).append(p)
    return sorted(groups.values())


def _lift_cluster(cluster, m: int):
    """Unwrap a torus cluster to Z^2 coordinates by walking short steps from its first point."""
    base = cluster[0]
    placed = {base: base}
    frontier = [base]
    rest = set(cluster[1:])
    while frontier:
        p = frontier.pop()
        lp = placed[p]
        for q in list(rest):
            di = (q[0] - p[0] + m // 2) % m - m // 2
            dj = (q[1] - p[1] + m // 2) % m - m // 2
            placed[q] = (lp[0] + di, lp[1] + dj)
            rest.discard(q)
            frontier.append(q)
    return placed


def is_removable_cluster(part: SparseIntField, pad: int = 8, tol: float = 1e-6) -> bool:
    """Whether ``part`` is the Laplacian of an integer function.

    Requires C^2 membership and an integer-valued G * part: on the torus G is
    the torus Green's function over the whole torus; on Z^2 it is evaluated
    on a window of radius (cluster radius + pad) around the cluster.
    """
    if not part:
        return True
    if class_membership(part) < ClassLevel.C2:
        return False
    if part.domain.is_torus:
        xi = greens.apply_greens_torus(part.to_field().values)
        xi = xi - xi[0, 0]
        return float(np.abs(xi - np.rint(xi)).max()) < tol
    pts = part.support()
    ci = round(sum(p[0] for p in pts) / len(pts))
    cj = round(sum(p[1] for p in pts) / len(pts))
    radius = max(abs(p[0] - ci) + abs(p[1] - cj) for p in pts) + pad
    span = radius + max(abs(p[0] - ci) + abs(p[1] - cj) for p in pts) + 1
    table = greens.z2_square(span)[0]
    h = table.shape[0] // 2
    ii, jj = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    vals = np.zeros(ii.shape)
    for (pi, pj), val in part.entries.items():
        vals += val * table[h + ii - (pi - ci), h + jj - (pj - cj)]
    vals -= vals[radius, radius]
    return float(np.abs(vals - np.rint(vals)).max()) < tol


def r_reduce(v: SparseIntField, R: int) -> SparseIntField:
    """Drop every R-cluster of v that is the Laplacian of an integer function."""
    keep = {}
    for cluster in r_cluster(v, R):
        part = v.restrict(cluster)
        if not is_removable_cluster(part):
            keep.update(part.entries)
    return SparseIntField(v.domain, keep)


# ---------------------------------------------------------------------------
# canonical forms of finitely supported integer functions on Z^2

DIHEDRAL = ((1, 0, 0, 1), (-1, 0, 0, 1), (1, 0, 0, -1), (-1, 0, 0, -1),
            (0, 1, 1, 0), (0, -1, 1, 0), (0, 1, -1, 0), (0, -1, -1, 0))


def _value_key(v: int, B: int = 1 << 20) -> int:
    # positive values sort first so canonical forms carry a positive leading value
    return v if v > 0 else B - v


def canonical_form(entries: dict) -> tuple:
    """Lexicographically least image under translations, the dihedral group and sign."""
    best = None
    for a, b, c, d in DIHEDRAL:
        pts = [((a * i + b * j, c * i + d * j), val) for (i, j), val in entries.items()]
        oi, oj = min(p for p, _ in pts)
        for s in (1, -1):
            enc = tuple(sorted(((pi - oi, pj - oj), _value_key(s * val)) for (pi, pj), val in pts))
            if best is None or enc < best:
                best = enc
    return tuple((p, k if k < (1 << 20) else (1 << 20) - k) for p, k in best)


def orbit_size(entries: dict) -> int:
    """Number of distinct translation classes among the 16 symmetric images."""
    seen = set()
    for a, b, c, d in DIHEDRAL:
        pts = [((a * i + b * j, c * i + d * j), val) for (i, j), val in entries.items()]
        oi, oj = min(p for p, _ in pts)
        for s in (1, -1):
            seen.add(tuple(sorted(((pi - oi, pj - oj), s * val) for (pi, pj), val in pts)))
    return len(seen)


def lift_to_z2(v: SparseIntField) -> dict:
    """Z^2 representative of a torus vector with a compact support (shortest steps)."""
    if not v.domain.is_torus:
        return dict(v.entries)
    m = v.domain.size
    placed = _lift_cluster(v.support(), m)
    return {placed[p]: val for p, val in v.entries.items()}


def frequency_class(xi: Frequency) -> tuple:
    """Canonical form of the distinguished prevector; equal for symmetric images."""
    return canonical_form(lift_to_z2(distinguished_prevector(xi)))


def product_delta12(domain: Domain) -> SparseIntField:
    """delta_1 * delta_2: +1 at (0,0) and (-1,-1), -1 at (-1,0) and (0,-1)."""
    return SparseIntField.from_pairs(domain, [(0, 0, 1), (-1, -1, 1), (-1, 0, -1), (0, -1, -1)])


# ---------------------------------------------------------------------------
# gap search kernels


@numba.njit(cache=True)
def _neumaier_savings(xi_flat):
    sc = 0.0
    cc = 0.0
    ss = 0.0
    cs = 0.0
    for x in xi_flat:
        a = math.cos(TWO_PI * x)
        t = sc + a
        if abs(sc) >= abs(a):
            cc += (sc - t) + a
        else:
            cc += (a - t) + sc
        sc = t
        b = math.sin(TWO_PI * x)
        t = ss + b
        if abs(ss) >= abs(b):
            cs += (ss - t) + b
        else:
            cs += (b - t) + ss
        ss = t
    return xi_flat.shape[0] - math.hypot(sc + cc, ss + cs)


@numba.njit(cache=True)
def _full_savings(G, pi, pj, pv, k, scratch):
    m = G.shape[0]
    scratch[:] = 0.0
    for p in range(k):
        a = pi[p] % m
        b = pj[p] % m
        val = pv[p]
        for x in range(m):
            gx = (x - a) % m
            for y in range(m):
                scratch[x * m + y] += val * G[gx, (y - b) % m]
    return _neumaier_savings(scratch)


@numba.njit(cache=True)
def _window_savings(Gloc, H, ci, cj, wi, wj, n, pi, pj, pv, k, scratch):
    """Savings over the window offsets (wi, wj) shifted by (ci, cj).

    ``Gloc[H + a, H + b]`` holds G_T at the torus offset (a, b).
    """
    for t in range(n):
        acc = 0.0
        x = ci + wi[t] + H
        y = cj + wj[t] + H
        for p in range(k):
            acc += pv[p] * Gloc[x - pi[p], y - pj[p]]
        scratch[t] = acc
    return _neumaier_savings(scratch[:n])


@numba.njit(cache=True)
def _key(v, B):
    return v if v > 0 else B - v


@numba.njit(cache=True)
def _transform(g, i, j):
    if g == 0:
        return i, j
    if g == 1:
        return -i, j
    if g == 2:
        return i, -j
    if g == 3:
        return -i, -j
    if g == 4:
        return j, i
    if g == 5:
        return -j, i
    if g == 6:
        return j, -i
    return -j, -i


@numba.njit(cache=True)
def _is_canonical(offs, lookup, L, idx, val, k, B, ti, tj, enc, perm):
    """Orderly check: no symmetric image of the anchored vector encodes smaller."""
    anchor_key = _key(val[0], B)
    for g in range(8):
        mi = 1 << 30
        mj = 1 << 30
        pmin = 0
        for p in range(k):
            a, b = _transform(g, offs[idx[p], 0], offs[idx[p], 1])
            ti[p] = a
            tj[p] = b
            if a < mi or (a == mi and b < mj):
                mi = a
                mj = b
                pmin = p
        # the image's leading entry is its lexmin point; compare values first
        kp = _key(val[pmin], B)
        kn = _key(-val[pmin], B)
        if kp < anchor_key or kn < anchor_key:
            return False
        if kp > anchor_key and kn > anchor_key:
            continue
        for p in range(k):
            enc[p] = lookup[ti[p] - mi + L, tj[p] - mj + L]
            perm[p] = p
        for p in range(1, k):
            ce = enc[p]
            cp = perm[p]
            q = p - 1
            while q >= 0 and enc[q] > ce:
                enc[q + 1] = enc[q]
                perm[q + 1] = perm[q]
                q -= 1
            enc[q + 1] = ce
            perm[q + 1] = cp
        for sign in (1, -1):
            for p in range(k):
                ev = _key(sign * val[perm[p]], B)
                ov = _key(val[p], B)
                if enc[p] < idx[p] or (enc[p] == idx[p] and ev < ov):
                    return False
                if enc[p] > idx[p] or ev > ov:
                    break
    return True


@numba.njit(cache=True)
def _fits_ball(umin, umax, wmin, wmax, R):
    if umax - umin > 2 * R or wmax - wmin > 2 * R:
        return False
    lu = umax - R
    hu = umin + R
    lw = wmax - R
    hw = wmin + R
    if lu == hu and lw == hw and (lu - lw) % 2 != 0:
        return False
    return True


@numba.njit(cache=True)
def _dist_to_multiple(x, m):
    if m <= 0:
        return abs(x)
    r = x % m
    return min(r, m - r)


@numba.njit(cache=True)
def _reachable(target_lo, target_hi, m):
    """Whether [lo, hi] contains a multiple of m (m = 0 means exactly zero)."""
    if target_lo > target_hi:
        return False
    if target_lo <= 0 <= target_hi:
        return True
    r = target_lo % m
    return r == 0 or target_lo + (m - r) <= target_hi


@numba.njit(cache=True)
def _moments_reachable(S, Mi, Mj, rem, ci, cj, u0, u1, w0, w1, R, m):
    """Can points added later (lexicographically after (ci, cj), inside every
    l1 ball of radius R that still fits) bring both moments to 0 mod m while
    cancelling the sum S within the remaining budget?"""
    if rem == 0:
        return Mi % m == 0 and Mj % m == 0
    # coordinate ranges allowed by the diagonal spans
    ulo = u1 - 2 * R
    uhi = u0 + 2 * R
    wlo = w1 - 2 * R
    whi = w0 + 2 * R
    ilo = max(ci, -((-(ulo + wlo)) // 2))
    ihi = (uhi + whi) // 2
    jlo = -((-(ulo - whi)) // 2)
    jhi = (uhi - wlo) // 2
    pos = (rem - S) // 2  # largest positive mass still addable
    neg = (rem + S) // 2
    # sum v_r x_r = -S*lo + sum v_r (x_r - lo) with the second term in [-neg*D, pos*D]
    di = ihi - ilo
    if di < 0:
        return False
    lo = Mi - S * ilo - neg * di
    hi = Mi - S * ilo + pos * di
    if not _reachable(lo, hi, m):
        return False
    dj = jhi - jlo
    if dj < 0:
        return False
    lo = Mj - S * jlo - neg * dj
    hi = Mj - S * jlo + pos * dj
    return _reachable(lo, hi, m)


@numba.njit(cache=True)
def _evaluate(G, Gloc, H, si, sj, wi, wj, offs, lookup, L, idx, val, k, B, tol, collect_below, best, n_out,
              out_idx, out_val, out_k, out_sav, counters, scratch):
    """Canonical check, window bound, then full savings of one candidate."""
    counters[1] += 1
    ti, tj, enc, perm, pi, pj, pv, sw, sf = scratch
    if not _is_canonical(offs, lookup, L, idx, val, k, B, ti, tj, enc, perm):
        return best, n_out
    counters[2] += 1
    for p in range(k):
        pi[p] = offs[idx[p], 0]
        pj[p] = offs[idx[p], 1]
        pv[p] = val[p]
    cut = max(best + tol, collect_below)
    # small window around the centre of the support, then the wide anchored window
    ci = 0
    cj = 0
    for p in range(k):
        ci += pi[p]
        cj += pj[p]
    ci = int(round(ci / k))
    cj = int(round(cj / k))
    if _window_savings(Gloc, H, ci, cj, si, sj, si.shape[0], pi, pj, pv, k, sw) > cut:
        return best, n_out
    if _window_savings(Gloc, H, 0, 0, wi, wj, wi.shape[0], pi, pj, pv, k, sw) > cut:
        return best, n_out
    counters[3] += 1
    sav = _full_savings(G, pi, pj, pv, k, sf)
    if sav <= 1e-7:  # zero frequency
        return best, n_out
    if sav < best:
        best = sav
    if sav <= best + tol or sav <= collect_below:
        if n_out < out_sav.shape[0]:
            for p in range(k):
                out_idx[n_out, p] = idx[p]
                out_val[n_out, p] = val[p]
            out_k[n_out] = k
            out_sav[n_out] = sav
            n_out += 1
            counters[4] += 1
        else:
            counters[5] += 1
    return best, n_out


@numba.njit(cache=True)
def _anchored_search(m, R, B, offs, lookup, G, Gloc, H, si, sj, wi, wj,
                     best_init, tol, collect_below, out_idx, out_val, out_k, out_sav, counters):
    """Depth-first enumeration of anchored C^2 vectors (moments mod m).

    Sites are offsets >=lex (0,0) within l1 distance 2R of the anchor, sorted
    lexicographically; the anchor (index 0) carries a positive value.  A child
    that spends the whole remaining budget must cancel the sum and both
    moments, so its site is solved for directly instead of scanned.
    counters: [nodes, candidates, canonical, full evaluations, recorded, overflow]
    """
    n_off = offs.shape[0]
    L = 2 * R
    idx = np.zeros(B + 1, np.int64)
    val = np.zeros(B + 1, np.int64)
    vt = np.zeros(B + 1, np.int64)
    npos = np.zeros(B + 1, np.int64)  # admissible positive / negative magnitudes per level
    nneg = np.zeros(B + 1, np.int64)
    fresh = np.zeros(B + 1, np.bool_)
    S = np.zeros(B + 2, np.int64)
    Mi = np.zeros(B + 2, np.int64)
    Mj = np.zeros(B + 2, np.int64)
    used = np.zeros(B + 2, np.int64)
    umin = np.zeros(B + 2, np.int64)
    umax = np.zeros(B + 2, np.int64)
    wmin = np.zeros(B + 2, np.int64)
    wmax = np.zeros(B + 2, np.int64)
    scratch = (np.zeros(B + 1, np.int64), np.zeros(B + 1, np.int64), np.zeros(B + 1, np.int64),
               np.zeros(B + 1, np.int64), np.zeros(B + 1, np.int64), np.zeros(B + 1, np.int64),
               np.zeros(B + 1, np.float64), np.zeros(wi.shape[0], np.float64),
               np.zeros(m * m, np.float64))
    best = best_init
    n_out = 0
    for a in range(1, B + 1):
        idx[0] = 0
        val[0] = a
        S[1] = a
        Mi[1] = 0
        Mj[1] = 0
        used[1] = a
        umin[1] = 0
        umax[1] = 0
        wmin[1] = 0
        wmax[1] = 0
        depth = 1
        idx[1] = 0
        fresh[1] = True
        while depth >= 1:
            rem = B - used[depth]
            if fresh[depth]:
                fresh[depth] = False
                Sd = S[depth]
                # a child value x must leave |S + x| <= rem - |x|
                npos[depth] = min(rem - 1, (rem - Sd) // 2)
                nneg[depth] = min(rem - 1, (rem + Sd) // 2)
                vt[depth] = npos[depth] + nneg[depth] - 1  # next advance moves to the next site
                if Sd != 0 and abs(Sd) == rem:
                    # closing point: value -S at a site cancelling both moments
                    value = -Sd
                    start = idx[depth]
                    ulo = umax[depth] - L
                    uhi = umin[depth] + L
                    wlo = wmax[depth] - L
                    whi = wmin[depth] + L
                    ilo = max(offs[start, 0], -((-(ulo + wlo)) // 2))
                    ihi = (uhi + whi) // 2
                    jlo = -((-(ulo - whi)) // 2)
                    jhi = (uhi - wlo) // 2
                    for i in range(ilo, ihi + 1):
                        if (Mi[depth] + value * i) % m != 0:
                            continue
                        for j in range(jlo, jhi + 1):
                            if abs(i) + abs(j) > L or (Mj[depth] + value * j) % m != 0:
                                continue
                            site = lookup[i + L, j + L]
                            if site <= start:
                                continue
                            u = i + j
                            w = i - j
                            if not _fits_ball(min(umin[depth], u), max(umax[depth], u),
                                              min(wmin[depth], w), max(wmax[depth], w), R):
                                continue
                            counters[0] += 1
                            idx[depth] = site
                            val[depth] = value
                            best, n_out = _evaluate(G, Gloc, H, si, sj, wi, wj, offs, lookup, L, idx, val, depth + 1, B,
                                                    tol, collect_below, best, n_out,
                                                    out_idx, out_val, out_k, out_sav, counters, scratch)
                    idx[depth] = start
            nvals = npos[depth] + nneg[depth]
            if rem <= 1 or nvals <= 0:
                depth -= 1
                continue
            # scan children that leave budget behind
            vt[depth] += 1
            if vt[depth] >= nvals:
                vt[depth] = 0
                # advance to the next site that keeps the support inside a ball
                site = idx[depth] + 1
                while site < n_off:
                    u = offs[site, 0] + offs[site, 1]
                    w = offs[site, 0] - offs[site, 1]
                    if _fits_ball(min(umin[depth], u), max(umax[depth], u),
                                  min(wmin[depth], w), max(wmax[depth], w), R):
                        break
                    site += 1
                idx[depth] = site
            if idx[depth] >= n_off:
                depth -= 1
                continue
            site = idx[depth]
            i = offs[site, 0]
            j = offs[site, 1]
            u = i + j
            w = i - j
            nu0 = min(umin[depth], u)
            nu1 = max(umax[depth], u)
            nw0 = min(wmin[depth], w)
            nw1 = max(wmax[depth], w)
            t = vt[depth]
            if t < npos[depth]:
                value = t + 1
                mag = value
            else:
                mag = t - npos[depth] + 1
                value = -mag
            nused = used[depth] + mag
            nrem = B - nused
            nS = S[depth] + value
            counters[0] += 1
            nMi = Mi[depth] + value * i
            nMj = Mj[depth] + value * j
            if not _moments_reachable(nS, nMi, nMj, nrem, i, j, nu0, nu1, nw0, nw1, R, m):
                continue
            val[depth] = value
            lvl = depth + 1
            if nS == 0 and nMi % m == 0 and nMj % m == 0:
                best, n_out = _evaluate(G, Gloc, H, si, sj, wi, wj, offs, lookup, L, idx, val, lvl, B,
                                        tol, collect_below, best, n_out,
                                        out_idx, out_val, out_k, out_sav, counters, scratch)
            if lvl <= B - 1 and (nS != 0 or nrem >= 2):
                S[lvl] = nS
                Mi[lvl] = nMi
                Mj[lvl] = nMj
                used[lvl] = nused
                umin[lvl] = nu0
                umax[lvl] = nu1
                wmin[lvl] = nw0
                wmax[lvl] = nw1
                depth = lvl
                idx[depth] = site
                fresh[depth] = True
    return best, n_out


@numba.njit(cache=True)
def _torus_exhaustive(m, B, G, best_init, tol, out_sites, out_val, out_k, out_sav, counters):
    """All mean-zero integer vectors on the torus with l1 norm <= B and a nonzero
    value at the origin (every nonzero vector has such a translate)."""
    n = m * m
    idx = np.zeros(B + 1, np.int64)
    val = np.zeros(B + 1, np.int64)
    vt = np.zeros(B + 1, np.int64)
    S = np.zeros(B + 2, np.int64)
    used = np.zeros(B + 2, np.int64)
    pi = np.zeros(B + 1, np.int64)
    pj = np.zeros(B + 1, np.int64)
    pv = np.zeros(B + 1, np.float64)
    scratch = np.zeros(n, np.float64)
    best = best_init
    n_out = 0
    max_out = out_sav.shape[0]
    for a in range(1, B + 1):
        for sgn in (1, -1):
            idx[0] = 0
            val[0] = sgn * a
            S[1] = sgn * a
            used[1] = a
            depth = 1
            idx[1] = 0
            vt[1] = 2 * (B - a) - 1
            while depth >= 1:
                if used[depth] >= B:
                    depth -= 1
                    continue
                rem = B - used[depth]
                vt[depth] += 1
                if vt[depth] >= 2 * rem:
                    vt[depth] = 0
                    idx[depth] += 1
                if idx[depth] >= n:
                    depth -= 1
                    continue
                t = vt[depth]
                mag = t // 2 + 1
                value = mag if t % 2 == 0 else -mag
                nused = used[depth] + mag
                nS = S[depth] + value
                counters[0] += 1
                if abs(nS) > B - nused:
                    continue
                val[depth] = value
                lvl = depth + 1
                S[lvl] = nS
                used[lvl] = nused
                if nS == 0:
                    counters[1] += 1
                    for p in range(lvl):
                        pi[p] = idx[p] // m
                        pj[p] = idx[p] % m
                        pv[p] = val[p]
                    counters[3] += 1
                    sav = _full_savings(G, pi, pj, pv, lvl, scratch)
                    if sav > 1e-7:
                        if sav < best:
                            best = sav
                        if sav <= best + tol:
                            if n_out < max_out:
                                for p in range(lvl):
                                    out_sites[n_out, p] = idx[p]
                                    out_val[n_out, p] = val[p]
                                out_k[n_out] = lvl
                                out_sav[n_out] = sav
                                n_out += 1
                            else:
                                counters[5] += 1
                if B - nused > 0:
                    depth = lvl
                    idx[depth] = idx[depth - 1]
                    vt[depth] = 2 * (B - used[depth]) - 1
    return best, n_out


# ---------------------------------------------------------------------------
# gap search


@dataclass
class GapResult:
    m: int
    B: int
    R: int
    route: str
    vector_class: str
    gap: float
    scaled_gap: float
    minimizers: list  # canonical forms (tuples of ((i, j), value))
    minimizer_classes: list  # canonical forms of the distinguished prevectors
    counters: dict
    collected: list = field(default_factory=list, repr=False)  # (canonical form, savings)

    def to_json(self) -> dict:
        return {
            "m": self.m, "B": self.B, "R": self.R, "route": self.route,
            "class": self.vector_class, "gap": self.gap, "scaled_gap": self.scaled_gap,
            "minimizers": [[[i, j, v] for (i, j), v in form] for form in self.minimizers],
            "minimizer_classes": [[[i, j, v] for (i, j), v in form] for form in self.minimizer_classes],
            "counters": self.counters,
        }


def _offsets(R: int):
    L = 2 * R
    offs = [(i, j) for i in range(-L, L + 1) for j in range(-L, L + 1)
            if abs(i) + abs(j) <= L and (i, j) >= (0, 0)]
    offs.sort()
    lookup = -np.ones((2 * L + 1, 2 * L + 1), np.int64)
    for k, (i, j) in enumerate(offs):
        lookup[i + L, j + L] = k
    return np.array(offs, np.int64), lookup


def _window_offsets(m: int, radius: int):
    """Offsets of the l1 ball of given radius, keeping one per torus site."""
    seen, keep = set(), []
    for i in range(-radius, radius + 1):
        for j in range(-radius, radius + 1):
            if abs(i) + abs(j) <= radius and (i % m, j % m) not in seen:
                seen.add((i % m, j % m))
                keep.append((i, j))
    arr = np.array(keep, np.int64)
    return arr[:, 0].copy(), arr[:, 1].copy()


def _local_greens(G: np.ndarray, H: int) -> np.ndarray:
    m = G.shape[0]
    r = np.arange(-H, H + 1) % m
    return np.ascontiguousarray(G[np.ix_(r, r)])


def _on_torus(domain: Domain, entries: dict) -> SparseIntField:
    # offsets of a wrapping ball can coincide mod m; their values add
    return SparseIntField.from_pairs(domain, [(i, j, val) for (i, j), val in entries.items()])


def default_vector_class(m: int, R: int) -> str:
    """C^1 (all mean-zero vectors) while the search ball wraps around a torus of at most 16 sites."""
    return "C1" if m <= 2 * R and m * m <= 16 else "C2"


def gap_search(m: int, B: int = 8, R: int = 4, vector_class: str | None = None,
               tol: float = 1e-9, collect_below: float = -1.0, collect_factor: float = 0.0,
               max_records: int = 200000) -> GapResult:
    """Smallest 1 - |mu_hat| over frequencies of integer vectors in the search class.

    The class is C^2 vectors (moments taken mod m) fitting in a translate of the
    l1 ball of radius R with l1 norm at most B.  When the ball wraps around a
    torus with at most 16 sites all mean-zero vectors are enumerated instead.
    With ``collect_below`` (or ``collect_factor`` times a first-pass estimate of
    the minimum) every class with savings below the threshold is also kept.
    """
    if m < 2 or B < 2 or R < 1:
        raise ValueError("need m >= 2, B >= 2, R >= 1")
    vector_class = vector_class or default_vector_class(m, R)
    if vector_class not in ("C1", "C2"):
        raise ValueError("vector_class must be 'C1' or 'C2'")
    G = np.ascontiguousarray(greens.greens_torus(m).values.values)
    counters = np.zeros(6, np.int64)
    exhaustive = vector_class == "C1" and m * m <= 16 and 2 * (m // 2) <= R
    if exhaustive:
        out_sites = np.zeros((max_records, B + 1), np.int64)
        out_val = np.zeros((max_records, B + 1), np.int64)
        out_k = np.zeros(max_records, np.int64)
        out_sav = np.zeros(max_records)
        best, n_out = _torus_exhaustive(m, B, G, np.inf, tol, out_sites, out_val, out_k, out_sav, counters)
        route = "torus-exhaustive"
        raw = []
        for r in range(n_out):
            ent = {}
            for p in range(out_k[r]):
                s = int(out_sites[r, p])
                ent[(s // m, s % m)] = ent.get((s // m, s % m), 0) + int(out_val[r, p])
            raw.append((ent, float(out_sav[r])))
    else:
        if vector_class == "C1":
            raise ValueError("C1 search is only supported on tori with at most 16 sites")
        offs, lookup = _offsets(R)
        wi, wj = _window_offsets(m, 2 * R + 2)
        si, sj = _window_offsets(m, R + 1)
        H = 4 * R + 4
        Gloc = _local_greens(G, H)
        out_idx = np.zeros((max_records, B + 1), np.int64)
        out_val = np.zeros((max_records, B + 1), np.int64)
        out_k = np.zeros(max_records, np.int64)
        out_sav = np.zeros(max_records)
        # a cheap pass with a small budget seeds the pruning threshold
        best = np.inf
        if B > 4 or collect_factor > 0:
            seed_counters = np.zeros(6, np.int64)
            best, _ = _anchored_search(m, R, min(B, 4), offs, lookup, G, Gloc, H, si, sj, wi, wj, np.inf, tol,
                                       -1.0, out_idx, out_val, out_k, out_sav, seed_counters)
            if collect_factor > 0 and np.isfinite(best):
                collect_below = collect_factor * best
        best, n_out = _anchored_search(m, R, B, offs, lookup, G, Gloc, H, si, sj, wi, wj, best, tol,
                                       collect_below, out_idx, out_val, out_k, out_sav, counters)
        route = "anchored"
        raw = []
        for r in range(n_out):
            ent = {}
            for p in range(out_k[r]):
                i, j = (int(x) for x in offs[out_idx[r, p]])
                ent[(i, j)] = ent.get((i, j), 0) + int(out_val[r, p])
            raw.append((ent, float(out_sav[r])))
    if not np.isfinite(best):
        raise RuntimeError("no nonzero frequency in the search class")
    # re-evaluate the near-minimal records exactly and keep the ties
    domain = Domain.torus(m)
    evaluated = []
    for ent, s in raw:
        if s > best + 1e3 * tol:
            continue
        v = _on_torus(domain, ent)
        if not v:
            continue
        evaluated.append((ent, savings(frequency_from_prevector(v)).total_savings))
    best_exact = min(s for _, s in evaluated)
    minimizers = sorted({canonical_form(ent) for ent, s in evaluated if s <= best_exact + tol})
    classes = sorted({frequency_class(frequency_from_prevector(
        _on_torus(domain, dict(form))))
        for form in minimizers})
    collected = []
    if collect_below > 0:
        # distinct frequencies only: vectors differing by a Laplacian share one
        forms = {}
        for ent, s in raw:
            if s <= collect_below:
                v = _on_torus(domain, ent)
                forms.setdefault(frequency_class(frequency_from_prevector(v)), s)
        collected = sorted(forms.items())
    names = ["nodes", "candidates", "canonical", "full_evaluations", "recorded", "overflow"]
    return GapResult(
        m=m, B=B, R=R, route=route, vector_class=vector_class,
        gap=best_exact / (m * m), scaled_gap=best_exact,
        minimizers=minimizers, minimizer_classes=classes,
        counters={k: int(c) for k, c in zip(names, counters)},
        collected=collected,
    )


# ---------------------------------------------------------------------------
# exact dual group for tiny tori


@dataclass
class DualOracle:
    m: int
    order: int
    frequencies: np.ndarray  # (order, m, m), first entry the zero frequency
    eigenvalues: np.ndarray  # complex, same order

    @property
    def moduli(self) -> np.ndarray:
        return np.abs(self.eigenvalues)

    @property
    def gap(self) -> float:
        nonzero = np.any(np.abs(self.frequencies.reshape(self.order, -1)) > 0, axis=1)
        return float(1.0 - self.moduli[nonzero].max())

    def l2_squared(self, N: int) -> float:
        """sum over nonzero characters of |mu_hat|^(2N)."""
        nonzero = np.any(np.abs(self.frequencies.reshape(self.order, -1)) > 0, axis=1)
        return math.fsum((self.moduli[nonzero] ** (2 * N)).tolist())

    def l2_distance(self, N: int) -> float:
        """L^2(uniform) distance of the N-step law from uniform."""
        return math.sqrt(self.l2_squared(N))


def dual_group_oracle(m: int) -> DualOracle:
    """All characters of the sandpile group via the Smith form of the reduced Laplacian.

    With U A V = D, the dual group is V D^{-1} Z^n mod Z^n, so every character is
    V (k_1/d_1, ..., k_n/d_n) mod 1 with 0 <= k_i < d_i.
    """
    if m > 3:
        raise ValueError("exact character enumeration is limited to m <= 3")
    A = reduced_laplacian_dense(m)
    _, _, V, diag = smith.smith_with_transforms(A)
    n = len(A)
    order = 1
    for d in diag:
        order *= d
    ranges = [range(d) for d in diag]
    freqs = np.zeros((order, m, m))
    for r, ks in enumerate(product(*ranges)):
        for x in range(n):
            q = sum((Fraction(V[x][i] * k, diag[i]) for i, k in enumerate(ks) if k), Fraction(0))
            q -= math.floor(q + Fraction(1, 2))
            freqs[r, (x + 1) // m, (x + 1) % m] = float(q)
    eig = np.array([mu_hat(f) for f in freqs])
    return DualOracle(m, order, freqs, eig)


# ---------------------------------------------------------------------------
# cutoff profile and separated additivity


@dataclass
class CutoffProfile:
    m: int
    gap: float
    N: list
    lower: list
    upper_proxy: list
    crossing_estimate: float
    classes_used: int
    note: str = "upper values are a heuristic bound over enumerated classes"

    def to_json(self) -> dict:
        return {"m": self.m, "gap": self.gap, "N": self.N, "lower_bound": self.lower,
                "heuristic_upper_proxy": self.upper_proxy,
                "crossing_estimate": self.crossing_estimate,
                "classes_used": self.classes_used, "note": self.note}


def cutoff_profile(m: int, N_list, B: int = 8, R: int = 4, collect_factor: float = 2.0,
                   collect_below: float | None = None) -> CutoffProfile:
    """Lower bound m^2 (1 - gap)^(2N) and an upper proxy summing |mu_hat|^(2N) over
    enumerated low-savings classes (each class weighted by m^2 times its orbit size)."""
    res = gap_search(m, B, R, collect_below=collect_below or -1.0,
                     collect_factor=0.0 if collect_below else collect_factor)
    moduli = []
    for form, sav in res.collected:
        moduli.append((1.0 - sav / (m * m), orbit_size(dict(form))))
    lower, upper = [], []
    for N in N_list:
        lower.append(m * m * (1.0 - res.gap) ** (2 * N))
        upper.append(math.fsum(m * m * mult * mod ** (2 * N) for mod, mult in moduli))
    crossing = m * m * math.log(m) / res.scaled_gap
    return CutoffProfile(m, res.gap, list(N_list), lower, upper, crossing, len(moduli))


def separated_additivity(m: int, distances, direction=(1, 0)) -> dict:
    """Scaled error sav(v - T_d v) - 2 sav(v) for v = delta_1 * delta_2 and translates T_d."""
    domain = Domain.torus(m)
    v = product_delta12(domain)
    base = savings(frequency_from_prevector(v)).total_savings
    rows = []
    for d in distances:
        w = v - v.translate(d * direction[0], d * direction[1])
        pair = savings(frequency_from_prevector(w)).total_savings
        err = pair - 2 * base
        rows.append({"d": d, "scaled_error": err, "err_d2": err * d * d,
                     "err_d2_over_log": err * d * d / math.log(d)})
    return {"m": m, "single_savings": base, "rows": rows}


def relative_spread(values) -> float:
    """Smallest max relative deviation of the values from a single constant."""
    lo, hi = min(values), max(values)
    if lo <= 0 or hi <= 0:
        lo, hi = min(abs(x) for x in values), max(abs(x) for x in values)
    return (hi - lo) / (hi + lo)


# ---------------------------------------------------------------------------
# prevector bounds over random frequency families


def random_prevector(m: int, rng: np.random.Generator, points: int = 6, height: int = 3) -> SparseIntField:
    """Random mean-zero integer vector with a few support points."""
    domain = Domain.torus(m)
    while True:
        sites = rng.integers(0, m, size=(points, 2))
        vals = rng.integers(-height, height + 1, size=points)
        vals[-1] -= vals.sum()
        v = SparseIntField.from_pairs(domain, [(int(a), int(b), int(c)) for (a, b), c in zip(sites, vals)])
        if v:
            return v


def prevector_bound_report(m: int, samples: int, rng: np.random.Generator) -> dict:
    """Measured constants relating savings to the distinguished prevector and to ||G v||^2."""
    ratios_l1, ratios_l2, sup_norms, modulus_gaps = [], [], [], []
    for _ in range(samples):
        xi = frequency_from_prevector(random_prevector(m, rng))
        if xi.is_zero():
            continue
        vd = distinguished_prevector(xi)
        sav = savings(xi).total_savings
        xi_bar = greens.apply_greens_torus(vd.to_field().values)
        mod_bar = abs(mu_hat(xi_bar))
        ratios_l1.append(sav / vd.norm1())
        ratios_l2.append((float(np.sum(xi_bar**2)) / m**2) / (sav / m**2))
        sup_norms.append(vd.norm_inf())
        modulus_gaps.append(abs(mod_bar - abs(mu_hat(xi))))
    return {
        "m": m, "samples": len(ratios_l1),
        "kappa_min_savings_over_l1": min(ratios_l1),
        "l2_ratio_min": min(ratios_l2), "l2_ratio_max": max(ratios_l2),
        "max_sup_norm": max(sup_norms),
        "max_modulus_mismatch": max(modulus_gaps),
    }
