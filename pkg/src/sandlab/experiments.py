"""Experiments on Z^2 windows: pairings with a harmonic-mod-1 field, characteristic
functions of i.i.d. piles, the small-value tail of D_1^3 G, and i.i.d. stabilization."""

from __future__ import annotations

import cmath
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import greens
from .sandpile import parallel_topple, window_mask

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# height laws


@dataclass(frozen=True)
class HeightDistribution:
    values: tuple
    probs: tuple

    def __post_init__(self):
        if len(self.values) != len(self.probs) or not self.values:
            raise ValueError("values and probabilities must be nonempty and of equal length")
        if len(set(self.values)) != len(self.values):
            raise ValueError("repeated value in height law")
        if any(int(v) != v or v < 0 for v in self.values):
            raise ValueError("heights must be nonnegative integers")
        if any(p < 0 for p in self.probs):
            raise ValueError("probabilities must be nonnegative")
        if abs(math.fsum(float(p) for p in self.probs) - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to 1")

    @classmethod
    def parse(cls, text: str) -> "HeightDistribution":
        """Parse 'value:prob,value:prob,...'; probabilities may be fractions like 1/3."""
        values, probs = [], []
        try:
            for item in text.split(","):
                v, p = item.split(":")
                values.append(int(v))
                probs.append(float(Fraction(p.strip())))
        except ValueError as exc:
            raise ValueError(f"malformed height law {text!r}") from exc
        order = np.argsort(values)
        return cls(tuple(values[k] for k in order), tuple(probs[k] for k in order))

    @classmethod
    def two_point(cls, p: float, gap: int = 10, mean: int = 5) -> "HeightDistribution":
        """Mass p at mean + (1 - p) gap and 1 - p at mean - p gap.

        |E[e(-t X)]|^2 = 1 - 2 p (1 - p) (1 - cos(2 pi gap t)), so at fixed mean
        and gap the law widens, and every factor shrinks, as p moves towards 1/2.
        """
        low = mean - p * gap
        if abs(low - round(low)) > 1e-9 or round(low) < 0:
            raise ValueError("mean - p * gap must be a nonnegative integer")
        low = int(round(low))
        return cls((low, low + gap), (1.0 - p, p))

    @property
    def mean(self) -> float:
        return math.fsum(v * p for v, p in zip(self.values, self.probs))

    def to_text(self) -> str:
        return ",".join(f"{v}:{p!r}" for v, p in zip(self.values, self.probs))

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.choice(np.array(self.values, np.int64), size=shape, p=np.array(self.probs))

    def phi(self, t) -> np.ndarray:
        """E[e(-t X)] for an array of real t."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, complex)
        for v, p in zip(self.values, self.probs):
            out += p * np.exp(-1j * TWO_PI * v * t)
        return out


# ---------------------------------------------------------------------------
# the test field and pairings


_XI_CACHE: dict = {}


def xi_field(M: int, tol: float = 1e-10) -> np.ndarray:
    """D_1^3 G_Z2 on the square [-M, M]^2.

    Its Laplacian is the integer kernel D_1^3 delta up to rounding whatever the
    table tolerance, since every torus table is an exact Laplacian inverse.
    """
    key = (M, tol)
    if key not in _XI_CACHE:
        _XI_CACHE[key] = greens.z2_derivative(M, 3, 0, tol)
    return _XI_CACHE[key]


def wrap_half(x: float) -> float:
    """Representative of x mod 1 in [-1/2, 1/2)."""
    return x - math.floor(x + 0.5)


def pairing(heights: np.ndarray, xi: np.ndarray) -> float:
    """sum sigma(x) xi(x) mod 1, in [-1/2, 1/2); both arrays share one centred grid."""
    heights = np.asarray(heights)
    if heights.shape != xi.shape:
        raise ValueError("heights and field must be given on the same grid")
    nz = heights != 0
    return wrap_half(math.fsum((heights[nz] * xi[nz]).tolist()))


def _embed(a: np.ndarray, size: int) -> np.ndarray:
    """Centre a square array inside a larger zero square."""
    pad = (size - a.shape[0]) // 2
    return np.pad(a, pad)


@dataclass
class StabilizationRecord:
    topplings: int
    grains_before: int
    grains_after: int
    grains_lost: int
    pairing_drift: float

    @property
    def balanced(self) -> bool:
        return self.grains_before == self.grains_after + self.grains_lost


def stabilize_with_pairing(heights: np.ndarray, R: int, xi: np.ndarray | None = None,
                           max_steps: int = 10**7) -> StabilizationRecord:
    """Stabilize on the l1 window of radius R, tracking the pairing with D_1^3 G.

    Grains pushed across the boundary stay in the picture at the cells they
    land on, so the before and after configurations differ by an integer
    Laplacian and their pairings agree mod 1.
    """
    xi = xi_field(R + 1) if xi is None else xi
    run = parallel_topple(heights, R, max_steps)
    if not run.stable:
        raise RuntimeError("step cap reached before stabilization")
    size = 2 * R + 3
    before = pairing(_embed(heights, size), xi)
    after = pairing(_embed(run.heights, size) + run.lost, xi)
    return StabilizationRecord(int(run.odometer.sum()), int(heights.sum()), int(run.heights.sum()),
                               int(run.lost.sum()), abs(wrap_half(after - before)))


def single_toppling_drift(R: int = 8, site=(0, 0)) -> float:
    """Pairing change when one site topples once, mod 1."""
    xi = xi_field(R + 1)
    size = 2 * R + 3
    c = R + 1
    sigma = np.zeros((size, size), np.int64)
    sigma[c + site[0], c + site[1]] = 4
    after = sigma.copy()
    after[c + site[0], c + site[1]] -= 4
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        after[c + site[0] + di, c + site[1] + dj] += 1
    return abs(wrap_half(pairing(after, xi) - pairing(sigma, xi)))


def invariants(radius: int = 32, trials: int = 1000, dist: HeightDistribution | None = None,
               seed: int = 0) -> dict:
    """Pairing drift and grain bookkeeping over many random stabilizations."""
    dist = dist or HeightDistribution.parse("0:0.125,1:0.125,2:0.125,3:0.125,4:0.125,5:0.125,6:0.125,7:0.125")
    xi = xi_field(radius + 1)
    mask = window_mask(radius)
    streams = np.random.SeedSequence(seed).spawn(trials)
    drifts, topplings, balanced = [], 0, True
    for ss in streams:
        rng = np.random.default_rng(ss)
        rec = stabilize_with_pairing(dist.sample(rng, mask.shape) * mask, radius, xi)
        drifts.append(rec.pairing_drift)
        topplings += rec.topplings
        balanced &= rec.balanced
    return {
        "radius": radius, "trials": trials, "law": dist.to_text(), "seed": seed,
        "max_pairing_drift": max(drifts), "total_topplings": topplings,
        "grain_bookkeeping_exact": bool(balanced),
        "single_toppling_drift": single_toppling_drift(),
    }


# ---------------------------------------------------------------------------
# small-value tail of D_1^3 G


@dataclass
class TailScan:
    radii: list
    sums: list
    counts: list
    slope: float
    intercept: float
    window: int

    def to_json(self) -> dict:
        return {"R": self.radii, "sums": self.sums, "counts": self.counts,
                "slope": self.slope, "intercept": self.intercept, "window": self.window}


def xi_tail_scan(R_list, M: int = 256) -> TailScan:
    """sum of xi^2 over sites with 0 < |xi| < 1/(2R), with a log-log slope fit in R."""
    xi = xi_field(M)
    a = np.abs(xi).ravel()
    sq = a**2
    order = np.argsort(a)
    a, sq = a[order], sq[order]
    csum = np.cumsum(sq)
    first = int(np.searchsorted(a, 0.0, side="right"))
    base = csum[first - 1] if first else 0.0
    radii, sums, counts = [], [], []
    for R in sorted(R_list):
        cut = int(np.searchsorted(a, 1.0 / (2 * R), side="left"))
        if cut <= first:
            raise ValueError(f"no site with 0 < |xi| < 1/(2R) for R = {R}; enlarge the window")
        radii.append(int(R))
        sums.append(float(csum[cut - 1] - base))
        counts.append(cut - first)
    if len(radii) < 2:
        raise ValueError("need at least two radii for a slope")
    slope, intercept = np.polyfit(np.log(radii), np.log(sums), 1)
    return TailScan(radii, sums, counts, float(slope), float(intercept), M)


# ---------------------------------------------------------------------------
# characteristic functions


def characteristic_function(dist: HeightDistribution, xi: np.ndarray, mode: str = "product",
                            trials: int = 10000, rng: np.random.Generator | None = None) -> complex:
    """E[e(-<sigma, xi>)] for i.i.d. heights with the given law.

    The product mode sums logarithms of moduli and arguments with correctly
    rounded sums, so the result does not depend on the site order.
    """
    xi = np.asarray(xi, dtype=float).ravel()
    if mode == "product":
        phi = dist.phi(xi[xi != 0])
        mod = np.abs(phi)
        if (mod == 0).any():
            return 0j
        log_mod = math.fsum(np.log(mod).tolist())
        arg = math.fsum(np.angle(phi).tolist())
        return cmath.rect(math.exp(log_mod), math.remainder(arg, TWO_PI))
    if mode == "monte_carlo":
        rng = rng or np.random.default_rng(0)
        sites = xi[xi != 0]
        total = 0j
        batch = max(1, min(trials, 2_000_000 // max(len(sites), 1)))
        done = 0
        while done < trials:
            k = min(batch, trials - done)
            s = dist.sample(rng, (k, len(sites))) @ sites
            total += np.exp(-1j * TWO_PI * s).sum()
            done += k
        return total / trials
    raise ValueError("mode must be 'product' or 'monte_carlo'")


# ---------------------------------------------------------------------------
# i.i.d. stabilization trials


def default_cap(radius: int) -> int:
    """Step cap: laws that fail to stabilize on Z^2 need order R^2 rounds to
    drain a radius-R window, laws that stabilize need only a few."""
    return max(radius * radius // 8, 16)


def _trend(counts: np.ndarray) -> float:
    """Least-squares slope of the counts against the step index."""
    if len(counts) < 2:
        return 0.0
    t = np.arange(len(counts), dtype=float)
    return float(np.polyfit(t, counts.astype(float), 1)[0])


@dataclass
class IidTrial:
    stabilized: bool
    steps: int
    cap: int
    topplings: int
    density_before: float
    density_after: float
    interior_density_before: float
    interior_density_after: float
    grains_lost: int
    bookkeeping_exact: bool
    pairing_drift: float
    unstable_at_cap: int
    interior_unstable_at_cap: int
    interior_trend: float
    interior_relative_change: float

    @property
    def positive_trend(self) -> bool:
        """Unstable sites remain and their interior count rises over the last quarter."""
        return self.interior_unstable_at_cap > 0 and self.interior_trend > 0

    @property
    def sustained(self) -> bool:
        """Unstable sites remain and the interior count loses under 5% over the last quarter."""
        return self.interior_unstable_at_cap > 0 and self.interior_relative_change > -0.05

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        out["positive_trend"] = self.positive_trend
        out["sustained"] = self.sustained
        return out


def iid_trial(dist: HeightDistribution, radius: int, max_steps: int | None, rng: np.random.Generator,
              xi: np.ndarray | None = None) -> IidTrial:
    """Parallel toppling of an i.i.d. pile on the l1 window of radius ``radius``.

    Densities are per site of the window (and of the half-radius interior);
    grains leaving the window are counted so that the bookkeeping is exact.
    """
    cap = default_cap(radius) if max_steps is None else max_steps
    mask = window_mask(radius)
    inner = np.pad(window_mask(radius // 2), radius - radius // 2)
    sigma = dist.sample(rng, mask.shape) * mask
    run = parallel_topple(sigma, radius, cap, region_radius=radius // 2)
    xi = xi_field(radius + 1) if xi is None else xi
    size = 2 * radius + 3
    drift = abs(wrap_half(pairing(_embed(run.heights, size) + run.lost, xi) - pairing(_embed(sigma, size), xi)))
    area, inner_area = int(mask.sum()), int(inner.sum())
    before, after, lost = int(sigma.sum()), int(run.heights.sum()), int(run.lost.sum())
    final_unstable = int(((run.heights >= 4) & mask).sum())
    final_inner = int(((run.heights >= 4) & inner).sum())
    tail = run.region_counts[3 * len(run.region_counts) // 4:]
    trend = _trend(tail)
    level = float(tail.mean()) if len(tail) else 0.0
    rel = trend * len(tail) / level if level > 0 else 0.0
    return IidTrial(
        stabilized=run.stable, steps=run.steps, cap=cap, topplings=int(run.odometer.sum()),
        density_before=before / area, density_after=after / area,
        interior_density_before=float(sigma[inner].sum()) / inner_area,
        interior_density_after=float(run.heights[inner].sum()) / inner_area,
        grains_lost=lost, bookkeeping_exact=before == after + lost, pairing_drift=drift,
        unstable_at_cap=final_unstable, interior_unstable_at_cap=final_inner,
        interior_trend=trend, interior_relative_change=rel,
    )


def iid_trials(dist: HeightDistribution, radius: int, trials: int, seed: int,
               max_steps: int | None = None, workers: int = 1) -> dict:
    """Independent trials with one RNG stream per trial; the summary does not depend
    on the worker count or completion order."""
    streams = np.random.SeedSequence(seed).spawn(trials)
    xi = xi_field(radius + 1)

    def task(k):
        return k, iid_trial(dist, radius, max_steps, np.random.default_rng(streams[k]), xi)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(task, range(trials)))
    else:
        results = [task(k) for k in range(trials)]
    results = [r for _, r in sorted(results, key=lambda kr: kr[0])]
    return {
        "law": dist.to_text(), "mean": dist.mean, "radius": radius, "trials": trials, "seed": seed,
        "cap": results[0].cap if results else default_cap(radius),
        "stabilized": sum(r.stabilized for r in results),
        "cap_reached": sum(not r.stabilized for r in results),
        "positive_trend": sum(r.positive_trend for r in results),
        "sustained": sum(r.sustained for r in results),
        "max_pairing_drift": max((r.pairing_drift for r in results), default=0.0),
        "bookkeeping_exact": all(r.bookkeeping_exact for r in results),
        "trials_detail": [r.to_json() for r in results],
    }
