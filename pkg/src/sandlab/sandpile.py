"""Abelian sandpile on the torus with a sink at the origin, and on Z^2 windows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from . import smith

# ---------------------------------------------------------------------------
# numba kernels on flattened torus arrays (index i*m + j, sink at 0)


def torus_neighbours(m: int) -> np.ndarray:
    idx = np.arange(m * m).reshape(m, m)
    return np.stack(
        [np.roll(idx, -1, 0).ravel(), np.roll(idx, 1, 0).ravel(),
         np.roll(idx, -1, 1).ravel(), np.roll(idx, 1, 1).ravel()],
        axis=1,
    ).astype(np.int64)


@numba.njit(cache=True)
def _stabilize_kernel(h, nbr, odo, lifo):
    """Bulk-topple over-full sites until stable; returns grains absorbed by the sink."""
    n = h.shape[0]
    work = np.empty(n, np.int64)
    queued = np.zeros(n, np.bool_)
    head = 0
    size = 0
    for x in range(1, n):
        if h[x] >= 4:
            work[size] = x
            size += 1
            queued[x] = True
    lost = 0
    while size > 0:
        if lifo:
            size -= 1
            x = work[size]
        else:
            x = work[head]
            head = (head + 1) % n
            size -= 1
        queued[x] = False
        t = h[x] // 4
        if t == 0:
            continue
        h[x] -= 4 * t
        odo[x] += t
        for k in range(4):
            y = nbr[x, k]
            if y == 0:
                lost += t
                continue
            h[y] += t
            if h[y] >= 4 and not queued[y]:
                queued[y] = True
                if lifo:
                    work[size] = y
                else:
                    work[(head + size) % n] = y
                size += 1
    return lost


@numba.njit(cache=True)
def _burning_kernel(h, nbr, odo):
    """Dhar's test: add one grain per edge to the sink and stabilize.

    The start state is recurrent iff every non-sink site topples exactly once.
    """
    n = h.shape[0]
    g = h.copy()
    for k in range(4):
        y = nbr[0, k]
        g[y] += 1
    odo[:] = 0
    _stabilize_kernel(g, nbr, odo, False)
    for x in range(1, n):
        if odo[x] != 1:
            return False
    return True


@numba.njit(cache=True)
def _chain_kernel(h, nbr, sites, counts, track_codes):
    """Run the chain through the pre-drawn site sequence, tallying visited states."""
    n = h.shape[0]
    odo = np.zeros(n, np.int64)
    for s in range(sites.shape[0]):
        x = sites[s]
        if x != 0:
            h[x] += 1
            if h[x] >= 4:
                _stabilize_kernel(h, nbr, odo, False)
        if track_codes:
            code = 0
            for y in range(n - 1, 0, -1):
                code = code * 4 + h[y]
            counts[code] += 1


@numba.njit(cache=True)
def _hitting_kernel(h, nbr, sites, steps_cap):
    n = h.shape[0]
    odo = np.zeros(n, np.int64)
    if _burning_kernel(h, nbr, odo):
        return 0
    for s in range(steps_cap):
        x = sites[s]
        if x != 0:
            h[x] += 1
            if h[x] >= 4:
                _stabilize_kernel(h, nbr, odo, False)
            # recurrence can only change when a grain is added
            if _burning_kernel(h, nbr, odo):
                return s + 1
    return -1


# ---------------------------------------------------------------------------
# torus sandpile


@dataclass(frozen=True)
class Sandpile:
    """Heights on the torus of side m; the entry at the sink (0, 0) is always 0."""

    m: int
    heights: np.ndarray

    def __post_init__(self):
        h = np.array(self.heights, dtype=np.int64).reshape(self.m, self.m)
        if self.m < 2:
            raise ValueError("torus side must be at least 2")
        if h[0, 0] != 0:
            raise ValueError("the sink carries no grains")
        if (h < 0).any():
            raise ValueError("heights must be nonnegative")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)

    @classmethod
    def constant(cls, m: int, value: int) -> "Sandpile":
        h = np.full((m, m), value, dtype=np.int64)
        h[0, 0] = 0
        return cls(m, h)

    @classmethod
    def from_flat(cls, m: int, flat) -> "Sandpile":
        return cls(m, np.asarray(flat, dtype=np.int64).reshape(m, m))

    @property
    def is_stable(self) -> bool:
        return bool(self.heights.max() <= 3)

    def total(self) -> int:
        return int(self.heights.sum())

    def add(self, i: int, j: int, grains: int = 1) -> "Sandpile":
        i, j = i % self.m, j % self.m
        if (i, j) == (0, 0):
            return self
        h = self.heights.copy()
        h[i, j] += grains
        return Sandpile(self.m, h)

    def __add__(self, other: "Sandpile") -> "Sandpile":
        if self.m != other.m:
            raise ValueError("torus sizes differ")
        return Sandpile(self.m, self.heights + other.heights)

    def code(self) -> int:
        """Base-4 integer encoding of a stable state (site (0,1) is the lowest digit)."""
        if not self.is_stable:
            raise ValueError("only stable states are encoded")
        digits = self.heights.ravel()[1:]
        return int(sum(int(d) * 4**k for k, d in enumerate(digits)))

    @classmethod
    def from_code(cls, m: int, code: int) -> "Sandpile":
        flat = np.zeros(m * m, dtype=np.int64)
        for k in range(1, m * m):
            flat[k] = code % 4
            code //= 4
        return cls.from_flat(m, flat)

    def to_json(self) -> dict:
        return {"m": self.m, "heights": self.heights.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Sandpile":
        return cls(int(obj["m"]), np.asarray(obj["heights"], dtype=np.int64))

    def __eq__(self, other):
        return isinstance(other, Sandpile) and self.m == other.m and np.array_equal(
            self.heights, other.heights)

    def __hash__(self):
        return hash((self.m, self.heights.tobytes()))


@dataclass(frozen=True)
class Odometer:
    counts: np.ndarray
    lost: int = 0

    @property
    def topplings(self) -> int:
        return int(self.counts.sum())


_NEIGHBOUR_CACHE: dict[int, np.ndarray] = {}


def _nbr(m: int) -> np.ndarray:
    if m not in _NEIGHBOUR_CACHE:
        _NEIGHBOUR_CACHE[m] = torus_neighbours(m)
    return _NEIGHBOUR_CACHE[m]


def stabilize(pile: Sandpile, order: str = "fifo") -> tuple[Sandpile, Odometer]:
    """Topple until stable.  ``order`` picks the work-list policy (fifo or lifo)."""
    if order not in ("fifo", "lifo"):
        raise ValueError(f"unknown toppling order {order!r}")
    m = pile.m
    h = pile.heights.ravel().copy()
    odo = np.zeros(m * m, np.int64)
    lost = _stabilize_kernel(h, _nbr(m), odo, order == "lifo")
    return Sandpile(m, h.reshape(m, m)), Odometer(odo.reshape(m, m), int(lost))


def torus_laplacian_int(u: np.ndarray) -> np.ndarray:
    """Integer graph Laplacian on the torus (used for odometer bookkeeping)."""
    return 4 * u - np.roll(u, 1, 0) - np.roll(u, -1, 0) - np.roll(u, 1, 1) - np.roll(u, -1, 1)


def is_recurrent(pile: Sandpile) -> bool:
    if not pile.is_stable:
        return False
    m = pile.m
    odo = np.zeros(m * m, np.int64)
    return bool(_burning_kernel(pile.heights.ravel().copy(), _nbr(m), odo))


def markov_step(pile: Sandpile, rng: np.random.Generator, site: tuple[int, int] | None = None) -> Sandpile:
    """Drop one grain on a uniform site of the torus (the sink included) and stabilize."""
    m = pile.m
    if site is None:
        k = int(rng.integers(0, m * m))
        site = (k // m, k % m)
    i, j = site[0] % m, site[1] % m
    if (i, j) == (0, 0):
        return pile
    return stabilize(pile.add(i, j))[0]


def run_chain(m: int, steps: int, rng: np.random.Generator, start: Sandpile | None = None,
              tally: bool = False):
    """Run the chain for ``steps`` steps.

    With ``tally`` (only for m <= 3) also returns visit counts indexed by state code.
    """
    pile = start if start is not None else Sandpile.constant(m, 3)
    h = pile.heights.ravel().copy()
    sites = rng.integers(0, m * m, size=steps).astype(np.int64)
    if tally and m > 3:
        raise ValueError("state tallies are only kept for m <= 3")
    counts = np.zeros(4 ** (m * m - 1) if tally else 1, np.int64)
    _chain_kernel(h, _nbr(m), sites, counts, tally)
    final = Sandpile(m, h.reshape(m, m))
    return (final, counts) if tally else final


def group_add(a: Sandpile, b: Sandpile) -> Sandpile:
    if not (is_recurrent(a) and is_recurrent(b)):
        raise ValueError("group addition needs recurrent summands")
    return stabilize(a + b)[0]


def group_identity(m: int) -> Sandpile:
    """Identity of the sandpile group: (2*top - (2*top)°)° with top the all-3 state."""
    top2 = Sandpile.constant(m, 6)
    return stabilize(Sandpile(m, top2.heights - stabilize(top2)[0].heights))[0]


def recurrent_states(m: int) -> list[Sandpile]:
    """All recurrent states by exhaustive burning test (small m only)."""
    n = m * m - 1
    if n > 12:
        raise ValueError("exhaustive enumeration is limited to m <= 3")
    out = []
    nbr = _nbr(m)
    odo = np.zeros(m * m, np.int64)
    for code in range(4**n):
        pile = Sandpile.from_code(m, code)
        if _burning_kernel(pile.heights.ravel().copy(), nbr, odo):
            out.append(pile)
    return out


# ---------------------------------------------------------------------------
# group structure


@dataclass(frozen=True)
class GroupStructure:
    m: int
    invariant_factors: tuple[int, ...]
    order: int

    @property
    def log_order_per_site(self) -> float:
        return math.log(self.order) / self.m**2

    def to_json(self) -> dict:
        return {"m": self.m, "invariant_factors": [str(d) for d in self.invariant_factors],
                "order": str(self.order), "log_order_per_site": self.log_order_per_site}


def reduced_laplacian_rows(m: int) -> dict[int, dict[int, int]]:
    """Sparse rows of the Laplacian with the sink row and column deleted."""
    rows: dict[int, dict[int, int]] = {}
    nbr = _nbr(m)
    for x in range(1, m * m):
        row = {x - 1: 4}
        for y in nbr[x]:
            if y != 0:
                row[int(y) - 1] = row.get(int(y) - 1, 0) - 1
        rows[x - 1] = {c: v for c, v in row.items() if v}
    return rows


def reduced_laplacian_dense(m: int) -> list[list[int]]:
    n = m * m - 1
    out = [[0] * n for _ in range(n)]
    for r, row in reduced_laplacian_rows(m).items():
        for c, v in row.items():
            out[r][c] = v
    return out


def group_structure(m: int) -> GroupStructure:
    if not 2 <= m <= 64:
        raise ValueError("torus side out of supported range")
    n = m * m - 1
    inv = smith.sparse_smith_invariants(reduced_laplacian_rows(m), n)
    nontrivial = tuple(d for d in inv if d != 1)
    order = 1
    for d in inv:
        order *= d
    return GroupStructure(m, nontrivial, order)


# ---------------------------------------------------------------------------
# hitting time of the recurrent class


def hitting_cap(m: int) -> int:
    return int(math.ceil(100 * m * m * math.sqrt(math.log(m))))


@dataclass(frozen=True)
class HittingResult:
    steps: int | None
    cap: int

    @property
    def reached(self) -> bool:
        return self.steps is not None


def hitting_time_trial(m: int, start: Sandpile, rng: np.random.Generator,
                       cap: int | None = None) -> HittingResult:
    """Number of chain steps until the state first becomes recurrent."""
    cap = hitting_cap(m) if cap is None else cap
    h = start.heights.ravel().copy()
    sites = rng.integers(0, m * m, size=cap).astype(np.int64)
    steps = int(_hitting_kernel(h, _nbr(m), sites, cap))
    return HittingResult(None if steps < 0 else steps, cap)


# ---------------------------------------------------------------------------
# parallel toppling on Z^2 windows


@numba.njit(cache=True)
def _parallel_kernel(h, inside, region, odo, max_steps, unstable_log, region_log):
    """Synchronous toppling on a padded square; cells outside ``inside`` absorb grains.

    Returns the number of steps performed (stops early once stable).
    """
    n0, n1 = h.shape
    fire = np.zeros((n0, n1), np.bool_)
    steps = 0
    while steps < max_steps:
        count = 0
        in_region = 0
        for i in range(n0):
            for j in range(n1):
                f = inside[i, j] and h[i, j] >= 4
                fire[i, j] = f
                if f:
                    count += 1
                    if region[i, j]:
                        in_region += 1
        if count == 0:
            break
        unstable_log[steps] = count
        region_log[steps] = in_region
        for i in range(n0):
            for j in range(n1):
                if fire[i, j]:
                    h[i, j] -= 4
                    odo[i, j] += 1
                    h[i - 1, j] += 1
                    h[i + 1, j] += 1
                    h[i, j - 1] += 1
                    h[i, j + 1] += 1
        steps += 1
    return steps


@dataclass
class WindowRun:
    """Outcome of synchronous toppling on an l1 window of radius R.

    ``heights`` and ``odometer`` are (2R+1)^2 arrays centred at the origin and
    zero outside the window; ``lost`` is a (2R+3)^2 array of the grains that
    landed outside the window, indexed with the origin at (R+1, R+1).
    """

    radius: int
    heights: np.ndarray
    odometer: np.ndarray
    lost: np.ndarray
    steps: int
    stable: bool
    unstable_counts: np.ndarray = field(repr=False)
    region_counts: np.ndarray = field(repr=False, default=None)


def window_mask(R: int) -> np.ndarray:
    i, j = np.mgrid[-R:R + 1, -R:R + 1]
    return (np.abs(i) + np.abs(j)) <= R


def parallel_topple(heights: np.ndarray, R: int, n: int, region_radius: int | None = None) -> WindowRun:
    """Up to ``n`` rounds of toppling every site with at least 4 grains at once.

    With ``region_radius`` the unstable sites inside that smaller l1 ball are
    counted per round as well.
    """
    heights = np.asarray(heights, dtype=np.int64)
    if heights.shape != (2 * R + 1, 2 * R + 1):
        raise ValueError("heights must be a (2R+1)^2 array centred at the origin")
    mask = window_mask(R)
    if (heights[~mask] != 0).any() or (heights < 0).any():
        raise ValueError("heights must be nonnegative and vanish outside the window")
    pad = np.zeros((2 * R + 5, 2 * R + 5), np.int64)
    inside = np.zeros_like(pad, dtype=np.bool_)
    core = (slice(2, 2 * R + 3), slice(2, 2 * R + 3))
    pad[core] = heights
    inside[core] = mask
    region = np.zeros_like(inside)
    r = R if region_radius is None else min(region_radius, R)
    region[core] = np.pad(window_mask(r), R - r)
    odo = np.zeros_like(pad)
    log = np.zeros(max(n, 1), np.int64)
    region_log = np.zeros(max(n, 1), np.int64)
    steps = int(_parallel_kernel(pad, inside, region, odo, n, log, region_log))
    final = np.where(inside, pad, 0)[core]
    lost = np.where(inside, 0, pad)[1:-1, 1:-1]
    stable = bool((final < 4).all())
    return WindowRun(R, final, odo[core], lost, steps, stable, log[:steps].copy(), region_log[:steps].copy())


def window_laplacian_int(u: np.ndarray) -> np.ndarray:
    """Integer Laplacian of a (2R+1)^2 array with zero extension, restricted to the array."""
    p = np.pad(u, 1)
    return 4 * u - p[:-2, 1:-1] - p[2:, 1:-1] - p[1:-1, :-2] - p[1:-1, 2:]
