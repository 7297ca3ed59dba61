"""Lattice domains, fields and the discrete calculus on tori and Z^2 windows."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

FFT_THRESHOLD = 32
NEIGHBOURS = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass(frozen=True)
class Domain:
    """Either the torus (Z/mZ)^2 or the l1 ball of radius R in Z^2.

    Window fields are stored on the bounding (2R+1) x (2R+1) square with the
    origin at the centre; cells outside the l1 ball are held at zero.
    """

    kind: str
    size: int

    def __post_init__(self):
        if self.kind == "torus":
            if self.size < 2:
                raise ValueError("torus side must be at least 2")
        elif self.kind == "window":
            if self.size < 0:
                raise ValueError("window radius must be nonnegative")
        else:
            raise ValueError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def torus(cls, m: int) -> "Domain":
        return cls("torus", int(m))

    @classmethod
    def window(cls, radius: int) -> "Domain":
        return cls("window", int(radius))

    @property
    def is_torus(self) -> bool:
        return self.kind == "torus"

    @property
    def side(self) -> int:
        return self.size if self.is_torus else 2 * self.size + 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.side, self.side)

    @property
    def offset(self) -> int:
        return 0 if self.is_torus else self.size

    def index(self, i: int, j: int) -> tuple[int, int]:
        if self.is_torus:
            return (i % self.size, j % self.size)
        if abs(i) + abs(j) > self.size:
            raise IndexError(f"site {(i, j)} outside window of radius {self.size}")
        return (i + self.size, j + self.size)

    def contains(self, i: int, j: int) -> bool:
        return self.is_torus or abs(i) + abs(j) <= self.size

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer lattice coordinates of every array cell."""
        k = np.arange(self.side) - self.offset
        return np.meshgrid(k, k, indexing="ij")

    def mask(self) -> np.ndarray:
        if self.is_torus:
            return np.ones(self.shape, dtype=bool)
        x, y = self.coords()
        return np.abs(x) + np.abs(y) <= self.size

    def sites(self):
        x, y = self.coords()
        keep = self.mask()
        return list(zip(x[keep].tolist(), y[keep].tolist()))

    def n_sites(self) -> int:
        return int(self.mask().sum())

    def distance(self, a, b) -> int:
        """l1 distance, taken in the quotient metric on the torus."""
        di, dj = a[0] - b[0], a[1] - b[1]
        if self.is_torus:
            m = self.size
            di, dj = di % m, dj % m
            return min(di, m - di) + min(dj, m - dj)
        return abs(di) + abs(dj)

    def to_json(self) -> dict:
        key = "m" if self.is_torus else "R"
        return {"kind": self.kind, key: self.size}

    @classmethod
    def from_json(cls, data: dict) -> "Domain":
        if data["kind"] == "torus":
            return cls.torus(data["m"])
        return cls.window(data["R"])


def _frozen(values: np.ndarray) -> np.ndarray:
    values = np.array(values, copy=True)
    values.flags.writeable = False
    return values


@dataclass(frozen=True)
class Field:
    domain: Domain
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != self.domain.shape:
            raise ValueError(f"values of shape {values.shape} do not match {self.domain.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        if not self.domain.is_torus:
            values = np.where(self.domain.mask(), values, 0)
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def zeros(cls, domain: Domain, dtype=float) -> "Field":
        return cls(domain, np.zeros(domain.shape, dtype=dtype))

    def __getitem__(self, site):
        return self.values[self.domain.index(*site)]

    def __add__(self, other: "Field") -> "Field":
        _same_domain(self, other)
        return Field(self.domain, self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        _same_domain(self, other)
        return Field(self.domain, self.values - other.values)

    def __neg__(self) -> "Field":
        return Field(self.domain, -self.values)

    def scale(self, c) -> "Field":
        return Field(self.domain, c * self.values)

    def total(self):
        return self.values.sum()

    def mean(self):
        return self.values.sum() / self.domain.n_sites()

    def is_mean_zero(self) -> bool:
        return abs(self.total()) <= 1e-10 * self.domain.n_sites()

    def save(self, path) -> None:
        """Row-major little-endian float64 payload plus a JSON sidecar."""
        path = Path(path)
        np.ascontiguousarray(self.values, dtype="<f8").tofile(path)
        Path(str(path) + ".json").write_text(json.dumps(self.domain.to_json()))

    @classmethod
    def load(cls, path) -> "Field":
        path = Path(path)
        domain = Domain.from_json(json.loads(Path(str(path) + ".json").read_text()))
        values = np.fromfile(path, dtype="<f8").reshape(domain.shape)
        return cls(domain, values)


@dataclass(frozen=True)
class SparseIntField:
    """Finitely supported integer function; zero entries are never stored."""

    domain: Domain
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for (i, j), value in self.entries.items():
            if int(value) != value:
                raise ValueError("entries must be integers")
            value = int(value)
            if not self.domain.contains(i, j):
                raise IndexError(f"site {(i, j)} outside {self.domain}")
            if self.domain.is_torus:
                i, j = i % self.domain.size, j % self.domain.size
            if value:
                clean[(int(i), int(j))] = clean.get((int(i), int(j)), 0) + value
        object.__setattr__(self, "entries", {k: v for k, v in sorted(clean.items()) if v})

    @classmethod
    def from_pairs(cls, domain: Domain, pairs) -> "SparseIntField":
        entries: dict = {}
        for i, j, value in pairs:
            entries[(i, j)] = entries.get((i, j), 0) + value
        return cls(domain, entries)

    @classmethod
    def from_field(cls, f: Field) -> "SparseIntField":
        rounded = np.rint(f.values)
        if np.abs(rounded - f.values).max(initial=0.0) > 1e-9:
            raise ValueError("field is not integer valued")
        x, y = f.domain.coords()
        nz = rounded != 0
        return cls(f.domain, dict(zip(zip(x[nz].tolist(), y[nz].tolist()), rounded[nz].astype(int).tolist())))

    def support(self):
        return list(self.entries)

    def norm1(self) -> int:
        return sum(abs(v) for v in self.entries.values())

    def norm_inf(self) -> int:
        return max((abs(v) for v in self.entries.values()), default=0)

    def total(self) -> int:
        return sum(self.entries.values())

    def moments(self) -> tuple[int, int]:
        return (sum(v * i for (i, _), v in self.entries.items()),
                sum(v * j for (_, j), v in self.entries.items()))

    def __bool__(self) -> bool:
        return bool(self.entries)

    def __neg__(self) -> "SparseIntField":
        return SparseIntField(self.domain, {k: -v for k, v in self.entries.items()})

    def __add__(self, other: "SparseIntField") -> "SparseIntField":
        entries = dict(self.entries)
        for k, v in other.entries.items():
            entries[k] = entries.get(k, 0) + v
        return SparseIntField(self.domain, entries)

    def __sub__(self, other: "SparseIntField") -> "SparseIntField":
        return self + (-other)

    def translate(self, di: int, dj: int) -> "SparseIntField":
        return SparseIntField(self.domain, {(i + di, j + dj): v for (i, j), v in self.entries.items()})

    def restrict(self, sites) -> "SparseIntField":
        keep = set(sites)
        return SparseIntField(self.domain, {k: v for k, v in self.entries.items() if k in keep})

    def to_field(self, dtype=float) -> Field:
        values = np.zeros(self.domain.shape, dtype=dtype)
        for (i, j), v in self.entries.items():
            values[self.domain.index(i, j)] += v
        return Field(self.domain, values)

    def to_json(self) -> list:
        return [[i, j, v] for (i, j), v in self.entries.items()]

    @classmethod
    def from_json(cls, domain: Domain, data) -> "SparseIntField":
        return cls.from_pairs(domain, data)


def delta(domain: Domain, axis: int) -> SparseIntField:
    """Kernel of the forward difference: -1 at the origin, +1 one step back."""
    back = (-1, 0) if axis == 1 else (0, -1)
    return SparseIntField(domain, {(0, 0): -1, back: 1})


def unit(domain: Domain, i: int = 0, j: int = 0) -> SparseIntField:
    return SparseIntField(domain, {(i, j): 1})


def _same_domain(f, g) -> None:
    if f.domain != g.domain:
        raise ValueError(f"domain mismatch: {f.domain} vs {g.domain}")


def _shift(values: np.ndarray, di: int, dj: int, torus: bool) -> np.ndarray:
    """out[i, j] = values[i + di, j + dj], zero-filled off the array on windows."""
    if torus:
        return np.roll(values, (-di, -dj), axis=(0, 1))
    out = np.zeros_like(values)
    n0, n1 = values.shape
    src_i = slice(max(di, 0), n0 + min(di, 0))
    dst_i = slice(max(-di, 0), n0 + min(-di, 0))
    src_j = slice(max(dj, 0), n1 + min(dj, 0))
    dst_j = slice(max(-dj, 0), n1 + min(-dj, 0))
    out[dst_i, dst_j] = values[src_i, src_j]
    return out


def laplacian(f: Field) -> Field:
    """4 f(x) minus the sum over the four neighbours; windows read zero outside."""
    torus = f.domain.is_torus
    v = f.values
    out = 4 * v
    for di, dj in NEIGHBOURS:
        out = out - _shift(v, di, dj, torus)
    return Field(f.domain, out)


def discrete_derivative(f: Field, axis: int, order: int = 1) -> Field:
    if axis not in (1, 2):
        raise ValueError("axis must be 1 or 2")
    if order < 1:
        raise ValueError("order must be positive")
    torus = f.domain.is_torus
    step = (1, 0) if axis == 1 else (0, 1)
    v = f.values
    for _ in range(order):
        v = _shift(v, *step, torus) - v
    return Field(f.domain, v)


def translate(f: Field, di: int, dj: int) -> Field:
    """(T_a f)(x) = f(x - a)."""
    return Field(f.domain, _shift(f.values, -di, -dj, f.domain.is_torus))


def _convolve_direct_torus(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros(a.shape, dtype=np.result_type(a, b, float))
    for k, l in zip(*np.nonzero(b)):
        out += b[k, l] * np.roll(a, (k, l), axis=(0, 1))
    return out


def _convolve_fft_torus(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(a) or np.iscomplexobj(b):
        return np.fft.ifft2(np.fft.fft2(a) * np.fft.fft2(b))
    return np.fft.irfft2(np.fft.rfft2(a) * np.fft.rfft2(b), s=a.shape)


def convolve(f: Field, g: Field, method: str = "auto") -> Field:
    """(f * g)(x) = sum_k f(x - k) g(k).

    Tori use the circular convolution (transform-based when the side exceeds
    the threshold); windows sum directly over the support of ``g`` and read
    ``f`` as zero outside the window.
    """
    _same_domain(f, g)
    dom = f.domain
    if dom.is_torus:
        if method == "auto":
            method = "fft" if dom.size > FFT_THRESHOLD else "direct"
        if method == "fft":
            return Field(dom, _convolve_fft_torus(f.values, g.values))
        return Field(dom, _convolve_direct_torus(f.values, g.values))
    out = np.zeros(dom.shape, dtype=np.result_type(f.values, g.values, float))
    x, y = dom.coords()
    for idx in zip(*np.nonzero(g.values)):
        k, l = int(x[idx]), int(y[idx])
        out += g.values[idx] * _shift(f.values, -k, -l, False)
    return Field(dom, out)


def apply_sparse(f: Field, v: SparseIntField) -> Field:
    """Convolution with a sparse integer kernel; cheap when the support is small."""
    _same_domain(f, v)
    out = np.zeros(f.domain.shape, dtype=np.result_type(f.values, float))
    for (k, l), c in v.entries.items():
        out += c * _shift(f.values, -k, -l, f.domain.is_torus)
    return Field(f.domain, out)


class ClassLevel(IntEnum):
    NOT_C0 = -1
    C0 = 0
    C1 = 1
    C2 = 2
    C3 = 3


def _moments_vanish(v: SparseIntField) -> bool:
    mx, my = v.moments()
    if v.domain.is_torus:
        m = v.domain.size
        return mx % m == 0 and my % m == 0
    return mx == 0 and my == 0


def c3_decomposition(v: SparseIntField):
    """Try to write v = delta_1 * f + delta_2 * g with f, g in C^2.

    A particular solution comes from a sweep along rows (first coordinate)
    followed by one correcting column.  Every other finitely supported
    solution differs from it by (D_2 h, -D_1 h), which moves only the quantity
    M_2(f) - sum(h) and M_1(g) + sum(h); the remaining moments are invariant.
    So the decomposition exists exactly when the invariant moments vanish, and
    h = M_2(f) e_0 then completes it.  Works on Z^2 supports; returns None when
    no decomposition exists.
    """
    if v.domain.is_torus:
        raise ValueError("C^3 decomposition is defined for Z^2 supports")
    if v.total() != 0:
        return None
    f: dict = {}
    g: dict = {}
    rows: dict = {}
    for (i, j), c in v.entries.items():
        rows.setdefault(j, []).append((i, c))
    anchor = min(i for i, _ in v.entries) if v.entries else 0
    line_sums = {j: sum(c for _, c in items) for j, items in rows.items()}
    # column at i = anchor absorbs each row's mass: D_2 g puts s(j) at (anchor, j)
    acc = 0
    for j in range(min(rows, default=0), max(rows, default=0) + 1):
        acc += line_sums.get(j, 0)
        if acc:
            g[(anchor, j + 1)] = acc
    residual = {k: c for k, c in v.entries.items()}
    for j, s in line_sums.items():
        if s:
            residual[(anchor, j)] = residual.get((anchor, j), 0) - s
    # D_1 f = residual along each row: f(i, j) = -sum_{i' >= i} residual(i', j)
    by_row: dict = {}
    for (i, j), c in residual.items():
        if c:
            by_row.setdefault(j, {})[i] = c
    for j, cells in by_row.items():
        lo, hi = min(cells), max(cells)
        acc = 0
        for i in range(hi, lo - 1, -1):
            acc += cells.get(i, 0)
            if acc:
                f[(i, j)] = -acc

    def stats(d):
        s = sum(d.values())
        m1 = sum(c * i for (i, _), c in d.items())
        m2 = sum(c * j for (_, j), c in d.items())
        return s, m1, m2

    sf, f1, f2 = stats(f)
    sg, g1, g2 = stats(g)
    if sf or f1 or sg or g2 or (f2 + g1):
        return None
    h = f2
    if h:
        # f += D_2(h e_0), g -= D_1(h e_0)
        f[(0, -1)] = f.get((0, -1), 0) + h
        f[(0, 0)] = f.get((0, 0), 0) - h
        g[(-1, 0)] = g.get((-1, 0), 0) - h
        g[(0, 0)] = g.get((0, 0), 0) + h
    return _sparse_on_z2(f), _sparse_on_z2(g)


def _sparse_on_z2(entries: dict) -> SparseIntField:
    radius = max((abs(i) + abs(j) for i, j in entries), default=0)
    return SparseIntField(Domain.window(radius), entries)


def sparse_convolve(a: SparseIntField, b: SparseIntField, domain: Domain | None = None) -> SparseIntField:
    """Exact integer convolution of two finitely supported functions on Z^2."""
    out: dict = {}
    for (i, j), x in a.entries.items():
        for (k, l), y in b.entries.items():
            key = (i + k, j + l)
            out[key] = out.get(key, 0) + x * y
    if domain is None:
        return _sparse_on_z2(out)
    return SparseIntField(domain, out)


def class_membership(v) -> ClassLevel:
    """Highest class among C^0 .. C^3 that contains v."""
    if isinstance(v, Field):
        try:
            v = SparseIntField.from_field(v)
        except ValueError:
            return ClassLevel.NOT_C0
    if v.total() != 0:
        return ClassLevel.C0
    if not _moments_vanish(v):
        return ClassLevel.C1
    if v.domain.is_torus:
        return ClassLevel.C2
    return ClassLevel.C3 if c3_decomposition(v) is not None else ClassLevel.C2
