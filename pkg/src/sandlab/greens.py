"""Green's functions of the lattice Laplacian on tori and on Z^2.

The torus table comes from the inverse discrete Fourier transform of the
Laplacian symbol with the zero frequency dropped.  The Z^2 table is read off
large tori: the torus values differ from Z^2 by |x|^2/(4 m^2) plus terms of
order m^-4, so after removing the quadratic part one Richardson step per
doubling of m converges quickly.  For those large tori one axis of the
transform is summed in closed form, which costs O(m L^2) for an L-window
instead of a full m x m transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import Domain, Field, discrete_derivative, laplacian


class ConvergenceError(RuntimeError):
    """A doubling or fitting procedure failed to reach its tolerance."""


@dataclass(frozen=True)
class GreensTable:
    domain: Domain
    values: Field
    meta: dict = field(default_factory=dict)
    # Z^2 tables keep the full bounding square; index [L + i, L + j]
    square: np.ndarray | None = None

    def at(self, i: int, j: int) -> float:
        if self.square is not None:
            half = self.square.shape[0] // 2
            return float(self.square[half + i, half + j])
        return float(self.values[(i, j)])


@dataclass(frozen=True)
class AsymptoticFit:
    a: float
    b: float
    residual_exponent: float
    annulus: tuple
    max_residual: float


def laplacian_symbol(m: int) -> np.ndarray:
    c = np.cos(2 * np.pi * np.arange(m) / m)
    return 4.0 - 2.0 * c[:, None] - 2.0 * c[None, :]


def greens_torus(m: int) -> GreensTable:
    """Mean-zero Green's function on the m-torus, indexed [i mod m, j mod m]."""
    if m < 2:
        raise ValueError("m must be at least 2")
    lam = laplacian_symbol(m)[:, : m // 2 + 1]
    lam[0, 0] = np.inf
    values = np.fft.irfft2(1.0 / lam, s=(m, m))
    values -= values.mean()
    return GreensTable(Domain.torus(m), Field(Domain.torus(m), values), {"method": "dft", "m": m})


def apply_greens_torus(f: np.ndarray) -> np.ndarray:
    """G_T * f for an m x m array, i.e. the pseudoinverse of the Laplacian."""
    m = f.shape[0]
    lam = laplacian_symbol(m)[:, : m // 2 + 1]
    lam[0, 0] = np.inf
    return np.fft.irfft2(np.fft.rfft2(f) / lam, s=(m, m))


def torus_differences(m: int, L: int) -> np.ndarray:
    """G_T(i, j) - G_T(0, 0) on the m-torus for 0 <= i, j <= L.

    Sums the second transform axis exactly: for a = 4 - 2 cos(theta) > 2,
    sum_k e(k j / m) / (a - 2 cos(2 pi k / m)) = m (r^j + r^(m-j)) / (s (1 - r^m))
    with s = sqrt(a^2 - 4) and r = (a - s) / 2; the a = 2 row has the
    elementary value (m^2 - 1)/12 - j (m - j) / 2.
    """
    if L >= m // 2:
        raise ValueError("window must sit inside half the torus")
    k = np.arange(1, m // 2 + 1)
    theta = 2 * np.pi * k / m
    weight = np.where(2 * k == m, 1.0, 2.0)
    d = 4 * np.sin(theta / 2) ** 2
    s = np.sqrt(d * (4 + d))
    log_r = np.log1p((d - s) / 2)
    j = np.arange(L + 1)
    jl = j[None, :] * log_r[:, None]
    denom = -np.expm1(m * log_r)
    rm = np.exp(m * log_r)
    scale = (m / s / denom)[:, None]
    full = scale * (np.exp(jl) + np.exp((m - j)[None, :] * log_r[:, None]))
    # r^m (r^-j - 1) written without the overflowing r^-j
    diff = scale * (np.expm1(jl) + np.exp((m - j)[None, :] * log_r[:, None]) - rm[:, None])
    i = np.arange(L + 1)
    cos_minus_one = -2 * np.sin(np.outer(i, theta) / 2) ** 2
    total = cos_minus_one @ (weight[:, None] * full) + (weight[:, None] * diff).sum(axis=0)[None, :]
    total += -(j * (m - j) / 2.0)[None, :]
    return total / m**2


def _quadrant_to_square(q: np.ndarray) -> np.ndarray:
    """Reflect a [0..L]^2 table that is even in both coordinates."""
    L = q.shape[0] - 1
    out = np.empty((2 * L + 1, 2 * L + 1))
    out[L:, L:] = q
    out[:L, L:] = q[:0:-1, :]
    out[L:, :L] = q[:, :0:-1]
    out[:L, :L] = q[:0:-1, :0:-1]
    return out


def z2_square(L: int, tol: float = 1e-9, m0: int | None = None, max_m: int = 1 << 20):
    """G_Z2 on the square [-L, L]^2, normalized to vanish at the origin.

    Returns (square, meta).  Raises ConvergenceError when two successive
    extrapolated tables disagree by more than ``tol`` up to ``max_m``.
    """
    if L < 1:
        raise ValueError("window radius must be at least 1")
    m = m0 or max(64, 1 << int(np.ceil(np.log2(8 * (L + 1)))))
    i = np.arange(L + 1)
    quad = (i[:, None] ** 2 + i[None, :] ** 2) / 4.0

    def raw(mm):
        return torus_differences(mm, L) - quad / mm**2

    prev_raw = raw(m)
    prev_ext = None
    history = []
    while True:
        m *= 2
        if m > max_m:
            raise ConvergenceError(f"Z^2 Green's table did not converge to {tol} by m = {max_m}")
        cur_raw = raw(m)
        ext = (16 * cur_raw - prev_raw) / 15
        if prev_ext is not None:
            change = float(np.abs(ext - prev_ext).max())
            history.append({"m": m, "change": change})
            if change <= tol:
                q = 0.5 * (ext + ext.T)
                q[0, 0] = 0.0
                return _quadrant_to_square(q), {"method": "dft", "m_big": m, "doublings": history}
        prev_raw, prev_ext = cur_raw, ext


def greens_z2(M: int, tol: float = 1e-9) -> GreensTable:
    """G_Z2 on the l1 window of radius M (the bounding square is kept too)."""
    square, meta = z2_square(M, tol)
    dom = Domain.window(M)
    return GreensTable(dom, Field(dom, square), meta, square)


def square_derivative(square: np.ndarray, a: int, b: int) -> np.ndarray:
    """D_1^a D_2^b of a centred square table, trimmed by a + b cells per side so
    the result stays centred on the origin."""
    n0 = square.shape[0] // 2
    v = square
    for _ in range(a):
        v = v[1:, :] - v[:-1, :]
    for _ in range(b):
        v = v[:, 1:] - v[:, :-1]
    h = n0 - a - b
    return v[n0 - h: n0 + h + 1, n0 - h: n0 + h + 1]


def z2_derivative(L: int, a: int, b: int, tol: float = 1e-9) -> np.ndarray:
    """D_1^a D_2^b G_Z2 on the square [-L, L]^2."""
    square, _ = z2_square(L + a + b, tol)
    return square_derivative(square, a, b)


def _radius_grid(half: int):
    k = np.arange(-half, half + 1)
    x, y = np.meshgrid(k, k, indexing="ij")
    return x, y, np.hypot(x, y)


def _dyadic_slope(r: np.ndarray, values: np.ndarray, r_lo: float, r_hi: float, bins: int = 6):
    """Slope of log(max |values|) against log r over log-spaced shells."""
    edges = np.geomspace(r_lo, r_hi, bins + 1)
    xs, ys = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (r >= lo) & (r < hi)
        if sel.sum() < 16:
            continue
        xs.append(np.log(np.sqrt(lo * hi)))
        ys.append(np.log(np.abs(values[sel]).max()))
    if len(xs) < 3:
        raise ConvergenceError("too few populated shells for a slope fit")
    return float(np.polyfit(xs, ys, 1)[0])


def _fit_ab(x, y, r, g):
    """Fit a, b with nuisance r^-4 harmonics so the r^-4 remainder does not bias b.

    The returned residual is measured against the (a, b) expansion alone.
    """
    cos4 = 1 - 8 * x**2 * y**2 / r**4
    angular = -cos4 / r**2
    rhs = g + np.log(r) / (2 * np.pi)
    nuisance = [r**-4.0, cos4 / r**4, (2 * cos4**2 - 1) / r**4]
    A = np.column_stack([-np.ones_like(r), -angular] + nuisance)
    if np.linalg.cond(A) > 1e10:
        raise ConvergenceError("ill-conditioned asymptotic fit")
    coef, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    return coef[:2], rhs - A[:, :2] @ coef[:2]


def fit_asymptotics(table: GreensTable, annulus: tuple | None = None) -> AsymptoticFit:
    """Least-squares fit of G = -log r / 2pi - a - b (8 x^2 y^2 / r^4 - 1) / r^2."""
    if table.square is None:
        raise ValueError("asymptotic fit needs a Z^2 table")
    half = table.square.shape[0] // 2
    if annulus is None:
        if half < 64:
            raise ValueError("asymptotic fit needs a window of radius at least 64")
        annulus = (half / 4, half / 2)
    x, y, r = _radius_grid(half)
    sel = (r >= annulus[0]) & (r <= annulus[1])
    coef, res = _fit_ab(x[sel], y[sel], r[sel], table.square[sel])
    exponent = _dyadic_slope(r[sel], res, annulus[0], annulus[1])
    return AsymptoticFit(float(coef[0]), float(coef[1]), exponent, tuple(annulus), float(np.abs(res).max()))


def log_bound_report(table: GreensTable, constant: float = 0.01721, r_max: float = 100.0,
                     additive: float = 0.0) -> dict:
    """Check |G + log r / 2pi + additive| <= constant / r^2 for 1 <= r <= r_max."""
    half = table.square.shape[0] // 2
    x, y, r = _radius_grid(half)
    sel = (r >= 1) & (r <= r_max)
    if r_max > half:
        raise ValueError("table too small for the requested radius")
    scaled = np.abs(table.square[sel] + np.log(r[sel]) / (2 * np.pi) + additive) * r[sel] ** 2
    worst = int(np.argmax(scaled))
    return {
        "holds": bool(scaled.max() <= constant),
        "max_scaled_error": float(scaled.max()),
        "worst_site": [int(x[sel][worst]), int(y[sel][worst])],
        "constant": constant,
        "additive": additive,
    }


def torus_derivative(m: int, a: int, b: int, table: GreensTable | None = None) -> np.ndarray:
    table = table or greens_torus(m)
    f = table.values
    if a:
        f = discrete_derivative(f, 1, a)
    if b:
        f = discrete_derivative(f, 2, b)
    return np.asarray(f.values)


def derivative_decay_report(m: int, a: int, b: int) -> dict:
    """Sup of r^(a+b) |D_1^a D_2^b G_T| over dyadic annuli with 4 <= r <= m/4."""
    k = a + b
    if k not in (1, 2, 3):
        raise ValueError("a + b must be 1, 2 or 3")
    if m < 64:
        raise ValueError("m must be at least 64")
    table = greens_torus(m)
    d = torus_derivative(m, a, b, table)
    idx = np.arange(m)
    coord = np.where(idx <= m // 2, idx, idx - m)
    x, y = np.meshgrid(coord, coord, indexing="ij")
    r = np.hypot(x, y)
    annuli = []
    lo = 4.0
    while lo < m / 4:
        hi = min(2 * lo, m / 4)
        sel = (r >= lo) & (r < hi)
        annuli.append({"r_lo": lo, "r_hi": hi, "sup_scaled": float((r[sel] ** k * np.abs(d[sel])).max())})
        lo = hi
    sups = np.array([row["sup_scaled"] for row in annuli])
    report = {
        "m": m, "a": a, "b": b, "annuli": annuli,
        "sup_overall": float(sups.max()),
        "bounded": bool(sups.max() <= 2 * sups[0] + 1e-12),
    }
    if k == 1:
        # D_1 of the quadratic part |x|^2 / (4 m^2) of G_T is (2i + 1) / (4 m^2)
        sel = (r >= 4) & (r <= m / 4)
        xi, yj = x[sel] + 0.5 * a, y[sel] + 0.5 * b
        comp = xi if a else yj
        model = -comp / (xi**2 + yj**2)
        target = d[sel] - (2 * (x[sel] if a else y[sel]) + 1) / (4.0 * m * m)
        c = float(model @ target / (model @ model))
        report["first_derivative_constant"] = c
        report["relative_to_one_over_two_pi"] = c * 2 * np.pi
    # convergence of fixed-site derivatives towards Z^2 as m doubles
    probes = [(1, 0), (2, 1), (3, 3)]
    z2 = z2_derivative(4, a, b)
    conv = []
    for mm in (m // 4, m // 2, m):
        dt = torus_derivative(mm, a, b)
        conv.append(max(abs(dt[i % mm, j % mm] - z2[4 + i, 4 + j]) for i, j in probes))
    report["torus_to_z2_error"] = conv
    report["torus_converges"] = bool(conv[0] > conv[1] > conv[2])
    return report


def lp_membership_report(a: int, b: int, p: float, radii=(8, 16, 32, 64, 128, 256)) -> dict:
    """Partial l^p sums of D_1^a D_2^b G_Z2 over growing squares, with a tail fit.

    A derivative of order k decays like r^-k, so it lies in l^p exactly when
    p k > 2; the fitted exponent of dyadic annulus sums is reported alongside.
    """
    k = a + b
    radii = sorted(int(r) for r in radii)
    L = radii[-1]
    d = z2_derivative(L, a, b)
    x, y, r = _radius_grid(L)
    cheb = np.maximum(np.abs(x), np.abs(y))
    power = np.abs(d) ** p
    partial = [float(power[cheb <= R].sum()) for R in radii]
    xs, ys = [], []
    for lo, hi in zip(radii[:-1], radii[1:]):
        sel = (cheb > lo) & (cheb <= hi)
        if sel.sum() < 16:
            continue
        xs.append(np.log(np.sqrt(lo * hi)))
        ys.append(np.log(power[sel].sum()))
    exponent = float(np.polyfit(xs, ys, 1)[0]) if len(xs) >= 2 else float("nan")
    increments = np.diff(partial)
    return {
        "a": a, "b": b, "p": p, "radii": radii, "partial_sums": partial,
        "increments": increments.tolist(),
        "annulus_exponent": exponent,
        "expected_member": bool(p * k > 2),
        "verdict": "member" if exponent < -0.5 else "non-member",
    }


def convolution_power(n: int) -> Field:
    """nu^{*n} for the simple random walk, on the l1 window of radius n."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    side = 1 << int(np.ceil(np.log2(2 * n + 2)))
    c = np.cos(2 * np.pi * np.arange(side) / side)
    base = 0.5 * (c[:, None] + c[None, :])
    acc = np.ones_like(base)
    power = base.copy()
    k = n
    while k:
        if k & 1:
            acc = acc * power
        power = power * power
        k >>= 1
    vals = np.fft.ifft2(acc).real
    idx = (np.arange(2 * n + 1) - n) % side
    window = vals[np.ix_(idx, idx)]
    dom = Domain.window(n)
    return Field(dom, np.where(dom.mask(), window, 0.0))


def llt_error(n: int) -> float:
    """Max deviation of (nu^n + nu^(n+1))/2 from exp(-|x|^2/n) / (pi n)."""
    a = convolution_power(n + 1).values
    b = np.zeros_like(a)
    b[1:-1, 1:-1] = convolution_power(n).values
    dom = Domain.window(n + 1)
    x, y = dom.coords()
    gauss = np.exp(-(x**2 + y**2) / n) / (np.pi * n)
    return float(np.abs(0.5 * (a + b) - gauss).max())


def llt_rate_check(n_small: int = 100, n_large: int = 400) -> dict:
    """Compares the observed error ratio with the (n_small/n_large)^(3/2) rate."""
    e_small, e_large = llt_error(n_small), llt_error(n_large)
    observed = e_large / e_small
    predicted = (n_small / n_large) ** 1.5
    return {"n": [n_small, n_large], "errors": [e_small, e_large],
            "observed_ratio": observed, "predicted_ratio": predicted,
            "within_factor_2": bool(0.5 <= observed / predicted <= 2.0)}


def check_greens_identity(m: int, v: np.ndarray) -> float:
    """Max error of Laplacian(G_T * v) = v - mean(v) on the m-torus."""
    dom = Domain.torus(m)
    u = Field(dom, apply_greens_torus(np.asarray(v, dtype=float)))
    return float(np.abs(laplacian(u).values - (v - v.mean())).max())
