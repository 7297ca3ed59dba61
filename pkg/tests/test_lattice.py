import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sandlab import greens
from sandlab.lattice import (
    ClassLevel, Domain, Field, SparseIntField, apply_sparse, c3_decomposition, class_membership,
    convolve, delta, discrete_derivative, laplacian, sparse_convolve, translate, unit,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def torus_field(m):
    return arrays(np.float64, (m, m), elements=finite).map(lambda a: Field(Domain.torus(m), a))


def sparse_z2(radius=4, max_size=8, value=3):
    site = st.tuples(st.integers(-radius, radius), st.integers(-radius, radius))
    return st.dictionaries(site, st.integers(-value, value).filter(bool), max_size=max_size).map(
        lambda d: SparseIntField(Domain.window(4 * radius), d))


def quadratic_moments(v):
    return (sum(c * i * i for (i, j), c in v.entries.items()),
            sum(c * i * j for (i, j), c in v.entries.items()),
            sum(c * j * j for (i, j), c in v.entries.items()))


def brute_laplacian(values, torus):
    m0, m1 = values.shape
    out = np.zeros_like(values)
    for i in range(m0):
        for j in range(m1):
            acc = 4 * values[i, j]
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if torus:
                    acc -= values[a % m0, b % m1]
                elif 0 <= a < m0 and 0 <= b < m1:
                    acc -= values[a, b]
            out[i, j] = acc
    return out


# domains and fields

def test_domain_validation():
    with pytest.raises(ValueError):
        Domain.torus(1)
    with pytest.raises(ValueError):
        Domain.window(-1)
    with pytest.raises(IndexError):
        Domain.window(2).index(2, 1)


def test_torus_quotient_distance():
    d = Domain.torus(8)
    assert d.distance((0, 0), (7, 7)) == 2
    assert d.distance((1, 2), (5, 6)) == 8
    assert Domain.window(5).distance((0, 0), (-3, 2)) == 5


def test_window_sites_are_the_l1_ball():
    d = Domain.window(3)
    assert d.n_sites() == 2 * 3 * 4 + 1
    assert all(abs(i) + abs(j) <= 3 for i, j in d.sites())


def test_field_rejects_non_finite():
    with pytest.raises(ValueError):
        Field(Domain.torus(2), np.array([[0.0, np.nan], [0.0, 0.0]]))


def test_field_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    f = Field(Domain.window(3), rng.normal(size=(7, 7)))
    f.save(tmp_path / "f.bin")
    g = Field.load(tmp_path / "f.bin")
    assert g.domain == f.domain
    assert np.array_equal(g.values, f.values)
    assert (tmp_path / "f.bin").stat().st_size == 7 * 7 * 8


def test_sparse_field_integrality_and_json():
    d = Domain.torus(5)
    v = SparseIntField.from_pairs(d, [(0, 0, 2), (6, 1, -1), (1, 1, -1), (2, 2, 0)])
    assert v.entries == {(0, 0): 2, (1, 1): -2}
    assert v.norm1() == 4 and v.norm_inf() == 2 and v.total() == 0
    assert SparseIntField.from_json(d, v.to_json()) == v
    with pytest.raises(ValueError):
        SparseIntField(d, {(0, 0): 0.5})


# Laplacian

def test_laplacian_of_constant_vanishes_on_torus():
    f = Field(Domain.torus(6), np.full((6, 6), 2.5))
    assert np.all(laplacian(f).values == 0)


def test_laplacian_of_unit_on_torus4():
    lap = laplacian(unit(Domain.torus(4)).to_field()).values
    expected = np.zeros((4, 4))
    expected[0, 0] = 4
    for i, j in ((1, 0), (3, 0), (0, 1), (0, 3)):
        expected[i, j] = -1
    assert np.array_equal(lap, expected)


@given(arrays(np.float64, (5, 5), elements=finite), st.booleans())
def test_laplacian_matches_definition(values, torus):
    dom = Domain.torus(5) if torus else Domain.window(2)
    f = Field(dom, values)
    np.testing.assert_allclose(laplacian(f).values[dom.mask()],
                               brute_laplacian(f.values, torus)[dom.mask()], atol=1e-12)


@given(torus_field(7))
def test_laplacian_is_sum_of_squared_differences(f):
    # adjoint of the forward difference: backward difference, reversed sign
    def adjoint(g, axis):
        return np.roll(g, 1, axis=axis - 1) - g

    d1 = discrete_derivative(f, 1).values
    d2 = discrete_derivative(f, 2).values
    np.testing.assert_allclose(laplacian(f).values, adjoint(d1, 1) + adjoint(d2, 2), atol=1e-12)


@given(torus_field(8))
def test_laplacian_operator_bound(f):
    assert np.linalg.norm(laplacian(f).values) <= 8 * np.linalg.norm(f.values) + 1e-12


def test_laplacian_inverts_greens_m16(rng):
    v = rng.integers(-5, 6, size=(16, 16)).astype(float)
    v[0, 0] -= v.sum()
    u = Field(Domain.torus(16), greens.apply_greens_torus(v))
    assert np.abs(laplacian(u).values - v).max() <= 1e-10


# derivatives

def test_derivative_of_constant_and_unit():
    dom = Domain.torus(6)
    assert np.all(discrete_derivative(Field(dom, np.ones((6, 6))), 1).values == 0)
    got = SparseIntField.from_field(discrete_derivative(unit(dom).to_field(), 1))
    assert got.entries == {(5, 0): 1, (0, 0): -1}
    wdom = Domain.window(3)
    got = SparseIntField.from_field(discrete_derivative(unit(wdom).to_field(), 1))
    assert got.entries == {(-1, 0): 1, (0, 0): -1}


@given(torus_field(6), st.integers(1, 3), st.integers(1, 3))
def test_derivatives_commute(f, a, b):
    x = discrete_derivative(discrete_derivative(f, 1, a), 2, b).values
    y = discrete_derivative(discrete_derivative(f, 2, b), 1, a).values
    np.testing.assert_allclose(x, y, atol=1e-9)


@given(torus_field(6), st.sampled_from([1, 2]))
def test_derivative_is_convolution_with_delta(f, axis):
    k = delta(f.domain, axis).to_field()
    np.testing.assert_allclose(convolve(f, k).values, discrete_derivative(f, axis).values, atol=1e-12)
    np.testing.assert_allclose(apply_sparse(f, delta(f.domain, axis)).values,
                               discrete_derivative(f, axis).values, atol=1e-12)


def test_derivative_rejects_bad_arguments():
    f = Field.zeros(Domain.torus(3))
    with pytest.raises(ValueError):
        discrete_derivative(f, 3)
    with pytest.raises(ValueError):
        discrete_derivative(f, 1, 0)


# convolution

@given(torus_field(8))
def test_unit_is_convolution_identity(f):
    assert np.allclose(convolve(f, unit(f.domain).to_field()).values, f.values, atol=1e-13)


def test_fft_matches_direct_sum(rng):
    for _ in range(20):
        dom = Domain.torus(8)
        f = Field(dom, rng.normal(size=(8, 8)))
        g = Field(dom, rng.normal(size=(8, 8)))
        direct = np.zeros((8, 8))
        for i in range(8):
            for j in range(8):
                direct[i, j] = sum(f.values[(i - k) % 8, (j - l) % 8] * g.values[k, l]
                                   for k in range(8) for l in range(8))
        np.testing.assert_allclose(convolve(f, g, method="fft").values, direct, atol=1e-12)
        np.testing.assert_allclose(convolve(f, g, method="direct").values, direct, atol=1e-12)


@given(torus_field(6), torus_field(6), st.integers(-6, 6), st.integers(-6, 6))
def test_convolution_translation_equivariant(f, g, a, b):
    lhs = convolve(translate(f, a, b), g, method="direct").values
    rhs = translate(convolve(f, g, method="direct"), a, b).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@given(torus_field(5), torus_field(5), torus_field(5), finite)
def test_convolution_bilinear(f, g, h, c):
    lhs = convolve(f + g.scale(c), h).values
    rhs = convolve(f, h).values + c * convolve(g, h).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-7)


def test_convolution_domain_mismatch():
    with pytest.raises(ValueError):
        convolve(Field.zeros(Domain.torus(4)), Field.zeros(Domain.torus(5)))


def test_window_convolution_reads_zero_outside():
    dom = Domain.window(2)
    f = unit(dom, 2, 0).to_field()
    g = unit(dom, 1, 0).to_field()
    assert np.all(convolve(f, g).values == 0)
    assert convolve(unit(dom, 1, 0).to_field(), g)[(2, 0)] == 1


# classes

def test_class_examples():
    dom = Domain.window(6)
    d1, d2 = delta(dom, 1), delta(dom, 2)
    assert class_membership(unit(dom)) == ClassLevel.C0
    assert class_membership(d1) == ClassLevel.C1
    assert d1.moments() == (-1, 0)
    d12 = sparse_convolve(d1, d2, dom)
    assert class_membership(d12) == ClassLevel.C2
    # degree-2 moments vanish on C^3; here the mixed one is 1
    assert quadratic_moments(d12) == (0, 1, 0)
    assert class_membership(sparse_convolve(d12, d1, dom)) == ClassLevel.C3


def test_torus_classes_use_moments_mod_m():
    dom = Domain.torus(5)
    v = SparseIntField(dom, {(0, 0): 1, (1, 0): -1})
    assert class_membership(v) == ClassLevel.C1
    wrap = SparseIntField(dom, {(0, 0): 5, (1, 0): -5})
    assert class_membership(wrap) == ClassLevel.C2


def test_non_integer_field_is_not_c0():
    assert class_membership(Field(Domain.torus(2), np.full((2, 2), 0.5))) == ClassLevel.NOT_C0


@given(sparse_z2())
def test_laplacians_are_at_least_c2(w):
    lap = SparseIntField.from_field(laplacian(w.to_field()))
    assert class_membership(lap) >= ClassLevel.C2


@given(sparse_z2(radius=3, max_size=6))
def test_c3_decomposition_reconstructs(seed):
    dom = seed.domain
    d11 = sparse_convolve(delta(dom, 1), delta(dom, 1), dom)
    d22 = sparse_convolve(delta(dom, 2), delta(dom, 2), dom)
    v = sparse_convolve(seed, sparse_convolve(d11, delta(dom, 2), dom) + sparse_convolve(d22, delta(dom, 1), dom), dom)
    assert class_membership(v) == ClassLevel.C3
    f, g = c3_decomposition(v)
    assert class_membership(f) >= ClassLevel.C2 and class_membership(g) >= ClassLevel.C2
    k = Domain.window(1)
    back = sparse_convolve(delta(k, 1), f) + sparse_convolve(delta(k, 2), g)
    assert back.entries == v.entries


@given(sparse_z2(radius=3, max_size=8))
def test_c3_needs_vanishing_quadratic_moments(v):
    if class_membership(v) == ClassLevel.C3:
        assert quadratic_moments(v) == (0, 0, 0)
    elif class_membership(v) == ClassLevel.C2:
        assert quadratic_moments(v) != (0, 0, 0)
