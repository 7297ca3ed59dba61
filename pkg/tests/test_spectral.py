import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sandlab import greens
from sandlab import sandpile as sp
from sandlab import spectral as sc
from sandlab.lattice import Domain, Field, SparseIntField, laplacian, unit

DELTA12 = (((0, 0), 1), ((0, 1), -1), ((1, 0), -1), ((1, 1), 1))


def random_frequency(seed, m=12, points=6):
    rng = np.random.default_rng(seed)
    return sc.frequency_from_prevector(sc.random_prevector(m, rng, points=points))


def laplacian_of(w: SparseIntField) -> SparseIntField:
    return SparseIntField.from_field(laplacian(w.to_field()))


def images(entries, m):
    """All dihedral images and a few translates of a torus vector."""
    out = []
    for a, b, c, d in sc.DIHEDRAL:
        for t in ((0, 0), (3, 1), (m - 2, 5)):
            out.append({((a * i + b * j + t[0]) % m, (c * i + d * j + t[1]) % m): v
                        for (i, j), v in entries.items()})
    return out


seeds = st.integers(0, 2**32 - 1)


# frequencies and eigenvalues

def test_zero_frequency():
    xi = sc.Frequency(6, np.zeros((6, 6)))
    assert sc.mu_hat(xi) == 1
    assert sc.frequency_from_prevector(SparseIntField(Domain.torus(6))).is_zero()
    assert not sc.distinguished_prevector(xi)


@given(seeds)
def test_frequency_invariants(seed):
    xi = random_frequency(seed)
    xi.validate()
    mu = sc.mu_hat(xi)
    assert abs(mu) <= 1 + 1e-15
    assert sc.mu_hat(-xi) == pytest.approx(mu.conjugate(), abs=1e-14)


def test_random_field_eigenvalue_symmetry(rng):
    f = rng.uniform(-0.5, 0.5, size=(7, 7))
    assert abs(sc.mu_hat(f)) <= 1
    assert sc.mu_hat(-f) == pytest.approx(sc.mu_hat(f).conjugate(), abs=1e-14)


def test_frequency_validation():
    bad = np.zeros((4, 4))
    bad[1, 1] = 0.3
    with pytest.raises(ValueError):
        sc.Frequency(4, bad).validate()
    off = np.zeros((4, 4))
    off[0, 0] = 0.25
    with pytest.raises(ValueError):
        sc.Frequency(4, off).validate()


def test_laplacian_prevector_gives_zero_frequency(rng):
    dom = Domain.torus(10)
    w = SparseIntField.from_pairs(dom, [(int(i), int(j), int(c)) for i, j, c in
                                        zip(rng.integers(0, 10, 5), rng.integers(0, 10, 5), rng.integers(-3, 4, 5))])
    assert sc.frequency_from_prevector(laplacian_of(w)).is_zero()


def test_prevector_must_have_mean_zero():
    with pytest.raises(ValueError):
        sc.frequency_from_prevector(unit(Domain.torus(4)))
    with pytest.raises(ValueError):
        sc.frequency_from_prevector(SparseIntField(Domain.window(3), {(0, 0): 1, (1, 0): -1}))


@given(seeds)
def test_distinguished_prevector(seed):
    xi = random_frequency(seed)
    v = sc.distinguished_prevector(xi)
    assert v.total() == 0 and v.norm_inf() <= 3
    back = sc.frequency_from_prevector(v)
    assert np.abs(sc.wrap_unit(back.values - xi.values)).max() <= 1e-9


@given(seeds)
def test_modulus_depends_only_on_the_class(seed):
    rng = np.random.default_rng(seed)
    v = sc.random_prevector(12, rng)
    xi = sc.frequency_from_prevector(v)
    for w in (v, sc.distinguished_prevector(xi)):
        xi_bar = greens.apply_greens_torus(w.to_field().values)
        assert abs(sc.mu_hat(xi_bar)) == pytest.approx(abs(sc.mu_hat(xi)), abs=1e-10)


def test_distinguished_prevector_rejects_invalid():
    vals = np.zeros((5, 5))
    vals[2, 2] = 0.3
    with pytest.raises(ValueError):
        sc.distinguished_prevector(sc.Frequency(5, vals))


def test_prevector_bounds_report():
    rep = sc.prevector_bound_report(16, 60, np.random.default_rng(4))
    assert rep["kappa_min_savings_over_l1"] > 0
    assert rep["max_sup_norm"] <= 3
    assert rep["max_modulus_mismatch"] <= 1e-10
    assert 0 < rep["l2_ratio_min"] <= rep["l2_ratio_max"] < 10


# savings

def test_savings_of_integer_values():
    vals = np.zeros((6, 6))
    rep = sc.savings(vals, [(1, 1), (2, 3)])
    assert rep.savings == 0 and rep.sites == 2


@given(seeds, st.data())
def test_savings_bounds_and_superadditivity(seed, data):
    xi = random_frequency(seed)
    sites = [(i, j) for i in range(12) for j in range(12)]
    cut = data.draw(st.permutations(sites))
    k = data.draw(st.integers(1, len(sites) - 1))
    a, b = cut[:k], cut[k:]
    sa, sb = sc.savings(xi, a).savings, sc.savings(xi, b).savings
    su = sc.savings(xi, a + b).savings
    assert -1e-12 <= sa <= 2 * len(a)
    assert sa + sb <= su + 1e-9


@given(seeds)
def test_total_savings_is_eigenvalue_gap(seed):
    xi = random_frequency(seed)
    rep = sc.savings(xi)
    assert rep.total_savings / 144 == pytest.approx(1 - abs(sc.mu_hat(xi)), abs=1e-12)


def test_boolean_mask_savings(rng):
    xi = random_frequency(1)
    mask = rng.random((12, 12)) < 0.5
    sites = list(zip(*np.nonzero(mask)))
    assert sc.savings(xi, mask).savings == pytest.approx(sc.savings(xi, sites).savings, abs=1e-12)


def test_gap_frequency_m64():
    v = sc.product_delta12(Domain.torus(64))
    xi = sc.frequency_from_prevector(v)
    scaled = 64 * 64 * (1 - abs(sc.mu_hat(xi)))
    assert scaled == pytest.approx(2.8681, rel=0.05)


# clusters

def test_cluster_examples():
    dom = Domain.window(40)
    single = SparseIntField(dom, {(3, 3): 1})
    assert sc.r_cluster(single, 2) == [[(3, 3)]]
    far = SparseIntField(dom, {(0, 0): 1, (5, 0): -1})
    assert len(sc.r_cluster(far, 2)) == 2
    near = SparseIntField(dom, {(0, 0): 1, (4, 0): -1})
    assert len(sc.r_cluster(near, 2)) == 1
    chain = SparseIntField(dom, {(4 * k, 0): 1 for k in range(5)})
    assert len(sc.r_cluster(chain, 2)) == 1


def test_cluster_matches_transitive_closure(rng):
    dom = Domain.torus(30)
    for _ in range(30):
        pts = {(int(i), int(j)): 1 for i, j in rng.integers(0, 30, size=(8, 2))}
        v = SparseIntField(dom, pts)
        R = int(rng.integers(1, 5))
        clusters = sc.r_cluster(v, R)
        label = {p: k for k, c in enumerate(clusters) for p in c}
        # flood fill oracle
        support = v.support()
        comp = {}
        for start in support:
            if start in comp:
                continue
            comp[start] = start
            stack = [start]
            while stack:
                p = stack.pop()
                for q in support:
                    if q not in comp and dom.distance(p, q) <= 2 * R:
                        comp[q] = start
                        stack.append(q)
        for p in support:
            for q in support:
                assert (label[p] == label[q]) == (comp[p] == comp[q])


def test_reduce_removes_laplacian():
    dom = Domain.torus(16)
    v = laplacian_of(unit(dom, 5, 5))
    assert not sc.r_reduce(v, 2)


def prevector_with_removable_part(seed):
    rng = np.random.default_rng(seed)
    m = 24
    dom = Domain.torus(m)
    core = sc.random_prevector(m, rng, points=4, height=2)
    i, j = (int(x) for x in rng.integers(0, m, 2))
    return core + laplacian_of(unit(dom, i, j))


@given(seeds)
def test_reduce_properties(seed):
    v = prevector_with_removable_part(seed)
    R = 2
    red = sc.r_reduce(v, R)
    assert red.norm1() <= v.norm1()
    assert red.norm_inf() <= v.norm_inf()
    a = sc.frequency_from_prevector(v).values
    b = sc.frequency_from_prevector(red).values
    assert np.abs(sc.wrap_unit(a - b)).max() <= 1e-9
    assert sc.r_reduce(red, R) == red


def test_removable_cluster_on_z2():
    dom = Domain.window(30)
    lap = SparseIntField(dom, {(0, 0): 4, (1, 0): -1, (-1, 0): -1, (0, 1): -1, (0, -1): -1})
    assert sc.is_removable_cluster(lap)
    d12 = SparseIntField(dom, dict(DELTA12))
    assert not sc.is_removable_cluster(d12)


# canonical forms

def test_canonical_form_and_orbit():
    ent = dict(DELTA12)
    assert sc.canonical_form(ent) == DELTA12
    moved = {(i + 7, -j + 2): -v for (i, j), v in ent.items()}
    assert sc.canonical_form(moved) == DELTA12
    # delta_1 * delta_2 is fixed by a reflection up to sign: 16 images, 2 classes
    assert sc.orbit_size(ent) == 2
    assert sc.orbit_size({(0, 0): 1, (1, 0): -2, (3, 1): 1}) == 16


# gap search

@pytest.mark.parametrize("m", [2, 3])
def test_search_matches_dual_oracle(m):
    oracle = sc.dual_group_oracle(m)
    res = sc.gap_search(m)
    assert res.route == "torus-exhaustive"
    assert res.gap == pytest.approx(oracle.gap, abs=1e-12)


def test_dual_oracle_structure():
    for m in (2, 3):
        o = sc.dual_group_oracle(m)
        assert o.order == sp.group_structure(m).order
        assert o.l2_squared(0) == o.order - 1
        for f in o.frequencies:
            sc.Frequency(m, f).validate()
    with pytest.raises(ValueError):
        sc.dual_group_oracle(4)


def test_dual_oracle_eigenvalues_are_chain_eigenvalues():
    """The transition matrix on recurrent states of m = 2 has the oracle's spectrum."""
    states = sp.recurrent_states(2)
    index = {s.code(): k for k, s in enumerate(states)}
    P = np.zeros((len(states), len(states)))
    for k, s in enumerate(states):
        for x in range(4):
            P[k, index[sp.markov_step(s, None, site=(x // 2, x % 2)).code()]] += 0.25
    eig = np.sort_complex(np.round(np.linalg.eigvals(P), 10))
    oracle = np.sort_complex(np.round(sc.dual_group_oracle(2).eigenvalues, 10))
    np.testing.assert_allclose(eig, oracle, atol=1e-9)


@pytest.mark.parametrize("m", [8, 16, 32])
def test_search_finds_product_class(m):
    res = sc.gap_search(m, B=4, R=2)
    assert res.minimizer_classes == [DELTA12]
    v = sc.product_delta12(Domain.torus(m))
    assert res.scaled_gap == pytest.approx(sc.savings(sc.frequency_from_prevector(v)).total_savings, abs=1e-9)


def test_search_budget_does_not_change_minimum():
    small = sc.gap_search(16, B=4, R=2)
    large = sc.gap_search(16, B=6, R=3)
    assert large.scaled_gap == pytest.approx(small.scaled_gap, abs=1e-12)
    assert large.minimizer_classes == small.minimizer_classes


def test_minimizer_eigenvalue_is_symmetric():
    m = 16
    res = sc.gap_search(m, B=4, R=2)
    ent = dict(res.minimizers[0])
    for img in images(ent, m):
        v = SparseIntField(Domain.torus(m), img)
        assert sc.savings(sc.frequency_from_prevector(v)).total_savings == pytest.approx(res.scaled_gap, abs=1e-10)


def test_search_rejects_bad_arguments():
    with pytest.raises(ValueError):
        sc.gap_search(1)
    with pytest.raises(ValueError):
        sc.gap_search(8, vector_class="C3")
    with pytest.raises(ValueError):
        sc.gap_search(8, vector_class="C1")


def test_default_class():
    assert sc.default_vector_class(3, 4) == "C1"
    assert sc.default_vector_class(5, 4) == "C2"
    assert sc.default_vector_class(64, 4) == "C2"


# cutoff

def test_cutoff_profile_small():
    N = [0, 50, 100, 200, 400, 800]
    prof = sc.cutoff_profile(16, N, B=4, R=2)
    assert all(b <= a for a, b in zip(prof.lower, prof.lower[1:]))
    assert all(b <= a for a, b in zip(prof.upper_proxy, prof.upper_proxy[1:]))
    assert all(lo <= up for lo, up in zip(prof.lower, prof.upper_proxy))
    assert prof.lower[0] == 256
    assert prof.crossing_estimate == pytest.approx(256 * math.log(16) / (256 * prof.gap))


def test_separated_additivity_error_shrinks():
    rows = sc.separated_additivity(128, [4, 8, 16, 32])["rows"]
    errs = [r["scaled_error"] for r in rows]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_relative_spread():
    assert sc.relative_spread([1.0, 1.0]) == 0
    assert sc.relative_spread([1.0, 3.0]) == pytest.approx(0.5)
