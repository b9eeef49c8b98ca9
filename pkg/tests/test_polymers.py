import itertools

import numpy as np
import pytest

from latticerg.lattice import make_torus
from latticerg import polymers as pol
from latticerg.polymers import (
    EnumerationBudgetError,
    Polymer,
    PolymerError,
    bits_of,
    block_lattice,
    classify_small,
    closure,
    components_and_closure,
    connected_components,
    empty_polymer,
    enumerate_preimage,
    hat_cube,
    neighbourhoods,
    pi_chi,
    pi_map,
    pi_tilde,
    single_block,
    whole_torus,
)

T1 = make_torus(L=3, N=1, d=2)
T2 = make_torus(L=3, N=2, d=2)
T3 = make_torus(L=3, N=3, d=2)


def test_block_lattice_geometry():
    lat0 = block_lattice(T2, 0)
    lat1 = block_lattice(T2, 1)
    assert lat0.nblocks == 81 and lat1.nblocks == 9
    # every block holds L^(kd) sites and they partition the torus
    sites = np.concatenate([lat1.sites_of_block(b) for b in range(9)])
    assert len(sites) == 81 and len(np.unique(sites)) == 81
    assert all(len(lat1.sites_of_block(b)) == 9 for b in range(9))


def test_components_and_closure_single_block():
    lat0 = block_lattice(T2, 0)
    X = single_block(lat0, int(lat0.index_of(np.array([0, 0]))))
    comps, clo = components_and_closure(X)
    assert len(comps) == 1 and comps[0].bits == X.bits
    lat1 = block_lattice(T2, 1)
    assert clo.bits == single_block(lat1, int(lat1.index_of(np.array([0, 0])))).bits


def test_components_empty():
    lat0 = block_lattice(T2, 0)
    comps, clo = components_and_closure(empty_polymer(lat0))
    assert comps == [] and clo.is_empty()


def test_closure_rejects_top_scale():
    latN = block_lattice(T1, 1)
    with pytest.raises(PolymerError):
        closure(whole_torus(latN))


def test_diagonal_blocks_are_one_component():
    # inf-norm adjacency joins diagonal neighbours
    lat0 = block_lattice(T1, 0)
    a = int(lat0.index_of(np.array([0, 0])))
    b = int(lat0.index_of(np.array([1, 1])))
    X = Polymer(lat0, (1 << a) | (1 << b))
    assert len(connected_components(X)) == 1


def test_classify_small_threshold():
    for d in (2, 3):
        t = make_torus(L=3, N=2, d=d)
        lat = block_lattice(t, 0)
        # a straight connected chain of n blocks
        for n, want in [(2 ** d, "small"), (2 ** d + 1, "large")]:
            idxs = [int(lat.index_of(np.asarray([i] + [0] * (d - 1)))) for i in range(n)]
            assert classify_small(Polymer(lat, bits_of(idxs))) == want


def test_classify_rejects_disconnected():
    lat = block_lattice(T2, 0)
    a = int(lat.index_of(np.array([0, 0])))
    b = int(lat.index_of(np.array([3, 0])))
    with pytest.raises(PolymerError):
        classify_small(Polymer(lat, (1 << a) | (1 << b)))


def test_hat_cube_side():
    # side (2^{d+1}+1) L^k = 9 blocks across at d=2: 81 blocks on a large torus
    lat0 = block_lattice(T3, 0)
    B = int(lat0.index_of(np.array([0, 0])))
    assert hat_cube(lat0, B).size == 81


def test_neighbourhood_saturation_whole_torus():
    lat1 = block_lattice(T2, 1)
    X = whole_torus(lat1)
    star, plus, hats = neighbourhoods(X)
    assert plus.bits == X.bits
    assert star.size == block_lattice(T2, 0).nblocks


def test_plus_neighbourhood_single_block():
    lat1 = block_lattice(T2, 1)
    X = single_block(lat1, int(lat1.index_of(np.array([0, 0]))))
    plus = pol.plus_neighbourhood(X)
    want = {int(lat1.index_of(np.array([i, j]))) for i in (-1, 0, 1) for j in (-1, 0, 1)}
    assert set(plus.block_indices()) == want


def test_containment_invariants():
    rng = np.random.default_rng(7)
    lat0 = block_lattice(T2, 0)
    for _ in range(20):
        bits = 0
        for b in rng.choice(81, size=rng.integers(1, 6), replace=False):
            bits |= 1 << int(b)
        X = Polymer(lat0, bits)
        xs = set(X.sites())
        assert xs <= set(closure(X).sites())
        assert xs <= set(pol.plus_neighbourhood(X).sites())
        assert xs <= set(pol.star_neighbourhood(X).sites())
        # locality of the assignment: each block of pi(X) meets X^+
        plus_sites = set(pol.plus_neighbourhood(X).sites())
        pl = block_lattice(T2, 1)
        for pb in pi_map(X).block_indices():
            assert set(pl.sites_of_block(pb)) & plus_sites


def test_pi_empty():
    lat0 = block_lattice(T2, 0)
    lat1 = block_lattice(T2, 1)
    p, chi = pi_chi(empty_polymer(lat0), empty_polymer(lat1))
    assert p.is_empty() and chi == 1


def test_pi_large_is_closure():
    lat0 = block_lattice(T2, 0)
    idxs = [int(lat0.index_of(np.array([i, 0]))) for i in range(-2, 3)]  # 5 > 2^d
    X = Polymer(lat0, bits_of(idxs))
    assert pi_map(X).bits == closure(X).bits


def test_pi_small_straddling_uses_lex_smallest_site():
    # pair of sites (1,0),(2,0) straddles the 1-blocks based at 0 and 3;
    # the lex-smallest site (1,0) lies in the block centered at the origin
    lat0 = block_lattice(T2, 0)
    lat1 = block_lattice(T2, 1)
    a = int(lat0.index_of(np.array([1, 0])))
    b = int(lat0.index_of(np.array([2, 0])))
    X = Polymer(lat0, (1 << a) | (1 << b))
    assert pi_map(X).bits == single_block(lat1, int(lat1.index_of(np.array([0, 0])))).bits


def test_pi_translation_covariance_including_seam():
    # the lifted lex rule commutes with block-lattice translations even when
    # the component straddles the canonical coordinate cut
    lat0 = block_lattice(T2, 0)
    lat1 = block_lattice(T2, 1)
    a = int(lat0.index_of(np.array([1, 0])))
    b = int(lat0.index_of(np.array([2, 0])))
    X = Polymer(lat0, (1 << a) | (1 << b))
    for shift in itertools.product((-3, 0, 3), repeat=2):
        Xs = X.translate(np.array(shift))
        ps = pi_map(Xs)
        expect = pi_map(X).translate(np.array(shift) // 3)
        assert ps.bits == expect.bits


def test_enumerate_preimage_empty_and_cutoff_zero():
    lat1 = block_lattice(T2, 1)
    U = empty_polymer(block_lattice(T2, 1))
    out = enumerate_preimage(U, 5)
    assert len(out) == 1 and out[0].is_empty()
    U1 = single_block(lat1, 0)
    assert enumerate_preimage(U1, 0) == []


def test_enumerate_preimage_exhaustive_N1():
    # N=1: the only 1-block is the whole torus, so every nonempty X maps to it;
    # verified against a brute-force scan over all 2^9 subsets
    lat1 = block_lattice(T1, 1)
    U = whole_torus(lat1)
    out = enumerate_preimage(U, 9)
    lat0 = block_lattice(T1, 0)
    brute = [bits for bits in range(1, 512)
             if pi_map(Polymer(lat0, bits)).bits == U.bits]
    assert sorted(p.bits for p in out) == sorted(brute)
    assert len(out) == 511


def test_enumerate_constructive_matches_scan_on_small_torus():
    # force the constructive path on the 9-block lattice and compare to the scan
    lat1 = block_lattice(T1, 1)
    U = whole_torus(lat1)
    lat0 = block_lattice(T1, 0)
    for cutoff in (1, 2, 3, 5, 9):
        scan = pol._preimage_by_scan(U, cutoff, lat0)
        cons = pol._preimage_constructive(U, cutoff, lat0, budget=10 ** 7)
        assert [p.bits for p in scan] == [p.bits for p in cons]


def test_enumerate_preimage_constructive_vs_restricted_brute_N2():
    # N=2 scale 0 -> 1: independent oracle = direct pi filter over all site
    # subsets of size <= 2 drawn from a sufficient pool around U
    lat0 = block_lattice(T2, 0)
    lat1 = block_lattice(T2, 1)
    U = single_block(lat1, int(lat1.index_of(np.array([0, 0]))))
    out = enumerate_preimage(U, 2)
    # sufficient pool: sites within inf-distance 3 of U (component reach <= 2^d - 1)
    coords = T2.coords_array()
    u_sites = U.sites()
    pool = []
    for s in range(T2.nsites):
        delta = coords[u_sites] - coords[s]
        delta = (delta + T2.side // 2) % T2.side - T2.side // 2
        if np.abs(delta).max(axis=1).min() <= 3:
            pool.append(s)
    brute = set()
    for r in (1, 2):
        for combo in itertools.combinations(pool, r):
            X = Polymer(lat0, bits_of(combo))
            if pi_map(X).bits == U.bits:
                brute.add(X.bits)
    assert set(p.bits for p in out) == brute


def test_enumerate_preimage_translation_covariance():
    lat1 = block_lattice(T2, 1)
    U = single_block(lat1, int(lat1.index_of(np.array([0, 0]))))
    Ut = U.translate(np.array([1, -1]))
    out = enumerate_preimage(U, 3)
    out_t = enumerate_preimage(Ut, 3)
    lat0 = block_lattice(T2, 0)
    perm = lat0.shift_perm(np.array([3, -3]))
    mapped = sorted(bits_of(perm[b] for b in p.block_indices()) for p in out)
    assert mapped == sorted(p.bits for p in out_t)


def test_enumerate_preimage_budget_error():
    lat1 = block_lattice(T2, 1)
    U = single_block(lat1, 0)
    pol._preimage_shape_cache.clear()
    with pytest.raises(EnumerationBudgetError):
        enumerate_preimage(U, 4, budget=50)
    pol._preimage_shape_cache.clear()


def test_every_preimage_member_has_chi_one():
    lat1 = block_lattice(T2, 1)
    U = single_block(lat1, int(lat1.index_of(np.array([3, 3]))))
    out = enumerate_preimage(U, 3)
    assert out, "preimage should not be empty"
    for X in out:
        _, chi = pi_chi(X, U)
        assert chi == 1


def test_debug_format():
    lat1 = block_lattice(T2, 1)
    X = single_block(lat1, int(lat1.index_of(np.array([1, -1]))))
    assert X.debug_format() == "[[3, -3]]"
