import dataclasses
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyadgrid.cubes import (Cube, build_system, cube_inside_diamond, diamond_intersection_bound,
                            lemma_diamond_ball, max_center_distance, random_cube, verify_system)
from dyadgrid.model import make_model


# -- cubes and regions -------------------------------------------------------

def test_cube_family_relations():
    A = Cube(3, (5, 2))
    kids = A.children()
    assert len(kids) == 4 and all(c.parent() == A for c in kids)
    assert all(A.contains(c) for c in kids) and not kids[0].contains(A)
    assert Cube(5, (23, 9)).ancestor(3) == A
    assert A.measure() == Fraction(1, 64)
    assert Cube.from_json(A.to_json()) == A
    with pytest.raises(ValueError):
        A.ancestor(4)


def test_regions_are_read_only_sets(sup1):
    A = sup1.cells(Cube(2, (1,)))
    B = sup1.cells(Cube(1, (0,)))
    with pytest.raises(ValueError):
        A.mask[0] = True
    assert A <= B and not B <= A
    assert (A | B) == B and (A & B) == A
    assert (B - A).measure == Fraction(1, 4)
    assert hash(A) == hash(sup1.cells(Cube(2, (1,))))
    assert A.measure == Fraction(1, 4)


def test_levels_partition_torus(sup2):
    for n in range(sup2.J + 1):
        total = np.zeros(sup2.model.n_cells, dtype=int)
        for c in sup2.cubes(n):
            total += sup2.cells(c).mask
        assert np.all(total == 1)


# -- certified constants ------------------------------------------------------

def test_torus_sup_k1_constants():
    s = build_system(make_model("TorusSup", 1, 6))
    assert (s.C_1, s.C_2, s.N) == (0.5, 1.0, 2)
    assert s.C_3 == 2.0 and s.eta == 1.0
    assert verify_system(s)["ok"]


def test_torus_sup_k2_constants():
    s = build_system(make_model("TorusSup", 2, 4))
    assert s.N == 4
    assert s.C_3 == 4.0  # 2k
    assert verify_system(s)["ok"]


def test_torus_squared_constants():
    s = build_system(make_model("TorusSquared", 1, 6))
    # half-width squared over q^n is exactly 1/4
    assert (s.C_1, s.C_2, s.eta, s.N) == (0.25, 0.5, 0.5, 2)
    assert verify_system(s)["ok"]


def test_inflated_ball_constant_breaks_sandwich(sup2):
    bad = dataclasses.replace(sup2, C_1=sup2.C_1 * 4)
    rep = verify_system(bad, max_level=3)
    assert not rep["ok"] and rep["4_ball_sandwich"] > 0


def test_shrunk_boundary_constant_breaks_layer_bound():
    s = build_system(make_model("TorusSup", 1, 6))
    rep = verify_system(dataclasses.replace(s, C_3=1.0))
    assert rep["5_boundary_layer"] > 0


def test_ball_sandwich_constants_are_sharp():
    s = build_system(make_model("TorusSup", 1, 6))
    assert s.certificate["ball"]["C_1"] == 0.5
    # largest inside ratio is the cube's half-width, just under C_2
    assert s.certificate["ball"]["max_inside_ratio"] < s.C_2


# -- diamonds and boundary layers ---------------------------------------------

def test_diamond_of_first_eighth(sup1):
    D = sup1.diamond(Cube(3, (0,)), 1.0)
    assert D.measure == Fraction(3, 8)
    x = (D.cells() + 0.5) / sup1.model.side
    assert np.all((x > 7 / 8) | (x < 1 / 4))


def test_tiny_diamond_contains_cube(sup1):
    rng = np.random.default_rng(0)
    for _ in range(50):
        A = random_cube(sup1, rng)
        D = sup1.diamond(A, 2.0 ** -sup1.J)
        assert sup1.cells(A) <= D and D.measure >= A.measure()


def test_diamond_radius_must_be_positive(sup1):
    with pytest.raises(ValueError):
        sup1.diamond(Cube(1, (0,)), 0.0)


def test_boundary_layer_half_interval(sup1):
    L = sup1.boundary_layer(Cube(1, (0,)), 0.25)
    assert L.measure == Fraction(1, 4)
    assert L.measure <= Fraction(int(sup1.C_3)) * Fraction(1, 4) * Fraction(1, 2)


def test_boundary_layer_full_width_is_cube(sup1, sup2):
    for s in (sup1, sup2):
        A = Cube(2, (1,) * s.k)
        assert s.boundary_layer(A, 1.0) == s.cells(A)


def test_boundary_layer_k2_bound(sup2):
    rng = np.random.default_rng(5)
    for _ in range(40):
        A = random_cube(sup2, rng, max_level=2)
        L = sup2.boundary_layer(A, 1 / 8)
        assert L.measure <= A.measure() / 2 + sup2.model.cell_measure


# -- lemmas --------------------------------------------------------------------

@pytest.mark.parametrize("fixture", ["sup1", "sq1", "sup2"])
def test_diamond_inside_ball(fixture, request):
    s = request.getfixturevalue(fixture)
    rng = np.random.default_rng(11)
    for _ in range(100):
        A = random_cube(s, rng)
        assert lemma_diamond_ball(s, A, float(rng.uniform(0.05, 8.0)))


def test_intersection_trivial_cases(sup1):
    far = diamond_intersection_bound(sup1, Cube(6, (0,)), Cube(6, (32,)), 0.5, 0.5)
    assert not far["intersects"] and far["inclusion_verified"]
    A = Cube(4, (3,))
    same = diamond_intersection_bound(sup1, A, A, 1.0, 1.0)
    assert same["intersects"] and same["inclusion_verified"]


def test_intersection_swaps_to_coarser_first(sup1):
    rep = diamond_intersection_bound(sup1, Cube(6, (5,)), Cube(2, (0,)), 1.0, 2.0)
    assert rep["swapped"] and rep["intersects"] and rep["inclusion_verified"]


@pytest.mark.parametrize("kind", ["TorusSup", "TorusSquared"])
def test_intersection_bound_random(kind):
    s = build_system(make_model(kind, 1, 8))
    rng = np.random.default_rng(2)
    hits = 0
    for _ in range(500):
        A1, A2 = random_cube(s, rng), random_cube(s, rng)
        rep = diamond_intersection_bound(s, A1, A2, float(rng.uniform(0.1, 6)), float(rng.uniform(0.1, 6)))
        hits += rep["intersects"]
        assert rep["inclusion_verified"]
    assert hits > 50


# -- exact box-to-point distances ---------------------------------------------

def _brute_max_distance(system, A, B):
    return float(system.distance_to_cube(A)[system.cells(B).mask].max())


@settings(max_examples=150, deadline=None)
@given(st.data())
def test_max_center_distance_matches_cells(data):
    kind, k, J = data.draw(st.sampled_from([("TorusSup", 1, 7), ("TorusSup", 2, 4), ("TorusSquared", 1, 7)]))
    s = _SYSTEMS[(kind, k, J)]
    la = data.draw(st.integers(0, J))
    lb = data.draw(st.integers(0, J))
    A = Cube(la, tuple(data.draw(st.integers(0, (1 << la) - 1)) for _ in range(k)))
    B = Cube(lb, tuple(data.draw(st.integers(0, (1 << lb) - 1)) for _ in range(k)))
    fast = max_center_distance(s, la, [A.coords], lb, [B.coords])[0]
    assert fast == pytest.approx(_brute_max_distance(s, A, B), abs=1e-15)
    r = data.draw(st.floats(0.1, 8.0))
    assert cube_inside_diamond(s, A, B, r) == (s.cells(B) <= s.diamond(A, r))


_SYSTEMS = {key: build_system(make_model(*key), max_certify_level=2)
            for key in [("TorusSup", 1, 7), ("TorusSup", 2, 4), ("TorusSquared", 1, 7)]}


def test_max_center_distance_vectorized(sup1):
    rng = np.random.default_rng(9)
    a = rng.integers(0, 8, size=(30, 1))
    b = rng.integers(0, 32, size=(30, 1))
    got = max_center_distance(sup1, 3, a, 5, b)
    want = [_brute_max_distance(sup1, Cube(3, tuple(x)), Cube(5, tuple(y))) for x, y in zip(a, b)]
    assert np.allclose(got, want, rtol=0, atol=1e-15)
