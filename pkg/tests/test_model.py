import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyadgrid.model import (ball_measure_counts, doubling_by_cells, doubling_report, make_model,
                            pairwise_distance, quasidistance, quasitriangle_violations)


@pytest.mark.parametrize("kind,k,J,K_X,q,C_d", [
    ("TorusSup", 1, 10, 1.0, 0.5, 2.0),
    ("TorusSup", 2, 5, 1.0, 0.5, 4.0),
    ("TorusSquared", 1, 10, 2.0, 0.25, 2.0),
])
def test_declared_constants(kind, k, J, K_X, q, C_d):
    m = make_model(kind, k, J)
    assert (m.K_X, m.q, m.C_d) == (K_X, q, C_d)
    assert m.n_cells == 2 ** (J * k)
    assert m.cell_measure * m.n_cells == 1


@pytest.mark.parametrize("kind,k,J", [("TorusSup", 1, 10), ("TorusSup", 2, 5), ("TorusSquared", 1, 10)])
def test_doubling_holds_at_every_radius(kind, k, J):
    m = make_model(kind, k, J)
    rep = doubling_report(m)
    assert rep["violations"] == 0
    assert rep["max_ratio"] <= m.C_d


def test_doubling_counts_match_direct_counting():
    m = make_model("TorusSup", 2, 4)
    radii = [2.0 ** -j for j in range(4, 0, -1)]
    fast = ball_measure_counts(m, radii)
    centers = m.cell_centers()[[0, 5, 77, 255]]
    direct = doubling_by_cells(m, centers, radii)
    assert np.all(direct == fast[None, :])


def test_doubling_direct_on_squared_model():
    m = make_model("TorusSquared", 1, 6)
    radii = [4.0 ** -j for j in range(6, 0, -1)]
    centers = m.cell_centers()
    small = doubling_by_cells(m, centers, radii)
    big = doubling_by_cells(m, centers, [2 * r for r in radii])
    assert np.all(big <= m.C_d * small)


def test_quasidistance_examples():
    sup = make_model("TorusSup", 1, 10)
    sq = make_model("TorusSquared", 1, 10)
    assert quasidistance(sup, 0.1, 0.9) == pytest.approx(0.2, abs=1e-15)
    assert quasidistance(sup, 0.3, 0.3) == 0.0
    assert quasidistance(sq, 0.1, 0.9) == pytest.approx(0.04, abs=1e-15)


def test_quasidistance_rejects_bad_points():
    m = make_model("TorusSup", 2, 3)
    with pytest.raises(ValueError):
        quasidistance(m, [0.1], [0.2, 0.3])
    with pytest.raises(ValueError):
        quasidistance(m, [1.0, 0.2], [0.2, 0.3])


@pytest.mark.parametrize("kind,k,J", [("TorusSup", 1, 8), ("TorusSup", 2, 4), ("TorusSquared", 1, 8)])
def test_quasitriangle_exhaustive(kind, k, J):
    rep = quasitriangle_violations(make_model(kind, k, J))
    assert rep["mode"] == "exhaustive"
    assert rep["violations"] == 0 and rep["symmetric"] and rep["identity"]


def test_quasitriangle_random_deep():
    rep = quasitriangle_violations(make_model("TorusSquared", 1, 12), n_random=100_000, seed=3)
    assert rep["mode"] == "random" and rep["triples"] == 100_000
    assert rep["violations"] == 0


def test_squared_model_needs_constant_two():
    # (a + b)^2 <= 2 (a^2 + b^2) is tight at a = b, so K_X = 1 must fail
    m = make_model("TorusSquared", 1, 6)
    x, z, y = np.array([[0.0]]), np.array([[0.25]]), np.array([[0.5]])
    lhs = pairwise_distance(m, x, y)
    rhs = pairwise_distance(m, x, z) + pairwise_distance(m, z, y)
    assert lhs > rhs and lhs <= 2 * rhs


@pytest.mark.parametrize("args", [("TorusSup", 1, 0), ("TorusSup", 0, 4), ("TorusSquared", 2, 4),
                                  ("Sphere", 1, 4), ("TorusSup", 1, 40)])
def test_make_model_rejects(args):
    with pytest.raises(ValueError):
        make_model(*args)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1, exclude_max=True), st.floats(0, 1, exclude_max=True),
       st.floats(0, 1, exclude_max=True))
def test_squared_quasitriangle_property(x, y, z):
    m = make_model("TorusSquared", 1, 4)
    d = lambda a, b: quasidistance(m, [a], [b])
    assert d(x, y) <= m.K_X * (d(x, z) + d(z, y)) + 1e-15
    assert d(x, y) == d(y, x)
