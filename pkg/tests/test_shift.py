import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyadgrid.adapt import build_adapted_grid
from dyadgrid.cubes import Cube, build_system
from dyadgrid.model import make_model
from dyadgrid.shift import (ShiftDecomposition, ShiftRelation, _union_masks, beta_constraints,
                            build_theta, certify_relation, check_localization, class_grid_input,
                            class_pipeline, decompose, domination_check, make_axis_shift,
                            make_relation, plain_supports, psi_map, select_ell,
                            verify_decomposition)


def _system(J, k=1):
    return build_system(make_model("TorusSup", k, J), max_certify_level=min(J, 4))


# -- relations -----------------------------------------------------------------

def test_shift_by_three_on_quarters(sup1):
    tau = make_axis_shift(sup1, 3, level_range=[2])
    assert dict(tau.pairs)[Cube(2, (0,))] == Cube(2, (3,))
    assert tau.m_param == 4 and tau.M == 1


def test_zero_shift_is_identity(sup1):
    tau = make_axis_shift(sup1, 0)
    assert all(P == Q for P, Q in tau.pairs)
    assert len(tau.pairs) == 2 ** sup1.J - 1


def test_shift_five_certified_with_six(sup1):
    tau = make_axis_shift(sup1, 5)
    rep = certify_relation(sup1, tau)
    assert rep["ok"] and tau.m_param == 6
    # worst at level 4 (the first level without wraparound): the farthest
    # cell center of Q is half a finest cell short of 5 |P|
    assert rep["m_star"] == 5 - 2.0 ** (4 - sup1.J - 1)
    assert certify_relation(sup1, make_relation(tau.pairs, 4))["P1_violations"]


def test_k2_shift_along_second_axis(sup2):
    tau = make_axis_shift(sup2, 2, axis=1)
    assert certify_relation(sup2, tau)["ok"]
    assert all(P.coords[0] == Q.coords[0] for P, Q in tau.pairs)


def test_non_injective_relation_rejected(sup1):
    pairs = [(Cube(3, (0,)), Cube(3, (1,))), (Cube(3, (2,)), Cube(3, (1,)))]
    rep = certify_relation(sup1, make_relation(pairs, 3))
    assert not rep["ok"] and rep["P2_violations"][0]["detail"] == "not injective"
    split = make_relation(pairs, 3, [[0], [1]])
    assert certify_relation(sup1, split)["ok"]


def test_relation_rejects_level_change():
    with pytest.raises(ValueError):
        make_relation([(Cube(2, (0,)), Cube(3, (0,)))], 2)


def test_relation_json_round_trip(sup1):
    tau = make_axis_shift(sup1, 7, level_range=range(5))
    assert ShiftRelation.from_json(tau.to_json()) == tau


# -- constants -------------------------------------------------------------------

def test_beta_and_ell(sup1):
    b = beta_constraints(sup1, 4.0)
    assert b["constants"] == pytest.approx(0.2)
    assert b["localization"] == pytest.approx(0.5)
    assert b["theta"] == pytest.approx(0.2)
    for m, ell in [(0, 4), (1, 4), (2, 5), (8, 6), (512, 12)]:
        got, beta = select_ell(sup1, m + 1, 4.0)
        assert got == ell and (m + 2) * 0.5 ** ell <= beta < (m + 2) * 0.5 ** (ell - 1)


# -- decomposition -----------------------------------------------------------------

def _chromatic(adj):
    n = len(adj)
    for c in range(1, n + 1):
        for col in itertools.product(range(c), repeat=n):
            if all(col[i] != col[j] for i in range(n) for j in adj[i] if j > i):
                return c
    return 0


def test_identity_small_radius_matches_chromatic_number():
    system = _system(6)
    tau = make_axis_shift(system, 0)
    dec = decompose(system, tau, 0.25, 1)
    for n in range(5):
        idx = [i for i, (P, _) in enumerate(tau.pairs) if P.level == n]
        masks = _union_masks(system, [tau.pairs[i] for i in idx], 0.25).astype(float)
        hits = masks @ masks.T > 0
        adj = [[j for j in range(len(idx)) if j != i and hits[i, j]] for i in range(len(idx))]
        assert dec.level_colors[(0, n)] == _chromatic(adj)
    assert dec.M_k == [2]


def test_colour_count_depth_independent():
    per_level = {}
    for J in range(6, 13):
        system = _system(J)
        dec = decompose(system, make_axis_shift(system, 4), 4.0, 5)
        per_level[J] = [dec.level_colors[(0, n)] for n in range(J)]
        if J >= 7:
            # the busiest level is 6, which first carries Haar functions at depth 7
            assert dec.M_k == [25]
    for J in range(6, 12):
        assert per_level[J] == per_level[12][:J]


def test_translation_path_agrees_with_explicit_path():
    system = _system(7)
    tau = make_axis_shift(system, 3)
    fast = decompose(system, tau, 4.0, 5)
    generic = decompose(system, make_relation(tau.pairs, tau.m_param), 4.0, 5)
    assert fast.M_k == generic.M_k
    assert np.array_equal(fast.colors, generic.colors)


def test_decomposition_verifies_and_detects_merge():
    system = _system(8)
    dec = decompose(system, make_axis_shift(system, 2), 4.0, 5)
    assert verify_decomposition(system, dec)["ok"]
    merged = ShiftDecomposition(dec.relation, dec.C_R, dec.ell, dec.colors * 0, dec.M_k)
    conds = {v["condition"] for v in verify_decomposition(system, merged)["violations"]}
    assert conds == {"C1"}


def test_single_pair_relation(sup1):
    P, Q = Cube(4, (1,)), Cube(4, (3,))
    dec = decompose(sup1, make_relation([(P, Q)], 3), 4.0, 4)
    assert list(dec.level_classes()) == [(0, 0, 4 % 4)]
    assert psi_map([(P, Q)]) == {P: [], Q: []}
    rep = check_localization(sup1, dec)
    assert rep["ok"] and rep["checked"] == 0


def test_localization_m2_depth12(sup1_deep):
    tau = make_axis_shift(sup1_deep, 2)
    ell, _ = select_ell(sup1_deep, tau.m_param, 4.0)
    dec = decompose(sup1_deep, tau, 4.0, 4)
    rep = check_localization(sup1_deep, dec)
    assert ell == 5 and rep["ok"] and rep["c1"] == 4.0
    assert 0 < rep["c1_star"] < 4.0 and rep["checked"] > 0
    shrunk = check_localization(sup1_deep, dec, radius_factor=0.5 * rep["c1_star"] / rep["c1"])
    assert not shrunk["ok"] and shrunk["violations"]


def test_decompose_rejects_bad_ell(sup1):
    with pytest.raises(ValueError):
        decompose(sup1, make_axis_shift(sup1, 1, level_range=[2]), 4.0, 0)


# -- theta and domination -----------------------------------------------------------

def test_theta_single_pair(sup1):
    P, Q = Cube(5, (4,)), Cube(5, (6,))
    dec = decompose(sup1, make_relation([(P, Q)], 3), 4.0, 4)
    (key,) = dec.level_classes()
    inp = class_grid_input(dec, key)
    grid = build_adapted_grid(sup1, inp)
    th = build_theta(sup1, [(P, Q)], grid)
    assert th.theta[P] == grid.sigma[P] | grid.sigma[Q] == th.theta[Q]
    assert th.verify(sup1)["ok"]


def test_theta_far_pairs_disjoint(sup1):
    pairs = [(Cube(6, (0,)), Cube(6, (1,))), (Cube(6, (30,)), Cube(6, (31,)))]
    dec = decompose(sup1, make_relation(pairs, 2), 4.0, 4)
    assert dec.M_k == [1]
    (key,) = dec.level_classes()
    grid = build_adapted_grid(sup1, class_grid_input(dec, key))
    th = build_theta(sup1, pairs, grid)
    assert not th.theta[pairs[0][0]].intersects(th.theta[pairs[1][0]])


def test_theta_rejects_foreign_grid(sup1):
    P, Q = Cube(5, (4,)), Cube(5, (6,))
    dec = decompose(sup1, make_relation([(P, Q)], 3), 4.0, 4)
    (key,) = dec.level_classes()
    grid = build_adapted_grid(sup1, class_grid_input(dec, key))
    with pytest.raises(ValueError, match="grid/class mismatch"):
        build_theta(sup1, [(P, Cube(5, (7,)))], grid)


def test_identity_shift_dominated(sup1, haar1):
    tau = make_axis_shift(sup1, 0, level_range=range(2, 8))
    dec = decompose(sup1, tau, 4.0, 4)
    key = sorted(dec.level_classes())[0]
    rep = class_pipeline(sup1, dec, key, haar1)
    assert rep["ok"]
    assert rep["domination"]["c5_star"] <= rep["domination"]["c5"]


@pytest.mark.parametrize("m", [1, 2, 8])
def test_class_pipeline_depth10(sup1, haar1, m):
    tau = make_axis_shift(sup1, m)
    ell, _ = select_ell(sup1, tau.m_param, 4.0)
    dec = decompose(sup1, tau, 4.0, ell)
    keys = sorted(dec.level_classes())
    for key in keys[:: max(1, len(keys) // 6)]:
        rep = class_pipeline(sup1, dec, key, haar1, debug=True)
        assert rep["ok"], (key, rep["domination"], rep["theta"]["violations"][:2])
        assert rep["domination"]["c5_star"] <= 4 * rep["domination"]["C_h"]


def test_plain_supports_fail_domination(sup1, haar1):
    tau = make_axis_shift(sup1, 2)
    dec = decompose(sup1, tau, 4.0, 5)
    key = max(dec.level_classes(), key=lambda k: len(dec.level_classes()[k]))
    pairs = dec.class_pairs(key)
    rep = domination_check(sup1, pairs, plain_supports(sup1, pairs), haar1, c4=1.0, require_atoms=False)
    assert not rep["ok"] and math.isinf(rep["c5_star"]) and rep["witness"] is not None


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**16))
def test_random_explicit_class_pipeline(m, seed):
    """Random sparse pair lists coloured on the generic path still pass every check."""
    system = _SYS
    rng = np.random.default_rng(seed)
    n_levels = sorted(rng.choice(np.arange(1, system.J), size=3, replace=False).tolist())
    pairs = []
    for n in n_levels:
        width = 1 << n
        for i in rng.choice(width, size=min(width, 4), replace=False).tolist():
            pairs.append((Cube(n, (i,)), Cube(n, ((i + m) % width,))))
    tau = make_relation(pairs, m + 1)
    ell, _ = select_ell(system, tau.m_param, 4.0)
    dec = decompose(system, tau, 4.0, ell)
    assert verify_decomposition(system, dec)["ok"]
    for key in sorted(dec.level_classes()):
        rep = class_pipeline(system, dec, key, _HAAR)
        assert rep["ok"]


from dyadgrid.haar import make_haar  # noqa: E402

_SYS = _system(9)
_HAAR = make_haar(_SYS)
