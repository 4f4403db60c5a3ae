"""Shift relations, their decomposition into separated classes, and pair supports.

A shift relation is a finite set of same-level cube pairs (P, Q). The
decomposition colours pairs so that the C_R diamonds of different pairs in
one class never meet, splits colours by level residue mod ell, and records
for each class cube A the pairs sitting strictly below A (psi). The theta
construction turns an adapted grid of a class into nested supports carrying
both P and Q, which is what the pointwise domination estimate needs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .adapt import AdaptedGrid, AdaptInput, build_adapted_grid, nestedness_violations
from .cubes import Cube, DyadicSystem, Region, max_center_distance
from .haar import HaarSystem, atom_labels

Pair = tuple[Cube, Cube]


@dataclass(frozen=True)
class ShiftRelation:
    pairs: tuple
    m_param: float
    partition: tuple  # tuple of tuples of pair indices, one per bijective part
    translation: tuple | None = None  # (axis, m) for axis shifts

    @property
    def M(self) -> int:
        return len(self.partition)

    def levels(self) -> list[int]:
        return sorted({P.level for P, _ in self.pairs})

    def part(self, k: int) -> list[Pair]:
        return [self.pairs[i] for i in self.partition[k]]

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "m_param": self.m_param,
            "translation": list(self.translation) if self.translation else None,
            "pairs": [[P.to_json(), Q.to_json()] for P, Q in self.pairs],
            "partition": [list(p) for p in self.partition],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ShiftRelation":
        doc = json.loads(text)
        pairs = tuple((Cube.from_json(p), Cube.from_json(q)) for p, q in doc["pairs"])
        tr = tuple(doc["translation"]) if doc.get("translation") else None
        return cls(pairs, float(doc["m_param"]), tuple(tuple(p) for p in doc["partition"]), tr)


def make_relation(pairs: Sequence[Pair], m_param: float,
                  partition: Sequence[Sequence[int]] | None = None) -> ShiftRelation:
    """A general relation from explicit pairs (single part unless given)."""
    pairs = tuple((Cube(P.level, tuple(P.coords)), Cube(Q.level, tuple(Q.coords))) for P, Q in pairs)
    for P, Q in pairs:
        if P.level != Q.level:
            raise ValueError(f"pair {P}, {Q} changes level")
    if partition is None:
        partition = [range(len(pairs))]
    return ShiftRelation(pairs, float(m_param), tuple(tuple(int(i) for i in p) for p in partition))


def make_axis_shift(system: DyadicSystem, m: int, axis: int = 0,
                    level_range: Iterable[int] | None = None) -> ShiftRelation:
    """P -> P translated by m cubes of its own level along `axis`, wrapping around."""
    if not 0 <= axis < system.k:
        raise ValueError(f"axis {axis} out of range for k={system.k}")
    if m < 0:
        raise ValueError("m must be nonnegative")
    levels = range(system.J) if level_range is None else level_range
    pairs = []
    for n in levels:
        if not 0 <= n <= system.J:
            raise ValueError(f"level {n} outside 0..{system.J}")
        width = 1 << n
        for P in system.cubes(n):
            c = list(P.coords)
            c[axis] = (c[axis] + m) % width
            pairs.append((P, Cube(n, tuple(c))))
    return ShiftRelation(tuple(pairs), float(m + 1), (tuple(range(len(pairs))),), (axis, int(m)))


def certify_relation(system: DyadicSystem, tau: ShiftRelation) -> dict:
    """(P1) as exact cell inclusion Q in m<>P, and (P2) bijectivity of every part."""
    p1_bad = []
    by_level: dict[int, list[int]] = {}
    for i, (P, _) in enumerate(tau.pairs):
        by_level.setdefault(P.level, []).append(i)
    worst = 0.0
    for n, idx in sorted(by_level.items()):
        a = np.array([tau.pairs[i][0].coords for i in idx])
        b = np.array([tau.pairs[i][1].coords for i in idx])
        d = max_center_distance(system, n, a, n, b) / system.q**n
        worst = max(worst, float(d.max()))
        for i in np.flatnonzero(d >= tau.m_param):
            p1_bad.append(idx[int(i)])
    p2_bad = []
    seen = sorted(i for part in tau.partition for i in part)
    if seen != list(range(len(tau.pairs))):
        p2_bad.append({"detail": "parts do not partition the pairs"})
    for k, part in enumerate(tau.partition):
        firsts = [tau.pairs[i][0] for i in part]
        seconds = [tau.pairs[i][1] for i in part]
        if len(set(firsts)) != len(firsts):
            p2_bad.append({"part": k, "detail": "not a function"})
        if len(set(seconds)) != len(seconds):
            p2_bad.append({"part": k, "detail": "not injective"})
    return {"ok": not p1_bad and not p2_bad, "P1_violations": p1_bad, "P2_violations": p2_bad,
            "m_star": worst, "pairs": len(tau.pairs)}


# ----------------------------------------------------------------------------
# constants: beta and ell


def lemma_c1(system: DyadicSystem) -> float:
    K = system.model.K_X
    return 2 * K**3 * (system.C_2 + 1)


def theta_c3(system: DyadicSystem, C_R: float) -> float:
    return 2 * system.model.K_X * C_R


def beta_constraints(system: DyadicSystem, C_R: float) -> dict:
    """Three upper bounds on beta = (1 + m) q^ell that drive the class argument.

    constants: the adapted-grid constant condition with mu = ell;
    localization: Lemma-type bound c_1 (1+m) q^ell <= C_R / 2K for phi(A)*;
    theta: finer supports touching sigma(P) u sigma(Q) stay inside
    c_3<>P u c_3<>Q with c_3 = 2 K C_R.
    """
    K, C2 = system.model.K_X, system.C_2
    c1 = lemma_c1(system)
    c3 = theta_c3(system, C_R)
    b = {
        "constants": 1.0 / (4 * K**3 * (1 + C2 / C_R)),
        "localization": C_R / (2 * K * c1),
        "theta": C_R / (K**3 * (2 * (C2 + c3) + C2 + 1)),
    }
    b["beta"] = min(b.values())
    return b


def select_ell(system: DyadicSystem, m_param: float, C_R: float) -> tuple[int, float]:
    beta = beta_constraints(system, C_R)["beta"]
    ell = 1
    while (1 + m_param) * system.q**ell > beta:
        ell += 1
    return ell, beta


# ----------------------------------------------------------------------------
# decomposition


@dataclass
class ShiftDecomposition:
    relation: ShiftRelation
    C_R: float
    ell: int
    colors: np.ndarray  # (n_pairs, 2): part k, colour j
    M_k: list[int]
    level_colors: dict = field(default_factory=dict)  # (k, level) -> colours used

    def color_classes(self) -> dict:
        out: dict[tuple[int, int], list[int]] = {}
        for i, (k, j) in enumerate(self.colors.tolist()):
            out.setdefault((k, j), []).append(i)
        return out

    def level_classes(self) -> dict:
        out: dict[tuple[int, int, int], list[int]] = {}
        for i, (k, j) in enumerate(self.colors.tolist()):
            lvl = self.relation.pairs[i][0].level
            out.setdefault((k, j, lvl % self.ell), []).append(i)
        return out

    def class_pairs(self, key: tuple[int, int, int]) -> list[Pair]:
        return [self.relation.pairs[i] for i in self.level_classes().get(key, [])]

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "C_R": self.C_R,
            "ell": self.ell,
            "M_k": self.M_k,
            "color_classes": [[k, j, idx] for (k, j), idx in sorted(self.color_classes().items())],
            "level_classes": [[k, j, i, idx] for (k, j, i), idx in sorted(self.level_classes().items())],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def psi_map(pairs: Sequence[Pair]) -> dict:
    """A -> pairs of the class with P or Q strictly inside A, for A in both projections."""
    members = {P for P, _ in pairs} | {Q for _, Q in pairs}
    levels = sorted({A.level for A in members})
    out: dict[Cube, list[Pair]] = {A: [] for A in members}
    for P, Q in pairs:
        for L in levels:
            if L >= P.level:
                break
            hit = {P.ancestor(L), Q.ancestor(L)} & members
            for A in sorted(hit):
                out[A].append((P, Q))
    return out


def _self_conflict_offsets(system: DyadicSystem, n: int, C_R: float) -> set[tuple]:
    """Offsets d (in level-n cubes) with C_R<>X0 meeting C_R<>(X0 + d), X0 the origin cube."""
    k = system.k
    width = 1 << n
    cells_per = 1 << (system.J - n)
    shape = (system.model.side,) * k
    D0 = system.diamond(Cube(n, (0,) * k), C_R).mask.reshape(shape)
    if width ** k <= 256:
        candidates = np.ndindex(*((width,) * k))
    else:
        rho = (C_R * system.q**n) ** (1.0 / system.model.power)
        # two diamonds can only meet when every axis offset is below 1 + 2 rho / side
        reach = 2 * (math.ceil(rho * width) + 1) + 1
        candidates = sorted({tuple((x - reach) % width for x in d)
                             for d in np.ndindex(*((2 * reach + 1,) * k))})
    out = set()
    for d in candidates:
        rolled = np.roll(D0, tuple(c * cells_per for c in d), axis=tuple(range(k)))
        if np.any(D0 & rolled):
            out.add(tuple(int(c) for c in d))
    return out


def _greedy(order: Sequence, neighbours) -> dict:
    colour: dict = {}
    for v in order:
        used = {colour[u] for u in neighbours(v) if u in colour}
        c = 0
        while c in used:
            c += 1
        colour[v] = c
    return colour


def decompose(system: DyadicSystem, tau: ShiftRelation, C_R: float, ell: int) -> ShiftDecomposition:
    """Greedy lexicographic colouring of the per-level conflict graphs, split by level mod ell."""
    if ell < 1:
        raise ValueError("ell must be a positive integer")
    colors = np.zeros((len(tau.pairs), 2), dtype=np.int64)
    M_k = []
    level_colors = {}
    for k, part in enumerate(tau.partition):
        by_level: dict[int, list[int]] = {}
        for i in part:
            by_level.setdefault(tau.pairs[i][0].level, []).append(i)
        used_k = 0
        for n, idx in sorted(by_level.items()):
            idx = sorted(idx, key=lambda i: tau.pairs[i][0])
            if tau.translation is not None:
                col = _colour_translation(system, tau, n, idx, C_R)
            else:
                col = _colour_explicit(system, tau, idx, C_R)
            for i, c in zip(idx, col):
                colors[i] = (k, c)
            used = (max(col) + 1) if col else 0
            level_colors[(k, n)] = used
            used_k = max(used_k, used)
        M_k.append(used_k)
    return ShiftDecomposition(tau, float(C_R), int(ell), colors, M_k, level_colors)


def _colour_translation(system, tau, n, idx, C_R) -> list[int]:
    axis, m = tau.translation
    width = 1 << n
    k = system.k
    S = _self_conflict_offsets(system, n, C_R)
    t = [0] * k
    t[axis] = m % width
    D = set()
    for s in S:
        for sign in (0, 1, -1):
            d = tuple((s[i] + sign * t[i]) % width for i in range(k))
            D.add(d)
    D.discard((0,) * k)
    offsets = sorted(D)
    firsts = [tau.pairs[i][0].coords for i in idx]
    present = set(firsts)

    def neighbours(v):
        for d in offsets:
            u = tuple((v[i] - d[i]) % width for i in range(k))
            if u in present:
                yield u

    colour = _greedy(firsts, neighbours)
    return [colour[v] for v in firsts]


def _union_masks(system: DyadicSystem, pairs: Sequence[Pair], C_R: float) -> np.ndarray:
    return np.stack([system.diamond(P, C_R).mask | system.diamond(Q, C_R).mask for P, Q in pairs])


def _colour_explicit(system, tau, idx, C_R) -> list[int]:
    masks = _union_masks(system, [tau.pairs[i] for i in idx], C_R).astype(np.float32)
    hits = (masks @ masks.T) > 0
    nbrs = {a: [b for b in range(len(idx)) if b != a and hits[a, b]] for a in range(len(idx))}
    colour = _greedy(range(len(idx)), lambda v: nbrs[v])
    return [colour[a] for a in range(len(idx))]


def verify_decomposition(system: DyadicSystem, dec: ShiftDecomposition) -> dict:
    """Every pair in exactly one colour/level class, residues match, and eq. (4.1)-type separation."""
    tau = dec.relation
    violations = []
    counted = np.zeros(len(tau.pairs), dtype=np.int64)
    for (k, j, i), idx in dec.level_classes().items():
        for p in idx:
            counted[p] += 1
            if tau.pairs[p][0].level % dec.ell != i:
                violations.append({"condition": "C2", "pair": p})
            if p not in tau.partition[k]:
                violations.append({"condition": "part", "pair": p})
    if np.any(counted != 1):
        violations.append({"condition": "partition", "detail": "pair not in exactly one class"})
    for key, idx in dec.color_classes().items():
        by_level: dict[int, list[int]] = {}
        for p in idx:
            by_level.setdefault(tau.pairs[p][0].level, []).append(p)
        for n, ps in by_level.items():
            if len(ps) < 2:
                continue
            masks = _union_masks(system, [tau.pairs[p] for p in ps], dec.C_R).astype(np.float32)
            hits = (masks @ masks.T) > 0
            np.fill_diagonal(hits, False)
            for a, b in np.argwhere(np.triu(hits)):
                violations.append({"condition": "C1", "class": list(key),
                                   "witnesses": [ps[int(a)], ps[int(b)]]})
    return {"ok": not violations, "violations": violations}


def check_localization(system: DyadicSystem, dec: ShiftDecomposition,
                       radius_factor: float = 1.0) -> dict:
    """Check P u Q inside (c_1 (1+m) q^ell)<>A for every class cube A and pair in psi(A).

    `radius_factor` scales the tested radius (values below 1 inject a fault).
    c1_star is the smallest c_1 for which every inclusion holds (a supremum,
    the inclusion itself is strict).
    """
    c1 = lemma_c1(system)
    m = dec.relation.m_param
    unit = (1 + m) * system.q**dec.ell
    radius = radius_factor * c1 * unit
    c1_star = 0.0
    witnesses = []
    checked = 0
    for key, idx in sorted(dec.level_classes().items()):
        pairs = [dec.relation.pairs[p] for p in idx]
        groups: dict[tuple[int, int], list[tuple[Cube, Cube]]] = {}
        for A, ps in psi_map(pairs).items():
            for P, Q in ps:
                for B in (P, Q):
                    groups.setdefault((A.level, B.level), []).append((A, B))
        for (la, lb), items in sorted(groups.items()):
            a = np.array([A.coords for A, _ in items])
            b = np.array([B.coords for _, B in items])
            d = max_center_distance(system, la, a, lb, b) / system.q**la
            checked += len(items)
            c1_star = max(c1_star, float(d.max()) / unit)
            for t in np.flatnonzero(d >= radius):
                A, B = items[int(t)]
                witnesses.append({"class": list(key), "A": A.to_json(), "cube": B.to_json()})
    return {"ok": not witnesses, "c1": c1, "c1_star": c1_star, "radius": radius,
            "checked": checked, "violations": witnesses}


# ----------------------------------------------------------------------------
# theta supports


def class_grid_input(dec: ShiftDecomposition, key: tuple[int, int, int]) -> AdaptInput:
    """The adapted-grid input of one class: A = proj_1 u proj_2, phi from psi, mu = ell.

    P and tau(P) sit at the same level with overlapping diamonds, so the
    separation hypothesis is waived for each intra-pair couple.
    """
    pairs = dec.class_pairs(key)
    family = {P for P, _ in pairs} | {Q for _, Q in pairs}
    psi = psi_map(pairs)
    phi = {A: {C for pq in ps for C in pq} for A, ps in psi.items()}
    exempt = [(P, Q) for P, Q in pairs if P != Q]
    return AdaptInput.make(family, phi, dec.C_R, dec.ell, exempt)


@dataclass
class ThetaSupports:
    pairs: list
    theta: dict
    c3: float
    c3_star: float
    c4: float
    c4_star: float

    def verify(self, system: DyadicSystem) -> dict:
        violations = []
        for P, Q in self.pairs:
            T = self.theta[P]
            if self.theta[Q] != T:
                violations.append({"condition": "theta_equal", "witnesses": [P.to_json(), Q.to_json()]})
            if not (system.cells(P) | system.cells(Q)) <= T:
                violations.append({"condition": "contains_pair", "witnesses": [P.to_json(), Q.to_json()]})
            if T.measure > Fraction(self.c4).limit_denominator(10**9) * (P.measure() + Q.measure()) * (1 + Fraction(1, 10**9)):
                violations.append({"condition": "measure", "witnesses": [P.to_json()]})
        cubes = sorted(self.theta)
        for i, j in nestedness_violations([self.theta[A] for A in cubes]):
            violations.append({"condition": "nested", "witnesses": [cubes[i].to_json(), cubes[j].to_json()]})
        return {"ok": not violations, "violations": violations, "c3_star": self.c3_star,
                "c4_star": self.c4_star, "c4": self.c4}


def build_theta(system: DyadicSystem, pairs: Sequence[Pair], grid: AdaptedGrid,
                C_R: float | None = None) -> ThetaSupports:
    """Finest level first: theta(P) = theta(Q) = sigma(P) u sigma(Q) u touching finer supports."""
    pairs = list(pairs)
    family = {P for P, _ in pairs} | {Q for _, Q in pairs}
    if family != set(grid.input.family):
        raise ValueError("grid/class mismatch: grid family differs from proj_1 u proj_2 of the class")
    C_R = grid.input.C_R if C_R is None else C_R
    cm = system.model.cell_measure
    theta: dict[Cube, Region] = {}
    finer: list[np.ndarray] = []
    for n in sorted({P.level for P, _ in pairs}, reverse=True):
        level_pairs = sorted(p for p in pairs if p[0].level == n)
        new = []
        stack = np.stack(finer) if finer else None
        for P, Q in level_pairs:
            core = grid.sigma[P].mask | grid.sigma[Q].mask
            if stack is not None:
                hits = (stack & core).any(axis=1)
                core = core | stack[hits].any(axis=0)
            T = Region(core, cm)
            if P in theta and theta[P] != T or Q in theta and theta[Q] != T:
                raise ValueError(f"theta assigned twice with different values at {P}")
            theta[P] = theta[Q] = T
            new.append(core)
        finer.extend(new)

    c3 = theta_c3(system, C_R)
    c3_star = 0.0
    c4_star = 0.0
    c4 = 0.0
    for P, Q in pairs:
        cells = theta[P].cells()
        dP = system.distance_to_cube(P)[cells] / system.scale(P)
        dQ = system.distance_to_cube(Q)[cells] / system.scale(Q)
        c3_star = max(c3_star, float(np.minimum(dP, dQ).max()))
        base = float(P.measure() + Q.measure())
        c4_star = max(c4_star, float(theta[P].measure) / base)
        hull = system.diamond(P, c3) | system.diamond(Q, c3)
        c4 = max(c4, float(hull.measure) / base)
    return ThetaSupports(pairs, theta, c3, c3_star, c4, c4_star)


def plain_supports(system: DyadicSystem, pairs: Sequence[Pair]) -> dict:
    """theta replaced by the cubes themselves (used to show the construction matters)."""
    out = {}
    for P, Q in pairs:
        out[P] = system.cells(P)
        out[Q] = system.cells(Q)
    return out


def domination_check(system: DyadicSystem, pairs: Sequence[Pair], theta: Mapping[Cube, Region],
                     haar: HaarSystem, c4: float | None = None,
                     require_atoms: bool = True) -> dict:
    """Pointwise |h_{tau A}| <= c5 E(|h_A| | F_{lev A}) on every finest cell.

    F_n is generated by theta(A) for class cubes A of level <= n. Returns the
    smallest working constant c5_star (inf when E vanishes where h_{tau A}
    does not) and the first failing cell when the bound is violated.
    """
    pairs = sorted(pairs)
    if not pairs:
        return {"ok": True, "c5_star": 0.0, "c5": 0.0, "C_h": 0.0, "witness": None}
    cubes = sorted(theta)
    levels = sorted({A.level for A in cubes})
    gens = []
    lab_at = {}
    for n in levels:
        gens.extend(theta[A] for A in cubes if A.level == n)
        lab_at[n] = atom_labels(gens, system.model.n_cells)
    C_h = haar.constant_h2(pairs)
    c5 = 2 * C_h * c4 if c4 is not None else math.inf

    c5_star = 0.0
    witness = None
    for P, Q in pairs:
        lab = lab_at[P.level]
        T = theta[P].mask
        ids = np.unique(lab[T])
        if require_atoms and (len(ids) != 1 or np.count_nonzero(lab == ids[0]) != np.count_nonzero(T)):
            raise ValueError(f"theta({P}) is not an atom of the filtration at level {P.level}")
        hA = np.abs(haar.function(P).values)
        counts = np.bincount(lab)
        cond = (np.bincount(lab, weights=hA) / counts)[lab]
        hQ = np.abs(haar.function(Q).values)
        live = hQ > 0
        with np.errstate(divide="ignore"):
            ratio = np.where(cond[live] > 0, hQ[live] / np.where(cond[live] > 0, cond[live], 1.0), np.inf)
        worst = float(ratio.max())
        if worst > c5_star:
            c5_star = worst
            cell = int(np.flatnonzero(live)[int(np.argmax(ratio))])
            witness = {"P": P.to_json(), "Q": Q.to_json(), "cell": cell, "ratio": worst}
    return {"ok": c5_star <= c5, "c5_star": c5_star, "c5": c5, "C_h": C_h, "witness": witness}


def class_pipeline(system: DyadicSystem, dec: ShiftDecomposition, key: tuple[int, int, int],
                   haar: HaarSystem, debug: bool = False) -> dict:
    """Adapted grid, theta and domination for one class, each verified."""
    from .adapt import check_hypotheses, verify_adapted_grid

    inp = class_grid_input(dec, key)
    hyp = check_hypotheses(system, inp, debug=debug)
    grid = build_adapted_grid(system, inp, debug=debug, check=False)
    gridrep = verify_adapted_grid(system, inp, grid)
    pairs = dec.class_pairs(key)
    th = build_theta(system, pairs, grid)
    threp = th.verify(system)
    dom = domination_check(system, pairs, th.theta, haar, c4=th.c4)
    return {"key": list(key), "pairs": len(pairs), "hypotheses": hyp, "grid": gridrep,
            "theta": threp, "domination": dom,
            "ok": hyp["ok"] and gridrep["ok"] and threp["ok"] and dom["ok"]}
