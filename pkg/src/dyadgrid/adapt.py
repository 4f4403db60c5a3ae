"""Deterministic adapted grids: the generalized one-third trick.

Given a finite family of cubes with a successor map phi, build_adapted_grid
enlarges every cube A to a set sigma(A) so that sigma(A) contains A and the
sigma-images of phi(A), stays inside C_R<>A, and the images form a nested
collection. Regions are processed from the finest occupied level down.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cubes import Cube, DyadicSystem, Region


class HypothesisError(ValueError):
    """The input family does not satisfy the adapted-grid hypotheses."""


class DomainError(ValueError):
    """phi maps a cube outside the family."""


@dataclass(frozen=True)
class AdaptInput:
    family: frozenset
    phi: Mapping[Cube, frozenset]
    C_R: float
    mu: int
    # unordered same-level pairs excused from the separation condition
    exempt: frozenset = frozenset()

    @classmethod
    def make(cls, family: Iterable[Cube], phi: Mapping[Cube, Iterable[Cube]] | None,
             C_R: float, mu: int, exempt: Iterable[tuple[Cube, Cube]] = ()) -> "AdaptInput":
        family = frozenset(family)
        phi = {A: frozenset((phi or {}).get(A, ())) for A in sorted(family)}
        ex = frozenset(frozenset(p) for p in exempt)
        return cls(family, phi, float(C_R), int(mu), ex)

    def alpha(self, system: DyadicSystem) -> float:
        K = system.model.K_X
        return 2 * K**3 * (system.C_2 + self.C_R) + self.C_R / 2

    def levels(self) -> list[int]:
        return sorted({A.level for A in self.family}, reverse=True)

    def at_level(self, n: int) -> list[Cube]:
        return sorted(A for A in self.family if A.level == n)


def constant_constraint(system: DyadicSystem, C_R: float, mu: int) -> float:
    """Left side of 4 K^3 (1 + C_2 / C_R) q^mu <= 1."""
    K = system.model.K_X
    return 4 * K**3 * (1 + system.C_2 / C_R) * system.q**mu


def minimal_mu(system: DyadicSystem, C_R: float) -> int:
    mu = 1
    while constant_constraint(system, C_R, mu) > 1:
        mu += 1
    return mu


def measure_bound_factor(system: DyadicSystem, C_R: float) -> float:
    """C_d (K_X (C_2 + C_R) / C_1)^log2(C_d)."""
    m = system.model
    return m.C_d * (m.K_X * (system.C_2 + C_R) / system.C_1) ** math.log2(m.C_d)


def alpha_expansion(system: DyadicSystem, family: Iterable[Cube], alpha: float) -> set[Cube]:
    """All cubes of the same level as some A in the family that meet alpha<>A."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    out: set[Cube] = set()
    for A in family:
        lab = system.labels(A.level)
        hit = np.unique(lab[system.diamond(A, alpha).mask])
        out.update(system.cube_at(A.level, int(i)) for i in hit)
    return out


def nested_predecessor(collection: Sequence[Region], C: Region) -> Region | None:
    """Intersection of all strict supersets of C in the collection; None means X."""
    if not any(C == D for D in collection):
        raise ValueError("C is not a member of the collection")
    supers = [D for D in collection if C <= D and D != C]
    if not supers:
        return None
    mask = supers[0].mask.copy()
    for D in supers[1:]:
        mask &= D.mask
    return Region(mask, C.cell_measure)


def cube_predecessor(cubes: set[Cube], A: Cube) -> Cube | None:
    """Smallest strict ancestor of A inside a set of dyadic cubes (None means X)."""
    for n in range(A.level - 1, -1, -1):
        anc = A.ancestor(n)
        if anc in cubes:
            return anc
    return None


def _pairwise_hits(masks: np.ndarray) -> np.ndarray:
    m = masks.astype(np.float32)
    return (m @ m.T) > 0


def check_hypotheses(system: DyadicSystem, inp: AdaptInput, debug: bool = False) -> dict:
    violations: list[dict] = []
    K = system.model.K_X

    lhs = constant_constraint(system, inp.C_R, inp.mu)
    if lhs > 1:
        violations.append({"condition": "constants", "value": lhs,
                           "detail": "4 K^3 (1 + C_2/C_R) q^mu > 1"})

    exempted = 0
    for n in inp.levels():
        cubes = inp.at_level(n)
        if len(cubes) < 2:
            continue
        masks = np.stack([system.diamond(A, inp.C_R).mask for A in cubes])
        hits = _pairwise_hits(masks)
        for i in range(len(cubes)):
            for j in range(i + 1, len(cubes)):
                if not hits[i, j]:
                    continue
                if frozenset((cubes[i], cubes[j])) in inp.exempt:
                    exempted += 1
                    continue
                violations.append({"condition": "separation",
                                   "witnesses": [cubes[i].to_json(), cubes[j].to_json()]})

    alpha = inp.alpha(system)
    expanded = alpha_expansion(system, inp.family, alpha)
    for A in sorted(expanded):
        pred = cube_predecessor(expanded, A)
        if pred is not None and A.level < inp.mu + pred.level:
            violations.append({"condition": "small_successor",
                               "witnesses": [A.to_json(), pred.to_json()]})
    if debug:
        # variant used inside the proof: family members strictly inside any
        # expanded cube must be at least mu levels finer
        for A in sorted(inp.family):
            for n in range(A.level - 1, max(A.level - inp.mu, -1), -1):
                if A.ancestor(n) in expanded:
                    violations.append({"condition": "small_successor_proof_variant",
                                       "witnesses": [A.to_json(), A.ancestor(n).to_json()]})

    for A in sorted(inp.family):
        succ = inp.phi.get(A, frozenset())
        outside = [Q for Q in succ if Q not in inp.family]
        if outside:
            violations.append({"condition": "phi_domain",
                               "witnesses": [A.to_json()] + [Q.to_json() for Q in sorted(outside)]})
        coarse = [Q for Q in succ if Q.level <= A.level]
        if coarse:
            violations.append({"condition": "phi_level",
                               "witnesses": [A.to_json()] + [Q.to_json() for Q in sorted(coarse)]})
        if succ:
            near = system.diamond(A, inp.C_R / (2 * K))
            if not system.union_of_cubes(succ) <= near:
                violations.append({"condition": "phi_localization", "witnesses": [A.to_json()]})

    return {"ok": not violations, "violations": violations, "alpha": alpha,
            "constant_lhs": lhs, "exempted_pairs": exempted}


@dataclass
class AdaptedGrid:
    system: DyadicSystem
    input: AdaptInput
    sigma: dict
    order: list = field(default_factory=list)

    def B_family(self) -> list[tuple[int, Region]]:
        return [(A.level, self.sigma[A]) for A in self.order]

    def measure_ratio(self, A: Cube) -> Fraction:
        return self.sigma[A].measure / A.measure()

    def to_json(self) -> str:
        sys = self.system
        doc = {
            "schema_version": 1,
            "model": sys.model.describe(),
            "system": sys.describe(),
            "C_R": self.input.C_R,
            "mu": self.input.mu,
            "family": [A.to_json() for A in sorted(self.input.family)],
            "phi": [[A.to_json(), [Q.to_json() for Q in sorted(self.input.phi.get(A, ()))]]
                    for A in sorted(self.input.family)],
            "exempt": sorted([sorted(c.to_json() for c in pair) for pair in self.input.exempt]),
            "sigma": [{"cube": A.to_json(), "level": A.level,
                       "cells": self.sigma[A].cells().tolist()} for A in self.order],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str, system: DyadicSystem) -> "AdaptedGrid":
        doc = json.loads(text)
        fam = [Cube.from_json(c) for c in doc["family"]]
        phi = {Cube.from_json(a): [Cube.from_json(q) for q in qs] for a, qs in doc["phi"]}
        exempt = [tuple(Cube.from_json(c) for c in pair) for pair in doc.get("exempt", [])]
        inp = AdaptInput.make(fam, phi, doc["C_R"], doc["mu"], exempt)
        n, cm = system.model.n_cells, system.model.cell_measure
        sigma, order = {}, []
        for entry in doc["sigma"]:
            A = Cube.from_json(entry["cube"])
            sigma[A] = Region.from_cells(entry["cells"], n, cm)
            order.append(A)
        return cls(system, inp, sigma, order)


def build_adapted_grid(system: DyadicSystem, inp: AdaptInput, debug: bool = False,
                       check: bool = True) -> AdaptedGrid:
    """Construct sigma level by level, finest occupied level first.

    sigma(A) = (A u sigma(phi(A))*) u (every earlier region meeting that core).
    Earlier regions are scanned only among those built from cubes meeting
    alpha<>A; with `debug` the full scan is repeated and must agree.
    """
    for A, succ in inp.phi.items():
        if A not in inp.family:
            raise DomainError(f"phi defined on {A} outside the family")
        bad = [Q for Q in succ if Q not in inp.family]
        if bad:
            raise DomainError(f"phi({A}) contains cubes outside the family: {bad}")
    if check:
        report = check_hypotheses(system, inp)
        if not report["ok"]:
            first = report["violations"][0]
            raise HypothesisError(f"hypotheses fail ({len(report['violations'])} violations), "
                                  f"first: {first}")

    n_cells = system.model.n_cells
    cm = system.model.cell_measure
    alpha = inp.alpha(system)
    built = np.zeros((len(inp.family), n_cells), dtype=bool)
    built_cubes: list[Cube] = []
    by_level: dict[int, dict[int, int]] = {}
    sigma: dict[Cube, Region] = {}
    order: list[Cube] = []

    for n in inp.levels():
        count_before = len(built_cubes)
        for A in inp.at_level(n):
            core = system.cells(A).mask.copy()
            for Q in inp.phi.get(A, ()):
                core |= sigma[Q].mask
            if count_before:
                near = system.diamond(A, alpha).mask
                rows = []
                for lvl, idx_map in by_level.items():
                    for ci in np.unique(system.labels(lvl)[near]).tolist():
                        if ci in idx_map:
                            rows.append(idx_map[ci])
                rows.sort()
                mask = _absorb(core, built, rows)
                if debug:
                    full = _absorb(core, built, list(range(count_before)))
                    if not np.array_equal(full, mask):
                        raise AssertionError(f"localized scan differs from full scan at {A}")
            else:
                mask = core
            sigma[A] = Region(mask, cm)
            order.append(A)
        for A in inp.at_level(n):
            built[len(built_cubes)] = sigma[A].mask
            by_level.setdefault(n, {})[system.cube_index(A)] = len(built_cubes)
            built_cubes.append(A)
    return AdaptedGrid(system, inp, sigma, order)


def _absorb(core: np.ndarray, built: np.ndarray, rows: list[int]) -> np.ndarray:
    if not rows:
        return core.copy()
    cand = built[rows]
    hits = (cand & core).any(axis=1)
    return core | cand[hits].any(axis=0)


def nestedness_violations(regions: Sequence[Region]) -> list[tuple[int, int]]:
    """Index pairs whose intersection is neither empty nor one of the two sets."""
    if len(regions) < 2:
        return []
    m = np.stack([r.mask for r in regions]).astype(np.float32)
    inter = m @ m.T
    size = np.diag(inter)
    ok = (inter == 0) | (inter == size[:, None]) | (inter == size[None, :])
    bad = np.argwhere(~ok)
    return [(int(i), int(j)) for i, j in bad if i < j]


def verify_adapted_grid(system: DyadicSystem, inp: AdaptInput, grid: AdaptedGrid) -> dict:
    """Recheck every conclusion from scratch: sandwich, measure, nestedness, bijectivity."""
    violations: list[dict] = []
    bound = measure_bound_factor(system, inp.C_R)
    worst_ratio = 0.0

    if set(grid.sigma) != set(inp.family):
        violations.append({"condition": "domain", "detail": "sigma not defined exactly on the family"})
    for A in sorted(inp.family & set(grid.sigma)):
        S = grid.sigma[A]
        if not system.cells(A) <= S:
            violations.append({"condition": "contains_cube", "witnesses": [A.to_json()]})
        for Q in sorted(inp.phi.get(A, ())):
            if Q in grid.sigma and not grid.sigma[Q] <= S:
                violations.append({"condition": "contains_successor",
                                   "witnesses": [A.to_json(), Q.to_json()]})
        if not S <= system.diamond(A, inp.C_R):
            violations.append({"condition": "inside_diamond", "witnesses": [A.to_json()]})
        ratio = S.measure / A.measure()
        worst_ratio = max(worst_ratio, float(ratio))
        if ratio > bound:
            violations.append({"condition": "measure", "witnesses": [A.to_json()],
                               "ratio": float(ratio)})

    cubes = sorted(grid.sigma)
    regions = [grid.sigma[A] for A in cubes]
    exempt_bad = 0
    for i, j in nestedness_violations(regions):
        pair = frozenset((cubes[i], cubes[j]))
        if pair in inp.exempt:
            exempt_bad += 1
            continue
        violations.append({"condition": "nested", "witnesses": [cubes[i].to_json(), cubes[j].to_json()]})

    # sigma is a bijection onto B when images are labelled by their level;
    # coinciding raw sets are reported separately
    labelled = {(A.level, grid.sigma[A]) for A in cubes}
    if len(labelled) != len(cubes):
        violations.append({"condition": "bijective", "detail": "two cubes of one level share an image"})
    coinciding = len(cubes) - len({grid.sigma[A] for A in cubes})

    return {"ok": not violations, "violations": violations, "measure_bound": bound,
            "worst_ratio": worst_ratio, "exempt_nestedness": exempt_bad,
            "coinciding_sets": coinciding, "regions": len(cubes)}


# ----------------------------------------------------------------------------
# random admissible instances


def random_instance(system: DyadicSystem, rng: np.random.Generator, C_R: float = 4.0,
                    mu: int | None = None, max_per_level: int = 12,
                    phi_prob: float = 0.5) -> tuple[AdaptInput, dict]:
    """Sample an admissible input.

    Levels are spaced at least mu apart (this gives the small-successor
    condition), each level is thinned greedily until the C_R diamonds are
    pairwise disjoint, and phi(A) is a random subset of the strictly finer
    members inside (C_R / 2K)<>A.
    """
    mu = minimal_mu(system, C_R) if mu is None else mu
    J = system.J
    start = int(rng.integers(0, min(mu, J) + 1))
    levels = []
    n = start
    while n <= J:
        levels.append(n)
        n += mu + int(rng.integers(0, 2))
    params = {"C_R": C_R, "mu": mu, "levels": levels, "max_per_level": max_per_level,
              "phi_prob": phi_prob}

    family: list[Cube] = []
    for n in sorted(levels, reverse=True):
        width = 1 << n
        want = int(rng.integers(1, max_per_level + 1))
        taken = np.zeros(system.model.n_cells, dtype=bool)
        kept = 0
        for _ in range(4 * want):
            A = Cube(n, tuple(int(c) for c in rng.integers(0, width, size=system.k)))
            dia = system.diamond(A, C_R).mask
            if np.any(taken & dia) or A in family:
                continue
            taken |= dia
            family.append(A)
            kept += 1
            if kept >= want:
                break

    K = system.model.K_X
    phi: dict[Cube, list[Cube]] = {}
    for A in family:
        near = system.diamond(A, C_R / (2 * K))
        options = [Q for Q in family if Q.level > A.level and system.cells(Q) <= near]
        phi[A] = [Q for Q in sorted(options) if rng.random() < phi_prob]
    return AdaptInput.make(family, phi, C_R, mu), params
