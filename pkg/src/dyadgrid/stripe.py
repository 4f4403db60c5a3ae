"""Stripe families, stripe functions and the carrier sets used to compare stripes.

A stripe family assigns every cube B of level lev A + lambda inside A to one
of M stripes. Assignments are stored per level of A as an integer label for
each cube of level n + lambda (0 marks an unassigned cube), so a stripe
union S^(m)(A)* is a vectorized mask. The stripe function g^(m)_A is the sum
of the Haar functions of the cubes in stripe m of A.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .cubes import Cube, DyadicSystem, Region
from .haar import CellFunction, Filtration, HaarSystem, atom_labels


@dataclass(frozen=True, eq=False)
class StripeFamily:
    system: DyadicSystem
    lam: int
    M: int
    labels: tuple  # labels[n]: flat int array over cubes of level n + lam
    K_1: float = math.nan
    K_2: float = math.nan
    eps: float = math.nan
    kind: str = "custom"

    @property
    def max_level(self) -> int:
        return self.system.J - self.lam

    def levels(self) -> range:
        return range(self.max_level + 1)

    def _check_level(self, n: int) -> None:
        if not 0 <= n <= self.max_level:
            raise ValueError(f"level {n} + lambda {self.lam} exceeds depth {self.system.J}")

    @cached_property
    def _cell_stripe(self) -> list[np.ndarray]:
        return [self.labels[n][self.system.labels(n + self.lam)] for n in self.levels()]

    def cell_stripe(self, n: int) -> np.ndarray:
        """Stripe label of every finest cell with respect to its level-n ancestor."""
        self._check_level(n)
        return self._cell_stripe[n]

    def stripe_cubes(self, A: Cube, m: int) -> list[Cube]:
        self._check_level(A.level)
        out = []
        shift = self.lam
        lvl = A.level + shift
        base = [c << shift for c in A.coords]
        for off in np.ndindex(*((1 << shift,) * self.system.k)):
            B = Cube(lvl, tuple(b + o for b, o in zip(base, off)))
            if self.labels[A.level][self.system.cube_index(B)] == m:
                out.append(B)
        return out

    def union(self, A: Cube, m: int) -> Region:
        self._check_level(A.level)
        inside = self.system.labels(A.level) == self.system.cube_index(A)
        return Region(inside & (self.cell_stripe(A.level) == m), self.system.model.cell_measure)

    def with_labels(self, n: int, new_labels: np.ndarray) -> "StripeFamily":
        labels = list(self.labels)
        labels[n] = np.asarray(new_labels, dtype=np.int64).copy()
        return StripeFamily(self.system, self.lam, self.M, tuple(labels), kind="custom")

    def to_json(self) -> str:
        doc = {"schema_version": 1, "kind": self.kind, "lambda": self.lam, "M": self.M,
               "K_1": self.K_1, "K_2": self.K_2, "eps": self.eps,
               "model": self.system.model.describe(),
               "labels": [l.tolist() for l in self.labels]}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str, system: DyadicSystem) -> "StripeFamily":
        doc = json.loads(text)
        labels = tuple(np.asarray(l, dtype=np.int64) for l in doc["labels"])
        return cls(system, int(doc["lambda"]), int(doc["M"]), labels,
                   float(doc["K_1"]), float(doc["K_2"]), float(doc["eps"]), doc["kind"])


def make_classical_stripes(system: DyadicSystem, lam: int, axis: int = 0) -> StripeFamily:
    """Slabs along `axis`: stripe m of A holds the level lev A + lam cubes in its m-th slab."""
    if lam < 1:
        raise ValueError("lambda must be a positive integer")
    if lam > system.J:
        raise ValueError(f"lambda {lam} exceeds the depth {system.J}")
    k = system.k
    labels = []
    for n in range(system.J - lam + 1):
        L = n + lam
        coords = np.indices((1 << L,) * k).reshape(k, -1)
        labels.append((coords[axis] & ((1 << lam) - 1)) + 1)
    eps = math.log(2) / math.log(1 / system.q)
    return StripeFamily(system, lam, 1 << lam, tuple(labels), 1.0, 1.0, eps, "classical")


def labelled_nestedness(ids: Sequence[np.ndarray]) -> list[tuple]:
    """Nestedness of a set system given per-layer cell labels (-1 = no set).

    Sets within one layer are disjoint by construction. Two sets X (layer a)
    and Y (layer b) that meet must satisfy X n Y = X or X n Y = Y.
    Returns (layer_a, id_a, layer_b, id_b) witnesses.
    """
    bad = []
    sizes = [np.bincount(l[l >= 0]) if np.any(l >= 0) else np.zeros(0, dtype=np.int64) for l in ids]
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            both = (ids[a] >= 0) & (ids[b] >= 0)
            if not both.any():
                continue
            pairs, counts = np.unique(np.stack([ids[a][both], ids[b][both]]), axis=1, return_counts=True)
            sa = sizes[a][pairs[0]]
            sb = sizes[b][pairs[1]]
            for t in np.flatnonzero((counts != sa) & (counts != sb)):
                bad.append((a, int(pairs[0, t]), b, int(pairs[1, t])))
    return bad


def verify_S1_S4(family: StripeFamily) -> dict:
    """Exhaustive check of (S1)-(S4) over all cubes with lev + lambda <= J.

    Returns the smallest K_1 that works and the smallest K_2 for the
    family's exponent eps.
    """
    system = family.system
    M = family.M
    q = system.q
    s1: list[dict] = []
    K_1 = 1.0
    K_2 = 0.0
    for n in family.levels():
        stripe = family.cell_stripe(n)
        lab = system.labels(n)
        bad_cells = (stripe < 1) | (stripe > M)
        if bad_cells.any():
            for ci in np.unique(lab[bad_cells])[:20]:
                s1.append({"cube": system.cube_at(n, int(ci)).to_json(), "detail": "cells outside every stripe"})
        n_cubes = 1 << (n * system.k)
        ok = ~bad_cells
        counts = np.bincount(lab[ok] * M + (stripe[ok] - 1), minlength=n_cubes * M).reshape(n_cubes, M)
        if np.any(counts == 0):
            K_1 = math.inf
        else:
            K_1 = max(K_1, float((counts.max(axis=1) / counts.min(axis=1)).max()))
        # (S4): level n + j cubes meeting S^(m)(A)*
        for j in range(family.lam):
            lab_j = system.labels(n + j)
            per_j = 1 << (j * system.k)
            hit = np.zeros((1 << ((n + j) * system.k), M), dtype=bool)
            hit[lab_j[ok], stripe[ok] - 1] = True
            # each level n+j cube lies in exactly one level-n cube; sum per parent
            parent = np.arange(hit.shape[0])
            if n + j > 0:
                coords = np.unravel_index(parent, (1 << (n + j),) * system.k)
                parent = np.ravel_multi_index(tuple(c >> j for c in coords), (1 << n,) * system.k)
            per_parent = np.zeros((n_cubes, M))
            np.add.at(per_parent, parent, hit)
            ratio = per_parent.max() / per_j / q ** (j * family.eps) if per_parent.size else 0.0
            K_2 = max(K_2, float(ratio))

    s3 = []
    for m in range(1, M + 1):
        ids = []
        for n in family.levels():
            in_m = family.cell_stripe(n) == m
            ids.append(np.where(in_m, system.labels(n), -1))
        for a, ia, b, ib in labelled_nestedness(ids):
            s3.append({"stripe": m, "cubes": [system.cube_at(a, ia).to_json(), system.cube_at(b, ib).to_json()]})
            if len(s3) >= 50:
                break
    return {"ok": not s1 and not s3 and math.isfinite(K_1), "S1_violations": s1,
            "S3_violations": s3, "K_1": K_1, "K_2": K_2, "eps": family.eps, "M": M}


# ----------------------------------------------------------------------------
# stripe functions


@dataclass(frozen=True, eq=False)
class StripeFunctions:
    family: StripeFamily
    haar: HaarSystem

    @property
    def system(self) -> DyadicSystem:
        return self.family.system

    @property
    def max_level(self) -> int:
        """Largest lev A with Haar functions on the stripe cubes (lev A + lambda < J)."""
        return self.system.J - self.family.lam - 1

    def _check(self, A: Cube) -> None:
        self.system.check_cube(A)
        if A.level > self.max_level:
            raise ValueError(f"{A} is out of depth: level + lambda must stay below {self.system.J}")

    def function(self, A: Cube, m: int) -> CellFunction:
        self._check(A)
        n = A.level
        mask = self.family.union(A, m).mask
        return CellFunction(np.where(mask, self.haar._signs[n + self.family.lam], 0.0), self.system.model)

    def certify(self) -> dict:
        """(G1) support, (G2) martingale differences, (G3) with the smallest C_g."""
        system = self.system
        fam = self.family
        M = fam.M
        g1 = g2 = 0
        C_g = 1.0
        for n in range(self.max_level + 1):
            stripe = fam.cell_stripe(n)
            lab = system.labels(n)
            signs = self.haar._signs[n + fam.lam]
            live = (stripe >= 1) & (stripe <= M)
            key = lab[live] * M + stripe[live] - 1
            size = np.bincount(key, minlength=(1 << (n * system.k)) * M).reshape(-1, M)
            absint = np.bincount(key, weights=np.abs(signs[live]), minlength=size.size).reshape(-1, M)
            sup = np.zeros(size.size)
            np.maximum.at(sup, key, np.abs(signs[live]))
            sup = sup.reshape(-1, M)
            # g^(m)_A lives on S^(m)(A)* by construction; count cells that would leak
            g1 += int(np.count_nonzero(~live))
            # mean zero on every cube of level n + lambda
            lab_fine = system.labels(n + fam.lam)
            sums = np.bincount(lab_fine[live], weights=signs[live], minlength=1 << ((n + fam.lam) * system.k))
            g2 += int(np.count_nonzero(sums))
            if M > 1:
                avg = np.where(size > 0, absint / np.maximum(size, 1), 0.0)
                with np.errstate(divide="ignore", invalid="ignore"):
                    ratio = sup[:, :, None] / avg[:, None, :]
                ratio[np.isnan(ratio)] = 0.0
                ratio[:, np.arange(M), np.arange(M)] = 0.0
                C_g = max(C_g, float(ratio.max()))
        return {"ok": g1 == 0 and g2 == 0 and math.isfinite(C_g), "G1_violations": g1,
                "G2_violations": g2, "C_g": C_g}

    def constant_CS(self) -> float:
        """max_Q ||sum_m S^(m) h_Q||_inf / (|Q|^-1 int |h_Q|)."""
        worst = 0.0
        for n in range(self.max_level + 1):
            stripe = self.family.cell_stripe(n)
            live = (stripe >= 1) & (stripe <= self.family.M)
            total = np.where(live, np.abs(self.haar._signs[n + self.family.lam]), 0.0)
            lab = self.system.labels(n)
            sup = np.zeros(1 << (n * self.system.k))
            np.maximum.at(sup, lab, total)
            mean_h = np.bincount(lab, weights=np.abs(self.haar._signs[n])) / np.bincount(lab)
            worst = max(worst, float((sup / mean_h).max()))
        return worst

    def all_stripes(self, coeffs) -> np.ndarray:
        """Rows S^(m) f for m = 1..M, where f = sum c_A h_A over lev A <= max_level."""
        system = self.system
        fam = self.family
        n_cells = system.model.n_cells
        out = np.zeros(fam.M * n_cells)
        cells = np.arange(n_cells)
        for n in range(self.max_level + 1):
            c = np.asarray(coeffs[n]).ravel() if n < len(coeffs) and coeffs[n] is not None else None
            if c is None or not c.any():
                continue
            stripe = fam.cell_stripe(n)
            live = (stripe >= 1) & (stripe <= fam.M)
            vals = c[system.labels(n)] * self.haar._signs[n + fam.lam]
            np.add.at(out, (stripe[live] - 1) * n_cells + cells[live], vals[live])
        return out.reshape(fam.M, n_cells)


def make_stripe_functions(family: StripeFamily, haar: HaarSystem) -> StripeFunctions:
    if haar.system is not family.system and haar.system != family.system:
        raise ValueError("Haar system and stripe family live on different dyadic systems")
    return StripeFunctions(family, haar)


def apply_stripe_operator(functions: StripeFunctions, m: int, coeffs) -> CellFunction:
    """sum_A c_A g^(m)_A from per-level arrays or a {Cube: value} mapping."""
    system = functions.system
    fam = functions.family
    if not 1 <= m <= fam.M:
        raise ValueError(f"stripe index {m} outside 1..{fam.M}")
    if isinstance(coeffs, Mapping):
        arrays: list = [None] * (functions.max_level + 1)
        for A, v in coeffs.items():
            functions._check(A)
            if arrays[A.level] is None:
                arrays[A.level] = np.zeros((1 << A.level,) * system.k)
            arrays[A.level][A.coords] = v
        coeffs = arrays
    else:
        for n in range(functions.max_level + 1, len(coeffs)):
            if coeffs[n] is not None and np.any(coeffs[n]):
                raise ValueError(f"nonzero coefficients at level {n} are out of depth")
    out = np.zeros(system.model.n_cells)
    for n in range(min(len(coeffs), functions.max_level + 1)):
        c = coeffs[n]
        if c is None:
            continue
        c = np.asarray(c).ravel()
        if not c.any():
            continue
        on = fam.cell_stripe(n) == m
        out += np.where(on, c[system.labels(n)] * functions.haar._signs[n + fam.lam], 0.0)
    return CellFunction(out, system.model)


def stripe_function_lowerbound(functions: StripeFunctions, A: Cube, m: int, n: int,
                               C_g: float | None = None) -> dict:
    """|{|g^(n)| >= ||g^(m)||_inf / 2C_g}| against |S^(n)(A)*| / 2C_g^2."""
    if C_g is None:
        C_g = functions.certify()["C_g"]
    gm = functions.function(A, m)
    gn = functions.function(A, n)
    thresh = gm.norm(np.inf) / (2 * C_g)
    cm = functions.system.model.cell_measure
    level_set = int(np.count_nonzero(np.abs(gn.values) >= thresh)) * cm
    S = functions.family.union(A, n).measure
    bound = S / (2 * Fraction(C_g).limit_denominator(10**12) ** 2)
    return {"level_set_measure": level_set, "bound": bound, "ok": level_set >= bound}


# ----------------------------------------------------------------------------
# the combinatorial overlap lemma and carriers


def K3_constant(family: StripeFamily, k_gap: int) -> float:
    """(1 + K_1) K_1^2 K_2 / (1 - q^(k eps)) from the geometric sum over d."""
    q = family.system.q
    return (1 + family.K_1) * family.K_1**2 * family.K_2 / (1 - q ** (k_gap * family.eps))


def overlap_bound(family: StripeFamily, A: Cube, m: int, n: int, k_gap: int) -> dict:
    if k_gap < 1:
        raise ValueError("k_gap must be a positive integer")
    system = family.system
    lam = family.lam
    S_m = family.union(A, m)
    lhs_mask = np.zeros(system.model.n_cells, dtype=bool)
    d = 1
    while d * k_gap <= lam - 1:
        L = A.level + d * k_gap
        family._check_level(L)
        lab = system.labels(L)
        hit = np.unique(lab[S_m.mask])
        stripe = family.cell_stripe(L)
        cover = np.isin(lab, hit) & ((stripe == m) | (stripe == n))
        lhs_mask |= cover
        d += 1
    lhs = Region(S_m.mask & lhs_mask, system.model.cell_measure).measure
    K_3 = K3_constant(family, k_gap)
    rhs = K_3 * system.q ** (k_gap * family.eps) * float(S_m.measure)
    return {"lhs_measure": lhs, "rhs_bound": rhs, "K_3": K_3,
            "ok": float(lhs) <= rhs * (1 + 1e-12)}


def carrier_gap(family: StripeFamily, C_g: float) -> int:
    """Smallest k with K_3 q^(k eps) <= 1 / (4 C_g^2)."""
    k = 1
    while K3_constant(family, k) * family.system.q ** (k * family.eps) > 1 / (4 * C_g**2):
        k += 1
        if k > 10_000:
            raise ValueError("no admissible gap")
    return k


def class_levels(lam: int, k_gap: int, nu: int, delta: int, j: int) -> list[int]:
    return [(2 * j + delta) * lam + i for i in range(lam) if i % k_gap == nu]


@dataclass
class StripeCarriers:
    family: StripeFamily
    nu: int
    delta: int
    k_gap: int
    m: int
    n: int
    C_g: float
    carrier_ids: dict  # level -> per-cell cube index of its carrier (or -1)
    classes: dict  # j -> levels
    F: Filtration | None = None
    G: Filtration | None = None
    names: list = field(default_factory=list)

    def carrier(self, Q: Cube) -> Region:
        ids = self.carrier_ids[Q.level]
        return Region(ids == self.family.system.cube_index(Q), self.family.system.model.cell_measure)

    def cubes(self) -> list[Cube]:
        sysm = self.family.system
        return [sysm.cube_at(L, i) for L in sorted(self.carrier_ids) for i in range(1 << (L * sysm.k))]

    def verify(self) -> dict:
        system = self.family.system
        fam = self.family
        levels = sorted(self.carrier_ids)
        nested = labelled_nestedness([self.carrier_ids[L] for L in levels])
        cap = 1 - Fraction(1, 4) / Fraction(self.C_g).limit_denominator(10**12) ** 2
        ineq_bad = []
        inside_bad = 0
        worst = Fraction(1)
        for L in levels:
            ids = self.carrier_ids[L]
            stripe = fam.cell_stripe(L)
            lab = system.labels(L)
            size = 1 << (L * system.k)
            inside_bad += int(np.count_nonzero((ids >= 0) & ((ids != lab) | ~np.isin(stripe, (self.m, self.n)))))
            S_n = np.bincount(lab[stripe == self.n], minlength=size)
            kept = np.bincount(lab[(stripe == self.n) & (ids == lab)], minlength=size)
            for qi in np.flatnonzero(S_n):
                r = Fraction(int(kept[qi]), int(S_n[qi]))
                worst = min(worst, r)
                if r < cap:
                    ineq_bad.append(system.cube_at(L, int(qi)).to_json())
        return {"ok": not nested and not ineq_bad and inside_bad == 0,
                "nested_violations": len(nested), "ineq_violations": ineq_bad,
                "outside_stripes": inside_bad, "worst_fraction": worst, "required": cap}


def build_stripe_carriers(family: StripeFamily, functions: StripeFunctions, nu: int, delta: int,
                          m: int = 1, n: int = 2, C_g: float | None = None,
                          k_gap: int | None = None, filtrations: bool = True) -> StripeCarriers:
    """Carriers A(Q) for one (nu, delta) class, finest class level first within each j."""
    if m == n or not (1 <= m <= family.M and 1 <= n <= family.M):
        raise ValueError("need two distinct stripe indices in 1..M")
    if delta not in (0, 1):
        raise ValueError("delta must be 0 or 1")
    if C_g is None:
        C_g = functions.certify()["C_g"]
    if k_gap is None:
        k_gap = carrier_gap(family, C_g)
    if not 0 <= nu < k_gap:
        raise ValueError(f"nu must lie in 0..{k_gap - 1}")
    system = family.system
    lam = family.lam
    top = family.max_level
    classes: dict[int, list[int]] = {}
    j = 0
    while (2 * j + delta) * lam <= top:
        lv = [L for L in class_levels(lam, k_gap, nu, delta, j) if L <= top]
        if lv:
            classes[j] = lv
        j += 1
    total = sum(len(v) for v in classes.values())
    if total == 0:
        raise ValueError(f"depth {system.J} is insufficient: class (nu={nu}, delta={delta}) "
                         f"has no level with lev + lambda <= J")

    carrier_ids: dict[int, np.ndarray] = {}
    for j, lv in classes.items():
        taken = np.zeros(system.model.n_cells, dtype=bool)
        for L in sorted(lv, reverse=True):
            stripe = family.cell_stripe(L)
            union = (stripe == m) | (stripe == n)
            own = union & ~taken
            carrier_ids[L] = np.where(own, system.labels(L), -1)
            taken |= own

    out = StripeCarriers(family, nu, delta, k_gap, m, n, C_g, carrier_ids, classes)
    if filtrations:
        levels = sorted(carrier_ids)
        fl, gl = [], []
        f_gens: list[Region] = []
        cm = system.model.cell_measure
        for L in levels:
            ids = carrier_ids[L]
            for i in np.unique(ids[ids >= 0]):
                f_gens.append(Region(ids == i, cm))
            fl.append(atom_labels(f_gens, system.model.n_cells))
            g_gens = []
            for i in range(L + 1):
                stripe = family.cell_stripe(i)
                lab = system.labels(i)
                g_gens.extend(Region((stripe == m) & (lab == c), cm) for c in range(1 << (i * system.k)))
            gl.append(atom_labels(g_gens, system.model.n_cells))
        out.F = Filtration(fl, system.model, levels)
        out.G = Filtration(gl, system.model, levels)
        out.names = levels
    return out


def comparability_ratio(functions: StripeFunctions, coeffs, p: float) -> float:
    """max over m, n of ||S^(m) f||_p / ||S^(n) f||_p."""
    rows = functions.all_stripes(coeffs)
    norms = (np.abs(rows) ** p).sum(axis=1) ** (1.0 / p)
    if norms.min() == 0:
        return math.inf if norms.max() > 0 else 1.0
    return float(norms.max() / norms.min())
