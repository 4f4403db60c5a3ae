"""Haar-type martingale difference systems, filtrations and conditional expectations.

Coefficients are stored per level as arrays of shape (2^n,)*k, so the
synthesis of a full expansion costs O(J * cells). The inner product is
normalized so that <h_A, h_A> = 1, i.e. <f, h_A> = |A|^-1 * int f h_A.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cubes import Cube, DyadicSystem, Region
from .model import SpaceModel

SIGN_SCHEMES = ("FirstHalf",)


class CellFunction:
    """A function on X that is constant on finest cells."""

    __slots__ = ("values", "model")

    def __init__(self, values, model: SpaceModel):
        values = np.asarray(values, dtype=float).ravel()
        if values.shape != (model.n_cells,):
            raise ValueError(f"expected {model.n_cells} cell values, got {values.shape}")
        self.values = values
        self.model = model

    @classmethod
    def zeros(cls, model: SpaceModel) -> "CellFunction":
        return cls(np.zeros(model.n_cells), model)

    @classmethod
    def indicator(cls, region: Region, model: SpaceModel) -> "CellFunction":
        return cls(region.mask.astype(float), model)

    @property
    def cell_measure(self) -> float:
        return float(self.model.cell_measure)

    def norm(self, p: float) -> float:
        if np.isinf(p):
            return float(np.abs(self.values).max(initial=0.0))
        return float((np.sum(np.abs(self.values) ** p) * self.cell_measure) ** (1.0 / p))

    def integral(self) -> float:
        return float(self.values.sum() * self.cell_measure)

    def inner(self, other: "CellFunction") -> float:
        """Unnormalized L^2 pairing int f g."""
        return float(np.dot(self.values, other.values) * self.cell_measure)

    def support(self) -> np.ndarray:
        return self.values != 0

    def __add__(self, other: "CellFunction") -> "CellFunction":
        return CellFunction(self.values + other.values, self.model)

    def __sub__(self, other: "CellFunction") -> "CellFunction":
        return CellFunction(self.values - other.values, self.model)

    def __mul__(self, a: float) -> "CellFunction":
        return CellFunction(self.values * a, self.model)

    __rmul__ = __mul__

    def __abs__(self) -> "CellFunction":
        return CellFunction(np.abs(self.values), self.model)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "value"])
        for i, v in enumerate(self.values):
            w.writerow([i, repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, model: SpaceModel) -> "CellFunction":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["cell", "value"]:
            raise ValueError("unexpected CSV header")
        values = np.zeros(model.n_cells)
        for cell, v in rows[1:]:
            values[int(cell)] = float(v)
        return cls(values, model)


Coeffs = list  # list of per-level float arrays, levels 0 .. J-1


@dataclass(frozen=True)
class HaarSystem:
    """One +-1 valued function per cube of level < J.

    h_A is +1 on the half of A whose coordinate along axis (lev A mod k) is
    smaller and -1 on the other half; for k = 1 this is the classical Haar
    function.
    """

    system: DyadicSystem
    sign_scheme: str = "FirstHalf"

    @property
    def model(self) -> SpaceModel:
        return self.system.model

    @property
    def levels(self) -> int:
        return self.system.J

    def split_axis(self, level: int) -> int:
        return level % self.system.k

    @cached_property
    def _signs(self) -> list[np.ndarray]:
        coords = self.model.cell_coords()
        J = self.system.J
        out = []
        for n in range(J):
            bit = (coords[:, self.split_axis(n)] >> (J - n - 1)) & 1
            out.append(1.0 - 2.0 * bit)
        return out

    def check(self, cube: Cube) -> None:
        self.system.check_cube(cube)
        if cube.level >= self.system.J:
            raise ValueError(f"no Haar function on finest-level cube {cube}")

    def function(self, cube: Cube) -> CellFunction:
        self.check(cube)
        lab = self.system.labels(cube.level)
        inside = lab == self.system.cube_index(cube)
        return CellFunction(np.where(inside, self._signs[cube.level], 0.0), self.model)

    def zero_coeffs(self) -> Coeffs:
        return [np.zeros((1 << n,) * self.system.k) for n in range(self.levels)]

    def synthesize(self, coeffs) -> CellFunction:
        """sum_A c_A h_A from per-level arrays or a {Cube: value} mapping."""
        if isinstance(coeffs, Mapping):
            coeffs = self.coeffs_from_mapping(coeffs)
        out = np.zeros(self.model.n_cells)
        for n, c in enumerate(coeffs):
            if c is None:
                continue
            c = np.asarray(c).ravel()
            if not c.any():
                continue
            out += c[self.system.labels(n)] * self._signs[n]
        return CellFunction(out, self.model)

    def analyze(self, f: CellFunction) -> Coeffs:
        """Normalized coefficients <f, h_A> = |A|^-1 int f h_A for all cubes of level < J."""
        out = []
        k = self.system.k
        for n in range(self.levels):
            lab = self.system.labels(n)
            per = 1 << ((self.system.J - n) * k)
            sums = np.bincount(lab, weights=f.values * self._signs[n], minlength=1 << (n * k))
            out.append((sums / per).reshape((1 << n,) * k))
        return out

    def coeffs_from_mapping(self, mapping: Mapping[Cube, float]) -> Coeffs:
        coeffs = self.zero_coeffs()
        for cube, v in mapping.items():
            self.check(cube)
            coeffs[cube.level][cube.coords] = v
        return coeffs

    def coeffs_to_mapping(self, coeffs: Coeffs, family: Iterable[Cube] | None = None) -> dict:
        if family is None:
            family = self.system.all_cubes(self.levels - 1)
        return {c: float(coeffs[c.level][c.coords]) for c in family}

    # -- certificates --------------------------------------------------------

    def constant_h2(self, pairs: Iterable[tuple[Cube, Cube]]) -> float:
        """Smallest C_h with ||h_Q||_inf <= C_h (|P| + |Q|)^-1 int |h_P| over the pairs."""
        worst = 0.0
        for P, Q in pairs:
            hp, hq = self.function(P), self.function(Q)
            mass = abs(hp).integral()
            ratio = hq.norm(np.inf) * float(P.measure() + Q.measure()) / mass
            worst = max(worst, ratio)
        return worst


def make_haar(system: DyadicSystem, sign_scheme: str = "FirstHalf") -> HaarSystem:
    if sign_scheme not in SIGN_SCHEMES:
        raise ValueError(f"unknown sign scheme {sign_scheme!r}")
    return HaarSystem(system, sign_scheme)


def analyze(haar: HaarSystem, f: CellFunction, family: Iterable[Cube] | None = None) -> dict:
    coeffs = haar.analyze(f)
    return haar.coeffs_to_mapping(coeffs, family)


def synthesize(haar: HaarSystem, coeffs) -> CellFunction:
    return haar.synthesize(coeffs)


def martingale_difference_report(haar: HaarSystem, cubes: Iterable[Cube]) -> dict:
    """(H1)/(M1) support, (M2) mean zero per cube, same-level disjointness.

    Mean zero on A is exactly E(h_A | sigma(Q_lev A)) = 0 because A is an atom
    of that sigma-algebra and h_A vanishes off A.
    """
    cubes = sorted(set(cubes))
    support = mean = overlap = 0
    system = haar.system
    seen: dict[int, np.ndarray] = {}
    for A in cubes:
        h = haar.function(A)
        a = system.cells(A).mask
        if np.any(h.support() & ~a):
            support += 1
        if h.values[a].sum() != 0:
            mean += 1
        lvl = seen.setdefault(A.level, np.zeros(system.model.n_cells, dtype=bool))
        if np.any(lvl & h.support()):
            overlap += 1
        lvl |= h.support()
    return {"cubes": len(cubes), "support_violations": support,
            "mean_violations": mean, "overlap_violations": overlap,
            "ok": support == mean == overlap == 0}


# ----------------------------------------------------------------------------
# filtrations


def atom_labels(generators: Sequence[Region], n_cells: int) -> np.ndarray:
    """Atoms of the sigma-algebra generated by finitely many sets.

    Two cells share an atom iff they lie in exactly the same generators.
    Labels are consecutive integers in order of first appearance.
    """
    if not generators:
        return np.zeros(n_cells, dtype=np.int64)
    member = np.stack([g.mask for g in generators], axis=1)
    packed = np.packbits(member, axis=1)
    keys = np.ascontiguousarray(packed).view(np.dtype((np.void, packed.shape[1]))).ravel()
    _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    # renumber by first occurrence so labels are deterministic and readable
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank[inv.ravel()].astype(np.int64)


class Filtration:
    """An increasing list of finite sigma-algebras, each stored by atom labels."""

    def __init__(self, labels: Sequence[np.ndarray], model: SpaceModel,
                 names: Sequence | None = None):
        self.labels = [np.asarray(l, dtype=np.int64) for l in labels]
        self.model = model
        self.names = list(names) if names is not None else list(range(len(self.labels)))

    @classmethod
    def from_generators(cls, families: Sequence[Sequence[Region]], model: SpaceModel,
                        names: Sequence | None = None, cumulative: bool = True) -> "Filtration":
        """Each entry lists generators of one sigma-algebra (accumulated if `cumulative`)."""
        labels = []
        acc: list[Region] = []
        for fam in families:
            acc = acc + list(fam) if cumulative else list(fam)
            labels.append(atom_labels(acc, model.n_cells))
        return cls(labels, model, names)

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, name) -> int:
        return self.names.index(name)

    def atoms(self, n: int) -> list[Region]:
        lab = self.labels[n]
        return [Region(lab == a, self.model.cell_measure) for a in range(int(lab.max()) + 1)]

    def atom_of(self, n: int, cells: np.ndarray) -> Region:
        """The atom containing the given (nonempty) cell set; raises if it spans several."""
        lab = self.labels[n]
        ids = np.unique(lab[cells])
        if len(ids) != 1:
            raise ValueError(f"cells span {len(ids)} atoms")
        return Region(lab == ids[0], self.model.cell_measure)

    def is_refining(self) -> bool:
        """Each atom of level n is a union of atoms of level n+1."""
        for coarse, fine in zip(self.labels, self.labels[1:]):
            pairs = np.unique(np.stack([fine, coarse]), axis=1)
            if pairs.shape[1] != len(np.unique(fine)):
                return False
        return True


def dyadic_filtration(system: DyadicSystem, levels: Iterable[int] | None = None) -> Filtration:
    levels = list(range(system.J + 1)) if levels is None else list(levels)
    return Filtration([system.labels(n) for n in levels], system.model, levels)


def conditional_expectation(f: CellFunction, filtration: Filtration, n: int) -> CellFunction:
    """E(f | F_n): the average of f over each atom (uniform cell measure)."""
    if not 0 <= n < len(filtration):
        raise IndexError(f"filtration has no level {n}")
    lab = filtration.labels[n]
    counts = np.bincount(lab)
    if np.any(counts == 0):
        raise ValueError("filtration has an empty atom")
    sums = np.bincount(lab, weights=f.values)
    return CellFunction((sums / counts)[lab], f.model)
