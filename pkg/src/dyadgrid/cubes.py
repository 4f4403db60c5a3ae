"""Dyadic cubes on the torus model, regions, diamonds and boundary layers.

A cube of level n is the half-open box prod [c_i 2^-n, (c_i + 1) 2^-n).
Regions are sets of finest cells; a cell belongs to a neighbourhood of a
cube when its center does. Distances from a cube to a point are computed
against the exact box, so the only discretization is the choice of the
cell center as the representative point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .model import SpaceModel, pairwise_distance


class Cube(NamedTuple):
    level: int
    coords: tuple[int, ...]

    def parent(self) -> "Cube":
        return Cube(self.level - 1, tuple(c >> 1 for c in self.coords))

    def ancestor(self, level: int) -> "Cube":
        shift = self.level - level
        if shift < 0:
            raise ValueError(f"{self} has no ancestor at finer level {level}")
        return Cube(level, tuple(c >> shift for c in self.coords))

    def children(self) -> list["Cube"]:
        k = len(self.coords)
        out = []
        for bits in range(1 << k):
            out.append(Cube(self.level + 1, tuple(
                2 * c + ((bits >> (k - 1 - i)) & 1) for i, c in enumerate(self.coords))))
        return out

    def contains(self, other: "Cube") -> bool:
        return other.level >= self.level and other.ancestor(self.level) == self

    def side(self) -> float:
        return 2.0 ** -self.level

    def measure(self) -> Fraction:
        return Fraction(1, 1 << (self.level * len(self.coords)))

    def center(self) -> np.ndarray:
        return (np.asarray(self.coords, dtype=float) + 0.5) * 2.0 ** -self.level

    def to_json(self) -> list:
        return [self.level, list(self.coords)]

    @classmethod
    def from_json(cls, obj) -> "Cube":
        return cls(int(obj[0]), tuple(int(c) for c in obj[1]))


class Region:
    """An immutable set of finest cells with exact measure."""

    __slots__ = ("mask", "cell_measure", "_key")

    def __init__(self, mask: np.ndarray, cell_measure: Fraction):
        mask = np.asarray(mask, dtype=bool).ravel()
        if mask.flags.writeable:
            mask = mask.copy()
            mask.flags.writeable = False
        self.mask = mask
        self.cell_measure = cell_measure
        self._key = None

    @classmethod
    def empty(cls, n_cells: int, cell_measure: Fraction) -> "Region":
        return cls(np.zeros(n_cells, dtype=bool), cell_measure)

    @classmethod
    def from_cells(cls, cells: Iterable[int], n_cells: int, cell_measure: Fraction) -> "Region":
        mask = np.zeros(n_cells, dtype=bool)
        mask[np.fromiter(cells, dtype=np.int64)] = True
        return cls(mask, cell_measure)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def measure(self) -> Fraction:
        return self.count * self.cell_measure

    def cells(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def is_empty(self) -> bool:
        return not self.mask.any()

    def __or__(self, other: "Region") -> "Region":
        return Region(self.mask | other.mask, self.cell_measure)

    def __and__(self, other: "Region") -> "Region":
        return Region(self.mask & other.mask, self.cell_measure)

    def __sub__(self, other: "Region") -> "Region":
        return Region(self.mask & ~other.mask, self.cell_measure)

    def __le__(self, other: "Region") -> bool:
        return not np.any(self.mask & ~other.mask)

    def __ge__(self, other: "Region") -> bool:
        return other <= self

    def intersects(self, other: "Region") -> bool:
        return bool(np.any(self.mask & other.mask))

    def _hash_key(self) -> bytes:
        if self._key is None:
            self._key = np.packbits(self.mask).tobytes()
        return self._key

    def __eq__(self, other) -> bool:
        if not isinstance(other, Region):
            return NotImplemented
        return self.mask.shape == other.mask.shape and self._hash_key() == other._hash_key()

    def __hash__(self) -> int:
        return hash(self._hash_key())

    def __repr__(self) -> str:
        return f"Region(cells={self.count}, measure={self.measure})"


def union_all(regions: Iterable[Region], n_cells: int, cell_measure: Fraction) -> Region:
    mask = np.zeros(n_cells, dtype=bool)
    for r in regions:
        mask |= r.mask
    return Region(mask, cell_measure)


# ----------------------------------------------------------------------------
# per-axis geometry


def _axis_centers(side: int) -> np.ndarray:
    return (np.arange(side) + 0.5) / side


def _box_gap_1d(points: np.ndarray, lo: float, width: float) -> np.ndarray:
    """Torus distance from points to the half-open arc [lo, lo + width)."""
    if width >= 1.0:
        return np.zeros_like(points)
    u = (points - lo) % 1.0
    return np.where(u < width, 0.0, np.minimum(u - width, 1.0 - u))


def _complement_gap_1d(points: np.ndarray, lo: float, width: float) -> np.ndarray:
    """Distance from points inside [lo, lo + width) to the outside of that arc."""
    if width >= 1.0:
        return np.full_like(points, np.inf)
    u = (points - lo) % 1.0
    return np.minimum(u, width - u)


def _outer_max(per_axis: list[np.ndarray]) -> np.ndarray:
    out = per_axis[0]
    for arr in per_axis[1:]:
        out = np.maximum(out[..., None], arr)
    return out.ravel()


def _outer_min(per_axis: list[np.ndarray]) -> np.ndarray:
    out = per_axis[0]
    for arr in per_axis[1:]:
        out = np.minimum(out[..., None], arr)
    return out.ravel()


def _outer_and(per_axis: list[np.ndarray]) -> np.ndarray:
    out = per_axis[0]
    for arr in per_axis[1:]:
        out = out[..., None] & arr
    return out.ravel()


@dataclass(frozen=True)
class DyadicSystem:
    """The dyadic cube hierarchy on a model with certified constants."""

    model: SpaceModel
    C_1: float
    C_2: float
    C_3: float
    eta: float
    N: int
    certificate: dict = field(default_factory=dict, repr=False, compare=False)

    # -- enumeration ---------------------------------------------------------

    @property
    def J(self) -> int:
        return self.model.J

    @property
    def k(self) -> int:
        return self.model.k

    @property
    def q(self) -> float:
        return self.model.q

    def cubes(self, level: int) -> Iterator[Cube]:
        for idx in np.ndindex(*((1 << level,) * self.k)):
            yield Cube(level, tuple(int(i) for i in idx))

    def all_cubes(self, max_level: int | None = None) -> Iterator[Cube]:
        top = self.J if max_level is None else max_level
        for n in range(top + 1):
            yield from self.cubes(n)

    def cube_index(self, cube: Cube) -> int:
        return int(np.ravel_multi_index(cube.coords, (1 << cube.level,) * self.k))

    def cube_at(self, level: int, index: int) -> Cube:
        coords = np.unravel_index(index, (1 << level,) * self.k)
        return Cube(level, tuple(int(c) for c in coords))

    def labels(self, level: int) -> np.ndarray:
        """Index of the level-n cube containing each finest cell."""
        return self._labels[level]

    @cached_property
    def _labels(self) -> list[np.ndarray]:
        coords = self.model.cell_coords()
        out = []
        for n in range(self.J + 1):
            c = coords >> (self.J - n)
            out.append(np.ravel_multi_index(tuple(c.T), (1 << n,) * self.k).astype(np.int64))
        return out

    def check_cube(self, cube: Cube) -> None:
        if not 0 <= cube.level <= self.J or len(cube.coords) != self.k:
            raise ValueError(f"not a cube of this system: {cube}")
        if any(not 0 <= c < (1 << cube.level) for c in cube.coords):
            raise ValueError(f"coordinates out of range: {cube}")

    # -- regions -------------------------------------------------------------

    def empty_region(self) -> Region:
        return Region.empty(self.model.n_cells, self.model.cell_measure)

    def full_region(self) -> Region:
        return Region(np.ones(self.model.n_cells, dtype=bool), self.model.cell_measure)

    def region(self, mask) -> Region:
        return Region(mask, self.model.cell_measure)

    def cells(self, cube: Cube) -> Region:
        side = self.model.side
        shift = self.J - cube.level
        axes = []
        for c in cube.coords:
            a = np.zeros(side, dtype=bool)
            a[c << shift:(c + 1) << shift] = True
            axes.append(a)
        return self.region(_outer_and(axes))

    def union_of_cubes(self, cubes: Iterable[Cube]) -> Region:
        mask = np.zeros(self.model.n_cells, dtype=bool)
        for c in cubes:
            mask |= self.cells(c).mask
        return self.region(mask)

    def measure(self, cube: Cube) -> Fraction:
        return cube.measure()

    def center(self, cube: Cube) -> np.ndarray:
        return cube.center()

    def scale(self, cube: Cube) -> float:
        """q^(lev A)."""
        return self.q ** cube.level

    def distance_to_cube(self, cube: Cube) -> np.ndarray:
        """d(A, y) for every finest-cell center y (flat array)."""
        centers = _axis_centers(self.model.side)
        w = cube.side()
        gaps = [_box_gap_1d(centers, c * w, w) for c in cube.coords]
        g = _outer_max(gaps)
        return g * g if self.model.power == 2 else g

    def distance_to_complement(self, cube: Cube) -> np.ndarray:
        """d(x, X minus A) for cell centers x in A; +inf outside meaningful range."""
        centers = _axis_centers(self.model.side)
        w = cube.side()
        gaps = [_complement_gap_1d(centers, c * w, w) for c in cube.coords]
        g = _outer_min(gaps)
        return g * g if self.model.power == 2 else g

    def ball(self, x, r: float) -> Region:
        """Open ball B(x, r) as the cells whose centers lie in it."""
        x = np.asarray(x, dtype=float)
        d = pairwise_distance(self.model, self.model.cell_centers(), x[None, :])
        return self.region(d < r)

    def diamond(self, cube: Cube, r: float) -> Region:
        """r <> A = B(A, r q^lev A)."""
        if r <= 0:
            raise ValueError("diamond radius must be positive")
        return self.region(self.distance_to_cube(cube) < r * self.scale(cube))

    def boundary_layer(self, cube: Cube, t: float) -> Region:
        if t <= 0:
            raise ValueError("boundary width must be positive")
        inside = self.cells(cube).mask
        near = self.distance_to_complement(cube) <= t * self.scale(cube)
        return self.region(inside & near)

    def describe(self) -> dict:
        return {"C_1": self.C_1, "C_2": self.C_2, "C_3": self.C_3, "eta": self.eta, "N": self.N}


# ----------------------------------------------------------------------------
# construction and certification


def _half_grid(model: SpaceModel) -> np.ndarray:
    """Cell centers and cell corners together: the depth-(J+1) lattice points."""
    n = 2 * model.side
    return np.indices((n,) * model.k).reshape(model.k, -1).T / n


def _sample_in_cube(points: np.ndarray, cube: Cube) -> np.ndarray:
    w = cube.side()
    lo = np.asarray(cube.coords, dtype=float) * w
    return np.all((points >= lo) & (points < lo + w), axis=1)


def certify_ball_constants(model: SpaceModel, max_level: int | None = None) -> dict:
    """Largest inner and smallest outer ball ratios over cells and corners.

    Returns C_1 = min over sample points outside A of d(m_A, y) / q^n and
    C_2 = the least power of two strictly above max over sample points in A.
    The sample points include every cube corner, which are the extreme
    points for both metrics here.
    """
    top = model.J if max_level is None else max_level
    pts = _half_grid(model)
    inner = np.inf
    outer = 0.0
    for n in range(top + 1):
        scale = model.q ** n
        for idx in np.ndindex(*((1 << n,) * model.k)):
            cube = Cube(n, tuple(int(i) for i in idx))
            d = pairwise_distance(model, pts, cube.center()[None, :]) / scale
            inside = _sample_in_cube(pts, cube)
            outer = max(outer, float(d[inside].max()))
            if not inside.all():
                inner = min(inner, float(d[~inside].min()))
    C_2 = 2.0 ** (math.floor(math.log2(outer)) + 1)
    return {"C_1": inner, "C_2": C_2, "max_inside_ratio": outer}


def _boundary_ratio(system_like, model: SpaceModel, eta: float) -> tuple[float, int]:
    """max over cubes and t in {2^-j} of (|d_t A| - one cell) / (t^eta |A|)."""
    worst = -np.inf
    checked = 0
    cell = model.cell_measure
    for n in range(model.J + 1):
        for cube in system_like.cubes(n):
            inside = system_like.cells(cube).mask
            dist = system_like.distance_to_complement(cube)[inside]
            area = cube.measure()
            for j in range(0, model.J - n + 1):
                t = 2.0 ** -j
                count = int(np.count_nonzero(dist <= t * model.q ** n))
                excess = float(count * cell - cell) / (t ** eta * float(area))
                worst = max(worst, excess)
                checked += 1
    return worst, checked


def build_system(model: SpaceModel, max_certify_level: int | None = None) -> DyadicSystem:
    """Build the dyadic system and certify C_1, C_2, C_3, eta, N exhaustively.

    `max_certify_level` limits the ball-constant sweep (the most expensive
    part) for large models; translation invariance makes every level past
    the first few redundant, but the default is the full depth.
    """
    balls = certify_ball_constants(model, max_certify_level)
    eta = 1.0 / model.power
    provisional = DyadicSystem(model, balls["C_1"], balls["C_2"], 0.0, eta, 1 << model.k)
    worst, _ = _boundary_ratio(provisional, model, eta)
    # least integer c with |d_t A| < c t^eta |A| + one cell everywhere
    C_3 = float(max(1, math.floor(worst) + 1))
    N = max(len(c.children()) for c in provisional.cubes(0))
    cert = {"ball": balls, "boundary_worst_ratio": worst}
    return DyadicSystem(model, balls["C_1"], balls["C_2"], C_3, eta, N, cert)


def verify_system(system: DyadicSystem, max_level: int | None = None) -> dict:
    """Check all eight dyadic-cube properties; returns violation counts per item."""
    model = system.model
    J = system.J if max_level is None else max_level
    out: dict = {}

    # (1) partition of every level
    bad = 0
    for n in range(J + 1):
        lab = system.labels(n)
        counts = np.bincount(lab, minlength=1 << (n * system.k))
        bad += int(np.count_nonzero(counts != 1 << ((system.J - n) * system.k)))
        for cube in system.cubes(n):
            if not np.array_equal(system.cells(cube).mask, lab == system.cube_index(cube)):
                bad += 1
    out["1_partition"] = bad

    # (2) + (3): labels at level n determine labels at level n-1, and agree
    # with index arithmetic (parent = coords >> 1)
    bad2 = 0
    for n in range(1, J + 1):
        fine, coarse = system.labels(n), system.labels(n - 1)
        implied = np.full(1 << (n * system.k), -1, dtype=np.int64)
        implied[fine] = coarse
        again = implied[fine]
        bad2 += int(np.count_nonzero(again != coarse))
        for idx in range(1 << (n * system.k)):
            cube = system.cube_at(n, idx)
            if system.cube_index(cube.parent()) != implied[idx]:
                bad2 += 1
    out["2_nested"] = bad2
    out["3_unique_ancestor"] = bad2

    # (4) ball sandwich on cell sets
    bad4 = 0
    centers = model.cell_centers()
    for n in range(J + 1):
        scale = system.q ** n
        for cube in system.cubes(n):
            d = pairwise_distance(model, centers, cube.center()[None, :])
            a = system.cells(cube).mask
            inner = d < system.C_1 * scale
            outer = d < system.C_2 * scale
            if np.any(inner & ~a) or np.any(a & ~outer):
                bad4 += 1
    out["4_ball_sandwich"] = bad4

    # (5) boundary layer with one-cell slack
    bad5 = 0
    cell = model.cell_measure
    for n in range(J + 1):
        for cube in system.cubes(n):
            for j in range(0, system.J - n + 1):
                t = 2.0 ** -j
                layer = system.boundary_layer(cube, t)
                bound = system.C_3 * t ** system.eta * float(cube.measure()) + float(cell)
                if not float(layer.measure) < bound:
                    bad5 += 1
    out["5_boundary_layer"] = bad5

    # (6) countable: each level is finite here
    out["6_countable"] = 0

    # (7) + (8): children counts and exact covering by at most N children
    bad7 = bad8 = 0
    for n in range(min(J, system.J - 1) + 1):
        for cube in system.cubes(n):
            kids = cube.children()
            if len(kids) > system.N:
                bad7 += 1
            if system.union_of_cubes(kids) != system.cells(cube) or len(kids) > system.N:
                bad8 += 1
    out["7_children_bound"] = bad7
    out["8_child_cover"] = bad8
    out["constants"] = system.describe()
    out["ok"] = all(v == 0 for key, v in out.items() if key[0].isdigit())
    return out


# ----------------------------------------------------------------------------
# lemmas


def lemma_diamond_ball(system: DyadicSystem, cube: Cube, r: float) -> bool:
    """r<>A inside B(m_A, K_X (C_2 + r) q^lev A), cell by cell."""
    dia = system.diamond(cube, r)
    ball = system.ball(cube.center(), system.model.K_X * (system.C_2 + r) * system.scale(cube))
    return dia <= ball


def diamond_intersection_bound(system: DyadicSystem, A1: Cube, A2: Cube,
                               r1: float, r2: float) -> dict:
    """If r1<>A1 meets r2<>A2, check r2<>A2 inside r<>A1 for the enlarged radius.

    Requires lev A2 >= lev A1; the arguments are swapped (and reported) otherwise.
    """
    swapped = A2.level < A1.level
    if swapped:
        A1, A2, r1, r2 = A2, A1, r2, r1
    K = system.model.K_X
    r = 2 * K**3 * (system.C_2 + r2) * system.q ** (A2.level - A1.level) + K * r1
    d1, d2 = system.diamond(A1, r1), system.diamond(A2, r2)
    meets = d1.intersects(d2)
    verified = (d2 <= system.diamond(A1, r)) if meets else True
    return {"intersects": meets, "r": r, "inclusion_verified": bool(verified), "swapped": swapped}


def random_cube(system: DyadicSystem, rng: np.random.Generator, max_level: int | None = None) -> Cube:
    top = system.J if max_level is None else max_level
    n = int(rng.integers(0, top + 1))
    return Cube(n, tuple(int(c) for c in rng.integers(0, 1 << n, size=system.k)))


def max_center_distance(system: DyadicSystem, a_level: int, a_coords, b_level: int,
                        b_coords) -> np.ndarray:
    """max over cell centers y of B of d(A, y), vectorized over rows of coordinates.

    Row i pairs cube (a_level, a_coords[i]) with (b_level, b_coords[i]). The
    sup metric splits over axes, so the maximum over the product of arcs is
    the largest per-axis maximum; this equals the cell-by-cell computation.
    """
    a = np.atleast_2d(np.asarray(a_coords, dtype=np.int64))
    b = np.atleast_2d(np.asarray(b_coords, dtype=np.int64))
    side = system.model.side
    per = 1 << (system.J - b_level)
    steps = np.arange(per)
    wa = 2.0 ** -a_level
    out = np.zeros(len(a))
    for i in range(system.k):
        pts = ((b[:, i:i + 1] << (system.J - b_level)) + steps[None, :] + 0.5) / side
        if a_level == 0:
            gap = np.zeros_like(pts)
        else:
            u = (pts - a[:, i:i + 1] * wa) % 1.0
            gap = np.where(u < wa, 0.0, np.minimum(u - wa, 1.0 - u))
        out = np.maximum(out, gap.max(axis=1))
    return out * out if system.model.power == 2 else out


def cube_inside_diamond(system: DyadicSystem, A: Cube, B: Cube, r: float) -> bool:
    d = max_center_distance(system, A.level, [A.coords], B.level, [B.coords])[0]
    return bool(d < r * system.scale(A))
