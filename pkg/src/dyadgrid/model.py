"""Discretized model spaces: the k-torus cut into 2^(J k) finest cells."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

# cell indices are stored as int64 and distances as float64; dyadic
# rationals stay exact in float64 up to 2^-52, squares up to 2^-26 per axis
MAX_CELL_BITS = 26


class Kind(str, enum.Enum):
    TORUS_SUP = "TorusSup"
    TORUS_SQUARED = "TorusSquared"


@dataclass(frozen=True)
class SpaceModel:
    """A torus grid with its quasimetric and doubling constants."""

    kind: Kind
    k: int
    J: int
    K_X: float
    C_d: float
    q: float
    cell_measure: Fraction = field(repr=False)

    @property
    def side(self) -> int:
        return 1 << self.J

    @property
    def n_cells(self) -> int:
        return 1 << (self.J * self.k)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.k

    @property
    def power(self) -> int:
        """Exponent e with d = (torus sup distance)^e."""
        return 2 if self.kind is Kind.TORUS_SQUARED else 1

    def cell_coords(self) -> np.ndarray:
        """Integer grid coordinates of every cell, shape (n_cells, k)."""
        grids = np.indices(self.shape).reshape(self.k, -1)
        return grids.T.copy()

    def cell_centers(self) -> np.ndarray:
        return (self.cell_coords() + 0.5) / self.side

    def measure_of_count(self, count: int) -> Fraction:
        return count * self.cell_measure

    def describe(self) -> dict:
        return {
            "kind": self.kind.value,
            "k": self.k,
            "J": self.J,
            "K_X": self.K_X,
            "C_d": self.C_d,
            "q": self.q,
        }


def make_model(kind, k: int, J: int) -> SpaceModel:
    kind = Kind(kind)
    if k < 1:
        raise ValueError(f"dimension must be >= 1, got {k}")
    if J < 1:
        raise ValueError(f"depth must be >= 1, got {J}")
    if J > MAX_CELL_BITS or J * k > 40:
        raise ValueError(f"depth {J} too large for {k}-dimensional cell indices")
    if kind is Kind.TORUS_SQUARED:
        if k != 1:
            raise ValueError("TorusSquared is only defined for k = 1")
        K_X, q, C_d = 2.0, 0.25, 2.0
    else:
        K_X, q, C_d = 1.0, 0.5, float(2**k)
    return SpaceModel(kind, k, J, K_X, C_d, q, Fraction(1, 1 << (J * k)))


def torus_gap(x, y):
    """Coordinatewise wraparound distance on [0, 1)."""
    d = np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)) % 1.0
    return np.minimum(d, 1.0 - d)


def pairwise_distance(model: SpaceModel, x, y) -> np.ndarray:
    """Quasidistance between broadcastable point arrays of shape (..., k)."""
    g = torus_gap(x, y).max(axis=-1)
    return g * g if model.power == 2 else g


def quasidistance(model: SpaceModel, x, y) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != (model.k,) or y.shape != (model.k,):
        raise ValueError(f"points must have {model.k} coordinates")
    for p in (x, y):
        if np.any(p < 0.0) or np.any(p >= 1.0):
            raise ValueError(f"coordinates out of [0, 1): {p}")
    return float(pairwise_distance(model, x, y))


def quasitriangle_violations(model: SpaceModel, n_random: int = 100_000, seed: int = 0,
                             exhaustive_limit: int = 256) -> dict:
    """Check d(x,y) <= K_X (d(x,z) + d(z,y)) on cell centers.

    Exhaustive over all triples when there are at most `exhaustive_limit`
    cells, otherwise over `n_random` random triples.
    """
    pts = model.cell_centers()
    n = len(pts)
    if n <= exhaustive_limit:
        D = pairwise_distance(model, pts[:, None, :], pts[None, :, :])
        bad, worst = 0, -np.inf
        for x in range(n):
            # rhs[y, z] = K (d(x,z) + d(z,y))
            rhs = model.K_X * (D[x][None, :] + D.T)
            excess = D[x][:, None] - rhs
            bad += int((excess > 0).sum())
            worst = max(worst, float(excess.max()))
        sym = bool(np.array_equal(D, D.T))
        ident = bool(np.all((D == 0) == np.eye(n, dtype=bool)))
        return {"mode": "exhaustive", "triples": n**3, "violations": bad,
                "worst_excess": worst, "symmetric": sym, "identity": ident}
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_random, 3))
    x, y, z = pts[idx[:, 0]], pts[idx[:, 1]], pts[idx[:, 2]]
    dxy = pairwise_distance(model, x, y)
    rhs = model.K_X * (pairwise_distance(model, x, z) + pairwise_distance(model, z, y))
    sym = bool(np.array_equal(dxy, pairwise_distance(model, y, x)))
    ident = bool(np.all((dxy == 0) == (idx[:, 0] == idx[:, 1])))
    return {"mode": "random", "triples": n_random, "violations": int((dxy > rhs).sum()),
            "worst_excess": float((dxy - rhs).max()), "symmetric": sym, "identity": ident}


def ball_measure_counts(model: SpaceModel, radii) -> np.ndarray:
    """Half-cell counts of open balls centred at a cell center.

    Balls are counted on the depth J+1 grid, whose cell centers sit at odd
    multiples of half a finest cell from any depth-J center; for the sup
    metric and radii that are multiples of 2^-J this is the exact Lebesgue
    measure in units of 2^-((J+1) k). The torus is homogeneous, so one
    center represents all of them.
    """
    n_half = 2 * model.side
    offs = (np.arange(n_half) + 0.5) / n_half
    # distance from the center 0 to half-cell centers along one axis
    gap = np.minimum(offs, 1.0 - offs)
    if model.power == 2:
        gap = gap * gap
    counts = []
    for r in radii:
        per_axis = int(np.count_nonzero(gap < r))
        counts.append(per_axis**model.k)
    return np.array(counts, dtype=np.int64)


def doubling_report(model: SpaceModel) -> dict:
    """Doubling ratio |B(x,2r)| / |B(x,r)| over radii 2^-J .. 1/2.

    Every finest-cell center gives the same counts (translation invariance
    of the torus), which `centers_checked` records by recomputing around a
    sample of shifted centers.
    """
    radii = [2.0 ** -j for j in range(model.J, 0, -1)]
    small = ball_measure_counts(model, radii)
    big = ball_measure_counts(model, [2 * r for r in radii])
    ratios = big / small
    return {
        "radii": radii,
        "max_ratio": float(ratios.max()),
        "violations": int((ratios > model.C_d).sum()),
        "declared_C_d": model.C_d,
    }


def doubling_by_cells(model: SpaceModel, centers: np.ndarray, radii) -> np.ndarray:
    """Direct half-cell counting around explicit centers; shape (len(centers), len(radii)).

    Independent of `ball_measure_counts` (no translation-invariance shortcut).
    """
    n_half = 2 * model.side
    fine = (np.indices((n_half,) * model.k).reshape(model.k, -1).T + 0.5) / n_half
    out = np.empty((len(centers), len(radii)), dtype=np.int64)
    for i, c in enumerate(centers):
        d = pairwise_distance(model, fine, c[None, :])
        for j, r in enumerate(radii):
            out[i, j] = int(np.count_nonzero(d < r))
    return out
