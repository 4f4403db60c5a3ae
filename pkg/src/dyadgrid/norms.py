"""L^p operator norms of Haar rearrangements and stripe operators.

An operator is evaluated on V = span{h_A : A in its domain}. Functions in
V are parameterized by their coefficient vectors, so applying an operator,
its adjoint and the projection onto V all cost O(levels * cells). For p = 2
the norm is computed exactly by power iteration; for other p a nonlinear
power method returns a lower bound together with the witness function that
attains it.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cubes import Cube, DyadicSystem
from .haar import CellFunction, HaarSystem
from .shift import decompose, make_axis_shift, select_ell
from .stripe import StripeFunctions


class NonConvergenceError(RuntimeError):
    """Power iteration hit its iteration cap before reaching the tolerance."""


class DepthError(ValueError):
    """The model is too shallow for the requested parameters."""


def _flat_index(system: DyadicSystem, cubes: Sequence[Cube]) -> np.ndarray:
    if not cubes:
        return np.zeros(0, dtype=np.int64)
    n = cubes[0].level
    coords = np.array([c.coords for c in cubes]).T
    return np.ravel_multi_index(tuple(coords), (1 << n,) * system.k).astype(np.int64)


class HaarSpanOperator:
    """Base class: coefficient vectors over a finite set of Haar functions.

    `domain` lists (level, flat cube indices); a coefficient vector is the
    concatenation of the per-level blocks in that order.
    """

    descriptor = "operator"

    def __init__(self, haar: HaarSystem, domain: Sequence[tuple[int, np.ndarray]], factor: float = 1.0):
        self.haar = haar
        self.system = haar.system
        self.model = haar.model
        self.factor = float(factor)
        self.domain = [(int(n), np.asarray(idx, dtype=np.int64)) for n, idx in domain if len(idx)]
        self.slices = []
        off = 0
        for _, idx in self.domain:
            self.slices.append(slice(off, off + len(idx)))
            off += len(idx)
        self.dim = off
        k = self.system.k
        self.weights = np.concatenate([np.full(len(idx), 2.0 ** (-n * k)) for n, idx in self.domain]) \
            if self.domain else np.zeros(0)

    # -- V <-> coefficients ---------------------------------------------------

    def _spread(self, n: int, idx: np.ndarray, block: np.ndarray) -> np.ndarray:
        full = np.zeros(1 << (n * self.system.k))
        full[idx] = block
        return full[self.system.labels(n)]

    def synth(self, c: np.ndarray) -> CellFunction:
        out = np.zeros(self.model.n_cells)
        for (n, idx), sl in zip(self.domain, self.slices):
            out += self._spread(n, idx, c[sl]) * self.haar._signs[n]
        return CellFunction(out, self.model)

    def _integrals(self, n: int, values: np.ndarray, signs: np.ndarray) -> np.ndarray:
        """int values * signs over every level-n cube (measure-weighted)."""
        return np.bincount(self.system.labels(n), weights=values * signs,
                           minlength=1 << (n * self.system.k)) * float(self.model.cell_measure)

    def project(self, f: CellFunction) -> np.ndarray:
        """Normalized coefficients <f, h_A> for A in the domain (orthogonal projection onto V)."""
        c = np.zeros(self.dim)
        for (n, idx), sl in zip(self.domain, self.slices):
            c[sl] = self._integrals(n, f.values, self.haar._signs[n])[idx] / 2.0 ** (-n * self.system.k)
        return c

    # -- to be provided ---------------------------------------------------------

    def apply(self, c: np.ndarray) -> CellFunction:
        raise NotImplementedError

    def adjoint(self, w: CellFunction) -> np.ndarray:
        """a_A = int (T h_A) w for every domain cube."""
        raise NotImplementedError

    def image_norms(self, p: float) -> np.ndarray:
        """||T h_A||_p for every domain cube."""
        raise NotImplementedError

    # -- derived ------------------------------------------------------------------

    def ratio(self, c: np.ndarray, p: float) -> float:
        nf = self.synth(c).norm(p)
        return self.apply(c).norm(p) / nf if nf > 0 else 0.0

    def upper_bound_sum(self, p: float) -> float:
        """sum_A ||T h_A||_p ||h_A||_p' / |A|, an upper bound for the norm on V."""
        if self.dim == 0:
            return 0.0
        dual = self.weights ** (1.0 - 1.0 / p)  # ||h_A||_{p'} for +-1 valued h_A
        return float(np.sum(self.image_norms(p) * dual / self.weights))


class ShiftOperator(HaarSpanOperator):
    """h_P -> factor * h_Q along a level-preserving injective relation."""

    def __init__(self, haar: HaarSystem, pairs: Sequence[tuple[Cube, Cube]], factor: float = 1.0,
                 descriptor: str = "shift"):
        by_level: dict[int, list[tuple[Cube, Cube]]] = {}
        for P, Q in pairs:
            haar.check(P)
            haar.check(Q)
            if P.level != Q.level:
                raise ValueError("shift pairs must preserve the level")
            by_level.setdefault(P.level, []).append((P, Q))
        domain, targets = [], []
        for n in sorted(by_level):
            ps = sorted(by_level[n])
            src = _flat_index(haar.system, [P for P, _ in ps])
            dst = _flat_index(haar.system, [Q for _, Q in ps])
            if len(set(src.tolist())) != len(src) or len(set(dst.tolist())) != len(dst):
                raise ValueError("shift operator needs a bijective relation on each level")
            domain.append((n, src))
            targets.append(dst)
        super().__init__(haar, domain, factor)
        self.targets = targets
        self.descriptor = descriptor

    def apply(self, c: np.ndarray) -> CellFunction:
        out = np.zeros(self.model.n_cells)
        for (n, _), dst, sl in zip(self.domain, self.targets, self.slices):
            out += self._spread(n, dst, c[sl]) * self.haar._signs[n]
        return CellFunction(out * self.factor, self.model)

    def adjoint(self, w: CellFunction) -> np.ndarray:
        a = np.zeros(self.dim)
        for (n, _), dst, sl in zip(self.domain, self.targets, self.slices):
            a[sl] = self._integrals(n, w.values, self.haar._signs[n])[dst]
        return a * self.factor

    def image_norms(self, p: float) -> np.ndarray:
        return abs(self.factor) * self.weights ** (1.0 / p)


class StripeOperator(HaarSpanOperator):
    """h_A -> g^(m)_A for every A with lev A + lambda < J."""

    def __init__(self, functions: StripeFunctions, m: int, descriptor: str | None = None):
        fam = functions.family
        if not 1 <= m <= fam.M:
            raise ValueError(f"stripe index {m} outside 1..{fam.M}")
        if functions.max_level < 0:
            raise DepthError(f"lambda {fam.lam} leaves no level with Haar functions on stripes")
        sysm = functions.system
        domain = [(n, np.arange(1 << (n * sysm.k))) for n in range(functions.max_level + 1)]
        super().__init__(functions.haar, domain)
        self.functions = functions
        self.m = m
        self.descriptor = descriptor or f"stripe(lambda={fam.lam},m={m})"
        self._on = [fam.cell_stripe(n) == m for n, _ in self.domain]
        lam = fam.lam
        self._g_signs = [np.where(on, self.haar._signs[n + lam], 0.0) for on, (n, _) in zip(self._on, self.domain)]

    def apply(self, c: np.ndarray) -> CellFunction:
        out = np.zeros(self.model.n_cells)
        for (n, idx), sl, gs in zip(self.domain, self.slices, self._g_signs):
            out += self._spread(n, idx, c[sl]) * gs
        return CellFunction(out, self.model)

    def adjoint(self, w: CellFunction) -> np.ndarray:
        a = np.zeros(self.dim)
        for (n, idx), sl, gs in zip(self.domain, self.slices, self._g_signs):
            a[sl] = self._integrals(n, w.values, gs)[idx]
        return a

    def image_norms(self, p: float) -> np.ndarray:
        out = []
        cm = float(self.model.cell_measure)
        for (n, idx), on in zip(self.domain, self._on):
            size = np.bincount(self.system.labels(n), weights=on.astype(float),
                               minlength=1 << (n * self.system.k))[idx] * cm
            out.append(size ** (1.0 / p))
        return np.concatenate(out)


# ----------------------------------------------------------------------------
# estimates


@dataclass
class NormEstimate:
    p: float
    value: float
    kind: str  # "Exact2" or "LowerBound"
    restarts: int
    iterations: int
    residual: float
    seed: list = field(default_factory=list)
    descriptor: str = ""
    witness: np.ndarray | None = field(default=None, repr=False)
    upper_bound: float = math.nan
    converged: bool = True

    def witness_function(self, op: HaarSpanOperator) -> CellFunction:
        if self.witness is None:
            raise ValueError("estimate carries no witness")
        return op.synth(self.witness)


def restart_seed(descriptor: str, p: float, restart: int) -> int:
    digest = hashlib.sha256(f"{descriptor}|{p!r}|{restart}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _start_vector(op: HaarSpanOperator, descriptor: str, p: float, r: int) -> np.ndarray:
    if r == 0:
        # deterministic start: unit-L^infinity-ish coefficients on every domain cube
        return np.ones(op.dim)
    rng = np.random.default_rng(restart_seed(descriptor, p, r))
    c = rng.standard_normal(op.dim)
    if r % 2 == 0:
        c *= rng.random(op.dim) < 0.2
        if not c.any():
            c[int(rng.integers(op.dim))] = 1.0
    return c


def opnorm_exact_2(op: HaarSpanOperator, restarts: int = 4, tol: float = 1e-10,
                   max_iter: int = 20_000) -> NormEstimate:
    """Largest singular value by power iteration on W^-1/2 G W^-1/2 (G the Gram matrix of T h_A)."""
    if op.dim == 0:
        return NormEstimate(2.0, 0.0, "Exact2", 0, 0, 0.0, [], op.descriptor)
    sq = np.sqrt(op.weights)
    best, best_u, total_it, resid, seeds = -1.0, None, 0, math.inf, []
    converged_all = True
    for r in range(restarts + 1):
        seeds.append(0 if r == 0 else restart_seed(op.descriptor, 2.0, r))
        u = _start_vector(op, op.descriptor, 2.0, r) * sq
        u /= np.linalg.norm(u)
        rho_prev = None
        converged = False
        for it in range(1, max_iter + 1):
            v = op.adjoint(op.apply(u / sq)) / sq
            rho = float(u @ v)
            nv = np.linalg.norm(v)
            total_it += 1
            if nv == 0:
                rho = 0.0
                converged = True
                break
            u = v / nv
            if rho_prev is not None and abs(rho - rho_prev) <= tol * max(abs(rho), 1e-300):
                converged = True
                resid = float(np.linalg.norm(v - rho * (v / nv)) / nv) if nv else 0.0
                break
            rho_prev = rho
        converged_all &= converged
        if rho > best:
            best, best_u = rho, u.copy()
    if not converged_all:
        raise NonConvergenceError(f"power iteration for {op.descriptor} did not reach tol {tol}")
    value = math.sqrt(max(best, 0.0))
    return NormEstimate(2.0, value, "Exact2", restarts, total_it, resid, seeds, op.descriptor,
                        best_u / sq if best_u is not None else None)


def opnorm_lower_p(op: HaarSpanOperator, p: float, restarts: int = 4, seed: int | None = None,
                   tol: float = 1e-7, max_iter: int = 500,
                   starts: Sequence[np.ndarray] = ()) -> NormEstimate:
    """Nonlinear power method on V; the value is ||T f||_p / ||f||_p for the returned witness f.

    One step: normalize f, y = T f, w = |y|^(p-1) sign y, represent T* w in
    V, apply the dual map of exponent p' and project back onto V. Restart r
    uses seed hash(descriptor, p, r) unless `seed` overrides the descriptor.
    """
    if not (1 < p < math.inf):
        raise ValueError(f"p must lie in (1, inf), got {p}")
    if op.dim == 0:
        return NormEstimate(p, 0.0, "LowerBound", 0, 0, 0.0, [], op.descriptor)
    q = p / (p - 1)
    desc = op.descriptor if seed is None else f"{op.descriptor}#{seed}"
    best, best_c = -1.0, None
    total_it = 0
    resid = math.inf
    seeds = []
    initial = [np.asarray(s, dtype=float) for s in starts]
    for r in range(restarts + 1):
        seeds.append(0 if r == 0 else restart_seed(desc, p, r))
        initial.append(_start_vector(op, desc, p, r))
    for c in initial:
        prev = None
        for it in range(max_iter):
            f = op.synth(c)
            nf = f.norm(p)
            if nf == 0:
                break
            c = c / nf
            y = op.apply(c)
            val = y.norm(p)
            total_it += 1
            if val > best:
                best, best_c = val, c.copy()
            if prev is not None and abs(val - prev) <= tol * max(val, 1e-300):
                resid = abs(val - prev) / max(val, 1e-300)
                break
            prev = val
            if val == 0:
                break
            w = CellFunction(np.sign(y.values) * np.abs(y.values) ** (p - 1), op.model)
            zeta = op.synth(op.adjoint(w) / op.weights)
            dual = CellFunction(np.sign(zeta.values) * np.abs(zeta.values) ** (q - 1), op.model)
            c = op.project(dual)
            if not c.any():
                break
    value = op.ratio(best_c, p) if best_c is not None else 0.0
    return NormEstimate(p, value, "LowerBound", restarts, total_it, resid, seeds, op.descriptor,
                        best_c, op.upper_bound_sum(p))


def random_search(op: HaarSpanOperator, p: float, samples: int, seed: int = 0,
                  batch: int = 256) -> float:
    """Best ratio over random coefficient vectors (a crude baseline)."""
    rng = np.random.default_rng(seed)
    best = 0.0
    for start in range(0, samples, batch):
        for _ in range(min(batch, samples - start)):
            c = rng.standard_normal(op.dim)
            best = max(best, op.ratio(c, p))
    return best


# ----------------------------------------------------------------------------
# sweeps


def shift_norm_curve(system: DyadicSystem, haar: HaarSystem, m_list: Sequence[int], p: float,
                     ell_policy="beta", C_R: float = 4.0, classes: bool = True,
                     restarts: int = 2, class_restarts: int = 1, axis: int = 0,
                     seed: int | None = None) -> list[dict]:
    """Rows (m, class, norm, kind) for the full span and, optionally, every class."""
    rows = []
    for m in m_list:
        tau = make_axis_shift(system, m, axis)
        if ell_policy == "beta":
            ell, beta = select_ell(system, tau.m_param, C_R)
        else:
            ell, beta = int(ell_policy), math.nan
        if ell > system.J - 1:
            raise DepthError(f"depth {system.J} is insufficient for ell = {ell} (m = {m})")
        full = ShiftOperator(haar, tau.pairs, descriptor=f"shift(m={m},axis={axis},J={system.J})")
        est = opnorm_exact_2(full) if p == 2 else opnorm_lower_p(full, p, restarts, seed)
        rows.append({"m": m, "class": "full", "ell": ell, "beta": beta, "norm": est.value,
                     "kind": est.kind, "estimate": est, "operator": full})
        if not classes:
            continue
        dec = decompose(system, tau, C_R, ell)
        for key in sorted(dec.level_classes()):
            op = ShiftOperator(haar, dec.class_pairs(key),
                               descriptor=f"shift(m={m},axis={axis},J={system.J},class={key})")
            est = opnorm_exact_2(op) if p == 2 else opnorm_lower_p(op, p, class_restarts, seed)
            rows.append({"m": m, "class": "%d.%d.%d" % key, "ell": ell, "beta": beta,
                         "norm": est.value, "kind": est.kind, "estimate": est, "operator": op})
    return rows


def stripe_norm_curve(system: DyadicSystem, haar: HaarSystem, lam_list: Sequence[int], p: float,
                      m: int = 1, restarts: int = 4, seed: int | None = None) -> list[dict]:
    """Rows (lambda, M, norm) with the type/cotype envelope exponents for scalar L^p."""
    from .stripe import make_classical_stripes, make_stripe_functions

    T, C = min(2.0, p), max(2.0, p)
    rows = []
    for lam in lam_list:
        if lam < 1:
            raise ValueError("lambda must be a positive integer")
        if lam + 1 > system.J:
            raise DepthError(f"depth {system.J} is insufficient for lambda = {lam}")
        fam = make_classical_stripes(system, lam)
        op = StripeOperator(make_stripe_functions(fam, haar), m)
        est = opnorm_exact_2(op) if p == 2 else opnorm_lower_p(op, p, restarts, seed)
        rows.append({"lambda": lam, "M": fam.M, "p": p, "norm": est.value, "kind": est.kind,
                     "envelope_upper_exponent": -1.0 / C, "envelope_lower_exponent": -1.0 / T,
                     "type": T, "cotype": C, "estimate": est, "operator": op})
    return rows


def write_csv_atomic(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    write_text_atomic(path, buf.getvalue())


def write_text_atomic(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
