"""Ground truth used to check the numerical machinery.

* closed-form constrained optima of noiseless Shape-Texture regression,
* exact expectations for toy-CMNIST by summing over its 8 outcomes,
* a grid brute-force search for constrained local minima,
* the rank test deciding whether the MRI-v1 constraint forces
  ``w_spu = 0`` in a linear model.

The closed forms and the enumeration are written out independently of
:mod:`ivlab.model` and :mod:`ivlab.invariance` so they can serve as oracles
for them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .envgen import EnvSpec, EnvSuite, Task, preset_suite
from .errors import DimensionError, InvalidInputError
from .invariance import ConstraintKind
from .model import LossKind, Weights
from .optimize import GridSpec, Problem, _chunk_size


@dataclass
class Solution:
    weights: Weights
    train_risk: float
    invariant: bool

    def to_dict(self):
        return {
            "w_inv": float(self.weights.w_inv[0]),
            "w_spu": float(self.weights.w_spu[0]),
            "train_risk": self.train_risk,
            "invariant": self.invariant,
        }


@dataclass
class SolutionSet:
    constraint: ConstraintKind
    solutions: list
    flags: list = field(default_factory=list)

    def points(self) -> np.ndarray:
        return np.array([s.weights.vector for s in self.solutions]).reshape(-1, 2)

    def to_dict(self):
        out = {"constraint": self.constraint.value, "solutions": [s.to_dict() for s in self.solutions]}
        if self.flags:
            out["flags"] = list(self.flags)
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def st_train_risk(w_inv: float, w_spu: float, p_inv: float, p_spu: Sequence[float]) -> float:
    """Mean over environments of ``E|o - y|^2`` for noiseless Shape-Texture regression."""
    return float(np.mean([
        w_inv**2 + w_spu**2 + 2 * w_inv * p_inv * w_spu * ps - 2 * (w_inv * p_inv + w_spu * ps) + 1
        for ps in p_spu
    ]))


def _suite_params(suite, p_inv, p_spu):
    if suite is not None:
        if isinstance(suite, str):
            suite = preset_suite(suite)
        if suite.task is not Task.ST_REGRESSION:
            raise InvalidInputError("closed-form optima exist for st-regression suites only")
        return suite.p_inv, tuple(e.p_spu for e in suite.train)
    return p_inv, tuple(p_spu)


def analytic_optima(kind: ConstraintKind, p_inv: float = 0.75, p_spu: Sequence[float] = (1.0, 0.8),
                    suite: Optional[EnvSuite] = None) -> SolutionSet:
    """Constrained optima of two-environment Shape-Texture regression.

    MRI-v1 forces ``w_spu = 0`` and leaves ``(p_inv, 0)``. The relaxed IRM
    constraint factors as ``w_spu (2 p_inv w_inv - 1) = 0`` giving a second,
    non-invariant optimum on ``w_inv = 1/(2 p_inv)``. Full IRM-v1 has four
    isolated roots; the pair off the axis needs ``2 p_inv^2 >= 1`` and is
    otherwise omitted with a flag.
    """
    kind = ConstraintKind(kind)
    p_i, p_s = _suite_params(suite, p_inv, p_spu)
    if len(p_s) != 2:
        raise DimensionError("closed forms cover exactly two training environments")
    if p_s[0] == p_s[1]:
        raise InvalidInputError("training environments must differ in p_spu")
    if not 0 < p_i <= 1:
        raise InvalidInputError("p_inv must lie in (0, 1]")

    flags = []
    half = 1.0 / (2.0 * p_i)
    if kind is ConstraintKind.MRI_V1:
        pts = [(p_i, 0.0)]
    elif kind is ConstraintKind.IRM_RELAXED:
        pts = [(p_i, 0.0), (half, (p_s[0] + p_s[1]) / 4.0)]
    elif kind is ConstraintKind.IRM_V1:
        pts = [(0.0, 0.0), (p_i, 0.0)]
        disc = 2.0 * p_i**2 - 1.0
        if disc < 0:
            flags.append(f"2*p_inv^2 - 1 = {disc:.6g} < 0: complex root pair omitted")
        elif disc == 0:
            pts.append((half, 0.0))
        else:
            r = math.sqrt(disc) / (2.0 * p_i)
            pts += [(half, r), (half, -r)]
    else:
        raise InvalidInputError(f"no closed form for {kind.value}")
    sols = [Solution(Weights([a], [b]), st_train_risk(a, b, p_i, p_s), b == 0.0) for a, b in pts]
    return SolutionSet(kind, sols, flags)


def _outcomes(env: EnvSpec):
    p_i, p_s = Fraction(env.p_inv), Fraction(env.p_spu)
    for z_inv in (1, -1):
        for keep_i in (True, False):
            y = z_inv if keep_i else -z_inv
            for keep_s in (True, False):
                z_spu = y if keep_s else -y
                prob = Fraction(1, 2) * (p_i if keep_i else 1 - p_i) * (p_s if keep_s else 1 - p_s)
                yield z_inv, z_spu, y, prob


def enumerate_population(env: EnvSpec, w, loss: LossKind = LossKind.BCE) -> dict:
    """Exact risk, accuracy and per-environment constraint values for toy-CMNIST.

    Returns a dict with keys ``risk``, ``accuracy``, ``irm`` (``E[(sigma(o)-y) o]``)
    and ``mri`` (``E[(-o + rho(y)) y]``). The accuracy is summed in exact
    rational arithmetic.
    """
    if env.task is not Task.TOY_CMNIST:
        raise InvalidInputError("enumeration is defined for toy-CMNIST environments")
    loss = LossKind(loss)
    wv = w.vector if isinstance(w, Weights) else np.asarray(w, dtype=float)
    w_i, w_s = float(wv[0]), float(wv[1])
    risk = irm = mri = 0.0
    acc = Fraction(0)
    for z_inv, z_spu, y, prob in _outcomes(env):
        o = w_i * z_inv + w_s * z_spu
        q = float(prob)
        if loss is LossKind.BCE:
            risk += q * (math.log1p(math.exp(-y * o)) if -y * o < 30 else -y * o + math.log1p(math.exp(y * o)))
            irm += q * (math.tanh(o / 2.0) - y) * o
            mri += q * (-o * y)
        else:
            risk += q * (o - y) ** 2
            irm += q * (o - y) * o
            mri += q * (y - o) * y
        if (1 if o >= 0 else -1) == y:
            acc += prob
    return {"risk": risk, "accuracy": float(acc), "irm": irm, "mri": mri}


def _local_minima(values: np.ndarray, feasible: np.ndarray) -> list:
    """Indices of feasible cells whose value is <= every feasible 8-neighbour.

    Adjacent minima (plateaus) are merged, keeping the lowest.
    """
    n0, n1 = values.shape
    big = np.where(feasible, values, np.inf)
    pad = np.pad(big, 1, constant_values=np.inf)
    is_min = feasible.copy()
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = pad[1 + di : 1 + di + n0, 1 + dj : 1 + dj + n1]
            is_min &= big <= nb
    idx = [tuple(ix) for ix in np.argwhere(is_min)]
    idx.sort(key=lambda ij: values[ij])
    kept = []
    for ij in idx:
        if all(max(abs(ij[0] - k[0]), abs(ij[1] - k[1])) > 1 for k in kept):
            kept.append(ij)
    return kept


def _scan(problem: Problem, grid: GridSpec, metric: str):
    pts = grid.points()
    size = _chunk_size(problem)
    L, cn = [], []
    for i in range(0, len(pts), size):
        W = pts[i : i + size]
        L.append(problem.train_risk(W)[0])
        c, J = problem.residual_terms(W)
        if metric == "distance":
            # Gauss-Newton step length: first-order distance to {c = 0}
            step = np.einsum("gdm,gm->gd", np.linalg.pinv(J, rcond=1e-12), c)
            cn.append(np.sqrt(np.sum(step * step, axis=1)))
        else:
            cn.append(np.sqrt(np.sum(c * c, axis=1)))
    L, cn = np.concatenate(L), np.concatenate(cn)
    shape = grid.resolution
    return L.reshape(shape), cn.reshape(shape), pts.reshape(*shape, 2)


def brute_force_constrained_min(problem: Problem, grid: GridSpec, tol: float,
                                refine: int = 0, refine_resolution: int = 41,
                                metric: str = "residual") -> list:
    """Grid search for local minima of the train risk on ``||c|| < tol``.

    ``metric="distance"`` replaces ``||c||`` by the first-order distance
    ``||pinv(J) c||`` to the constraint set, which keeps feasible patches about
    ``tol`` wide even where the constraint gradient is small or the curves
    are nearly tangent.

    With ``refine > 0`` each minimum is re-searched ``refine`` times on a
    finer grid spanning +/-2 cells around it; ``tol`` shrinks with the cell
    size so feasible patches contract onto the constraint set. Returns
    :class:`Weights` sorted by train risk; an empty feasible set gives ``[]``.
    """
    if metric not in ("residual", "distance"):
        raise InvalidInputError(f"unknown metric {metric!r}")
    L, cn, P = _scan(problem, grid, metric)
    found = [(P[ij], L[ij]) for ij in _local_minima(L, cn < tol)]
    step = np.array(grid.steps)
    for _ in range(int(refine)):
        sub_step = 4.0 * step / (refine_resolution - 1)
        sub_tol = tol * max(sub_step) / max(step)
        refined = []
        for w, val in found:
            sub = GridSpec((w[0] - 2 * step[0], w[0] + 2 * step[0]),
                           (w[1] - 2 * step[1], w[1] + 2 * step[1]), refine_resolution)
            Ls, cs, Ps = _scan(problem, sub, metric)
            feas = cs < sub_tol
            if not feas.any():
                refined.append((w, val))
                continue
            ij = np.unravel_index(np.argmin(np.where(feas, Ls, np.inf)), Ls.shape)
            refined.append((Ps[ij], Ls[ij]))
        found, step, tol = refined, sub_step, sub_tol
    # drop duplicates produced by refinement
    out = []
    for w, val in sorted(found, key=lambda t: t[1]):
        if all(np.max(np.abs(w - u)) > 1e-9 for u, _ in out):
            out.append((w, val))
    return [Weights.from_vector(w) for w, _ in out]


def verify_optima(solutions: SolutionSet, problem: Problem, grid: GridSpec, tol: Optional[float] = None,
                  refine: int = 3, metric: str = "distance") -> dict:
    """Match every analytic optimum to the nearest brute-force minimum.

    Deviations are reported in absolute units and in coarse-grid cells.
    """
    if tol is None:
        tol = max(grid.steps)
    found = brute_force_constrained_min(problem, grid, tol, refine=refine, metric=metric)
    cell = max(grid.steps)
    rows = []
    for s in solutions.solutions:
        target = s.weights.vector
        if found:
            d = [float(np.max(np.abs(f.vector - target))) for f in found]
            k = int(np.argmin(d))
            rows.append({"w": target.tolist(), "nearest": found[k].vector.tolist(),
                         "deviation": d[k], "cells": d[k] / cell})
        else:
            rows.append({"w": target.tolist(), "nearest": None, "deviation": math.inf, "cells": math.inf})
    return {
        "grid_cell": cell,
        "tol": tol,
        "metric": metric,
        "n_found": len(found),
        "found": [f.vector.tolist() for f in found],
        "matches": rows,
        "max_cells": max((r["cells"] for r in rows), default=0.0),
    }


@dataclass
class MomentMatrix:
    """Columns are ``E_e[z_spu y]`` for each training environment (d_spu x n_envs)."""

    M: np.ndarray

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))

    @property
    def centered(self) -> np.ndarray:
        return self.M - self.M.mean(axis=1, keepdims=True)

    @classmethod
    def from_suite(cls, suite: EnvSuite) -> "MomentMatrix":
        if suite.task is Task.TOY_CMNIST:
            col = [2 * e.p_spu - 1 for e in suite.train]
        elif suite.task is Task.ST_REGRESSION:
            col = [e.p_spu for e in suite.train]
        else:
            col = [e.p_spu * 2 / math.pi for e in suite.train]  # E[sin(theta) sign(sin theta)]
        return cls(np.array([col]))


@dataclass
class Theorem1Result:
    rank: int
    nullspace_dim: int
    invariance_forced: bool
    singular_values: np.ndarray

    def to_dict(self):
        return {"rank": self.rank, "nullspace_dim": self.nullspace_dim,
                "invariance_forced": self.invariance_forced,
                "singular_values": self.singular_values.tolist()}


def numerical_rank(s: np.ndarray, shape) -> int:
    """Count singular values above ``1e-10 * s_max * max(shape)``."""
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > 1e-10 * s[0] * max(shape)))


def theorem1_check(M) -> Theorem1Result:
    """Does ``w_spu . M' = 0`` force ``w_spu = 0``?

    ``M'`` is the moment matrix with its across-environment mean removed.
    The only solution is zero exactly when ``rank(M') = d_spu``, which needs
    more training environments than spurious dimensions.
    """
    mm = M if isinstance(M, MomentMatrix) else MomentMatrix(M)
    if mm.M.size == 0:
        raise InvalidInputError("moment matrix is empty")
    Mc = mm.centered
    s = np.linalg.svd(Mc, compute_uv=False)
    r = numerical_rank(s, Mc.shape)
    d = Mc.shape[0]
    return Theorem1Result(r, d - r, r == d, s)


def random_moment_matrices(d_spu: int, n_envs: int, trials: int, seed: int = 0) -> np.ndarray:
    """``trials`` random moment matrices with entries ~ U(-1, 1)."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, (int(trials), int(d_spu), int(n_envs)))


def theorem1_trials(d_spu: int, n_envs: int, trials: int, seed: int = 0) -> dict:
    """Fraction of random environment configurations for which invariance is forced."""
    Ms = random_moment_matrices(d_spu, n_envs, trials, seed)
    Mc = Ms - Ms.mean(axis=2, keepdims=True)
    S = np.linalg.svd(Mc, compute_uv=False)
    forced = np.array([numerical_rank(s, (d_spu, n_envs)) == d_spu for s in S])
    return {"d_spu": int(d_spu), "n_envs": int(n_envs), "trials": int(trials), "seed": int(seed),
            "forced": int(forced.sum()), "forced_fraction": float(forced.mean())}
