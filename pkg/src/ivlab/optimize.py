"""Soft-constraint training and landscape evaluation.

The constrained problem ``min L_tr(w) s.t. c(w) = 0`` is relaxed either by a
quadratic penalty (PM)::

    L_tr(w) + mu * ||c(w)||^2

or by an augmented Lagrangian (ALM) that adds ``lambda . c(w)`` and moves
``lambda`` by ``lambda_step * c(w_t)`` after every iteration. Both are
minimised by full-batch first-order steps (SGD or Adam) with optional
global gradient-norm clipping.
"""

from __future__ import annotations

import enum
import io
import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import envgen
from ._parallel import n_threads
from .envgen import EnvSuite, PopulationMoments, Task
from .errors import InvalidInputError
from .invariance import ConstraintKind, residual_terms
from .model import LossKind, Weights, _as_batch, accuracy, as_vector, risk_terms

INIT_RANGE = (-1.5, 1.5)


class Method(str, enum.Enum):
    PM = "pm"
    ALM = "alm"


@dataclass(frozen=True)
class SGD:
    """Plain gradient descent, no momentum."""


@dataclass(frozen=True)
class Adam:
    beta1: float = 0.975
    beta2: float = 0.999
    eps: float = 1e-8


class _SGDState:
    def __init__(self, opt, dim):
        pass

    def step(self, w, g, lr):
        return w - lr * g


class _AdamState:
    def __init__(self, opt: Adam, dim):
        self.opt = opt
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, w, g, lr):
        b1, b2 = self.opt.beta1, self.opt.beta2
        self.t += 1
        self.m = b1 * self.m + (1.0 - b1) * g
        self.v = b2 * self.v + (1.0 - b2) * g * g
        m_hat = self.m / (1.0 - b1**self.t)
        v_hat = self.v / (1.0 - b2**self.t)
        return w - lr * m_hat / (np.sqrt(v_hat) + self.opt.eps)


def _optimizer_state(opt, dim):
    if isinstance(opt, Adam):
        return _AdamState(opt, dim)
    if isinstance(opt, SGD):
        return _SGDState(opt, dim)
    raise InvalidInputError(f"unknown optimizer {opt!r}")


@dataclass
class Problem:
    """A constraint family bound to training and test environments.

    ``train`` and ``test`` hold per-environment sources: datasets (sampled or
    weighted population supports) or :class:`PopulationMoments`.
    """

    loss: LossKind
    constraint: ConstraintKind
    train: Sequence
    test: Sequence = ()
    basis: tuple = ()
    name: str = ""

    def __post_init__(self):
        self.loss = LossKind(self.loss)
        self.constraint = ConstraintKind(self.constraint)
        self.train = list(self.train)
        self.test = list(self.test)
        if len(self.train) < 2:
            raise InvalidInputError("at least two training environments are required")

    @property
    def dim(self) -> int:
        src = self.train[0]
        return src.m_xy.size if isinstance(src, PopulationMoments) else src.x.shape[1]

    def train_risk(self, w):
        """Unweighted mean of the per-environment risks, with gradient."""
        parts = [risk_terms(self.loss, w, e) for e in self.train]
        vals = sum(v for v, _ in parts) / len(parts)
        grads = sum(g for _, g in parts) / len(parts)
        return vals, grads

    def test_risks(self, w) -> np.ndarray:
        """Per-test-environment risks, shape ``(n_test,)`` or ``(G, n_test)``."""
        if not self.test:
            W, single = _as_batch(w)
            return np.zeros((0,)) if single else np.zeros((W.shape[0], 0))
        return np.stack([np.asarray(risk_terms(self.loss, w, e)[0]) for e in self.test], axis=-1)

    def residual_terms(self, w, kind: Optional[ConstraintKind] = None):
        return residual_terms(kind or self.constraint, self.loss, w, self.train, self.basis)

    def with_constraint(self, kind) -> "Problem":
        return replace(self, constraint=ConstraintKind(kind))


def default_loss(task: Task) -> LossKind:
    return LossKind.SQUARE if Task(task) is Task.ST_REGRESSION else LossKind.BCE


def make_problem(suite: Union[EnvSuite, str], constraint=ConstraintKind.MRI_V1, *,
                 data: str = "population", n: int = 40000, seed: int = 0,
                 loss: Optional[LossKind] = None, basis=(), nodes: int = 32) -> Problem:
    """Build a :class:`Problem` from a suite.

    ``data="population"`` uses exact population sources (moments,
    enumeration or quadrature); ``data="sample"`` draws ``n`` samples per
    environment, with environment ``k`` seeded by ``(seed, k)``.
    """
    if isinstance(suite, str):
        suite = envgen.preset_suite(suite)
    envs = suite.envs
    if data == "population":
        sources = [envgen.population_source(e, env_id=k, nodes=nodes) for k, e in enumerate(envs)]
    elif data == "sample":
        sources = [envgen.sample(e, n, seed, env_id=k) for k, e in enumerate(envs)]
    else:
        raise InvalidInputError(f"data must be 'population' or 'sample', got {data!r}")
    k = len(suite.train)
    return Problem(loss or default_loss(suite.task), constraint, sources[:k], sources[k:],
                   tuple(basis), name=suite.name)


def objective_terms(method: Method, w, lam, mu: float, problem: Problem):
    """Soft-constraint objective and gradient.

    PM: ``L_tr + mu ||c||^2``; ALM additionally ``+ lam . c``.
    """
    method = Method(method)
    L, gL = problem.train_risk(w)
    c, J = problem.residual_terms(w)
    obj = L + mu * np.sum(c * c, axis=-1)
    grad = gL + 2.0 * mu * np.einsum("...m,...md->...d", c, J)
    if method is Method.ALM and lam is not None:
        lam = np.asarray(lam, dtype=float)
        obj = obj + np.sum(lam * c, axis=-1)
        grad = grad + np.einsum("m,...md->...d", lam, J)
    return obj, grad


def objective(method: Method, w, lam, mu: float, problem: Problem):
    return objective_terms(method, w, lam, mu, problem)[0]


def objective_grad(method: Method, w, lam, mu: float, problem: Problem):
    return objective_terms(method, w, lam, mu, problem)[1]


@dataclass
class TrainConfig:
    """Hyper-parameters of one training run.

    ``init=None`` draws the start point uniformly from ``init_range`` per
    coordinate using ``seed``. ``lambda_step=None`` means ``2 * mu``.
    ``mu_growth`` multiplies ``mu`` after each step (1.0 keeps it constant).
    """

    method: Method = Method.PM
    mu: float = 5e4
    lambda0: Optional[Sequence[float]] = None
    optimizer: Union[SGD, Adam] = field(default_factory=Adam)
    lr: float = 5e-3
    steps: int = 2000
    clip_norm: Optional[float] = 2.0
    seed: int = 0
    init: Optional[Union[Weights, Sequence[float]]] = None
    init_range: tuple = INIT_RANGE
    mu_growth: float = 1.0
    lambda_step: Optional[float] = None
    converge_tol: float = 1e-9

    def __post_init__(self):
        self.method = Method(self.method)
        if not self.mu >= 0:
            raise InvalidInputError("mu must be >= 0")
        if self.method is Method.ALM and self.mu <= 0:
            raise InvalidInputError("ALM requires mu > 0")
        if not self.lr > 0:
            raise InvalidInputError("lr must be > 0")
        if int(self.steps) < 0:
            raise InvalidInputError("steps must be >= 0")
        if self.clip_norm is not None and self.clip_norm < 0:
            raise InvalidInputError("clip_norm must be >= 0")

    def initial_weights(self, dim: int) -> np.ndarray:
        if self.init is not None:
            w = as_vector(self.init).copy()
            if w.size != dim:
                raise InvalidInputError(f"init has {w.size} entries, problem has {dim}")
            return w
        lo, hi = self.init_range
        return np.random.default_rng(self.seed).uniform(lo, hi, dim)


@dataclass
class Trajectory:
    """Per-step record of a training run, including the initial point."""

    weights: np.ndarray
    risk_train: np.ndarray
    risk_test: np.ndarray
    residuals: np.ndarray
    c_norm_sq: np.ndarray
    lambdas: np.ndarray
    objective: np.ndarray
    grad_norm: np.ndarray
    grad_norm_clipped: np.ndarray
    diverged: bool = False
    converged_at: Optional[int] = None
    config: Optional[TrainConfig] = None

    def __len__(self):
        return len(self.risk_train)

    @property
    def final_weights(self) -> np.ndarray:
        return self.weights[-1]

    @property
    def final_c_norm(self) -> float:
        return float(np.sqrt(self.c_norm_sq[-1]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        d = self.weights.shape[1]
        wcols = ["w_inv", "w_spu"] if d == 2 else [f"w_{k}" for k in range(d)]
        m = self.lambdas.shape[1]
        writer.writerow(["step", *wcols, "risk_train", "risk_test", "c_norm_sq", "grad_norm",
                         *[f"lambda_{k}" for k in range(m)]])
        test = self.risk_test.mean(axis=1) if self.risk_test.shape[1] else np.full(len(self), np.nan)
        for t in range(len(self)):
            row = [*self.weights[t], self.risk_train[t], test[t], self.c_norm_sq[t],
                   self.grad_norm[t], *self.lambdas[t]]
            writer.writerow([t] + ["%.17g" % v for v in row])
        return buf.getvalue()


def train(config: TrainConfig, problem: Problem) -> Trajectory:
    """Run ``config.steps`` full-batch iterations and record every iterate.

    A non-finite objective or gradient stops the run; the trajectory is then
    truncated at the last finite record and flagged ``diverged``.
    """
    dim = problem.dim
    w = config.initial_weights(dim)
    c0 = problem.residual_terms(w)[0]
    m = c0.size
    lam = np.zeros(m) if config.lambda0 is None else np.broadcast_to(
        np.asarray(config.lambda0, dtype=float), (m,)).copy()
    opt = _optimizer_state(config.optimizer, dim)
    alm = config.method is Method.ALM
    mu = float(config.mu)

    rec = {k: [] for k in ("w", "L", "Lt", "c", "lam", "obj", "gn", "gnc")}
    diverged, converged_at = False, None
    for t in range(int(config.steps) + 1):
        with np.errstate(all="ignore"):
            L, gL = problem.train_risk(w)
            c, J = problem.residual_terms(w)
            obj = L + mu * c @ c + (lam @ c if alm else 0.0)
            g = gL + 2.0 * mu * (J.T @ c) + (J.T @ lam if alm else 0.0)
        if not (np.isfinite(obj) and np.all(np.isfinite(g))):
            diverged = True
            break
        gn = float(np.linalg.norm(g))
        if config.clip_norm is not None and gn > config.clip_norm:
            g = g * (config.clip_norm / gn)
        rec["w"].append(w.copy()); rec["L"].append(L); rec["Lt"].append(problem.test_risks(w))
        rec["c"].append(c); rec["lam"].append(lam.copy()); rec["obj"].append(obj)
        rec["gn"].append(gn); rec["gnc"].append(float(np.linalg.norm(g)))
        if t == config.steps:
            break
        w_new = opt.step(w, g, config.lr)
        if alm:
            step = 2.0 * mu if config.lambda_step is None else config.lambda_step
            lam = lam + step * c
        if converged_at is None and np.linalg.norm(w_new - w) < config.converge_tol:
            converged_at = t + 1
        w = w_new
        mu *= config.mu_growth

    n_test = len(problem.test)
    res = np.array(rec["c"]).reshape(-1, m)
    return Trajectory(
        weights=np.array(rec["w"]).reshape(-1, dim),
        risk_train=np.array(rec["L"], dtype=float),
        risk_test=np.array(rec["Lt"], dtype=float).reshape(-1, n_test),
        residuals=res,
        c_norm_sq=np.sum(res * res, axis=1),
        lambdas=np.array(rec["lam"]).reshape(-1, m),
        objective=np.array(rec["obj"], dtype=float),
        grad_norm=np.array(rec["gn"]),
        grad_norm_clipped=np.array(rec["gnc"]),
        diverged=diverged,
        converged_at=converged_at,
        config=config,
    )


def train_many(config: TrainConfig, problem: Problem, inits: Sequence) -> list:
    """Train from several start points (parallel when ``IVLAB_THREADS`` > 1)."""
    configs = [replace(config, init=np.asarray(as_vector(w0), dtype=float)) for w0 in inits]
    workers = n_threads()
    if workers <= 1:
        return [train(c, problem) for c in configs]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(lambda c: train(c, problem), configs))


def random_inits(n: int, dim: int = 2, seed: int = 0, init_range=INIT_RANGE) -> np.ndarray:
    lo, hi = init_range
    return np.random.default_rng(seed).uniform(lo, hi, (int(n), dim))


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid over ``(w_inv, w_spu)``; endpoints included."""

    w_inv: tuple = INIT_RANGE
    w_spu: tuple = INIT_RANGE
    resolution: Union[int, tuple] = 201

    def __post_init__(self):
        res = self.resolution
        res = (int(res), int(res)) if np.isscalar(res) else tuple(int(r) for r in res)
        object.__setattr__(self, "resolution", res)
        if min(res) < 2:
            raise InvalidInputError("grid resolution must be >= 2")
        for lo, hi in (self.w_inv, self.w_spu):
            if not lo < hi:
                raise InvalidInputError("grid ranges need lo < hi")

    @property
    def axes(self):
        return (np.linspace(*self.w_inv, self.resolution[0]),
                np.linspace(*self.w_spu, self.resolution[1]))

    @property
    def steps(self):
        return ((self.w_inv[1] - self.w_inv[0]) / (self.resolution[0] - 1),
                (self.w_spu[1] - self.w_spu[0]) / (self.resolution[1] - 1))

    def points(self) -> np.ndarray:
        a, b = self.axes
        A, B = np.meshgrid(a, b, indexing="ij")
        return np.stack([A.ravel(), B.ravel()], axis=1)


QUANTITIES = (
    "risk_train", "risk_test", "accuracy_train", "accuracy_test",
    "irm_sq_residual", "irm_relaxed_sq_residual", "mri_sq_residual", "objective",
)
_ALIASES = {"accuracy": ("accuracy_train", "accuracy_test")}


def expand_quantities(quantities) -> tuple:
    out = []
    for q in quantities:
        for name in _ALIASES.get(q, (q,)):
            if name not in QUANTITIES:
                raise InvalidInputError(f"unknown landscape quantity {q!r}; choose from {QUANTITIES}")
            if name not in out:
                out.append(name)
    return tuple(out)


@dataclass
class Landscape:
    """Quantities on a grid; arrays are indexed ``[i_inv, i_spu]``."""

    grid: GridSpec
    values: dict

    @property
    def w_inv(self):
        return self.grid.axes[0]

    @property
    def w_spu(self):
        return self.grid.axes[1]

    def __getitem__(self, name):
        return self.values[name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = list(self.values)
        writer.writerow(["w_inv", "w_spu", *names])
        pts = self.grid.points()
        cols = [self.values[n].ravel() for n in names]
        for k, (a, b) in enumerate(pts):
            writer.writerow(["%.17g" % v for v in (a, b, *(c[k] for c in cols))])
        return buf.getvalue()


def _mean_accuracy(W, sources):
    if all(getattr(s, "exact_weights", None) is not None for s in sources):
        # average in rationals so that equal accuracies stay bit-identical
        total = sum(accuracy(W, s, exact=True) for s in sources)
        return (total / len(sources)).astype(float)
    return np.mean([accuracy(W, s) for s in sources], axis=0)


def evaluate_points(W: np.ndarray, quantities, problem: Problem, mu: float = 0.0) -> dict:
    """Evaluate landscape quantities at a ``(G, d)`` batch of weights."""
    out = {}
    for q in quantities:
        if q == "risk_train":
            out[q] = problem.train_risk(W)[0]
        elif q == "risk_test":
            out[q] = problem.test_risks(W).mean(axis=1)
        elif q == "accuracy_train":
            out[q] = _mean_accuracy(W, problem.train)
        elif q == "accuracy_test":
            out[q] = _mean_accuracy(W, problem.test)
        elif q.endswith("_sq_residual"):
            kind = {"irm": ConstraintKind.IRM_V1, "irm_relaxed": ConstraintKind.IRM_RELAXED,
                    "mri": ConstraintKind.MRI_V1}[q[: -len("_sq_residual")]]
            c = problem.residual_terms(W, kind)[0]
            out[q] = np.sum(c * c, axis=1)
        elif q == "objective":
            out[q] = objective_terms(Method.PM, W, None, mu, problem)[0]
    return out


def _chunk_size(problem: Problem) -> int:
    src = problem.train[0]
    n = 1 if isinstance(src, PopulationMoments) else src.n
    return max(1, int(2_000_000 // n))


def landscape(grid: GridSpec, quantities: Sequence[str], problem: Problem, mu: float = 0.0) -> Landscape:
    """Evaluate quantities at every grid point (chunked, optionally threaded)."""
    names = expand_quantities(quantities)
    pts = grid.points()
    size = _chunk_size(problem)
    chunks = [pts[i : i + size] for i in range(0, len(pts), size)]
    work = lambda W: evaluate_points(W, names, problem, mu)  # noqa: E731
    workers = n_threads()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    values = {n: np.concatenate([p[n] for p in parts]).reshape(grid.resolution) for n in names}
    return Landscape(grid, values)
