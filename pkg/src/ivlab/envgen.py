"""Synthetic multi-environment tasks.

Three task families share one latent structure: an invariant feature and a
spurious feature, both generated from the label, where only the spurious
mechanism depends on the environment.

* Shape-Texture regression: latents are angles on the unit circle, inputs
  ``[e^{i theta_inv}, e^{i theta_spu}]`` and label ``e^{i theta_y}``.
* Shape-Texture classification: inputs ``[sin theta_inv, sin theta_spu]``
  and label ``sign(sin theta_y)``.
* toy-CMNIST: two bits ``[z_inv, z_spu]`` and a +/-1 label.

Besides seeded samplers this module provides exact population objects:
closed-form second moments, the 8-point toy-CMNIST support, and a
Gauss-Legendre quadrature of the Shape-Texture classification law. All of
them are consumed by :mod:`ivlab.model` and :mod:`ivlab.invariance`.
"""

from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyDatasetError, InvalidInputError, UnsupportedClosedFormError

TWO_PI = 2.0 * np.pi

ST_REGRESSION_HEADER = (
    "env_id", "theta_y", "theta_inv", "theta_spu",
    "x0_re", "x0_im", "x1_re", "x1_im", "y_re", "y_im",
)
BINARY_HEADER = ("env_id", "x0", "x1", "y")


class Task(str, enum.Enum):
    ST_REGRESSION = "st-regression"
    ST_CLASSIFICATION = "st-classification"
    TOY_CMNIST = "toy-cmnist"


class Role(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class EnvSpec:
    """Generative parameters of one environment.

    ``p_inv``/``p_spu`` are the probabilities that the invariant/spurious
    latent keeps its relation to the label. ``sigma_*`` are angular noise
    widths and only matter for the Shape-Texture tasks.
    """

    p_inv: float
    p_spu: float
    task: Task = Task.ST_REGRESSION
    role: Role = Role.TRAIN
    sigma_inv: float = 0.0
    sigma_spu: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "role", Role(self.role))
        for name in ("p_inv", "p_spu"):
            p = getattr(self, name)
            if not (np.isfinite(p) and 0.0 <= p <= 1.0):
                raise InvalidInputError(f"{name} must lie in [0, 1], got {p!r}")
        for name in ("sigma_inv", "sigma_spu"):
            s = getattr(self, name)
            if not (np.isfinite(s) and s >= 0.0):
                raise InvalidInputError(f"{name} must be finite and >= 0, got {s!r}")

    @property
    def noiseless(self) -> bool:
        return self.sigma_inv == 0.0 and self.sigma_spu == 0.0


@dataclass(frozen=True)
class EnvSuite:
    name: str
    train: tuple
    test: tuple

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        if len(self.train) < 2:
            raise InvalidInputError("a suite needs at least two training environments")
        if len(self.test) < 1:
            raise InvalidInputError("a suite needs at least one test environment")
        envs = self.train + self.test
        if len({e.p_inv for e in envs}) != 1:
            raise InvalidInputError("p_inv must be shared by every environment of a suite")
        if len({e.task for e in envs}) != 1:
            raise InvalidInputError("all environments of a suite must share one task")

    @property
    def task(self) -> Task:
        return self.train[0].task

    @property
    def p_inv(self) -> float:
        return self.train[0].p_inv

    @property
    def envs(self) -> tuple:
        return self.train + self.test


@dataclass
class STLatents:
    """Shape-Texture latent angles, all wrapped to ``[-pi, pi)``."""

    theta_y: np.ndarray
    theta_inv: np.ndarray
    theta_spu: np.ndarray
    env_id: int = 0
    seed: Optional[int] = None

    @property
    def n(self) -> int:
        return len(self.theta_y)


@dataclass
class Dataset:
    """Inputs ``x`` (n, d) and labels ``y`` (n,) of one environment.

    Columns of ``x`` are ordered invariant features first, then spurious
    ones. ``weights`` turns the dataset into a discrete distribution (they
    sum to one); ``None`` means the empirical distribution. Population
    supports built by :func:`toy_cmnist_support` also carry the weights as
    exact fractions so that accuracies can be summed without rounding.
    """

    task: Task
    x: np.ndarray
    y: np.ndarray
    env_id: int = 0
    seed: Optional[int] = None
    weights: Optional[np.ndarray] = None
    latents: Optional[STLatents] = None
    exact_weights: Optional[tuple] = field(default=None, repr=False)
    d_inv: int = 1

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if len(self.y) == 0:
            raise EmptyDatasetError("dataset has no samples")
        if self.x.shape[0] != self.y.shape[0]:
            raise InvalidInputError("x and y disagree on the number of samples")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.x) or np.iscomplexobj(self.y)

    @property
    def z_inv(self) -> np.ndarray:
        return self.x[:, : self.d_inv]

    @property
    def z_spu(self) -> np.ndarray:
        return self.x[:, self.d_inv:]

    def probabilities(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.n, 1.0 / self.n)
        return self.weights


@dataclass
class PopulationMoments:
    """Second-order statistics of one environment.

    ``M_xx = Re E[x x^H]``, ``m_xy = Re E[x conj(y)]`` and
    ``m_yy = E[|y|^2]``. Real parts suffice because predictors have real
    weights. ``n_samples`` is set when the moments are Monte-Carlo estimates.
    """

    M_xx: np.ndarray
    m_xy: np.ndarray
    m_yy: float
    env: Optional[EnvSpec] = None
    n_samples: Optional[int] = None

    def __post_init__(self):
        self.M_xx = np.asarray(self.M_xx, dtype=float)
        self.m_xy = np.asarray(self.m_xy, dtype=float)
        self.m_yy = float(self.m_yy)


def wrap_angle(theta):
    """Map angles onto ``[-pi, pi)``."""
    out = np.mod(np.asarray(theta, dtype=float) + np.pi, TWO_PI) - np.pi
    return np.where(out >= np.pi, out - TWO_PI, out)


def env_rng(seed: int, env_id: int = 0) -> np.random.Generator:
    """Independent generator for environment ``env_id`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(env_id)]))


def _circular_uniform(rng, n):
    return TWO_PI * rng.random(n) - np.pi


def _check_n(n):
    if int(n) < 1:
        raise EmptyDatasetError(f"n must be >= 1, got {n!r}")
    return int(n)


def sample_st_latents(env: EnvSpec, n: int, seed: int, env_id: int = 0) -> STLatents:
    """Draw Shape-Texture latents.

    ``theta_y`` is circular uniform. Each latent copies ``theta_y`` plus
    Gaussian noise of width ``sigma_*`` with probability ``p_*`` and is an
    independent circular-uniform angle otherwise.
    """
    n = _check_n(n)
    rng = env_rng(seed, env_id)
    theta_y = _circular_uniform(rng, n)

    def child(p, sigma):
        tied = rng.random(n) < p
        free = _circular_uniform(rng, n)
        noise = rng.standard_normal(n)
        # sigma == 0 keeps theta_y bit-exact (wrapping would round it)
        copied = wrap_angle(theta_y + sigma * noise) if sigma > 0 else theta_y
        return np.where(tied, copied, free)

    theta_inv = child(env.p_inv, env.sigma_inv)
    theta_spu = child(env.p_spu, env.sigma_spu)
    return STLatents(theta_y, theta_inv, theta_spu, env_id=env_id, seed=seed)


def sign_pos(v):
    """Sign with ``sign(0) = +1``."""
    return np.where(np.asarray(v) >= 0, 1.0, -1.0)


def to_regression_io(latents: STLatents) -> Dataset:
    x = np.stack([np.exp(1j * latents.theta_inv), np.exp(1j * latents.theta_spu)], axis=1)
    y = np.exp(1j * latents.theta_y)
    return Dataset(Task.ST_REGRESSION, x, y, env_id=latents.env_id, seed=latents.seed, latents=latents)


def to_classification_io(latents: STLatents) -> Dataset:
    x = np.stack([np.sin(latents.theta_inv), np.sin(latents.theta_spu)], axis=1)
    y = sign_pos(np.sin(latents.theta_y))
    return Dataset(Task.ST_CLASSIFICATION, x, y, env_id=latents.env_id, seed=latents.seed, latents=latents)


def sample_toy_cmnist(env: EnvSpec, n: int, seed: int, env_id: int = 0) -> Dataset:
    n = _check_n(n)
    rng = env_rng(seed, env_id)
    z_inv = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    y = np.where(rng.random(n) < env.p_inv, z_inv, -z_inv)
    z_spu = np.where(rng.random(n) < env.p_spu, y, -y)
    return Dataset(Task.TOY_CMNIST, np.stack([z_inv, z_spu], axis=1), y, env_id=env_id, seed=seed)


def sample(env: EnvSpec, n: int, seed: int, env_id: int = 0) -> Dataset:
    """Sample a dataset of the environment's task."""
    if env.task is Task.TOY_CMNIST:
        return sample_toy_cmnist(env, n, seed, env_id)
    latents = sample_st_latents(env, n, seed, env_id)
    if env.task is Task.ST_REGRESSION:
        return to_regression_io(latents)
    return to_classification_io(latents)


_PRESETS = {
    "st-reg": (Task.ST_REGRESSION, 0.75, (1.0, 0.8), (0.0,)),
    "st-class": (Task.ST_CLASSIFICATION, 0.75, (1.0, 0.8), (0.0,)),
    "toy-cmnista": (Task.TOY_CMNIST, 0.75, (0.9, 0.8), (0.1,)),
    "toy-cmnistb": (Task.TOY_CMNIST, 0.9, (1.0, 0.8), (0.1,)),
}
_PRESET_ALIASES = {
    "streg": "st-reg", "stclass": "st-class",
    "toycmnista": "toy-cmnista", "toycmnistb": "toy-cmnistb",
}
PRESET_NAMES = tuple(_PRESETS)


def preset_suite(name: str) -> EnvSuite:
    """Named environment suites used throughout the experiments.

    The toy-CMNIST suites follow the reading where the second training
    probability belongs to the second environment.
    """
    key = str(name).lower().replace("_", "-")
    key = _PRESET_ALIASES.get(key.replace("-", ""), key)
    if key not in _PRESETS:
        raise InvalidInputError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
    task, p_inv, train_spu, test_spu = _PRESETS[key]
    train = [EnvSpec(p_inv, p, task, Role.TRAIN) for p in train_spu]
    test = [EnvSpec(p_inv, p, task, Role.TEST) for p in test_spu]
    return EnvSuite(key, train, test)


def population_moments(env: EnvSpec, mc_samples: Optional[int] = None, seed: int = 0) -> PopulationMoments:
    """Exact second moments of an environment.

    Closed forms exist for noiseless Shape-Texture regression and
    classification (inputs ``sin theta``) and for toy-CMNIST. Otherwise ``mc_samples`` must be given and the moments are
    estimated from a seeded sample of that size.
    """
    if env.task is Task.ST_REGRESSION and env.noiseless:
        c = env.p_inv * env.p_spu
        return PopulationMoments([[1.0, c], [c, 1.0]], [env.p_inv, env.p_spu], 1.0, env)
    if env.task is Task.ST_CLASSIFICATION and env.noiseless:
        # E[sin^2] = 1/2, E[|sin|] = 2/pi; free angles are independent of everything
        c = 0.5 * env.p_inv * env.p_spu
        k = 2.0 / np.pi
        return PopulationMoments([[0.5, c], [c, 0.5]], [k * env.p_inv, k * env.p_spu], 1.0, env)
    if env.task is Task.TOY_CMNIST:
        a, b = 2.0 * env.p_inv - 1.0, 2.0 * env.p_spu - 1.0
        return PopulationMoments([[1.0, a * b], [a * b, 1.0]], [a, b], 1.0, env)
    if mc_samples is None:
        raise UnsupportedClosedFormError(
            f"no closed-form moments for {env.task.value} with sigma="
            f"({env.sigma_inv}, {env.sigma_spu}); pass mc_samples for a Monte-Carlo estimate"
        )
    mom = empirical_moments(sample(env, mc_samples, seed))
    mom.env = env
    return mom


def empirical_moments(data: Dataset) -> PopulationMoments:
    p = data.probabilities()
    x, y = data.x, data.y
    M = np.real(np.einsum("n,ni,nj->ij", p, x, np.conj(x)))
    m = np.real(np.einsum("n,ni,n->i", p, x, np.conj(y)))
    m_yy = float(np.real(np.sum(p * np.abs(y) ** 2)))
    return PopulationMoments(M, m, m_yy, n_samples=data.n if data.weights is None else None)


def toy_cmnist_support(env: EnvSpec, env_id: int = 0) -> Dataset:
    """The 8-point joint law of ``(z_inv, y, z_spu)`` as a weighted dataset."""
    p_i, p_s = Fraction(env.p_inv), Fraction(env.p_spu)
    rows, probs = [], []
    for z_inv in (1, -1):
        for keep_i in (True, False):
            y = z_inv if keep_i else -z_inv
            for keep_s in (True, False):
                z_spu = y if keep_s else -y
                prob = Fraction(1, 2) * (p_i if keep_i else 1 - p_i) * (p_s if keep_s else 1 - p_s)
                rows.append((z_inv, z_spu, y))
                probs.append(prob)
    arr = np.asarray(rows, dtype=float)
    return Dataset(
        Task.TOY_CMNIST, arr[:, :2], arr[:, 2], env_id=env_id,
        weights=np.array([float(q) for q in probs]), exact_weights=tuple(probs),
    )


def st_classification_quadrature(env: EnvSpec, nodes: int = 32, env_id: int = 0) -> Dataset:
    """Weighted point set integrating the noiseless Shape-Texture classification law.

    Each latent is either tied to ``theta_y`` or independent of it, giving
    four mixture components. Every free angle is integrated with
    Gauss-Legendre rules on ``[-pi, 0]`` and ``[0, pi]`` separately, so the
    label discontinuity at ``sin theta_y = 0`` falls on a panel boundary and
    smooth integrands converge spectrally.
    """
    if env.task is not Task.ST_CLASSIFICATION:
        raise InvalidInputError("quadrature support is defined for st-classification only")
    if not env.noiseless:
        raise UnsupportedClosedFormError("quadrature assumes sigma_inv = sigma_spu = 0")
    g, gw = np.polynomial.legendre.leggauss(int(nodes))
    half = np.pi / 2.0
    theta = np.concatenate([half * g - half, half * g + half])
    wt = np.concatenate([gw, gw]) * half / TWO_PI  # sums to one
    s = np.sin(theta)
    lab = np.where(theta >= 0, 1.0, -1.0)

    xs, ys, ps = [], [], []
    p_i, p_s = env.p_inv, env.p_spu
    # both tied
    xs.append(np.stack([s, s], 1)); ys.append(lab); ps.append(p_i * p_s * wt)
    # invariant tied, spurious free
    S_y, S_f = np.meshgrid(s, s, indexing="ij")
    L_y = np.meshgrid(lab, lab, indexing="ij")[0]
    W2 = np.outer(wt, wt)
    xs.append(np.stack([S_y.ravel(), S_f.ravel()], 1)); ys.append(L_y.ravel()); ps.append(p_i * (1 - p_s) * W2.ravel())
    xs.append(np.stack([S_f.ravel(), S_y.ravel()], 1)); ys.append(L_y.ravel()); ps.append((1 - p_i) * p_s * W2.ravel())
    # both free: the label is independent of the inputs
    Fi, Fs = np.meshgrid(s, s, indexing="ij")
    for label in (1.0, -1.0):
        xs.append(np.stack([Fi.ravel(), Fs.ravel()], 1))
        ys.append(np.full(Fi.size, label))
        ps.append(0.5 * (1 - p_i) * (1 - p_s) * W2.ravel())

    x, y, p = np.concatenate(xs), np.concatenate(ys), np.concatenate(ps)
    keep = p > 0
    return Dataset(Task.ST_CLASSIFICATION, x[keep], y[keep], env_id=env_id, weights=p[keep])


def population_source(env: EnvSpec, env_id: int = 0, nodes: int = 32):
    """Exact population object for an environment.

    Moments for noiseless regression, the weighted 8-point support for
    toy-CMNIST and the quadrature point set for classification.
    """
    if env.task is Task.ST_REGRESSION:
        return population_moments(env)
    if env.task is Task.TOY_CMNIST:
        return toy_cmnist_support(env, env_id)
    return st_classification_quadrature(env, nodes, env_id)


def render_wave_image(theta_inv: float, theta_spu: float, size: int = 64,
                      cycles_lo: float = 2.0, cycles_hi: float = 8.0) -> np.ndarray:
    """Grayscale image of two superposed planar waves in ``[0, 1]``.

    The low-frequency wave is oriented along ``theta_inv`` (shape) and the
    high-frequency one along ``theta_spu`` (texture).
    """
    size = int(size)
    if size < 2:
        raise InvalidInputError("image size must be >= 2")
    k_lo = TWO_PI * cycles_lo / size
    k_hi = TWO_PI * cycles_hi / size
    r, c = np.mgrid[0:size, 0:size].astype(float)
    lo = np.sin(k_lo * (c * np.cos(theta_inv) + r * np.sin(theta_inv)))
    hi = np.sin(k_hi * (c * np.cos(theta_spu) + r * np.sin(theta_spu)))
    return 0.5 + 0.25 * lo + 0.25 * hi


def format_pgm(image: np.ndarray) -> str:
    """Plain (P2) 8-bit portable graymap text for an image in ``[0, 1]``."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(int)
    h, w = img.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(map(str, row)) for row in img]
    return "\n".join(lines) + "\n"


def parse_pgm(text: str) -> np.ndarray:
    tokens = [t for line in text.splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise InvalidInputError("not a plain PGM (P2) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4 : 4 + w * h], dtype=float)
    return vals.reshape(h, w) / maxval


def _fmt(v: float) -> str:
    return "%.17g" % v


def dataset_to_csv(datasets: Sequence[Dataset]) -> str:
    """Serialise datasets of one task to CSV text (one row per sample)."""
    datasets = list(datasets)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    task = datasets[0].task
    if task is Task.ST_REGRESSION:
        writer.writerow(ST_REGRESSION_HEADER)
        for d in datasets:
            lat = d.latents
            if lat is None:
                raise InvalidInputError("st-regression CSV needs latent angles")
            for k in range(d.n):
                x0, x1, y = d.x[k, 0], d.x[k, 1], d.y[k]
                writer.writerow([d.env_id] + [_fmt(v) for v in (
                    lat.theta_y[k], lat.theta_inv[k], lat.theta_spu[k],
                    x0.real, x0.imag, x1.real, x1.imag, y.real, y.imag)])
    else:
        writer.writerow(BINARY_HEADER)
        for d in datasets:
            for k in range(d.n):
                writer.writerow([d.env_id, _fmt(d.x[k, 0]), _fmt(d.x[k, 1]), _fmt(d.y[k])])
    return buf.getvalue()


def read_dataset_csv(path: os.PathLike | str) -> list:
    """Read a dataset CSV back into one :class:`Dataset` per ``env_id``."""
    arr = np.genfromtxt(path, delimiter=",", names=True)
    arr = np.atleast_1d(arr)
    cols = arr.dtype.names
    out = []
    for env_id in np.unique(arr["env_id"]).astype(int):
        rows = arr[arr["env_id"] == env_id]
        if "theta_y" in cols:
            lat = STLatents(rows["theta_y"], rows["theta_inv"], rows["theta_spu"], env_id=env_id)
            out.append(to_regression_io(lat))
        else:
            x = np.stack([rows["x0"], rows["x1"]], axis=1)
            binary = set(np.unique(x)) <= {-1.0, 1.0}
            task = Task.TOY_CMNIST if binary else Task.ST_CLASSIFICATION
            out.append(Dataset(task, x, rows["y"], env_id=env_id))
    return out
