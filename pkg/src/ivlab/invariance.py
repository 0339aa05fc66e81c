"""Invariance constraint functions and their Jacobians.

Each constraint maps predictor weights to a residual vector that vanishes
on the feasible set:

``IRM_V1``
    one residual per training environment, ``E_e[(sigma(o) - y) o]``.
``IRM_RELAXED``
    ``Q`` applied to the IRM-v1 vector: only between-environment
    differences are required to vanish.
``MRI_V1``
    ``Q`` applied to the per-environment ``E_e[(-o + rho(y)) y]``, which
    conserves ``E_e[o y]`` across environments.
``GENERALIZED_IRM``
    ``E_e[phi_i(o) (sigma(o) - y)]`` for every environment and every basis
    function ``phi_i`` of the output perturbation.

``Q`` is an orthonormal difference operator with ``Q 1 = 0`` (see
:func:`build_q`). Complex (circular) outputs contribute through the real part
of ``(.) conj(.)`` products.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .envgen import Dataset, PopulationMoments
from .errors import DimensionError, InvalidInputError, UnsupportedClosedFormError
from .model import LossKind, _as_batch, _finish, outputs


class ConstraintKind(str, enum.Enum):
    IRM_V1 = "irm-v1"
    IRM_RELAXED = "irm-relaxed"
    MRI_V1 = "mri-v1"
    GENERALIZED_IRM = "generalized-irm"


@dataclass(frozen=True)
class BasisFunction:
    """A perturbation basis function ``phi(o)`` with optional derivative.

    Without ``deriv`` the derivative is taken by central differences, which
    is adequate for evaluation but limits gradient accuracy to ~1e-8.
    """

    fn: Callable
    deriv: Optional[Callable] = None
    name: str = ""

    def __call__(self, o):
        return self.fn(o)

    def d(self, o):
        if self.deriv is not None:
            return self.deriv(o)
        h = 1e-6 * np.maximum(1.0, np.abs(o))
        return (self.fn(o + h) - self.fn(o - h)) / (2.0 * h)


def monomial_basis(degree: int) -> tuple:
    """``o, o^2, ..., o^degree``; degree 1 reproduces IRM-v1 per environment."""
    return tuple(
        BasisFunction(lambda o, k=k: o**k, lambda o, k=k: k * o ** (k - 1), name=f"o^{k}")
        for k in range(1, degree + 1)
    )


def _basis(basis) -> tuple:
    out = []
    for b in basis or ():
        if isinstance(b, BasisFunction):
            out.append(b)
        elif isinstance(b, tuple):
            out.append(BasisFunction(*b))
        else:
            out.append(BasisFunction(b))
    return tuple(out)


def build_q(n_envs: int) -> np.ndarray:
    """Helmert difference matrix of shape ``(n_envs - 1, n_envs)``.

    Row ``k`` (1-based) holds ``k`` entries ``1/sqrt(k(k+1))`` followed by
    ``-k/sqrt(k(k+1))`` and zeros, so rows are orthonormal and sum to zero.
    """
    n = int(n_envs)
    if n < 2:
        raise InvalidInputError("Q needs at least two environments")
    Q = np.zeros((n - 1, n))
    for k in range(1, n):
        s = 1.0 / np.sqrt(k * (k + 1))
        Q[k - 1, :k] = s
        Q[k - 1, k] = -k * s
    return Q


def residual_dim(kind: ConstraintKind, n_envs: int, n_basis: int = 0) -> int:
    kind = ConstraintKind(kind)
    if kind is ConstraintKind.IRM_V1:
        return n_envs
    if kind is ConstraintKind.GENERALIZED_IRM:
        return n_envs * n_basis
    return n_envs - 1


def _dlink(kind, o):
    if kind is LossKind.SQUARE:
        return np.ones_like(o)
    t = np.tanh(o / 2.0)
    return 0.5 * (1.0 - t * t)


def _irm_terms(loss, W, src):
    """``E[(sigma(o) - y) o]`` and its gradient for a weight batch."""
    if isinstance(src, PopulationMoments):
        if loss is not LossKind.SQUARE:
            raise UnsupportedClosedFormError("moment path requires the square loss")
        vals = np.einsum("gi,ij,gj->g", W, src.M_xx, W) - W @ src.m_xy
        return vals, 2.0 * W @ src.M_xx - src.m_xy
    p = src.probabilities()
    o = outputs(W, src.x)
    y = src.y[:, None]
    if loss is LossKind.SQUARE:
        vals = p @ np.real((o - y) * np.conj(o))
        grads = np.real((p[:, None] * (2.0 * np.conj(o) - np.conj(y))).T @ src.x)
        return vals, grads
    _require_real(src)
    t = np.tanh(o / 2.0)
    vals = p @ ((t - y) * o)
    grads = (p[:, None] * (t - y + o * 0.5 * (1.0 - t * t))).T @ src.x
    return vals, grads


def _mri_terms(loss, W, src):
    """``E[(-o + rho(y)) conj(y)]`` and its (w-independent) gradient."""
    G = W.shape[0]
    if isinstance(src, PopulationMoments):
        if loss is not LossKind.SQUARE:
            raise UnsupportedClosedFormError("moment path requires the square loss")
        return src.m_yy - W @ src.m_xy, np.broadcast_to(-src.m_xy, (G, src.m_xy.size)).copy()
    p = src.probabilities()
    o = outputs(W, src.x)
    y = src.y[:, None]
    if loss is LossKind.SQUARE:
        vals = p @ (np.abs(y) ** 2 - np.real(o * np.conj(y)))
        g = -np.real((p * np.conj(src.y)) @ src.x)
    else:
        _require_real(src)
        vals = -(p @ (o * y))
        g = -((p * src.y) @ src.x)
    return vals, np.broadcast_to(g, (G, g.size)).copy()


def _generalized_terms(loss, W, src, basis):
    if isinstance(src, PopulationMoments):
        raise UnsupportedClosedFormError("generalized IRM needs a (weighted) dataset")
    _require_real(src)
    p = src.probabilities()
    o = outputs(W, src.x)
    y = src.y[:, None]
    s = o if loss is LossKind.SQUARE else np.tanh(o / 2.0)
    ds = _dlink(loss, o)
    vals, grads = [], []
    for phi in basis:
        f = phi(o)
        vals.append(p @ (f * (s - y)))
        grads.append((p[:, None] * (phi.d(o) * (s - y) + f * ds)).T @ src.x)
    return np.stack(vals), np.stack(grads)  # (B, G), (B, G, d)


def _require_real(src):
    if isinstance(src, Dataset) and src.is_complex:
        raise InvalidInputError("this constraint is defined for real outputs only")


def perturbed_risk_irm(loss: LossKind, w, source):
    """Change in risk under the output perturbation ``o -> o + eps * o``."""
    W, single = _as_batch(w)
    return _finish(*_irm_terms(LossKind(loss), W, source), single)[0]


def perturbed_risk_mri(loss: LossKind, w, source):
    """Change in risk under the label perturbation ``y -> y + eps * y``."""
    W, single = _as_batch(w)
    return _finish(*_mri_terms(LossKind(loss), W, source), single)[0]


def _stacked(kind, loss, W, envs, basis):
    if kind is ConstraintKind.GENERALIZED_IRM:
        if not basis:
            raise InvalidInputError("generalized IRM needs a non-empty basis")
        parts = [_generalized_terms(loss, W, e, basis) for e in envs]
        vals = np.concatenate([v for v, _ in parts])   # (E*B, G)
        grads = np.concatenate([g for _, g in parts])  # (E*B, G, d)
        return vals, grads
    fn = _mri_terms if kind is ConstraintKind.MRI_V1 else _irm_terms
    parts = [fn(loss, W, e) for e in envs]
    vals = np.stack([v for v, _ in parts])
    grads = np.stack([g for _, g in parts])
    if kind is not ConstraintKind.IRM_V1:
        Q = build_q(len(envs))
        vals = Q @ vals
        grads = np.einsum("me,egd->mgd", Q, grads)
    return vals, grads


def _check_envs(envs, n_expected):
    envs = list(envs)
    if n_expected is not None and len(envs) != n_expected:
        raise DimensionError(f"expected {n_expected} environments, got {len(envs)}")
    if len(envs) < 1:
        raise DimensionError("no environments given")
    return envs


def residual_terms(kind: ConstraintKind, loss: LossKind, w, envs: Sequence,
                   basis=None, n_envs: Optional[int] = None):
    """Residual vector ``c(w)`` and Jacobian ``dc/dw``.

    For a single weight vector the shapes are ``(m,)`` and ``(m, d)``; for a
    batch ``(G, d)`` they are ``(G, m)`` and ``(G, m, d)``.
    """
    kind, loss = ConstraintKind(kind), LossKind(loss)
    envs = _check_envs(envs, n_envs)
    if kind in (ConstraintKind.IRM_RELAXED, ConstraintKind.MRI_V1) and len(envs) < 2:
        raise DimensionError(f"{kind.value} needs at least two environments")
    W, single = _as_batch(w)
    vals, grads = _stacked(kind, loss, W, envs, _basis(basis))
    vals = vals.T
    grads = np.transpose(grads, (1, 0, 2))
    return _finish(vals, grads, single)


def residuals(kind: ConstraintKind, loss: LossKind, w, envs: Sequence, basis=None,
              n_envs: Optional[int] = None):
    return residual_terms(kind, loss, w, envs, basis, n_envs)[0]


def residual_grad(kind: ConstraintKind, loss: LossKind, w, envs: Sequence, basis=None,
                  n_envs: Optional[int] = None):
    return residual_terms(kind, loss, w, envs, basis, n_envs)[1]
