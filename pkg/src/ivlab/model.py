"""Losses, link functions and linear predictors over latent features.

Two losses are supported. Their per-sample forms are normalised so that

    d l / d o = sigma(o) - y        d l / d y = -o + rho(y)

with ``sigma(o) = o, rho(y) = y`` for the square loss and
``sigma(o) = tanh(o/2), rho(y) = 0`` for binary cross-entropy with labels in
{-1, +1}. The reported *risk* uses the conventional scale instead: mean
squared error ``E|o - y|^2`` and mean logistic loss ``E log(1 + e^{-y o})``,
so the zero predictor scores 1 on circular regression and ``ln 2`` on any
binary task. See :func:`risk_scale` for the factor between the two.

Every risk function accepts either a :class:`~ivlab.envgen.Dataset`
(possibly weighted) or :class:`~ivlab.envgen.PopulationMoments`. Weight
arguments may be :class:`Weights`, a flat vector, or a ``(G, d)`` batch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .envgen import Dataset, PopulationMoments, sign_pos
from .errors import DimensionError, InvalidInputError, UnsupportedClosedFormError


class LossKind(str, enum.Enum):
    SQUARE = "square"
    BCE = "bce"


@dataclass(frozen=True)
class Weights:
    """Linear predictor ``o = w_inv . z_inv + w_spu . z_spu``."""

    w_inv: np.ndarray
    w_spu: np.ndarray

    def __post_init__(self):
        for name in ("w_inv", "w_spu"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if v.ndim != 1 or v.size < 1:
                raise DimensionError(f"{name} must be a non-empty vector")
            if not np.all(np.isfinite(v)):
                raise InvalidInputError(f"{name} has non-finite entries")
            object.__setattr__(self, name, v)

    @classmethod
    def from_vector(cls, v, d_inv: int = 1) -> "Weights":
        v = np.asarray(v, dtype=float)
        return cls(v[:d_inv], v[d_inv:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.w_inv, self.w_spu])

    def __repr__(self):
        return f"Weights(w_inv={self.w_inv.tolist()}, w_spu={self.w_spu.tolist()})"


def as_vector(w) -> np.ndarray:
    if isinstance(w, Weights):
        return w.vector
    return np.asarray(w, dtype=float)


def _as_batch(w):
    W = as_vector(w)
    single = W.ndim == 1
    return np.atleast_2d(W), single


def _finish(values, grads, single):
    if single:
        return values[0], (None if grads is None else grads[0])
    return values, grads


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("non-finite input")


def _check_bce_labels(y):
    y = np.asarray(y)
    if np.iscomplexobj(y) or not np.all(np.abs(y) == 1):
        raise InvalidInputError("BCE labels must be -1 or +1")


def link(kind: LossKind, o):
    """``sigma(o)``: the output-space image of the label expectation."""
    kind = LossKind(kind)
    return o if kind is LossKind.SQUARE else np.tanh(np.asarray(o) / 2.0)


def label_link(kind: LossKind, y):
    """``rho(y)`` in ``d l / d y = -o + rho(y)``."""
    kind = LossKind(kind)
    return y if kind is LossKind.SQUARE else np.zeros_like(np.asarray(y, dtype=float))


def loss(kind: LossKind, o, y):
    """Pointwise loss.

    Square: ``|o - y|^2 / 2`` (complex values allowed). BCE: the logistic
    loss ``log(1 + exp(-y o))``, which equals ``ln 2`` at ``o = 0``.
    """
    kind = LossKind(kind)
    _check_finite(o, y)
    if kind is LossKind.SQUARE:
        return 0.5 * np.abs(np.asarray(o) - np.asarray(y)) ** 2
    _check_bce_labels(y)
    return np.logaddexp(0.0, -np.asarray(y, dtype=float) * np.asarray(o, dtype=float))


def loss_grad_output(kind: LossKind, o, y):
    """``sigma(o) - y``.

    For the square loss this is the derivative of :func:`loss` (packed as
    complex for complex outputs). For BCE it is the derivative of the
    unnormalised cross-entropy ``-(1+y) log eta - (1-y) log(1-eta)``,
    i.e. twice the derivative of :func:`loss`.
    """
    kind = LossKind(kind)
    _check_finite(o, y)
    if kind is LossKind.BCE:
        _check_bce_labels(y)
    return link(kind, o) - y


def loss_grad_label(kind: LossKind, o, y):
    """``-o + rho(y)``: derivative with respect to the label."""
    kind = LossKind(kind)
    _check_finite(o, y)
    return -np.asarray(o) + label_link(kind, y)


def risk_scale(kind: LossKind) -> float:
    """Ratio between the reported per-sample risk and :func:`loss`."""
    return 2.0 if LossKind(kind) is LossKind.SQUARE else 1.0


def predict(w, z_inv, z_spu):
    """Output of the linear predictor. Complex latents give a complex output."""
    w = w if isinstance(w, Weights) else Weights.from_vector(w)
    z_inv, z_spu = np.atleast_1d(z_inv), np.atleast_1d(z_spu)
    if z_inv.shape[-1] != w.w_inv.size or z_spu.shape[-1] != w.w_spu.size:
        raise DimensionError("latent dimensions do not match the weights")
    return z_inv @ w.w_inv + z_spu @ w.w_spu


def outputs(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Outputs for a weight batch ``W`` (G, d) on inputs ``x`` (n, d) -> (n, G)."""
    if W.shape[-1] != x.shape[1]:
        raise DimensionError(f"weights have {W.shape[-1]} entries, inputs have {x.shape[1]} features")
    return x @ W.T


def _risk_dataset(kind, W, data: Dataset):
    p = data.probabilities()
    o = outputs(W, data.x)
    y = data.y[:, None]
    if kind is LossKind.SQUARE:
        err = o - y
        vals = p @ (np.abs(err) ** 2)
        grads = 2.0 * np.real((p[:, None] * np.conj(err)).T @ data.x)
        return vals, grads
    if data.is_complex:
        raise InvalidInputError("BCE needs real outputs")
    margin = y * o
    # softplus(-m) and expit(-m) from a single exponential
    e = np.exp(-np.abs(margin))
    vals = p @ (np.maximum(-margin, 0.0) + np.log1p(e))
    dl = -y * np.where(margin >= 0.0, e, 1.0) / (1.0 + e)
    grads = (p[:, None] * dl).T @ data.x
    return vals, grads


def _risk_moments(kind, W, mom: PopulationMoments):
    if kind is not LossKind.SQUARE:
        raise UnsupportedClosedFormError("closed-form risk from moments exists for the square loss only")
    if W.shape[1] != mom.m_xy.size:
        raise DimensionError("weights do not match the moment dimension")
    vals = np.einsum("gi,ij,gj->g", W, mom.M_xx, W) - 2.0 * W @ mom.m_xy + mom.m_yy
    grads = 2.0 * W @ mom.M_xx - 2.0 * mom.m_xy
    return vals, grads


def risk_terms(kind: LossKind, w, source):
    """Risk and its gradient in ``w`` for a dataset or moment source."""
    kind = LossKind(kind)
    W, single = _as_batch(w)
    if isinstance(source, PopulationMoments):
        vals, grads = _risk_moments(kind, W, source)
    else:
        vals, grads = _risk_dataset(kind, W, source)
    return _finish(vals, grads, single)


def risk(kind: LossKind, w, source):
    return risk_terms(kind, w, source)[0]


def empirical_risk(kind: LossKind, w, dataset: Dataset):
    """Average risk of ``w`` over a dataset (probability-weighted if it has weights)."""
    return risk_terms(kind, w, dataset)[0]


def population_risk(kind: LossKind, w, moments: PopulationMoments):
    """``w M_xx w - 2 w . m_xy + m_yy``; square loss only."""
    kind = LossKind(kind)
    W, single = _as_batch(w)
    return _finish(*_risk_moments(kind, W, moments), single)[0]


def accuracy(w, dataset: Dataset, exact: bool = False):
    """Fraction (or probability mass) of samples with ``sign(o) == y``.

    ``sign(0)`` counts as +1. Datasets carrying exact fractional weights are
    summed in rational arithmetic, so equal probabilities compare equal;
    ``exact=True`` returns those ``Fraction`` values (object array) unrounded.
    """
    if dataset.is_complex:
        raise InvalidInputError("accuracy is defined for binary classification")
    W, single = _as_batch(w)
    hits = sign_pos(outputs(W, dataset.x)) == dataset.y[:, None]
    if dataset.exact_weights is not None:
        patterns, inverse = np.unique(hits.T, axis=0, return_inverse=True)
        per_pattern = np.array([
            sum((q for q, h in zip(dataset.exact_weights, pat) if h), Fraction(0))
            for pat in patterns
        ], dtype=object)
        if not exact:
            per_pattern = per_pattern.astype(float)
        vals = per_pattern[np.ravel(inverse)]
    elif dataset.weights is None:
        vals = np.count_nonzero(hits, axis=0) / dataset.n
    else:
        vals = dataset.weights @ hits
    return vals[0] if single else vals
