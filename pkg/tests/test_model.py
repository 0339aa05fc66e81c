import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivlab import envgen
from ivlab.envgen import EnvSpec, Task, preset_suite
from ivlab.errors import DimensionError, InvalidInputError, UnsupportedClosedFormError
from ivlab.model import (LossKind, Weights, accuracy, empirical_risk, link, loss, loss_grad_label,
                         loss_grad_output, population_risk, predict, risk_scale, risk_terms)

SQ, BCE = LossKind.SQUARE, LossKind.BCE
finite = st.floats(-20, 20, allow_nan=False)
label = st.sampled_from([-1.0, 1.0])
normal = finite.filter(lambda v: v == 0 or abs(v) > 1e-200)  # keep scaled values out of the subnormal range


# --- pointwise losses ------------------------------------------------------

def test_loss_examples():
    assert loss(SQ, 0.0, 0.0) == 0.0
    assert loss(BCE, 0.0, 1.0) == pytest.approx(math.log(2), abs=1e-15)
    assert loss(SQ, 0j, 1 + 0j) == pytest.approx(0.5)


def test_loss_grad_output_examples():
    assert loss_grad_output(SQ, 2.0, 1.0) == 1.0
    assert loss_grad_output(BCE, 0.0, 1.0) == -1.0
    assert loss_grad_output(BCE, 1e3, 1.0) == pytest.approx(0.0)


def test_loss_grad_label_examples():
    assert loss_grad_label(SQ, 1.0, 1.0) == 0.0
    assert loss_grad_label(BCE, 0.5, -1.0) == -0.5
    assert loss_grad_label(SQ, 0j, 1j) == 1j


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_loss_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        loss(SQ, bad, 0.0)
    with pytest.raises(InvalidInputError):
        loss_grad_output(BCE, 0.0, bad)


def test_bce_rejects_non_binary_labels():
    with pytest.raises(InvalidInputError):
        loss(BCE, 0.0, 0.5)


@settings(max_examples=200)
@given(o=finite, y=label)
def test_grad_output_is_link_minus_label(o, y):
    for kind in (SQ, BCE):
        assert loss_grad_output(kind, o, y) == link(kind, o) - y


def test_grad_output_matches_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-5
    for kind in (SQ, BCE):
        o = rng.uniform(-6, 6, 1000)
        y = rng.choice([-1.0, 1.0], 1000) if kind is BCE else rng.normal(size=1000)
        fd = (loss(kind, o + h, y) - loss(kind, o - h, y)) / (2 * h)
        # the output gradient is that of the unnormalised cross-entropy: twice d loss / do
        g = loss_grad_output(kind, o, y) / (2.0 if kind is BCE else 1.0)
        assert np.all(np.abs(fd - g) <= 1e-6 * np.maximum(1.0, np.abs(g)))


def test_risk_scale():
    assert risk_scale(SQ) == 2.0 and risk_scale(BCE) == 1.0


# --- predictor ---------------------------------------------------------------

def test_predict_examples():
    th, ph = 0.3, -1.2
    assert predict(Weights(1.0, 0.0), np.exp(1j * th), np.exp(1j * ph)) == pytest.approx(np.exp(1j * th))
    assert predict(np.array([0.75, 0.0]), 1.0, 1.0) == 0.75
    assert predict(Weights(0.5, 0.5), 1.0, -1.0) == 0.0


def test_predict_dimension_mismatch():
    with pytest.raises(DimensionError):
        predict(Weights(1.0, 0.0), np.ones(2), np.ones(1))


def test_weights_validation_and_vector():
    w = Weights.from_vector([0.2, -0.4])
    np.testing.assert_array_equal(w.vector, [0.2, -0.4])
    with pytest.raises(InvalidInputError):
        Weights(np.nan, 0.0)


# --- risks -------------------------------------------------------------------

def test_empirical_risk_zero_predictor():
    data = envgen.sample(EnvSpec(0.75, 0.8), 5000, seed=3)
    assert empirical_risk(SQ, np.zeros(2), data) == pytest.approx(1.0, abs=1e-12)  # |y| = 1 exactly
    for task in (Task.ST_CLASSIFICATION, Task.TOY_CMNIST):
        d = envgen.sample(EnvSpec(0.75, 0.8, task), 5000, seed=3)
        assert abs(empirical_risk(BCE, np.zeros(2), d) - math.log(2)) < 1e-12


def test_population_risk_examples():
    mom = envgen.population_moments(EnvSpec(0.75, 1.0))
    assert population_risk(SQ, [0.0, 0.0], mom) == pytest.approx(1.0)
    assert population_risk(SQ, [0.75, 0.0], mom) == pytest.approx(0.4375)
    # o - y = e^{i theta_inv} when the spurious latent copies the label
    assert population_risk(SQ, [1.0, 1.0], mom) == pytest.approx(1.0, abs=1e-15)


def test_population_risk_rejects_bce():
    mom = envgen.population_moments(EnvSpec(0.75, 1.0))
    with pytest.raises(UnsupportedClosedFormError):
        population_risk(BCE, [0.0, 0.0], mom)


def test_population_and_empirical_risk_agree():
    env = EnvSpec(0.75, 0.8)
    data = envgen.sample(env, 40000, seed=11)
    mom = envgen.population_moments(env)
    w = np.array([0.6, 0.3])
    per_sample = np.abs(data.x @ w - data.y) ** 2
    se = per_sample.std() / math.sqrt(data.n)
    assert abs(empirical_risk(SQ, w, data) - population_risk(SQ, w, mom)) < 3 * se


@pytest.mark.parametrize("kind,task", [(SQ, Task.ST_REGRESSION), (SQ, Task.TOY_CMNIST),
                                       (BCE, Task.TOY_CMNIST), (BCE, Task.ST_CLASSIFICATION)])
def test_risk_gradient_finite_differences(kind, task):
    data = envgen.sample(EnvSpec(0.75, 0.9, task), 500, seed=1)
    w = np.array([0.4, -0.7])
    _, g = risk_terms(kind, w, data)
    h = 1e-6
    fd = [(risk_terms(kind, w + e, data)[0] - risk_terms(kind, w - e, data)[0]) / (2 * h)
          for e in np.eye(2) * h]
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_risk_batch_matches_single():
    data = envgen.sample(EnvSpec(0.75, 0.9, Task.TOY_CMNIST), 200, seed=2)
    W = np.random.default_rng(0).normal(size=(5, 2))
    vals, grads = risk_terms(BCE, W, data)
    for k in range(5):
        v, g = risk_terms(BCE, W[k], data)
        assert vals[k] == pytest.approx(v)
        np.testing.assert_allclose(grads[k], g)


# --- accuracy ----------------------------------------------------------------

def test_accuracy_examples():
    d = envgen.sample(EnvSpec(1.0, 0.5, Task.TOY_CMNIST), 1000, seed=0)
    assert accuracy([1.0, 0.0], d) == 1.0
    bal = envgen.sample(EnvSpec(0.75, 0.5, Task.TOY_CMNIST), 40000, seed=0)
    # sign(0) = +1 so the zero predictor scores the fraction of positive labels
    assert abs(accuracy([0.0, 0.0], bal) - 0.5) < 3 * 0.5 / math.sqrt(40000)


def test_accuracy_plateau_on_toy_support():
    for env in preset_suite("toy-cmnista").train:
        support = envgen.toy_cmnist_support(env)
        for w in ([1.0, 0.3], [0.5, -0.2], [2.0, 1.9]):
            assert accuracy(w, support) == 0.75


@settings(max_examples=50)
@given(a=st.integers(-20, 20).map(lambda k: 2.0**k), w0=normal, w1=normal)
def test_accuracy_scale_invariant(a, w0, w1):
    # powers of two scale exactly, so the sign of every output is preserved
    d = envgen.toy_cmnist_support(EnvSpec(0.75, 0.9, Task.TOY_CMNIST))
    w = np.array([w0, w1])
    assert accuracy(a * w, d) == accuracy(w, d)


def test_accuracy_rejects_regression():
    d = envgen.sample(EnvSpec(0.75, 0.9), 10, seed=0)
    with pytest.raises(InvalidInputError):
        accuracy([1.0, 0.0], d)
