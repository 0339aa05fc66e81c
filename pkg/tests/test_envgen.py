import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivlab import envgen
from ivlab.envgen import EnvSpec, EnvSuite, Role, STLatents, Task, preset_suite
from ivlab.errors import EmptyDatasetError, InvalidInputError, UnsupportedClosedFormError

N = 40000


def binom_tol(p, n=N):
    return 3 * math.sqrt(p * (1 - p) / n)


# --- specs and suites --------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(p_inv=1.2, p_spu=0.5), dict(p_inv=0.5, p_spu=-0.1),
                                dict(p_inv=0.5, p_spu=0.5, sigma_inv=-1.0),
                                dict(p_inv=np.nan, p_spu=0.5)])
def test_envspec_validation(kw):
    with pytest.raises(InvalidInputError):
        EnvSpec(**kw)


def test_suite_requires_shared_p_inv_and_sizes():
    with pytest.raises(InvalidInputError):
        EnvSuite("x", [EnvSpec(0.7, 1.0), EnvSpec(0.75, 0.8)], [EnvSpec(0.75, 0.0)])
    with pytest.raises(InvalidInputError):
        EnvSuite("x", [EnvSpec(0.75, 1.0)], [EnvSpec(0.75, 0.0)])
    with pytest.raises(InvalidInputError):
        EnvSuite("x", [EnvSpec(0.75, 1.0), EnvSpec(0.75, 0.8)], [])


def test_presets():
    st_reg = preset_suite("st-reg")
    assert [(e.p_inv, e.p_spu) for e in st_reg.train] == [(0.75, 1.0), (0.75, 0.8)]
    assert [(e.p_inv, e.p_spu) for e in st_reg.test] == [(0.75, 0.0)]
    a = preset_suite("toy-cmnista")
    assert a.p_inv == 0.75 and [e.p_spu for e in a.envs] == [0.9, 0.8, 0.1]
    b = preset_suite("ToyCMNISTb")
    assert b.p_inv == 0.9 and [e.p_spu for e in b.envs] == [1.0, 0.8, 0.1]
    assert preset_suite("st-class").task is Task.ST_CLASSIFICATION
    with pytest.raises(InvalidInputError):
        preset_suite("mnist")


# --- Shape-Texture sampling ----------------------------------------------------

def test_st_latents_noiseless_tied():
    lat = envgen.sample_st_latents(EnvSpec(1.0, 1.0), 1000, seed=0)
    assert np.array_equal(lat.theta_inv, lat.theta_y) and np.array_equal(lat.theta_spu, lat.theta_y)


def test_st_latents_tie_rate():
    lat = envgen.sample_st_latents(EnvSpec(0.75, 0.5), N, seed=1)
    assert abs(np.mean(lat.theta_inv == lat.theta_y) - 0.75) < binom_tol(0.75)
    assert abs(np.mean(lat.theta_spu == lat.theta_y) - 0.5) < binom_tol(0.5)


def test_st_latents_free_spurious_uncorrelated():
    lat = envgen.sample_st_latents(EnvSpec(0.75, 0.0), N, seed=2)
    assert abs(np.mean(np.exp(1j * (lat.theta_spu - lat.theta_y)))) < 3 / math.sqrt(N)


def test_st_latents_wrapped_with_noise():
    lat = envgen.sample_st_latents(EnvSpec(0.75, 0.9, sigma_inv=2.0, sigma_spu=5.0), 20000, seed=3)
    for a in (lat.theta_y, lat.theta_inv, lat.theta_spu):
        assert a.min() >= -np.pi and a.max() < np.pi


@settings(max_examples=200)
@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_wrap_angle_range(t):
    w = float(envgen.wrap_angle(t))
    assert -np.pi <= w < np.pi
    assert math.isclose(math.cos(w), math.cos(t), abs_tol=1e-6)


def test_empty_sample_raises():
    with pytest.raises(EmptyDatasetError):
        envgen.sample(EnvSpec(0.75, 0.8), 0, seed=0)
    with pytest.raises(EmptyDatasetError):
        envgen.sample(EnvSpec(0.75, 0.8, Task.TOY_CMNIST), 0, seed=0)


def test_regression_io():
    lat = STLatents(np.array([np.pi / 2, 0.1]), np.array([0.0, -2.0]), np.array([1.0, 3.0]))
    d = envgen.to_regression_io(lat)
    assert d.x[0, 0] == 1 + 0j
    assert d.y[0] == pytest.approx(1j)
    np.testing.assert_allclose(np.angle(d.x[:, 0]), lat.theta_inv)
    assert d.is_complex


def test_classification_io():
    lat = STLatents(np.array([np.pi / 2, -np.pi / 2, 0.0]), np.zeros(3), np.zeros(3))
    d = envgen.to_classification_io(lat)
    np.testing.assert_array_equal(d.y, [1.0, -1.0, 1.0])  # sign(0) = +1
    bal = envgen.sample(EnvSpec(0.75, 0.8, Task.ST_CLASSIFICATION), N, seed=4)
    assert abs(np.mean(bal.y > 0) - 0.5) < binom_tol(0.5)


# --- toy-CMNIST ----------------------------------------------------------------

def test_toy_cmnist_deterministic_links():
    d = envgen.sample(EnvSpec(1.0, 1.0, Task.TOY_CMNIST), 500, seed=0)
    assert np.array_equal(d.x[:, 0], d.y) and np.array_equal(d.x[:, 1], d.y)


@pytest.mark.parametrize("p_spu,expected", [(0.9, 0.8), (0.1, -0.8)])
def test_toy_cmnist_spurious_correlation(p_spu, expected):
    d = envgen.sample(EnvSpec(0.75, p_spu, Task.TOY_CMNIST), N, seed=5)
    assert abs(np.mean(d.x[:, 1] * d.y) - expected) < 3 * math.sqrt((1 - expected**2) / N)
    assert set(np.unique(d.x)) == {-1.0, 1.0}


def test_marginal_label_invariant_across_envs():
    for name in ("toy-cmnista", "st-class"):
        rates = [np.mean(envgen.sample(e, N, seed=6, env_id=k).y > 0)
                 for k, e in enumerate(preset_suite(name).envs)]
        assert max(rates) - min(rates) < 2 * binom_tol(0.5)


# --- determinism ---------------------------------------------------------------

@pytest.mark.parametrize("task", list(Task))
def test_sampling_is_deterministic(task):
    env = EnvSpec(0.75, 0.8, task, sigma_inv=0.1)
    a, b = envgen.sample(env, 300, seed=9, env_id=1), envgen.sample(env, 300, seed=9, env_id=1)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    c = envgen.sample(env, 300, seed=9, env_id=2)
    assert not np.array_equal(a.x, c.x)


# --- moments -------------------------------------------------------------------

def test_population_moments_examples():
    m = envgen.population_moments(EnvSpec(0.75, 1.0))
    np.testing.assert_array_equal(m.M_xx, [[1.0, 0.75], [0.75, 1.0]])
    np.testing.assert_array_equal(m.m_xy, [0.75, 1.0])
    assert m.m_yy == 1.0
    np.testing.assert_array_equal(envgen.population_moments(EnvSpec(0.75, 0.0)).m_xy, [0.75, 0.0])
    c = envgen.population_moments(EnvSpec(0.75, 0.9, Task.TOY_CMNIST))
    np.testing.assert_allclose(c.m_xy, [0.5, 0.8])
    assert c.M_xx[0, 1] == pytest.approx(0.4)


def test_moments_noisy_need_monte_carlo():
    env = EnvSpec(0.75, 0.8, sigma_inv=0.2)
    with pytest.raises(UnsupportedClosedFormError):
        envgen.population_moments(env)
    mc = envgen.population_moments(env, mc_samples=20000, seed=1)
    assert mc.n_samples == 20000
    # noise shrinks the invariant correlation by exp(-sigma^2 / 2)
    assert mc.m_xy[0] == pytest.approx(0.75 * math.exp(-0.02), abs=0.03)


def test_quadrature_matches_closed_form_classification_moments():
    for e in preset_suite("st-class").envs:
        q = envgen.empirical_moments(envgen.st_classification_quadrature(e))
        exact = envgen.population_moments(e)
        np.testing.assert_allclose(q.M_xx, exact.M_xx, atol=1e-12)
        np.testing.assert_allclose(q.m_xy, exact.m_xy, atol=1e-12)
        assert q.m_yy == pytest.approx(1.0)


def test_toy_support_is_a_distribution():
    s = envgen.toy_cmnist_support(EnvSpec(0.75, 0.9, Task.TOY_CMNIST))
    assert s.n == 8 and sum(s.exact_weights) == 1
    assert s.probabilities().sum() == pytest.approx(1.0)


def test_population_source_types():
    assert isinstance(envgen.population_source(EnvSpec(0.75, 1.0)), envgen.PopulationMoments)
    assert envgen.population_source(EnvSpec(0.75, 1.0, Task.TOY_CMNIST)).n == 8
    with pytest.raises(UnsupportedClosedFormError):
        envgen.st_classification_quadrature(EnvSpec(0.75, 1.0, Task.ST_CLASSIFICATION, sigma_spu=0.1))


# --- images ----------------------------------------------------------------------

def test_wave_image_axis_aligned():
    img = envgen.render_wave_image(0.0, 0.0, size=64)
    assert np.allclose(img, img[0:1, :])  # rows constant
    assert not np.allclose(img, img[:, 0:1])
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_wave_image_rotation_by_pi():
    a = envgen.render_wave_image(0.4, 1.3)
    b = envgen.render_wave_image(0.4 + np.pi, 1.3 + np.pi)
    np.testing.assert_allclose(b, 1.0 - a, atol=1e-12)
    Fa, Fb = np.abs(np.fft.fft2(a)), np.abs(np.fft.fft2(b))
    Fa[0, 0] = Fb[0, 0] = 0.0  # only the mean changes
    np.testing.assert_allclose(Fa, Fb, atol=1e-9)


def test_wave_image_dominant_frequencies():
    size = 64
    F = np.abs(np.fft.fft2(envgen.render_wave_image(0.0, np.pi / 2, size) - 0.5))
    # shape wave varies along columns (2 cycles), texture along rows (8 cycles)
    assert F[0, 2] == pytest.approx(F.max()) and F[8, 0] == pytest.approx(F.max())


def test_pgm_round_trip():
    img = envgen.render_wave_image(0.3, -0.9, size=16)
    text = envgen.format_pgm(img)
    assert text.startswith("P2\n16 16\n255\n")
    back = envgen.parse_pgm(text)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


# --- CSV -------------------------------------------------------------------------

def test_csv_round_trip_regression(tmp_path):
    d = envgen.sample(EnvSpec(0.75, 0.8), 25, seed=3, env_id=1)
    text = envgen.dataset_to_csv([d])
    assert text.splitlines()[0] == ",".join(envgen.ST_REGRESSION_HEADER)
    path = tmp_path / "d.csv"
    path.write_text(text)
    (back,) = envgen.read_dataset_csv(path)
    np.testing.assert_array_equal(back.x, d.x)
    np.testing.assert_array_equal(back.y, d.y)


def test_csv_round_trip_binary(tmp_path):
    ds = [envgen.sample(e, 10, seed=7, env_id=k) for k, e in enumerate(preset_suite("toy-cmnistb").train)]
    text = envgen.dataset_to_csv(ds)
    assert text.splitlines()[0] == "env_id,x0,x1,y"
    path = tmp_path / "d.csv"
    path.write_text(text)
    back = envgen.read_dataset_csv(path)
    assert len(back) == 2 and back[0].task is Task.TOY_CMNIST
    np.testing.assert_array_equal(back[1].x, ds[1].x)


def test_role_enum_round_trip():
    assert EnvSpec(0.5, 0.5, role="test").role is Role.TEST
