import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import softmax

from dynatraj.basis import BasisConfig, design_matrix
from dynatraj.exceptions import ParameterError
from dynatraj.kernels import NoiseParams, OUParams
from dynatraj.model import (
    Dataset,
    Hyperparams,
    IndividualRecord,
    ModelParams,
    WhitenedData,
    individual_loglik,
    mean_under_subtype,
    observed_data_loglik,
    population_coeffs,
    subtype_log_densities,
    subtype_prior,
    unvec,
    vec,
)

from helpers import random_dataset, random_individual, random_params
from oracles import gauss_logpdf

H = Hyperparams.defaults()


def params_with_W(W, hyper=H):
    W = np.asarray(W, dtype=float)
    return ModelParams(np.zeros((1, W.shape[1])), W, np.zeros((W.shape[0], hyper.basis_z.dim)), hyper)


def test_prior_uniform_when_weights_zero():
    p = params_with_W(np.zeros((4, 3)))
    np.testing.assert_allclose(subtype_prior(p, [1.0, 1.0, 0.0]), 0.25, atol=1e-15)


def test_prior_two_subtypes_zero_logit():
    p = params_with_W([[0.0, 0.0], [1.0, -1.0]])
    np.testing.assert_allclose(subtype_prior(p, [1.0, 1.0]), [0.5, 0.5], atol=1e-15)


def test_prior_hand_softmax():
    p = params_with_W([[0.0, 0.0], [math.log(2), 0.0], [0.0, math.log(4)]])
    np.testing.assert_allclose(subtype_prior(p, [1.0, 1.0]), [1 / 7, 2 / 7, 4 / 7], atol=1e-15)


def test_prior_dimension_mismatch():
    with pytest.raises(ParameterError):
        subtype_prior(params_with_W(np.zeros((2, 3))), [1.0, 0.0])


def test_w1_pinned_to_zero():
    with pytest.raises(ParameterError):
        params_with_W([[0.1, 0.0], [0.0, 0.0]])


def test_params_dimension_checks():
    with pytest.raises(ParameterError):
        ModelParams(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 5)), H)
    with pytest.raises(ParameterError):
        ModelParams(np.zeros((1, 3)), np.zeros((2, 3)), np.zeros((2, 6)), H)
    with pytest.raises(ParameterError):
        ModelParams(np.zeros((1, 3)), np.zeros((3, 3)), np.zeros((2, 5)), H)
    with pytest.raises(ParameterError):
        Hyperparams(H.basis_p, H.basis_z, H.basis_l, np.eye(3), H.ou, H.noise)


def test_mean_zero_when_coefficients_zero():
    ind = random_individual(np.random.default_rng(0))
    np.testing.assert_array_equal(mean_under_subtype(params_with_W(np.zeros((2, 3))), ind, 1), 0.0)


def test_mean_intercept_only():
    ind = random_individual(np.random.default_rng(0))
    p = ModelParams(np.array([[2.5, 0.0, 0.0]]), np.zeros((1, 3)), np.zeros((1, 5)), H)
    np.testing.assert_allclose(mean_under_subtype(p, ind, 0), 2.5)


def test_mean_scalar_loop_oracle():
    rng = np.random.default_rng(1)
    hyper = Hyperparams(BasisConfig.polynomial(2), H.basis_z, H.basis_l, H.Sigma_b, H.ou, H.noise)
    p = random_params(rng, G=2, hyper=hyper)
    ind = random_individual(rng, n=4)
    got = mean_under_subtype(p, ind, 1)
    for j, t in enumerate(ind.times):
        phi_p = [t**k for k in range(3)]
        phi_z = design_matrix(H.basis_z, [t])[0]
        want = 0.0
        for a in range(3):
            for c in range(3):
                want += phi_p[a] * p.Lambda[a, c] * ind.x_p[c]
        for k in range(5):
            want += phi_z[k] * p.beta[1, k]
        assert got[j] == pytest.approx(want, rel=1e-13)
    np.testing.assert_allclose(population_coeffs(p, ind.x_p), p.Lambda @ ind.x_p)


def test_mean_subtype_out_of_range():
    with pytest.raises(ParameterError):
        mean_under_subtype(params_with_W(np.zeros((2, 3))), random_individual(np.random.default_rng(0)), 2)


def test_loglik_empty_dataset():
    assert observed_data_loglik(params_with_W(np.zeros((2, 3))), Dataset(())) == 0.0


def test_loglik_single_point_univariate():
    p = ModelParams(np.array([[60.0, 0.0, 0.0]]), np.zeros((1, 3)), np.full((1, 5), 10.0), H)
    ind = IndividualRecord("a", [3.0], [75.0], [1, 0, 1], [1, 0, 1])
    t = 3.0
    v = 16.0 + 0.01 * t * t + 36.0 + 1.0
    m = 70.0
    expected = -0.5 * (math.log(2 * math.pi * v) + (75.0 - m) ** 2 / v)
    assert observed_data_loglik(p, Dataset((ind,))) == pytest.approx(expected, rel=1e-13)


def test_loglik_two_subtypes_explicit_oracle():
    rng = np.random.default_rng(7)
    p = random_params(rng, G=2)
    ind = random_individual(rng, n=2)
    K = H.covariance(ind.times)
    pri = subtype_prior(p, ind.x_z)
    dens = [math.exp(gauss_logpdf(ind.values, mean_under_subtype(p, ind, g), K)) for g in range(2)]
    expected = math.log(pri @ dens)
    assert observed_data_loglik(p, Dataset((ind,))) == pytest.approx(expected, rel=1e-10)
    assert individual_loglik(p, ind) == pytest.approx(expected, rel=1e-10)


def test_zero_observation_individual_contributes_nothing():
    rng = np.random.default_rng(2)
    p = random_params(rng)
    d = random_dataset(rng, M=3)
    empty = IndividualRecord("e", [], [], [1, 0, 1], [1, 0, 1])
    d2 = Dataset(d.individuals + (empty,))
    assert observed_data_loglik(p, d2) == observed_data_loglik(p, d)
    np.testing.assert_array_equal(subtype_log_densities(p, empty), 0.0)


def test_mixture_collapse():
    rng = np.random.default_rng(4)
    p1 = random_params(rng, G=1)
    d = random_dataset(rng, M=6)
    pG = ModelParams(p1.Lambda, np.zeros((4, 3)), np.repeat(p1.beta, 4, axis=0), H)
    assert observed_data_loglik(pG, d) == pytest.approx(observed_data_loglik(p1, d), rel=1e-13)


def test_whitened_matches_dense_path():
    rng = np.random.default_rng(5)
    p = random_params(rng, G=3)
    d = random_dataset(rng, M=8)
    wd = WhitenedData.build(H, d)
    dense = np.array([subtype_log_densities(p, ind) for ind in d])
    np.testing.assert_allclose(wd.log_densities(p), dense, rtol=1e-11)
    assert wd.loglik(p) == pytest.approx(sum(individual_loglik(p, ind) for ind in d), rel=1e-12)


def test_record_sorts_and_freezes():
    ind = IndividualRecord("a", [3.0, 1.0, 2.0], [30.0, 10.0, 20.0], [1, 0], [1, 1])
    np.testing.assert_array_equal(ind.times, [1, 2, 3])
    np.testing.assert_array_equal(ind.values, [10, 20, 30])
    with pytest.raises(ValueError):
        ind.times[0] = 5.0
    assert ind.truncate(2.0).n_obs == 2
    assert ind.truncate(-1).n_obs == 0


@pytest.mark.parametrize("kw", [
    dict(times=[1.0], values=[1.0, 2.0]),
    dict(x_p=[0.0, 1.0]),
    dict(x_z=[]),
    dict(values=[np.nan]),
])
def test_record_validation(kw):
    args = dict(id_="a", times=[1.0], values=[1.0], x_p=[1.0], x_z=[1.0])
    args.update(kw)
    with pytest.raises(ParameterError):
        IndividualRecord(args["id_"], args["times"], args["values"], args["x_p"], args["x_z"])


def test_dataset_validation_and_lookup():
    a = IndividualRecord("a", [1.0], [1.0], [1.0], [1.0])
    b = IndividualRecord("b", [], [], [1.0], [1.0])
    with pytest.raises(ParameterError):
        Dataset((a, a))
    with pytest.raises(ParameterError):
        Dataset((a, IndividualRecord("c", [], [], [1.0, 0.0], [1.0])))
    d = Dataset((a, b))
    assert d["b"] is b and "a" in d and "z" not in d
    assert d.n_observations == 1
    assert d.subset(["b"]).ids == ["b"]


def test_permuted_repins_first_weight():
    rng = np.random.default_rng(0)
    p = random_params(rng, G=3)
    q = p.permuted([2, 0, 1])
    np.testing.assert_array_equal(q.W[0], 0.0)
    np.testing.assert_array_equal(q.beta, p.beta[[2, 0, 1]])
    x = np.array([1.0, 1.0, 0.0])
    np.testing.assert_allclose(subtype_prior(q, x), subtype_prior(p, x)[[2, 0, 1]], atol=1e-14)


def test_vec_round_trip():
    L = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(vec(L), [0, 3, 1, 4, 2, 5])
    np.testing.assert_array_equal(unvec(vec(L), 2), L)


@given(st.lists(st.floats(-20, 20), min_size=4, max_size=4), st.floats(-50, 50))
def test_prior_shift_invariance(w, c):
    W = np.zeros((3, 2))
    W[1:] = np.reshape(w, (2, 2))
    x = np.array([1.0, 1.0])
    prior = subtype_prior(params_with_W(W), x)
    np.testing.assert_allclose(prior, softmax(W @ x + c), rtol=1e-10, atol=1e-300)
    assert prior.sum() == pytest.approx(1.0, abs=1e-12)


def test_other_hyper_values_flow_through():
    hyper = Hyperparams(H.basis_p, H.basis_z, H.basis_l, np.diag([4.0, 0.5]), OUParams(2.0, 5.0),
                        NoiseParams(0.3))
    K = hyper.covariance([0.0])
    assert K[0, 0] == pytest.approx(4.0 + 4.0 + 0.3)
