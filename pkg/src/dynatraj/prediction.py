"""Dynamic posterior-predictive trajectories from a partial history.

The prediction at a query time splits into four additive parts:
population, subpopulation (expected subtype curve), individual (posterior
mean of the random effects), and structured noise (GP regression on what
is left of the residual).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .basis import clamp_times, design_matrix
from .kernels import ou_gram, pd_factor
from .learning import e_step
from .model import IndividualRecord, ModelParams, population_mean

Mode = Literal["posterior_mean", "map_subtype"]


@dataclass(frozen=True, eq=False)
class PosteriorState:
    pi_star: np.ndarray
    beta_star: np.ndarray
    b_star: np.ndarray
    Sigma_b_star: np.ndarray
    times: np.ndarray
    values: np.ndarray
    conditioned_on: int | None = None


@dataclass(frozen=True, eq=False)
class TrajectoryPrediction:
    times: np.ndarray
    population: np.ndarray
    subpopulation: np.ndarray
    individual: np.ndarray
    noise: np.ndarray
    mode: str = "posterior_mean"
    ranked_subtypes: list = field(default_factory=list)
    id: str | None = None

    @property
    def yhat(self) -> np.ndarray:
        return self.population + self.subpopulation + self.individual + self.noise

    def as_rows(self):
        y = self.yhat
        for k in range(self.times.size):
            yield (self.times[k], self.population[k], self.subpopulation[k], self.individual[k], self.noise[k], y[k])


def _residual_base(params: ModelParams, ind: IndividualRecord, beta_vec: np.ndarray) -> np.ndarray:
    """``y - Phi_p Lambda x_p - Phi_z beta`` at the observed times."""
    return ind.values - population_mean(params, ind, ind.times) - design_matrix(params.basis_z, ind.times) @ beta_vec


def _individual_posterior(params: ModelParams, ind: IndividualRecord, beta_vec: np.ndarray):
    """Posterior mean and covariance of ``b_i`` given subtype coefficients ``beta_vec``.

    Uses the equivalent form
    ``Sigma_b* = Sigma_b - Sigma_b Phi' K^{-1} Phi Sigma_b`` and
    ``b* = Sigma_b Phi' K^{-1} r`` with ``K = Phi Sigma_b Phi' + K_f``, which
    needs one Cholesky of ``K`` and no inverse of ``Sigma_b``.
    """
    S = params.Sigma_b
    if ind.n_obs == 0:
        return np.zeros(S.shape[0]), S.copy()
    Phi_l = design_matrix(params.basis_l, ind.times)
    factor = pd_factor(params.hyper.covariance(ind.times))
    r = _residual_base(params, ind, beta_vec)
    SPt = S @ Phi_l.T
    b = SPt @ factor.solve(r)
    V = factor.whiten(SPt.T)
    Sigma_star = S - V.T @ V
    return b, 0.5 * (Sigma_star + Sigma_star.T)


def infer_posterior(params: ModelParams, ind: IndividualRecord, subtype: int | None = None) -> PosteriorState:
    """Posterior over the individual's latent variables given their history.

    With ``subtype`` set, the random-effect posterior is conditioned on that
    subtype's curve instead of the posterior-weighted mean curve.
    """
    pi = e_step(params, ind)
    beta_star = pi @ params.beta if subtype is None else params.beta[subtype].copy()
    b, Sigma_star = _individual_posterior(params, ind, beta_star)
    return PosteriorState(pi, beta_star, b, Sigma_star, ind.times, ind.values, subtype)


def predict_structured_noise(params: ModelParams, ind: IndividualRecord, state: PosteriorState, query_times) -> np.ndarray:
    query_times = np.asarray(query_times, dtype=np.float64).reshape(-1)
    if ind.n_obs == 0:
        return np.zeros(query_times.size)
    K_f = ou_gram(params.ou, ind.times, ind.times)
    K_f[np.diag_indices_from(K_f)] += params.noise.sigma2
    r = _residual_base(params, ind, state.beta_star) - design_matrix(params.basis_l, ind.times) @ state.b_star
    return ou_gram(params.ou, query_times, ind.times) @ pd_factor(K_f).solve(r)


def rank_subtypes(state: PosteriorState) -> list[tuple[int, float]]:
    """Subtypes by descending posterior probability; ties keep index order."""
    order = np.argsort(-state.pi_star, kind="stable")
    return [(int(g), float(state.pi_star[g])) for g in order]


def predict_trajectory(params: ModelParams, ind: IndividualRecord, query_times,
                       mode: Mode = "posterior_mean") -> TrajectoryPrediction:
    if mode not in ("posterior_mean", "map_subtype"):
        raise ValueError(f"unknown prediction mode {mode!r}")
    t = clamp_times(params.basis_z, np.asarray(query_times, dtype=np.float64).reshape(-1))
    state = infer_posterior(params, ind)
    ranked = rank_subtypes(state)
    if mode == "map_subtype":
        state = infer_posterior(params, ind, subtype=ranked[0][0])
    return TrajectoryPrediction(
        times=t,
        population=population_mean(params, ind, t),
        subpopulation=design_matrix(params.basis_z, t) @ state.beta_star,
        individual=design_matrix(params.basis_l, t) @ state.b_star,
        noise=predict_structured_noise(params, ind, state, t),
        mode=mode,
        ranked_subtypes=ranked,
        id=ind.id,
    )


def gaussian_conditional_mean(mean_obs, mean_query, K_obs, K_cross, y) -> np.ndarray:
    """``m_q + K_qo K_oo^{-1} (y - m_o)``; shared by the GP baseline."""
    if len(y) == 0:
        return np.asarray(mean_query, dtype=np.float64)
    return mean_query + K_cross @ pd_factor(K_obs).solve(np.asarray(y) - mean_obs)
