"""Comparison models for the evaluation harness, plus a wrapper for the full model.

Every model here exposes ``fit(train) -> self`` and
``predict(ind, query_times) -> TrajectoryPrediction`` so the harness can
treat them interchangeably.
"""
from __future__ import annotations

from itertools import combinations

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .basis import BasisConfig, clamp_times, design_matrix
from .kernels import gaussian_logpdf, ou_gram, pd_factor, pd_solve
from .learning import EMConfig, fit_em, m_step_weights
from .model import Dataset, Hyperparams, IndividualRecord, ModelParams, population_mean
from .prediction import TrajectoryPrediction, predict_trajectory

BASELINE_KINDS = ("bspline_features", "bspline_gp", "no_personalization")


def expand_features(x_z) -> np.ndarray:
    """``[1, x_k..., x_k x_l for k < l]`` from an intercept-led feature vector."""
    x = np.asarray(x_z, dtype=np.float64)[1:]
    pairs = [x[k] * x[l] for k, l in combinations(range(x.size), 2)]
    return np.concatenate([[1.0], x, pairs])


def expanded_names(names) -> list[str]:
    names = list(names)
    return ["intercept"] + names + [f"{a}*{b}" for a, b in combinations(names, 2)]


class BSplineFeatures:
    """Pooled B-spline regression on baseline features and their pairwise products.

    Ignores the individual's marker history at prediction time.
    """

    name = "bspline_features"
    ridge = 1e-6

    def __init__(self, basis: BasisConfig | None = None, coef: np.ndarray | None = None):
        self.basis = basis or BasisConfig.bspline((0.0, 25.0), n_interior=2, degree=2)
        self.coef = None if coef is None else np.asarray(coef, dtype=np.float64)
        self.fitted_on = None

    def _design(self, x_z, times):
        return np.kron(expand_features(x_z)[None, :], design_matrix(self.basis, times))

    def fit(self, data: Dataset) -> "BSplineFeatures":
        rows = [self._design(ind.x_z, ind.times) for ind in data if ind.n_obs]
        A = np.vstack(rows)
        y = np.concatenate([ind.values for ind in data if ind.n_obs])
        gram = A.T @ A + self.ridge * np.eye(A.shape[1])
        self.coef = pd_solve(gram, A.T @ y)
        self.fitted_on = data
        return self

    def mean(self, x_z, times) -> np.ndarray:
        times = np.asarray(times, dtype=np.float64).reshape(-1)
        return self._design(x_z, times) @ self.coef

    def curve_coefficients(self, x_z) -> np.ndarray:
        """Effective B-spline coefficients for one feature vector."""
        e = expand_features(x_z)
        return self.coef.reshape(e.size, -1).T @ e

    def predict(self, ind: IndividualRecord, query_times) -> TrajectoryPrediction:
        t = clamp_times(self.basis, np.asarray(query_times, dtype=np.float64).reshape(-1))
        zero = np.zeros(t.size)
        return TrajectoryPrediction(t, self.mean(ind.x_z, t), zero, zero, zero.copy(), mode=self.name, id=ind.id)

    def to_dict(self) -> dict:
        return {"basis_z": self.basis.to_dict(), "coef": self.coef.tolist()}

    @classmethod
    def from_dict(cls, d) -> "BSplineFeatures":
        return cls(BasisConfig.from_dict(d["basis_z"]), np.array(d["coef"]))


class BSplineGP:
    """Feature-conditioned B-spline mean plus GP conditioning on the
    individual's residuals, using the full model's composite covariance."""

    name = "bspline_gp"

    def __init__(self, hyper: Hyperparams, mean_model: BSplineFeatures | None = None):
        self.hyper = hyper
        self.mean_model = mean_model or BSplineFeatures(hyper.basis_z)
        self.fitted_on = None

    def fit(self, data: Dataset) -> "BSplineGP":
        self.mean_model.fit(data)
        self.fitted_on = data
        return self

    def predict(self, ind: IndividualRecord, query_times) -> TrajectoryPrediction:
        h = self.hyper
        t = clamp_times(h.basis_z, np.asarray(query_times, dtype=np.float64).reshape(-1))
        mean_q = self.mean_model.mean(ind.x_z, t)
        if ind.n_obs == 0:
            zero = np.zeros(t.size)
            return TrajectoryPrediction(t, mean_q, zero, zero, zero.copy(), mode=self.name, id=ind.id)
        r = ind.values - self.mean_model.mean(ind.x_z, ind.times)
        alpha = pd_factor(h.covariance(ind.times)).solve(r)
        Pq = design_matrix(h.basis_l, t)
        Po = design_matrix(h.basis_l, ind.times)
        individual = Pq @ h.Sigma_b @ Po.T @ alpha
        noise = ou_gram(h.ou, t, ind.times) @ alpha
        return TrajectoryPrediction(t, mean_q, np.zeros(t.size), individual, noise, mode=self.name, id=ind.id)


class ProposedModel:
    """The full hierarchical model, fit by EM on each training set."""

    name = "proposed"

    def __init__(self, G: int, hyper: Hyperparams, config: EMConfig | None = None, mode: str = "map_subtype"):
        self.G = G
        self.hyper = hyper
        self.config = config or EMConfig()
        self.mode = mode
        self.params: ModelParams | None = None
        self.trace = None
        self.fitted_on = None

    @classmethod
    def from_params(cls, params: ModelParams, mode: str = "map_subtype") -> "ProposedModel":
        m = cls(params.G, params.hyper, mode=mode)
        m.params = params
        return m

    def fit(self, data: Dataset) -> "ProposedModel":
        self.params, self.trace = fit_em(data, self.G, self.hyper, self.config)
        self.fitted_on = data
        return self

    def predict(self, ind: IndividualRecord, query_times) -> TrajectoryPrediction:
        return predict_trajectory(self.params, ind, query_times, self.mode)


class NoPersonalization:
    """Mixture of the full model's fixed subtype curves without individual terms.

    The subtype curves and population map come from a full model fit on the
    same training data; only the subtype weights ``W`` are re-learned. The
    likelihood covariance is ``sigma2 I`` by default, or ``K_OU + sigma2 I``
    with ``keep_ou=True`` (then the OU regression term is also predicted).
    """

    name = "no_personalization"

    def __init__(self, source: ProposedModel | ModelParams, keep_ou: bool = False,
                 l2: float = 1e-4, max_iters: int = 200, tol: float = 1e-8):
        self.source = source
        self.keep_ou = keep_ou
        self.l2 = l2
        self.max_iters = max_iters
        self.tol = tol
        self.params: ModelParams | None = None
        self.fitted_on = None

    def _full_params(self, data) -> ModelParams:
        if isinstance(self.source, ModelParams):
            return self.source
        if self.source.fitted_on is not data:
            self.source.fit(data)
        return self.source.params

    def _factor(self, params, times):
        if self.keep_ou:
            K = ou_gram(params.ou, times, times)
        else:
            K = np.zeros((times.size, times.size))
        K[np.diag_indices_from(K)] += params.noise.sigma2
        return pd_factor(K)

    def log_densities(self, params: ModelParams, ind: IndividualRecord) -> np.ndarray:
        if ind.n_obs == 0:
            return np.zeros(params.G)
        factor = self._factor(params, ind.times)
        base = population_mean(params, ind, ind.times)
        Phi_z = design_matrix(params.basis_z, ind.times)
        return np.array([gaussian_logpdf(ind.values, base + Phi_z @ b, factor) for b in params.beta])

    def fit(self, data: Dataset) -> "NoPersonalization":
        full = self._full_params(data)
        LD = np.array([self.log_densities(full, ind) for ind in data])
        X_z = np.array([ind.x_z for ind in data])
        W = np.zeros_like(full.W)
        ll_old = -np.inf
        for _ in range(self.max_iters):
            lj = log_softmax(X_z @ W.T, axis=1) + LD
            ll = float(np.sum(logsumexp(lj, axis=1)))
            post = softmax(lj, axis=1)
            if abs(ll - ll_old) <= self.tol * abs(ll):
                break
            ll_old = ll
            W, _ = m_step_weights(post, X_z, self.l2, W)
        self.params = full.with_(W=W)
        self.loglik = ll
        self.fitted_on = data
        return self

    def posterior(self, ind: IndividualRecord) -> np.ndarray:
        p = self.params
        return softmax(log_softmax(p.W @ ind.x_z) + self.log_densities(p, ind))

    def predict(self, ind: IndividualRecord, query_times) -> TrajectoryPrediction:
        p = self.params
        t = clamp_times(p.basis_z, np.asarray(query_times, dtype=np.float64).reshape(-1))
        pi = self.posterior(ind)
        order = np.argsort(-pi, kind="stable")
        g = int(order[0])
        noise = np.zeros(t.size)
        if self.keep_ou and ind.n_obs:
            r = ind.values - population_mean(p, ind, ind.times) - design_matrix(p.basis_z, ind.times) @ p.beta[g]
            noise = ou_gram(p.ou, t, ind.times) @ self._factor(p, ind.times).solve(r)
        return TrajectoryPrediction(
            t,
            population_mean(p, ind, t),
            design_matrix(p.basis_z, t) @ p.beta[g],
            np.zeros(t.size),
            noise,
            mode=self.name,
            ranked_subtypes=[(int(k), float(pi[k])) for k in order],
            id=ind.id,
        )
