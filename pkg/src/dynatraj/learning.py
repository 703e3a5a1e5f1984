"""Expectation-maximization for the subtype mixture, and BIC selection of G.

The covariance hyper-parameters are fixed while EM runs, so all
individuals are whitened once (:class:`~dynatraj.model.WhitenedData`) and
every M-step reduces to small accumulated normal equations.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import log_softmax, softmax

from .basis import design_matrix
from .exceptions import LearningError, NumericalError, ParameterError
from .kernels import pd_factor, pd_solve
from .model import (
    Dataset,
    Hyperparams,
    IndividualRecord,
    ModelParams,
    WhitenedData,
    log_subtype_prior,
    subtype_log_densities,
    unvec,
    vec,
)

log = logging.getLogger(__name__)

RESPONSIBILITY_FLOOR = 1e-12


@dataclass(frozen=True)
class EMConfig:
    max_iters: int = 200
    loglik_rel_tol: float = 1e-6
    inner_tol: float = 1e-8
    max_inner_sweeps: int = 50
    weight_grad_tol: float = 1e-6
    weight_max_steps: int = 500
    random_restarts: int = 5
    seed: int = 0
    l2_weight_penalty: float = 1e-4

    def __post_init__(self):
        for name in ("loglik_rel_tol", "inner_tol", "weight_grad_tol"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if self.random_restarts < 1 or self.max_iters < 0:
            raise ParameterError("random_restarts must be >= 1 and max_iters >= 0")
        if self.l2_weight_penalty < 0:
            raise ParameterError("l2_weight_penalty must be non-negative")


@dataclass
class EMTrace:
    loglik: list[float] = field(default_factory=list)
    penalized_loglik: list[float] = field(default_factory=list)
    param_change: list[float] = field(default_factory=list)
    restart: int = 0
    converged: bool = False
    restart_logliks: list[float] = field(default_factory=list)
    failed_restarts: list[int] = field(default_factory=list)
    weight_warnings: int = 0
    starved_subtypes: list[int] = field(default_factory=list)

    @property
    def n_iter(self) -> int:
        return max(len(self.loglik) - 1, 0)

    @property
    def final_loglik(self) -> float:
        return self.loglik[-1]


def _whitened(params_or_hyper, data) -> WhitenedData:
    if isinstance(data, WhitenedData):
        return data
    hyper = params_or_hyper.hyper if isinstance(params_or_hyper, ModelParams) else params_or_hyper
    return WhitenedData.build(hyper, data)


# --------------------------------------------------------------------- E-step


def e_step(params: ModelParams, ind: IndividualRecord) -> np.ndarray:
    """Posterior subtype probabilities for one individual."""
    lj = log_subtype_prior(params, ind.x_z)
    if ind.n_obs:
        lj = lj + subtype_log_densities(params, ind)
    return softmax(lj)


# --------------------------------------------------------------------- M-step: w


def weights_objective(W, posteriors, X_z, l2) -> float:
    logp = log_softmax(X_z @ W.T, axis=1)
    return float(np.sum(posteriors * logp) - l2 * np.sum(W[1:] ** 2))


def weights_gradient(W, posteriors, X_z, l2) -> np.ndarray:
    S = softmax(X_z @ W.T, axis=1)
    grad = (posteriors - S).T @ X_z - 2.0 * l2 * W
    grad[0] = 0.0
    return grad


def m_step_weights(posteriors, X_z, l2=1e-4, W0=None, grad_tol=1e-6, max_steps=500):
    """Maximize the expected multinomial-logistic term over ``W`` with ``W[0] = 0``.

    Gradient ascent with Barzilai-Borwein trial steps and Armijo
    backtracking; every accepted step increases the objective.

    Returns
    -------
    W : ndarray, shape (G, q_z)
    converged : bool
        False when ``max_steps`` ran out before the gradient fell below
        ``grad_tol``; ``W`` is then the best iterate found.
    """
    posteriors = np.asarray(posteriors, dtype=np.float64)
    X_z = np.asarray(X_z, dtype=np.float64)
    G = posteriors.shape[1]
    W = np.zeros((G, X_z.shape[1])) if W0 is None else np.array(W0, dtype=np.float64)
    W[0] = 0.0
    if G == 1:
        return W, True
    f = weights_objective(W, posteriors, X_z, l2)
    g = weights_gradient(W, posteriors, X_z, l2)
    lip = 0.5 * np.linalg.eigvalsh(X_z.T @ X_z)[-1] + 2.0 * l2
    step = 1.0 / max(lip, 1e-12)
    W_prev = g_prev = None
    for _ in range(max_steps):
        if np.max(np.abs(g)) < grad_tol:
            return W, True
        if W_prev is not None:
            s, dg = (W - W_prev).ravel(), (g - g_prev).ravel()
            curv = -float(s @ dg)
            if curv > 0:
                step = float(s @ s) / curv
        gg = float(np.sum(g * g))
        while True:
            W_new = W + step * g
            f_new = weights_objective(W_new, posteriors, X_z, l2)
            if f_new >= f + 1e-4 * step * gg:
                break
            step *= 0.5
            if step < 1e-20:
                return W, False
        W_prev, g_prev = W, g
        W, f = W_new, f_new
        g = weights_gradient(W, posteriors, X_z, l2)
    converged = bool(np.max(np.abs(g)) < grad_tol)
    return W, converged


# --------------------------------------------------------------------- M-step: beta, Lambda


def _solve_normal(A, b, label):
    try:
        return pd_factor(A).solve(b), False
    except NumericalError:
        d = A.shape[0]
        ridge = 1e-6 * max(np.trace(A), 1e-300) / d
        log.warning("%s normal equations singular; ridge %.3g applied", label, ridge)
        return pd_solve(A + ridge * np.eye(d), b), True


def m_step_subtype_coeffs(params: ModelParams, data, posteriors):
    """Closed-form weighted least squares for each subtype's coefficients.

    Returns
    -------
    beta : ndarray, shape (G, d_z)
    starved : list of int
        Subtypes whose accumulated system needed the ridge fallback or whose
        total responsibility is negligible.
    """
    wd = _whitened(params, data)
    P = np.maximum(np.asarray(posteriors, dtype=np.float64), RESPONSIBILITY_FLOOR)
    P[wd.n == 0] = 0.0
    lam = vec(params.Lambda)
    rhs_i = wd.Zy - wd.ZP @ lam
    beta = np.empty_like(params.beta, dtype=np.float64)
    starved = []
    for g in range(params.G):
        A = np.einsum("i,ijk->jk", P[:, g], wd.ZZ)
        b = P[:, g] @ rhs_i
        beta[g], ridged = _solve_normal(0.5 * (A + A.T), b, f"subtype {g}")
        if ridged or P[:, g].sum() < 1e-6:
            starved.append(g)
    return beta, starved


def m_step_population_map(params: ModelParams, data, posteriors) -> np.ndarray:
    """Closed-form weighted least squares for ``vec(Lambda)`` given ``beta``."""
    wd = _whitened(params, data)
    P = np.asarray(posteriors, dtype=np.float64)
    beta_bar = P @ params.beta
    A = wd.PP.sum(axis=0)
    b = wd.Py.sum(axis=0) - np.einsum("ijk,ij->k", wd.ZP, beta_bar)
    lam, _ = _solve_normal(0.5 * (A + A.T), b, "population map")
    return unvec(lam, params.Lambda.shape[0])


def expected_complete_loglik(params: ModelParams, data, posteriors, l2=0.0) -> float:
    """Posterior-weighted complete-data log-likelihood minus the weight penalty."""
    wd = _whitened(params, data)
    P = np.asarray(posteriors, dtype=np.float64)
    lj = wd.log_joint(params)
    return float(np.sum(P * lj) - l2 * np.sum(params.W[1:] ** 2))


def expected_complete_gradients(params: ModelParams, data, posteriors, l2=0.0) -> dict:
    """Analytic gradients of :func:`expected_complete_loglik` w.r.t. beta, Lambda, W."""
    wd = _whitened(params, data)
    P = np.asarray(posteriors, dtype=np.float64)
    Pa = P.copy()
    Pa[wd.n == 0] = 0.0
    lam = vec(params.Lambda)
    rhs_i = wd.Zy - wd.ZP @ lam
    g_beta = np.stack(
        [Pa[:, g] @ rhs_i - np.einsum("i,ijk->jk", Pa[:, g], wd.ZZ) @ params.beta[g] for g in range(params.G)]
    )
    beta_bar = Pa @ params.beta
    g_lam = (
        wd.Py.sum(axis=0)
        - wd.PP.sum(axis=0) @ lam
        - np.einsum("ijk,ij->k", wd.ZP, beta_bar)
    )
    g_W = weights_gradient(params.W, P, wd.X_z, l2)
    return {"beta": g_beta, "Lambda": unvec(g_lam, params.Lambda.shape[0]), "W": g_W}


# --------------------------------------------------------------------- EM driver


def _initial_beta(hyper: Hyperparams, data: Dataset, G: int, rng: np.random.Generator) -> np.ndarray:
    coefs = []
    d_z = hyper.basis_z.dim
    for ind in data:
        if ind.n_obs < 3:
            continue
        Phi = design_matrix(hyper.basis_z, ind.times)
        A = Phi.T @ Phi + 1e-3 * np.eye(d_z)
        coefs.append(np.linalg.solve(A, Phi.T @ ind.values))
    coefs = np.array(coefs).reshape(-1, d_z)
    if coefs.shape[0] == 0:
        pooled = np.concatenate([ind.values for ind in data])
        return np.full((G, d_z), float(np.mean(pooled))) + rng.normal(0.0, 1.0, (G, d_z))
    if G == 1:
        return coefs.mean(axis=0, keepdims=True)
    if coefs.shape[0] < G:
        pick = rng.choice(coefs.shape[0], G, replace=True)
        return coefs[pick] + rng.normal(0.0, 1.0, (G, d_z))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        centers, labels = kmeans2(coefs, G, minit="++", seed=rng)
    counts = np.bincount(labels, minlength=G)
    for g in np.flatnonzero(counts == 0):
        centers[g] = coefs[rng.integers(coefs.shape[0])]
    return centers


def _run_em(wd: WhitenedData, data: Dataset, G: int, hyper: Hyperparams, config: EMConfig,
            rng: np.random.Generator, init: ModelParams | None = None):
    if init is None:
        params = ModelParams(
            Lambda=np.zeros((hyper.basis_p.dim, wd.X_p.shape[1])),
            W=np.zeros((G, wd.X_z.shape[1])),
            beta=_initial_beta(hyper, data, G, rng),
            hyper=hyper,
        )
    else:
        params = init
    l2 = config.l2_weight_penalty
    trace = EMTrace()
    post, ll = wd.posteriors(params)
    trace.loglik.append(ll)
    trace.penalized_loglik.append(ll - l2 * float(np.sum(params.W[1:] ** 2)))
    for _ in range(config.max_iters):
        W, ok = m_step_weights(post, wd.X_z, l2, params.W, config.weight_grad_tol, config.weight_max_steps)
        if not ok:
            trace.weight_warnings += 1
        old = params
        params = params.with_(W=W)
        starved = []
        for _ in range(config.max_inner_sweeps):
            beta, starved = m_step_subtype_coeffs(params, wd, post)
            params_b = params.with_(beta=beta)
            Lambda = m_step_population_map(params_b, wd, post)
            change = max(np.max(np.abs(beta - params.beta)), np.max(np.abs(Lambda - params.Lambda)))
            scale = max(1.0, np.max(np.abs(beta)), np.max(np.abs(Lambda)))
            params = params_b.with_(Lambda=Lambda)
            if change < config.inner_tol * scale:
                break
        post, ll_new = wd.posteriors(params)
        trace.loglik.append(ll_new)
        trace.penalized_loglik.append(ll_new - l2 * float(np.sum(params.W[1:] ** 2)))
        trace.param_change.append(
            float(
                np.sqrt(
                    np.sum((params.beta - old.beta) ** 2)
                    + np.sum((params.Lambda - old.Lambda) ** 2)
                    + np.sum((params.W - old.W) ** 2)
                )
            )
        )
        trace.starved_subtypes = starved
        if abs(ll_new - ll) <= config.loglik_rel_tol * abs(ll):
            trace.converged = True
            break
        ll = ll_new
    return params, trace


def fit_em(data: Dataset, G: int, hyper: Hyperparams, config: EMConfig | None = None,
           whitened: WhitenedData | None = None) -> tuple[ModelParams, EMTrace]:
    """Fit ``Lambda``, ``W`` and ``beta`` by EM with the best of several restarts.

    Each restart initializes the subtype curves from k-means over
    per-individual ridge B-spline fits. A restart that hits a numerical
    failure is dropped; :class:`LearningError` is raised if all of them do.
    """
    config = config or EMConfig()
    if G < 1:
        raise ParameterError("G must be >= 1")
    if len(data) == 0:
        raise ParameterError("cannot fit an empty dataset")
    wd = whitened if whitened is not None else WhitenedData.build(hyper, data)
    streams = np.random.SeedSequence(config.seed).spawn(config.random_restarts)
    best = None
    finals, failed = [], []
    for r, ss in enumerate(streams):
        try:
            params, trace = _run_em(wd, data, G, hyper, config, np.random.default_rng(ss))
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.warning("EM restart %d failed: %s", r, exc)
            failed.append(r)
            finals.append(float("nan"))
            continue
        finals.append(trace.final_loglik)
        if best is None or trace.final_loglik > best[1].final_loglik:
            trace.restart = r
            best = (params, trace)
    if best is None:
        raise LearningError(f"all {config.random_restarts} EM restarts failed")
    best[1].restart_logliks = finals
    best[1].failed_restarts = failed
    return best


# --------------------------------------------------------------------- model selection


def n_free_params(d_p: int, q_p: int, G: int, q_z: int, d_z: int) -> int:
    return d_p * q_p + (G - 1) * q_z + G * d_z


def bic(loglik: float, k: int, M: int) -> float:
    return -2.0 * loglik + k * np.log(M)


def select_num_subtypes(data: Dataset, G_range: Sequence[int], hyper: Hyperparams,
                        config: EMConfig | None = None):
    """Fit each G and pick the smallest BIC (ties go to the smaller G).

    BIC uses the number of individuals as the sample size.

    Returns
    -------
    rows : list of dict
        ``G, loglik, k, bic`` per candidate, in the order given.
    best_G : int
    fits : dict
        ``G -> (ModelParams, EMTrace)``.
    """
    G_range = list(G_range)
    if not G_range:
        raise ParameterError("G_range must be non-empty")
    wd = WhitenedData.build(hyper, data)
    rows, fits = [], {}
    M = len(data)
    for G in G_range:
        params, trace = fit_em(data, G, hyper, config, whitened=wd)
        k = n_free_params(hyper.basis_p.dim, wd.X_p.shape[1], G, wd.X_z.shape[1], hyper.basis_z.dim)
        rows.append({"G": G, "loglik": trace.final_loglik, "k": k, "bic": bic(trace.final_loglik, k, M)})
        fits[G] = (params, trace)
    best = min(rows, key=lambda r: (r["bic"], r["G"]))
    return rows, best["G"], fits


def select_hyperparams(data: Dataset, G: int, candidates: Sequence[Hyperparams],
                       config: EMConfig | None = None):
    """Fit EM under each covariance candidate and keep the highest log-likelihood."""
    if not candidates:
        raise ParameterError("no hyper-parameter candidates given")
    rows = []
    best = None
    for k, hyper in enumerate(candidates):
        params, trace = fit_em(data, G, hyper, config)
        rows.append({"candidate": k, "hyper": hyper, "loglik": trace.final_loglik})
        if best is None or trace.final_loglik > best[2].final_loglik:
            best = (k, params, trace)
    return rows, best
