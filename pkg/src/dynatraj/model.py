"""Data model and the likelihood computations shared by learning and prediction.

Subtypes are indexed from 0; ``W[0]`` is pinned to zero for
identifiability of the multinomial regression.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp

from .basis import BasisConfig, design_matrix
from .exceptions import NumericalError, ParameterError
from .kernels import (
    NoiseParams,
    OUParams,
    check_covariance,
    composite_covariance,
    gaussian_logpdf,
    pd_factor,
    ragged_whiten,
)

LOG_2PI = float(np.log(2 * np.pi))


def _frozen(a, ndim=1):
    a = np.array(a, dtype=np.float64, ndmin=ndim)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class IndividualRecord:
    """One individual's marker history and baseline features.

    Observations are stably sorted by time on construction. Both feature
    vectors carry a leading intercept entry of 1.0.
    """

    id: str
    times: np.ndarray
    values: np.ndarray
    x_p: np.ndarray
    x_z: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        y = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if t.shape != y.shape:
            raise ParameterError(f"{self.id}: {t.size} times but {y.size} values")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise ParameterError(f"{self.id}: non-finite times or values")
        order = np.argsort(t, kind="stable")
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "times", _frozen(t[order]))
        object.__setattr__(self, "values", _frozen(y[order]))
        for name in ("x_p", "x_z"):
            x = _frozen(getattr(self, name))
            if x.size == 0 or x[0] != 1.0:
                raise ParameterError(f"{self.id}: {name} must start with an intercept entry of 1.0")
            object.__setattr__(self, name, x)

    @property
    def n_obs(self) -> int:
        return self.times.size

    def truncate(self, cutoff: float) -> "IndividualRecord":
        """History observed at or before ``cutoff``."""
        keep = self.times <= cutoff
        return replace(self, times=self.times[keep], values=self.values[keep])


@dataclass(frozen=True)
class Hyperparams:
    """Structure and covariance hyper-parameters held fixed during EM."""

    basis_p: BasisConfig
    basis_z: BasisConfig
    basis_l: BasisConfig
    Sigma_b: np.ndarray
    ou: OUParams
    noise: NoiseParams

    def __post_init__(self):
        S = _frozen(check_covariance(self.Sigma_b), ndim=2)
        if S.shape[0] != self.basis_l.dim:
            raise ParameterError(f"Sigma_b is {S.shape} but individual basis has dimension {self.basis_l.dim}")
        object.__setattr__(self, "Sigma_b", S)

    @classmethod
    def defaults(cls, sigma_b=(16.0, 1e-2), amplitude=6.0, length_scale=2.0, sigma2=1.0):
        """Constant population map, quadratic B-spline subtypes on [0, 25] with two
        interior knots, linear individual effects."""
        return cls(
            basis_p=BasisConfig.polynomial(0),
            basis_z=BasisConfig.bspline((0.0, 25.0), n_interior=2, degree=2),
            basis_l=BasisConfig.polynomial(1),
            Sigma_b=np.diag(sigma_b),
            ou=OUParams(amplitude, length_scale),
            noise=NoiseParams(sigma2),
        )

    def covariance(self, times) -> np.ndarray:
        return composite_covariance(self.Sigma_b, self.basis_l, self.ou, self.noise, times)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full parameter set.

    ``Lambda`` is ``(d_p, q_p)``, ``W`` is ``(G, q_z)`` with ``W[0] == 0``,
    ``beta`` is ``(G, d_z)``.
    """

    Lambda: np.ndarray
    W: np.ndarray
    beta: np.ndarray
    hyper: Hyperparams

    def __post_init__(self):
        L = _frozen(self.Lambda, ndim=2)
        W = _frozen(self.W, ndim=2)
        B = _frozen(self.beta, ndim=2)
        h = self.hyper
        if L.shape[0] != h.basis_p.dim:
            raise ParameterError(f"Lambda has {L.shape[0]} rows, population basis has dimension {h.basis_p.dim}")
        if B.shape[1] != h.basis_z.dim:
            raise ParameterError(f"beta has {B.shape[1]} columns, subtype basis has dimension {h.basis_z.dim}")
        if W.shape[0] != B.shape[0]:
            raise ParameterError(f"W has {W.shape[0]} rows but beta has {B.shape[0]}")
        if np.any(W[0] != 0.0):
            raise ParameterError("W[0] must be exactly zero")
        object.__setattr__(self, "Lambda", L)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "beta", B)

    @property
    def G(self) -> int:
        return self.beta.shape[0]

    @property
    def q_p(self) -> int:
        return self.Lambda.shape[1]

    @property
    def q_z(self) -> int:
        return self.W.shape[1]

    # convenience accessors mirroring the hyper-parameter names
    @property
    def Sigma_b(self):
        return self.hyper.Sigma_b

    @property
    def ou(self):
        return self.hyper.ou

    @property
    def noise(self):
        return self.hyper.noise

    @property
    def basis_p(self):
        return self.hyper.basis_p

    @property
    def basis_z(self):
        return self.hyper.basis_z

    @property
    def basis_l(self):
        return self.hyper.basis_l

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def permuted(self, order: Sequence[int]) -> "ModelParams":
        """Relabel subtypes so new subtype ``k`` is old subtype ``order[k]``; re-pins ``W[0] = 0``."""
        order = np.asarray(order)
        W = self.W[order]
        return replace(self, W=W - W[0], beta=self.beta[order])


@dataclass(frozen=True, eq=False)
class Dataset:
    individuals: tuple[IndividualRecord, ...]
    feature_names_p: tuple[str, ...] = ()
    feature_names_z: tuple[str, ...] = ()
    marker: str = "PFVC"
    units: str = "% predicted"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        inds = tuple(self.individuals)
        object.__setattr__(self, "individuals", inds)
        index = {}
        for k, ind in enumerate(inds):
            if ind.id in index:
                raise ParameterError(f"duplicate individual id {ind.id!r}")
            index[ind.id] = k
        if inds:
            qp, qz = inds[0].x_p.size, inds[0].x_z.size
            for ind in inds:
                if ind.x_p.size != qp or ind.x_z.size != qz:
                    raise ParameterError(f"{ind.id}: feature dimensions differ from the rest of the dataset")
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "feature_names_p", tuple(self.feature_names_p))
        object.__setattr__(self, "feature_names_z", tuple(self.feature_names_z))

    def __len__(self) -> int:
        return len(self.individuals)

    def __iter__(self) -> Iterator[IndividualRecord]:
        return iter(self.individuals)

    def __getitem__(self, id_) -> IndividualRecord:
        return self.individuals[self._index[id_]]

    def __contains__(self, id_) -> bool:
        return id_ in self._index

    @property
    def ids(self) -> list[str]:
        return [ind.id for ind in self.individuals]

    @property
    def n_observations(self) -> int:
        return sum(ind.n_obs for ind in self.individuals)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        return replace(self, individuals=tuple(self[i] for i in ids))


def log_subtype_prior(params: ModelParams, x_z) -> np.ndarray:
    x_z = np.asarray(x_z, dtype=np.float64)
    if x_z.shape[-1] != params.q_z:
        raise ParameterError(f"x_z has length {x_z.shape[-1]}, W expects {params.q_z}")
    return log_softmax(x_z @ params.W.T, axis=-1)


def subtype_prior(params: ModelParams, x_z) -> np.ndarray:
    return np.exp(log_subtype_prior(params, x_z))


def population_coeffs(params: ModelParams, x_p) -> np.ndarray:
    """``rho_i = Lambda x_p``: population-level basis coefficients for one individual."""
    x_p = np.asarray(x_p, dtype=np.float64)
    if x_p.shape[-1] != params.q_p:
        raise ParameterError(f"x_p has length {x_p.shape[-1]}, Lambda expects {params.q_p}")
    return params.Lambda @ x_p


def population_mean(params: ModelParams, ind: IndividualRecord, times) -> np.ndarray:
    return design_matrix(params.basis_p, times) @ population_coeffs(params, ind.x_p)


def mean_under_subtype(params: ModelParams, ind: IndividualRecord, g: int, times=None) -> np.ndarray:
    if not 0 <= g < params.G:
        raise ParameterError(f"subtype index {g} out of range for G={params.G}")
    times = ind.times if times is None else np.asarray(times, dtype=np.float64)
    return population_mean(params, ind, times) + design_matrix(params.basis_z, times) @ params.beta[g]


def subtype_log_densities(params: ModelParams, ind: IndividualRecord) -> np.ndarray:
    """``log N(y_i | mean_g, K_i)`` for each subtype, via one Cholesky of ``K_i``."""
    if ind.n_obs == 0:
        return np.zeros(params.G)
    try:
        factor = pd_factor(params.hyper.covariance(ind.times))
    except NumericalError as exc:
        exc.individual = ind.id
        raise
    base = population_mean(params, ind, ind.times)
    Phi_z = design_matrix(params.basis_z, ind.times)
    return np.array([gaussian_logpdf(ind.values, base + Phi_z @ b, factor) for b in params.beta])


def individual_loglik(params: ModelParams, ind: IndividualRecord) -> float:
    if ind.n_obs == 0:
        return 0.0
    return float(logsumexp(log_subtype_prior(params, ind.x_z) + subtype_log_densities(params, ind)))


def observed_data_loglik(params: ModelParams, data: Dataset) -> float:
    if len(data) == 0:
        return 0.0
    return WhitenedData.build(params.hyper, data).loglik(params)


def pop_design(Phi_p: np.ndarray, X_p_rows: np.ndarray) -> np.ndarray:
    """Row-wise ``kron(x_p, Phi_p(t))``: the design whose product with
    column-stacked ``vec(Lambda)`` gives ``Phi_p Lambda x_p``."""
    return (X_p_rows[:, :, None] * Phi_p[:, None, :]).reshape(Phi_p.shape[0], -1)


def vec(Lambda: np.ndarray) -> np.ndarray:
    return np.asarray(Lambda).reshape(-1, order="F")


def unvec(v: np.ndarray, d_p: int) -> np.ndarray:
    return np.asarray(v).reshape((d_p, -1), order="F")


class WhitenedData:
    """Dataset pre-whitened by each individual's covariance factor.

    With the covariance hyper-parameters fixed, ``K_i = L_i L_i'`` never
    changes during EM, so every quadratic form reduces to sums over rows of
    ``L_i^{-1} [y_i | Phi_z | Phi_p^(x)]``. Per-individual Gram blocks are
    kept for the weighted normal equations.
    """

    def __init__(self, hyper: Hyperparams, data: Dataset):
        self.hyper = hyper
        self.ids = data.ids
        self.M = len(data)
        self.n = np.array([ind.n_obs for ind in data], dtype=np.intp)
        self.offsets = np.concatenate([[0], np.cumsum(self.n)]).astype(np.intp)
        self.X_p = np.array([ind.x_p for ind in data]).reshape(self.M, -1)
        self.X_z = np.array([ind.x_z for ind in data]).reshape(self.M, -1)
        times = np.concatenate([ind.times for ind in data]) if self.M else np.zeros(0)
        values = np.concatenate([ind.values for ind in data]) if self.M else np.zeros(0)
        owner = np.repeat(np.arange(self.M), self.n)
        Phi_z = design_matrix(hyper.basis_z, times)
        Phi_p = design_matrix(hyper.basis_p, times)
        Phi_l = design_matrix(hyper.basis_l, times)
        P = pop_design(Phi_p, self.X_p[owner])
        d_z, d_pq = Phi_z.shape[1], P.shape[1]
        rhs = np.hstack([values[:, None], Phi_z, P])
        try:
            white, self.logdet, self.jitter = ragged_whiten(
                times, self.offsets, Phi_l, hyper.Sigma_b, hyper.ou, hyper.noise, rhs
            )
        except NumericalError as exc:
            exc.individual = self.ids[exc.individual]
            raise
        self.times = times
        self.owner = owner
        self.y = white[:, 0]
        self.Z = white[:, 1 : 1 + d_z]
        self.P = white[:, 1 + d_z :]
        self.d_z, self.d_pq = d_z, d_pq

        active = np.flatnonzero(self.n > 0)
        starts = self.offsets[active]

        def block_sum(rows, shape):
            out = np.zeros((self.M,) + shape)
            if active.size:
                out[active] = np.add.reduceat(rows, starts, axis=0)
            return out

        self.ZZ = block_sum(self.Z[:, :, None] * self.Z[:, None, :], (d_z, d_z))
        self.Zy = block_sum(self.Z * self.y[:, None], (d_z,))
        self.ZP = block_sum(self.Z[:, :, None] * self.P[:, None, :], (d_z, d_pq))
        self.PP = block_sum(self.P[:, :, None] * self.P[:, None, :], (d_pq, d_pq))
        self.Py = block_sum(self.P * self.y[:, None], (d_pq,))
        self._active = active
        self._starts = starts

    @classmethod
    def build(cls, hyper: Hyperparams, data: Dataset) -> "WhitenedData":
        return cls(hyper, data)

    def quad_forms(self, Lambda, beta) -> np.ndarray:
        """``(M, G)`` squared Mahalanobis norms of the residual under each subtype."""
        base = self.y - self.P @ vec(Lambda)
        R = base[:, None] - self.Z @ np.asarray(beta).T
        out = np.zeros((self.M, R.shape[1]))
        if self._active.size:
            out[self._active] = np.add.reduceat(R * R, self._starts, axis=0)
        return out

    def log_densities(self, params: ModelParams) -> np.ndarray:
        const = self.n * LOG_2PI + self.logdet
        return -0.5 * (const[:, None] + self.quad_forms(params.Lambda, params.beta))

    def log_joint(self, params: ModelParams) -> np.ndarray:
        """``(M, G)`` of ``log pi_g(x_z) + log N(y | mean_g, K)``; prior only for empty histories."""
        return log_subtype_prior(params, self.X_z) + self.log_densities(params)

    def loglik_terms(self, params: ModelParams) -> np.ndarray:
        terms = logsumexp(self.log_joint(params), axis=1)
        terms[self.n == 0] = 0.0
        return terms

    def loglik(self, params: ModelParams) -> float:
        # fixed-order reduction keeps the sum bit-stable
        return float(np.sum(self.loglik_terms(params)))

    def posteriors(self, params: ModelParams) -> tuple[np.ndarray, float]:
        """Responsibilities ``(M, G)`` and the observed-data log-likelihood."""
        lj = self.log_joint(params)
        norm = logsumexp(lj, axis=1)
        post = np.exp(lj - norm[:, None])
        post /= post.sum(axis=1, keepdims=True)
        norm[self.n == 0] = 0.0
        return post, float(np.sum(norm))
