"""Basis expansions mapping a time (years) to a feature vector.

Two kinds are supported: clamped B-splines (used for subtype curves) and
plain polynomials ``[1, t, t**2, ...]`` (used for the population and
individual components).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .exceptions import DomainError, ParameterError


@dataclass(frozen=True)
class BasisConfig:
    kind: str
    degree: int
    boundary_knots: tuple[float, float] | None = None
    interior_knots: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("bspline", "polynomial"):
            raise ParameterError(f"unknown basis kind {self.kind!r}")
        if int(self.degree) != self.degree or self.degree < 0:
            raise ParameterError(f"degree must be a non-negative integer, got {self.degree!r}")
        object.__setattr__(self, "degree", int(self.degree))
        if self.kind == "bspline":
            if self.boundary_knots is None:
                raise ParameterError("bspline basis needs boundary_knots")
            lo, hi = (float(v) for v in self.boundary_knots)
            if not lo < hi:
                raise ParameterError(f"boundary knots must be increasing, got {self.boundary_knots}")
            interior = tuple(float(v) for v in self.interior_knots)
            if any(not lo < k < hi for k in interior):
                raise ParameterError("interior knots must lie strictly inside the boundary")
            if any(b <= a for a, b in zip(interior, interior[1:])):
                raise ParameterError("interior knots must be strictly increasing")
            object.__setattr__(self, "boundary_knots", (lo, hi))
            object.__setattr__(self, "interior_knots", interior)
        else:
            object.__setattr__(self, "boundary_knots", None)
            object.__setattr__(self, "interior_knots", ())

    @classmethod
    def bspline(cls, boundary=(0.0, 25.0), interior=None, degree=2, n_interior=2):
        """Clamped B-spline; ``n_interior`` equally spaced knots when ``interior`` is None."""
        lo, hi = boundary
        if interior is None:
            interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
        return cls("bspline", degree, (lo, hi), tuple(float(k) for k in interior))

    @classmethod
    def polynomial(cls, degree):
        return cls("polynomial", degree)

    @property
    def dim(self) -> int:
        if self.kind == "bspline":
            return len(self.interior_knots) + self.degree + 1
        return self.degree + 1

    @property
    def knot_vector(self) -> np.ndarray:
        """Full knot vector with boundary knots repeated ``degree + 1`` times."""
        if self.kind != "bspline":
            raise ParameterError("polynomial basis has no knots")
        lo, hi = self.boundary_knots
        p = self.degree
        return np.array([lo] * (p + 1) + list(self.interior_knots) + [hi] * (p + 1))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "degree": self.degree}
        if self.kind == "bspline":
            d["boundary_knots"] = list(self.boundary_knots)
            d["interior_knots"] = list(self.interior_knots)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BasisConfig":
        if d["kind"] == "bspline":
            return cls("bspline", d["degree"], tuple(d["boundary_knots"]), tuple(d["interior_knots"]))
        return cls("polynomial", d["degree"])


def _check_domain(config, times):
    if config.kind != "bspline" or times.size == 0:
        return
    lo, hi = config.boundary_knots
    bad = np.flatnonzero(~((times >= lo) & (times <= hi)))
    if bad.size:
        j = int(bad[0])
        raise DomainError(f"time {times[j]!r} (row {j}) outside basis boundary [{lo}, {hi}]")


def evaluate_basis(config: BasisConfig, t: float) -> np.ndarray:
    t = float(t)
    if config.kind == "bspline":
        lo, hi = config.boundary_knots
        if not lo <= t <= hi:
            raise DomainError(f"time {t!r} outside basis boundary [{lo}, {hi}]")
    return design_matrix(config, np.array([t]))[0]


def design_matrix(config: BasisConfig, times) -> np.ndarray:
    """Stack ``evaluate_basis`` rows for each time; shape ``(len(times), dim)``."""
    times = np.ascontiguousarray(times, dtype=np.float64).reshape(-1)
    if config.kind == "polynomial":
        return np.vander(times, config.degree + 1, increasing=True)
    _check_domain(config, times)
    return _backend.impl.bspline_design(np.ascontiguousarray(config.knot_vector), config.degree, times)


def clamp_times(config: BasisConfig, times) -> np.ndarray:
    """Clip query times into the basis boundary, warning when anything moved."""
    times = np.asarray(times, dtype=np.float64)
    if config.kind != "bspline":
        return times
    lo, hi = config.boundary_knots
    clipped = np.clip(times, lo, hi)
    if np.any(clipped != times):
        warnings.warn(
            f"query times outside [{lo}, {hi}] clamped to the boundary", RuntimeWarning, stacklevel=2
        )
    return clipped
