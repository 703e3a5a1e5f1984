"""Dynamic-prediction evaluation: cutoffs, binned MAE against smoothed
trajectories, individual-level cross-validation, paired t-tests and
decline-detection rates.
"""
from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .basis import BasisConfig, design_matrix
from .kernels import pd_solve
from .model import Dataset, IndividualRecord

log = logging.getLogger(__name__)

LAMBDA_GRID = np.logspace(-6, 8, 8)


@dataclass(frozen=True)
class EvalProtocol:
    cutoffs: tuple[float, ...] = (1.0, 2.0, 4.0)
    bins: tuple[tuple[float, float], ...] = ((1.0, 2.0), (2.0, 4.0), (4.0, 8.0), (8.0, 25.0))
    folds: int = 10
    grid_step: float = 0.1
    decline_threshold: float = 10.0
    detection_cutoff: float = 1.0
    observation_times_only: bool = False
    seed: int = 0

    def __post_init__(self):
        bins = tuple((float(a), float(b)) for a, b in self.bins)
        for (a, b), (c, _) in zip(bins, bins[1:]):
            if not (a < b <= c):
                raise ValueError("bins must be disjoint and increasing")
        if bins and not bins[-1][0] < bins[-1][1]:
            raise ValueError("bins must have positive width")
        if self.folds < 2:
            raise ValueError("need at least two folds")
        object.__setattr__(self, "bins", bins)
        object.__setattr__(self, "cutoffs", tuple(float(c) for c in self.cutoffs))

    def pairs(self) -> list[tuple[float, tuple[float, float]]]:
        """(cutoff, bin) cells that can be scored: bin starts at or after the cutoff."""
        return [(c, b) for c in self.cutoffs for b in self.bins if b[0] >= c]

    def bin_grid(self, b) -> np.ndarray:
        lo, hi = b
        k = int(round((hi - lo) / self.grid_step))
        return lo + self.grid_step * np.arange(1, k + 1)


def bin_label(b) -> str:
    return f"({b[0]:g},{b[1]:g}]"


# --------------------------------------------------------------------- smoothing


class Smoother:
    """Penalized B-spline fit of one individual's observations."""

    def __init__(self, basis: BasisConfig, coef: np.ndarray, penalty: float, t_range):
        self.basis = basis
        self.coef = coef
        self.penalty = penalty
        self.t_range = t_range

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        lo, hi = self.basis.boundary_knots
        return design_matrix(self.basis, np.clip(t, lo, hi)) @ self.coef


def second_difference(d: int) -> np.ndarray:
    return np.diff(np.eye(d), n=2, axis=0)


def smooth_trajectory(ind: IndividualRecord, basis: BasisConfig | None = None,
                      grid: Sequence[float] = LAMBDA_GRID) -> Smoother:
    """Second-difference penalized least squares on the subtype basis.

    The penalty weight is picked from ``grid`` by generalized
    cross-validation; when no weight leaves any residual degrees of freedom
    the smoothest one is used.
    """
    if ind.n_obs < 2:
        raise ValueError(f"{ind.id}: need at least two observations to smooth, have {ind.n_obs}")
    basis = basis or BasisConfig.bspline((0.0, 25.0), n_interior=2, degree=2)
    B = design_matrix(basis, ind.times)
    y = ind.values
    n, d = B.shape
    DtD = second_difference(d).T @ second_difference(d)
    BtB, Bty = B.T @ B, B.T @ y
    best = None
    for lam in sorted(grid):
        A = BtB + lam * DtD
        coef = pd_solve(A, Bty)
        edf = float(np.trace(pd_solve(A, BtB)))
        rss = float(np.sum((y - B @ coef) ** 2))
        dof = n - edf
        if dof <= 1e-6 * n:
            continue
        score = n * rss / dof**2
        if best is None or score < best[0]:
            best = (score, lam, coef)
    if best is None:
        lam = float(max(grid))
        best = (np.nan, lam, pd_solve(BtB + lam * DtD, Bty))
    return Smoother(basis, best[2], best[1], (float(ind.times[0]), float(ind.times[-1])))


# --------------------------------------------------------------------- folds


def make_folds(ids: Sequence[str], k: int, seed: int = 0) -> list[list[str]]:
    ids = list(ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [[ids[j] for j in sorted(part)] for part in np.array_split(perm, k)]


# --------------------------------------------------------------------- report


@dataclass
class EvalReport:
    models: list[str]
    protocol: EvalProtocol
    errors: dict = field(default_factory=dict)
    fold_of: dict = field(default_factory=dict)
    detection_counts: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    @property
    def reference(self) -> str:
        return self.models[0]

    def individual_errors(self, model, cutoff, b) -> dict:
        return self.errors.get((model, float(cutoff), tuple(b)), {})

    def mae(self, model, cutoff, b) -> float:
        e = self.individual_errors(model, cutoff, b)
        return float(np.mean(list(e.values()))) if e else float("nan")

    def n(self, model, cutoff, b) -> int:
        return len(self.individual_errors(model, cutoff, b))

    def p_value(self, model, cutoff, b, reference=None) -> float:
        """One-sided paired t-test that ``reference`` has smaller error than ``model``.

        NaN when fewer than two individuals are shared or every difference
        is identical.
        """
        reference = reference or self.reference
        ref = self.individual_errors(reference, cutoff, b)
        other = self.individual_errors(model, cutoff, b)
        common = sorted(set(ref) & set(other))
        if len(common) < 2:
            return float("nan")
        a = np.array([ref[i] for i in common])
        c = np.array([other[i] for i in common])
        diff = a - c
        if np.all(diff == diff[0]):
            return float("nan")
        return float(stats.ttest_rel(a, c, alternative="less").pvalue)

    def detection(self, model) -> dict:
        tp, fn, fp, tn = self.detection_counts.get(model, (0, 0, 0, 0))
        return {
            "tpr": tp / (tp + fn) if tp + fn else float("nan"),
            "fpr": fp / (fp + tn) if fp + tn else float("nan"),
            "n_pos": tp + fn,
            "n_neg": fp + tn,
        }

    def rows(self) -> list[dict]:
        out = []
        for model in self.models:
            for c, b in self.protocol.pairs():
                out.append({
                    "model": model,
                    "cutoff": c,
                    "bin": bin_label(b),
                    "mae": self.mae(model, c, b),
                    "n": self.n(model, c, b),
                    "p_value_vs": "" if model == self.reference else self.p_value(model, c, b),
                })
        return out

    def fold_rows(self) -> list[dict]:
        out = []
        folds = sorted(set(self.fold_of.values()))
        for model in self.models:
            for c, b in self.protocol.pairs():
                e = self.individual_errors(model, c, b)
                for f in folds:
                    vals = [v for i, v in e.items() if self.fold_of[i] == f]
                    out.append({"fold": f, "model": model, "cutoff": c, "bin": bin_label(b),
                                "mae": float(np.mean(vals)) if vals else float("nan"), "n": len(vals)})
        return out

    def table(self) -> str:
        """Plain-text MAE table, one panel per cutoff, starring significant wins."""
        lines = []
        width = max(len(m) for m in self.models) + 2
        for c in self.protocol.cutoffs:
            bins = [b for cc, b in self.protocol.pairs() if cc == c]
            if not bins:
                continue
            lines.append(f"Predictions using {c:g} year(s) of data")
            lines.append("model".ljust(width) + "".join(bin_label(b).rjust(12) for b in bins))
            for model in self.models:
                cells = []
                for b in bins:
                    m = self.mae(model, c, b)
                    star = ""
                    if model == self.reference and len(self.models) > 1:
                        ps = [self.p_value(o, c, b) for o in self.models[1:]]
                        if all(np.isfinite(p) and p < 0.05 for p in ps):
                            star = "*"
                    cells.append(f"{star}{m:.2f}".rjust(12))
                lines.append(model.ljust(width) + "".join(cells))
            lines.append("")
        lines.append("Decline detection (cutoff %g, drop > %g)" % (self.protocol.detection_cutoff,
                                                                  self.protocol.decline_threshold))
        for model in self.models:
            d = self.detection(model)
            lines.append(f"{model.ljust(width)} TPR {d['tpr']:.3f}  FPR {d['fpr']:.3f}  "
                         f"(pos {d['n_pos']}, neg {d['n_neg']})")
        return "\n".join(lines)


# --------------------------------------------------------------------- harness


def _score_individual(model, ind, smooth, protocol):
    """Per-cell errors and detection outcome for one held-out individual."""
    last = ind.times[-1]
    cells = {}
    detect = None
    cutoffs = sorted(set(protocol.cutoffs) | {protocol.detection_cutoff})
    for c in cutoffs:
        history = ind.truncate(c)
        if not np.any(ind.times > c):
            continue
        grids = {}
        if c in protocol.cutoffs:
            for cc, b in protocol.pairs():
                if cc != c:
                    continue
                if protocol.observation_times_only:
                    g = ind.times[(ind.times > max(b[0], c)) & (ind.times <= b[1])]
                else:
                    g = protocol.bin_grid(b)
                    g = g[(g > c) & (g <= last)]
                if g.size:
                    grids[b] = g
        det_grid = None
        if c == protocol.detection_cutoff:
            det_grid = np.arange(c + protocol.grid_step, last + 1e-9, protocol.grid_step)
            det_grid = np.concatenate([[c], det_grid[det_grid <= last]])
        parts = list(grids.values()) + ([det_grid] if det_grid is not None else [])
        if not parts:
            continue
        query = np.concatenate(parts)
        yhat = model.predict(history, query).yhat
        pos = 0
        for b, g in grids.items():
            cells[(c, b)] = float(np.mean(np.abs(yhat[pos : pos + g.size] - smooth(g))))
            pos += g.size
        if det_grid is not None and det_grid.size > 1:
            yd = yhat[pos : pos + det_grid.size]
            sd = smooth(det_grid)
            truth = sd[0] - np.min(sd[1:]) > protocol.decline_threshold
            pred = yd[0] - np.min(yd[1:]) > protocol.decline_threshold
            detect = (bool(truth), bool(pred))
    return cells, detect


def _run_fold(fold_index, models, data, test_ids, smoothers, protocol):
    train = data.subset([i for i in data.ids if i not in set(test_ids)])
    results, failures = {}, []
    for model in models:
        try:
            model.fit(train)
        except Exception as exc:  # a failed fit skips this model on this fold
            log.warning("fold %d: %s fit failed: %s", fold_index, model.name, exc)
            failures.append((model.name, fold_index, str(exc)))
            continue
        for i in test_ids:
            if i not in smoothers:
                continue
            results[(model.name, i)] = _score_individual(model, data[i], smoothers[i], protocol)
    return results, failures


def evaluate(models: Sequence, data: Dataset, protocol: EvalProtocol | None = None,
             smooth_basis: BasisConfig | None = None, threads: int = 1) -> EvalReport:
    """Cross-validated dynamic-prediction errors for each model.

    Folds hold out whole individuals. The first model is the reference for
    the paired tests. Models are deep-copied per fold, so models that share
    state (e.g. a no-personalization variant pointing at a full model)
    should be passed together in one list.
    """
    protocol = protocol or EvalProtocol()
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ValueError(f"model names must be unique, got {names}")
    report = EvalReport(names, protocol)
    smoothers = {}
    for ind in data:
        try:
            smoothers[ind.id] = smooth_trajectory(ind, smooth_basis)
        except ValueError as exc:
            log.info("excluded from evaluation: %s", exc)
            report.excluded.append((ind.id, str(exc)))
    folds = make_folds(data.ids, protocol.folds, protocol.seed)
    for f, ids in enumerate(folds):
        for i in ids:
            report.fold_of[i] = f

    def job(f):
        return _run_fold(f, copy.deepcopy(list(models)), data, folds[f], smoothers, protocol)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            outcomes = list(ex.map(job, range(len(folds))))
    else:
        outcomes = [job(f) for f in range(len(folds))]

    counts = {n: [0, 0, 0, 0] for n in names}
    for results, failures in outcomes:
        report.failures.extend(failures)
        for (name, i), (cells, detect) in sorted(results.items()):
            for (c, b), err in cells.items():
                report.errors.setdefault((name, c, b), {})[i] = err
            if detect is not None:
                truth, pred = detect
                k = (0 if pred else 1) if truth else (2 if pred else 3)
                counts[name][k] += 1
    report.detection_counts = {n: tuple(v) for n, v in counts.items()}
    return report


def decline_detection(models: Sequence, data: Dataset, protocol: EvalProtocol | None = None, **kw) -> dict:
    """Per-model true/false positive rates for a drop larger than the threshold."""
    report = evaluate(models, data, protocol, **kw)
    return {name: report.detection(name) for name in report.models}
