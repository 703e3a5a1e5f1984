"""File formats: observation/feature/truth CSVs, the JSON model file, and
report/prediction outputs.

Floats are written with ``repr`` (shortest string that round-trips), so
save-then-load reproduces every double exactly.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .basis import BasisConfig
from .exceptions import InputError
from .kernels import NoiseParams, OUParams
from .model import Dataset, Hyperparams, IndividualRecord, ModelParams
from .simulate import RNG_NAME

FORMAT = "dynatraj-model"
VERSION = 1


def atomic_write(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _parse_float(text, line, what, path=""):
    where = f"{path}: " if path else ""
    try:
        v = float(text)
    except ValueError:
        raise InputError(f"{where}cannot parse {what} {text!r}", line) from None
    if not np.isfinite(v):
        raise InputError(f"{where}{what} must be finite, got {text!r}", line)
    return v


# --------------------------------------------------------------------- data files


def read_observations(path) -> dict[str, tuple[list[float], list[float]]]:
    out: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "time", "value"]:
            raise InputError(f"{path}: header must be 'id,time,value'", 1)
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise InputError(f"{path}: expected 3 fields, got {len(row)}", line)
            id_ = row[0].strip()
            t = _parse_float(row[1], line, "time", path)
            if t < 0:
                raise InputError(f"{path}: time must be non-negative, got {row[1]!r}", line)
            y = _parse_float(row[2], line, "value", path)
            ts, ys = out.setdefault(id_, ([], []))
            ts.append(t)
            ys.append(y)
    return out


def read_features(path) -> tuple[list[str], dict[str, np.ndarray]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header or header[0].strip() != "id":
            raise InputError(f"{path}: header must start with 'id'", 1)
        names = [h.strip() for h in header[1:]]
        feats = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}: expected {len(header)} fields, got {len(row)}", line)
            vals = []
            for name, cell in zip(names, row[1:]):
                v = _parse_float(cell, line, f"feature {name}", path)
                if v not in (0.0, 1.0):
                    raise InputError(f"{path}: feature {name} must be 0 or 1, got {cell!r}", line)
                vals.append(v)
            id_ = row[0].strip()
            if id_ in feats:
                raise InputError(f"{path}: duplicate id {id_!r}", line)
            feats[id_] = np.array(vals)
    return names, feats


def _select(names, wanted, path):
    if wanted is None:
        return list(range(len(names)))
    missing = [w for w in wanted if w not in names]
    if missing:
        raise InputError(f"{path}: unknown feature(s) {missing}")
    return [names.index(w) for w in wanted]


def load_dataset(obs_path, features_path, pop_features=None, subtype_features=None) -> Dataset:
    """Build a Dataset; ids with features but no observations get empty histories."""
    obs = read_observations(obs_path)
    names, feats = read_features(features_path)
    missing = sorted(set(obs) - set(feats))
    if missing:
        raise InputError(f"{features_path}: no features for observation id(s) {missing[:5]}")
    ip = _select(names, pop_features, features_path)
    iz = _select(names, subtype_features, features_path)
    inds = []
    for id_, x in feats.items():
        ts, ys = obs.get(id_, ([], []))
        inds.append(IndividualRecord(id_, ts, ys, np.concatenate([[1.0], x[ip]]), np.concatenate([[1.0], x[iz]])))
    return Dataset(tuple(inds), tuple(names[k] for k in ip), tuple(names[k] for k in iz))


def write_dataset(data: Dataset, obs_path, features_path) -> None:
    rows = [(ind.id, t, y) for ind in data for t, y in zip(ind.times, ind.values)]
    atomic_write(obs_path, csv_text(["id", "time", "value"], rows))
    names = list(data.feature_names_z)
    frows = [[ind.id] + [int(v) for v in ind.x_z[1:]] for ind in data]
    atomic_write(features_path, csv_text(["id"] + names, frows))


def write_truth(truth: dict, path) -> None:
    d = len(next(iter(truth.values())).b) if truth else 0
    rows = [[id_, tr.z] + [float(v) for v in tr.b] for id_, tr in truth.items()]
    atomic_write(path, csv_text(["id", "z_true"] + [f"b_true_{k}" for k in range(d)], rows))


def read_truth(path) -> dict[str, tuple[int, np.ndarray]]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out[row[0]] = (int(row[1]), np.array([float(v) for v in row[2:]]))
    return out


# --------------------------------------------------------------------- model file


def hyper_to_dict(h: Hyperparams) -> dict:
    return {
        "basis_p": h.basis_p.to_dict(),
        "basis_z": h.basis_z.to_dict(),
        "basis_l": h.basis_l.to_dict(),
        "Sigma_b": h.Sigma_b.tolist(),
        "amplitude": h.ou.amplitude,
        "length_scale": h.ou.length_scale,
        "sigma2": h.noise.sigma2,
    }


def hyper_from_dict(d: dict) -> Hyperparams:
    return Hyperparams(
        basis_p=BasisConfig.from_dict(d["basis_p"]),
        basis_z=BasisConfig.from_dict(d["basis_z"]),
        basis_l=BasisConfig.from_dict(d["basis_l"]),
        Sigma_b=np.array(d["Sigma_b"], dtype=np.float64),
        ou=OUParams(d["amplitude"], d["length_scale"]),
        noise=NoiseParams(d["sigma2"]),
    )


def params_to_dict(p: ModelParams) -> dict:
    return {
        "hyper": hyper_to_dict(p.hyper),
        "Lambda": p.Lambda.tolist(),
        "W": p.W.tolist(),
        "beta": p.beta.tolist(),
    }


def params_from_dict(d: dict) -> ModelParams:
    return ModelParams(
        Lambda=np.array(d["Lambda"], dtype=np.float64),
        W=np.array(d["W"], dtype=np.float64),
        beta=np.array(d["beta"], dtype=np.float64),
        hyper=hyper_from_dict(d["hyper"]),
    )


def model_document(kind: str, body: dict, metadata: dict | None = None) -> dict:
    return {"format": FORMAT, "version": VERSION, "kind": kind, "rng": RNG_NAME,
            "model": body, "metadata": metadata or {}}


def save_model(path, model, metadata: dict | None = None) -> None:
    """Serialize ``ModelParams`` or any harness model inside the common envelope."""
    from .baselines import BSplineFeatures, BSplineGP, NoPersonalization, ProposedModel

    if isinstance(model, ModelParams):
        doc = model_document("proposed", params_to_dict(model), metadata)
    elif isinstance(model, ProposedModel):
        doc = model_document("proposed", params_to_dict(model.params), metadata)
    elif isinstance(model, NoPersonalization):
        body = params_to_dict(model.params)
        body["keep_ou"] = model.keep_ou
        doc = model_document("no_personalization", body, metadata)
    elif isinstance(model, BSplineGP):
        body = model.mean_model.to_dict()
        body["hyper"] = hyper_to_dict(model.hyper)
        doc = model_document("bspline_gp", body, metadata)
    elif isinstance(model, BSplineFeatures):
        doc = model_document("bspline_features", model.to_dict(), metadata)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    atomic_write(path, json.dumps(doc, indent=1) + "\n")


def load_model(path):
    """Returns ``(kind, model, metadata)``; ``model`` is ``ModelParams`` for the
    full model and a fitted harness object for baselines."""
    from .baselines import BSplineFeatures, BSplineGP, NoPersonalization

    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg})", exc.lineno) from None
    if doc.get("format") != FORMAT:
        raise InputError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise InputError(f"{path}: unsupported version {doc.get('version')!r}")
    kind, body, meta = doc["kind"], doc["model"], doc.get("metadata", {})
    if kind == "proposed":
        return kind, params_from_dict(body), meta
    if kind == "no_personalization":
        m = NoPersonalization(params_from_dict(body), keep_ou=body.get("keep_ou", False))
        m.params = m.source
        return kind, m, meta
    if kind == "bspline_gp":
        m = BSplineGP(hyper_from_dict(body["hyper"]), BSplineFeatures.from_dict(body))
        return kind, m, meta
    if kind == "bspline_features":
        return kind, BSplineFeatures.from_dict(body), meta
    raise InputError(f"{path}: unknown model kind {kind!r}")


# --------------------------------------------------------------------- outputs


def write_trace_csv(trace, path) -> None:
    rows = [(k, ll, pl) for k, (ll, pl) in enumerate(zip(trace.loglik, trace.penalized_loglik))]
    atomic_write(path, csv_text(["iteration", "loglik", "penalized_loglik"], rows))


PREDICTION_COLUMNS = ["time", "population", "subpopulation", "individual", "noise", "yhat"]


def prediction_csv(pred) -> str:
    return csv_text(PREDICTION_COLUMNS, pred.as_rows())


def prediction_json(pred, extra: dict | None = None) -> str:
    doc = {
        "id": pred.id,
        "mode": pred.mode,
        "ranked_subtypes": [{"subtype": g, "probability": p} for g, p in pred.ranked_subtypes],
        "rows": [dict(zip(PREDICTION_COLUMNS, map(float, row))) for row in pred.as_rows()],
    }
    doc.update(extra or {})
    return json.dumps(doc, indent=1) + "\n"


def read_prediction_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != PREDICTION_COLUMNS:
            raise InputError(f"{path}: unexpected prediction header {header}", 1)
        return np.array([[float(v) for v in row] for row in reader]).reshape(-1, len(PREDICTION_COLUMNS))


def _p_cell(p):
    """Blank for the reference row, ``n/a`` where the paired test is undefined."""
    if p == "":
        return p
    return "n/a" if not np.isfinite(p) else p


def report_csv(report) -> str:
    cols = ["model", "cutoff", "bin", "mae", "n", "p_value_vs"]
    rows = [[r[c] for c in cols[:-1]] + [_p_cell(r["p_value_vs"])] for r in report.rows()]
    return csv_text(cols, rows)


def fold_report_csv(report) -> str:
    rows = report.fold_rows()
    cols = ["fold", "model", "cutoff", "bin", "mae", "n"]
    return csv_text(cols, [[r[c] for c in cols] for r in rows])


def detection_csv(report) -> str:
    rows = []
    for m in report.models:
        d = report.detection(m)
        rows.append([m, d["tpr"], d["fpr"], d["n_pos"], d["n_neg"]])
    return csv_text(["model", "tpr", "fpr", "n_pos", "n_neg"], rows)


def bic_csv(rows, best_G) -> str:
    return csv_text(["G", "loglik", "k", "bic", "selected"],
                    [[r["G"], r["loglik"], r["k"], r["bic"], int(r["G"] == best_G)] for r in rows])
