"""Command-line interface: ``dynatraj {simulate,fit,predict,evaluate,select}``.

Settings resolve as command-line flag, then ``--config`` file, then built-in
default. The config file is flat ``key = value`` text; keys are the long
option names with or without the leading dashes, and ``#`` starts a comment.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 unknown id.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .basis import BasisConfig
from .baselines import BSplineFeatures, BSplineGP, NoPersonalization, ProposedModel
from .evaluation import EvalProtocol, evaluate
from .exceptions import InputError, LearningError, NumericalError
from .kernels import NoiseParams, OUParams
from .learning import EMConfig, bic, fit_em, n_free_params, select_hyperparams, select_num_subtypes
from .model import Hyperparams
from .prediction import predict_trajectory
from .simulate import sample_dataset, scenario_presets

log = logging.getLogger("dynatraj")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_LOOKUP = 0, 2, 3, 4


class LookupFailure(LookupError):
    pass


# --------------------------------------------------------------------- settings


def _floats(text):
    return tuple(float(v) for v in str(text).replace(";", ",").split(",") if v.strip())


def _ints(text):
    text = str(text)
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(v) for v in text.split(",") if v.strip())


def _strings(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _bins(text):
    out = []
    for part in _strings(text):
        lo, hi = part.split("-")
        out.append((float(lo), float(hi)))
    return tuple(out)


# name -> (converter, default, help)
SETTINGS = {
    "G": (int, 3, "number of subtypes"),
    "seed": (int, 0, "random seed"),
    "threads": (int, 1, "cap on BLAS and fold-level threads"),
    "boundary": (_floats, (0.0, 25.0), "subtype basis boundary knots 'lo,hi'"),
    "interior_knots": (_floats, None, "explicit subtype interior knots 'k1,k2,...'; unset means equally spaced"),
    "n_interior": (int, 2, "number of equally spaced interior knots"),
    "degree": (int, 2, "subtype B-spline degree"),
    "pop_degree": (int, 0, "population polynomial degree"),
    "ind_degree": (int, 1, "individual polynomial degree"),
    "sigma_b": (_floats, (16.0, 1e-2), "diagonal of the random-effect covariance"),
    "amplitude": (float, 6.0, "OU amplitude a"),
    "length_scale": (float, 2.0, "OU length scale"),
    "sigma2": (float, 1.0, "observation noise variance"),
    "restarts": (int, 5, "EM random restarts"),
    "max_iters": (int, 200, "EM iterations per restart"),
    "tol": (float, 1e-6, "EM relative log-likelihood tolerance"),
    "l2": (float, 1e-4, "L2 penalty on subtype weights"),
    "pop_features": (_strings, None, "feature names entering the population map (default: all)"),
    "subtype_features": (_strings, None, "feature names entering the subtype prior (default: all)"),
    "mode": (str, "map_subtype", "prediction mode: posterior_mean or map_subtype"),
    "folds": (int, 10, "cross-validation folds"),
    "cutoffs": (_floats, (1.0, 2.0, 4.0), "prediction cutoffs in years"),
    "bins": (_bins, ((1.0, 2.0), (2.0, 4.0), (4.0, 8.0), (8.0, 25.0)), "bins 'lo-hi,...'"),
    "decline_threshold": (float, 10.0, "drop that counts as a decline"),
    "observation_times_only": (_bool, False, "score at observed times instead of the smoothed grid"),
    "models": (_strings, ("proposed", "no_personalization", "bspline_gp", "bspline_features"),
               "comma list of models; the first is the test reference"),
    "g_range": (_ints, (1, 2, 3, 4, 5, 6), "candidate G values, 'lo-hi' or a comma list"),
    "M": (int, 300, "number of simulated individuals"),
    "preset": (str, "mixed", "simulation preset"),
}


def read_config(path) -> dict:
    out = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}: expected 'key = value'", line_no)
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.lstrip("-").replace("-", "_")
            if key not in SETTINGS:
                raise InputError(f"{path}: unknown setting {key!r}", line_no)
            out[key] = (value, line_no)
    return out


def resolve(args, names) -> dict:
    """Apply flag > config > default precedence for ``names``."""
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    out = {}
    for name in names:
        conv, default, _ = SETTINGS[name]
        flag = getattr(args, name, None)
        if flag is not None:
            out[name] = flag
        elif name in cfg:
            value, line_no = cfg[name]
            try:
                out[name] = conv(value)
            except ValueError as exc:
                raise InputError(f"{args.config}: bad value for {name}: {exc}", line_no) from None
        else:
            out[name] = default
    return out


def _add(p, *names):
    for name in names:
        conv, default, help_ = SETTINGS[name]
        flag = "-G" if name == "G" else "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=conv, default=None, help=f"{help_} (default: {default})")


HYPER = ("boundary", "interior_knots", "n_interior", "degree", "pop_degree", "ind_degree",
         "sigma_b", "amplitude", "length_scale", "sigma2")
EM = ("restarts", "max_iters", "tol", "l2", "seed")
DATA = ("pop_features", "subtype_features")


def hyper_from(s) -> Hyperparams:
    if s["interior_knots"] is not None:
        bz = BasisConfig.bspline(tuple(s["boundary"]), interior=s["interior_knots"], degree=s["degree"])
    else:
        bz = BasisConfig.bspline(tuple(s["boundary"]), degree=s["degree"], n_interior=s["n_interior"])
    sb = np.asarray(s["sigma_b"], dtype=np.float64)
    return Hyperparams(
        basis_p=BasisConfig.polynomial(s["pop_degree"]),
        basis_z=bz,
        basis_l=BasisConfig.polynomial(s["ind_degree"]),
        Sigma_b=np.diag(sb) if sb.ndim == 1 else sb,
        ou=OUParams(s["amplitude"], s["length_scale"]),
        noise=NoiseParams(s["sigma2"]),
    )


def em_from(s) -> EMConfig:
    return EMConfig(max_iters=s["max_iters"], loglik_rel_tol=s["tol"], random_restarts=s["restarts"],
                    seed=s["seed"], l2_weight_penalty=s["l2"])


def _load_data(args, s):
    return io.load_dataset(args.obs, args.features, s.get("pop_features"), s.get("subtype_features"))


def parse_grid(text: str) -> np.ndarray:
    """``start:stop:step`` (stop included when on the lattice) or a comma list."""
    try:
        if ":" in text:
            a, b, h = (float(v) for v in text.split(":"))
            if h <= 0:
                raise ValueError("step must be positive")
            k = int(np.floor((b - a) / h + 1e-9))
            return a + h * np.arange(k + 1)
        return np.array(_floats(text))
    except ValueError as exc:
        raise InputError(f"bad query grid {text!r}: {exc}") from None


def _print(*a):
    print(*a, flush=True)


# --------------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    if args.list:
        for name, cfg in scenario_presets().items():
            _print(f"{name:16s} G={cfg.params.G}  {cfg.description}")
        return EXIT_OK
    s = resolve(args, ("preset", "M", "seed"))
    presets = scenario_presets(M=s["M"], seed=s["seed"])
    if s["preset"] not in presets:
        raise InputError(f"unknown preset {s['preset']!r}; choose from {sorted(presets)}")
    cfg = presets[s["preset"]]
    data, truth = sample_dataset(cfg)
    out = Path(args.out_dir)
    io.write_dataset(data, out / "observations.csv", out / "features.csv")
    io.write_truth(truth, out / "truth.csv")
    io.save_model(out / "true_model.json", cfg.params,
                  {"preset": s["preset"], "M": s["M"], "seed": s["seed"], "simulated": True})
    _print(f"wrote {len(data)} individuals ({data.n_observations} observations) to {out}")
    return EXIT_OK


def _read_grid_csv(path, s) -> list[Hyperparams]:
    cands = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        known = {"amplitude", "length_scale", "sigma2"}
        for line, row in enumerate(reader, start=2):
            c = dict(s)
            for key, val in row.items():
                key = key.strip()
                try:
                    if key in known:
                        c[key] = float(val)
                    elif key == "sigma_b":
                        c[key] = _floats(val)
                    else:
                        raise InputError(f"{path}: unknown grid column {key!r}", 1)
                except ValueError:
                    raise InputError(f"{path}: cannot parse {key}={val!r}", line) from None
            cands.append(hyper_from(c))
    if not cands:
        raise InputError(f"{path}: empty grid")
    return cands


def cmd_fit(args) -> int:
    s = resolve(args, ("G", "threads") + HYPER + EM + DATA)
    data = _load_data(args, s)
    cfg = em_from(s)
    with threadpool_limits(s["threads"]):
        if args.grid:
            rows, (k, params, trace) = select_hyperparams(data, s["G"], _read_grid_csv(args.grid, s), cfg)
            for r in rows:
                h = r["hyper"]
                _print(f"candidate {r['candidate']}: a={h.ou.amplitude!r} l={h.ou.length_scale!r} "
                       f"sigma2={h.noise.sigma2!r} Sigma_b={np.diag(h.Sigma_b).tolist()} loglik={r['loglik']:.6f}")
            _print(f"selected candidate {k}")
        else:
            params, trace = fit_em(data, s["G"], hyper_from(s), cfg)
    k_free = n_free_params(params.basis_p.dim, params.q_p, params.G, params.q_z, params.basis_z.dim)
    score = bic(trace.final_loglik, k_free, len(data))
    meta = {
        "G": params.G, "seed": s["seed"], "em_config": asdict(cfg), "final_loglik": trace.final_loglik,
        "l2_weight_penalty": cfg.l2_weight_penalty, "bic": score, "n_individuals": len(data),
        "feature_names_p": list(data.feature_names_p), "feature_names_z": list(data.feature_names_z),
        "converged": trace.converged, "restart": trace.restart,
    }
    io.save_model(args.out, params, meta)
    trace_path = args.trace or str(Path(args.out).with_suffix("")) + "_trace.csv"
    io.write_trace_csv(trace, trace_path)
    _print(f"final loglik {trace.final_loglik:.6f}")
    _print(f"BIC {score:.6f}")
    _print(f"wrote {args.out} and {trace_path}")
    return EXIT_OK


def _model_features(meta, which):
    names = meta.get(which)
    return None if names is None else tuple(names)


def cmd_predict(args) -> int:
    kind, model, meta = io.load_model(args.model)
    s = resolve(args, ("mode", "threads"))
    data = io.load_dataset(args.obs, args.features,
                           _model_features(meta, "feature_names_p"),
                           _model_features(meta, "feature_names_z"))
    if args.id not in data:
        raise LookupFailure(f"unknown id {args.id!r}")
    ind = data[args.id]
    if args.cutoff is not None:
        ind = ind.truncate(args.cutoff)
    query = parse_grid(args.grid)
    with threadpool_limits(s["threads"]):
        if kind == "proposed":
            pred = predict_trajectory(model, ind, query, s["mode"])
        else:
            pred = model.predict(ind, query)
    if args.format == "json" or (args.format is None and args.out and args.out.endswith(".json")):
        text = io.prediction_json(pred, {"cutoff": args.cutoff, "n_history": ind.n_obs, "model_kind": kind})
    else:
        text = io.prediction_csv(pred)
    if args.out:
        io.atomic_write(args.out, text)
        _print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _build_models(names, G, hyper, cfg, mode):
    models, proposed = [], None
    for name in names:
        if name in ("proposed", "no_personalization") and proposed is None:
            proposed = ProposedModel(G, hyper, cfg, mode=mode)
        if name == "proposed":
            models.append(proposed)
        elif name == "no_personalization":
            models.append(NoPersonalization(proposed))
        elif name == "bspline_gp":
            models.append(BSplineGP(hyper))
        elif name == "bspline_features":
            models.append(BSplineFeatures(hyper.basis_z))
        else:
            raise InputError(f"unknown model {name!r}")
    return models


def cmd_evaluate(args) -> int:
    s = resolve(args, ("G", "threads", "mode", "models", "folds", "cutoffs", "bins", "decline_threshold",
                       "observation_times_only") + HYPER + EM + DATA)
    data = _load_data(args, s)
    if args.model:
        kind, params, _ = io.load_model(args.model)
        if kind != "proposed":
            raise InputError(f"{args.model}: expected a full-model file, got {kind!r}")
        hyper, G = params.hyper, params.G
    else:
        hyper, G = hyper_from(s), s["G"]
    models = _build_models(s["models"], G, hyper, em_from(s), s["mode"])
    protocol = EvalProtocol(cutoffs=s["cutoffs"], bins=s["bins"], folds=s["folds"],
                            decline_threshold=s["decline_threshold"],
                            observation_times_only=s["observation_times_only"], seed=s["seed"])
    with threadpool_limits(1 if s["threads"] > 1 else s["threads"]):
        report = evaluate(models, data, protocol, threads=s["threads"])
    out = Path(args.out_dir)
    paths = {
        "report.csv": io.report_csv(report),
        "report_folds.csv": io.fold_report_csv(report),
        "detection.csv": io.detection_csv(report),
        "report.txt": report.table() + "\n",
    }
    for name, text in paths.items():
        io.atomic_write(out / name, text)
        _print(f"wrote {out / name}")
    for model, fold, msg in report.failures:
        _print(f"warning: {model} failed on fold {fold}: {msg}")
    return EXIT_OK


def cmd_select(args) -> int:
    s = resolve(args, ("g_range", "threads") + HYPER + EM + DATA)
    data = _load_data(args, s)
    with threadpool_limits(s["threads"]):
        rows, best, _ = select_num_subtypes(data, s["g_range"], hyper_from(s), em_from(s))
    io.atomic_write(args.out, io.bic_csv(rows, best))
    for r in rows:
        mark = "  <- selected" if r["G"] == best else ""
        _print(f"G={r['G']}: loglik={r['loglik']:.4f} k={r['k']} BIC={r['bic']:.4f}{mark}")
    _print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynatraj", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value settings file")
        _add(p, "threads")

    def data_args(p):
        p.add_argument("--obs", required=True, help="observations CSV (id,time,value)")
        p.add_argument("--features", required=True, help="features CSV (id,<names...>)")

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    common(p)
    p.add_argument("--list", action="store_true", help="list presets and exit")
    p.add_argument("--out-dir", default=".")
    _add(p, "preset", "M", "seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="learn population and subtype parameters by EM")
    common(p)
    data_args(p)
    p.add_argument("--out", required=True, help="model file (JSON)")
    p.add_argument("--trace", help="EM trace CSV (default: <out>_trace.csv)")
    p.add_argument("--grid", help="CSV of covariance candidates (amplitude,length_scale,sigma2,sigma_b)")
    _add(p, "G", *HYPER, *EM, *DATA)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict one individual's trajectory")
    common(p)
    data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--cutoff", type=float, help="use only observations at or before this time")
    p.add_argument("--grid", default="0:22:0.5", help="query times 'start:stop:step' or a comma list")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--out", help="output path (default: stdout)")
    _add(p, "mode")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="cross-validated dynamic-prediction comparison")
    common(p)
    data_args(p)
    p.add_argument("--model", help="take G and covariance settings from this model file")
    p.add_argument("--out-dir", default=".")
    _add(p, "models", "G", "mode", "folds", "cutoffs", "bins", "decline_threshold",
         "observation_times_only", *HYPER, *EM, *DATA)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("select", help="choose G by BIC")
    common(p)
    data_args(p)
    p.add_argument("--out", default="bic.csv")
    _add(p, "g_range", *HYPER, *EM, *DATA)
    p.set_defaults(func=cmd_select)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, LearningError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LookupFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOOKUP
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
