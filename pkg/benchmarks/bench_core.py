"""Time the compiled core against the numpy fallback on the hot kernels.

    python3 benchmarks/bench_core.py --M 300 --repeat 5
"""
import argparse
import timeit

import numpy as np

from dynatraj import _backend
from dynatraj.basis import design_matrix
from dynatraj.kernels import JITTER_LADDER
from dynatraj.simulate import sample_dataset, scenario_presets


def _ragged_inputs(data, hyper):
    times = np.concatenate([ind.times for ind in data])
    offsets = np.concatenate([[0], np.cumsum([ind.n_obs for ind in data])]).astype(np.intp)
    Phi_l = np.ascontiguousarray(design_matrix(hyper.basis_l, times))
    rhs = np.ascontiguousarray(np.column_stack([np.concatenate([ind.values for ind in data]),
                                                design_matrix(hyper.basis_z, times)]))
    return times, offsets, Phi_l, rhs


def cases(M, seed):
    cfg = scenario_presets(M=M, seed=seed)["mixed"]
    data, _ = sample_dataset(cfg)
    h = cfg.params.hyper
    knots = np.ascontiguousarray(h.basis_z.knot_vector)
    grid = np.linspace(0.0, 25.0, 20001)
    t = np.sort(np.random.default_rng(seed).uniform(0, 22, 400))
    times, offsets, Phi_l, rhs = _ragged_inputs(data, h)
    a2, ell, s2 = h.ou.amplitude**2, h.ou.length_scale, h.noise.sigma2
    ladder = np.asarray(JITTER_LADDER)
    return {
        "bspline_design (20k points)": lambda b: b.bspline_design(knots, h.basis_z.degree, grid),
        "ou_gram (400 x 400)": lambda b: b.ou_gram(t, t, a2, ell),
        f"ragged_whiten (M={M})": lambda b: b.ragged_whiten(times, offsets, Phi_l, h.Sigma_b, a2, ell, s2,
                                                            rhs, ladder),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--M", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = _backend.BACKENDS
    if "cython" not in backends:
        print("compiled core not built; timing the fallback only")
    print(f"{'kernel':32s}" + "".join(f"{name:>14s}" for name in backends) + "   speedup")
    for label, fn in cases(args.M, args.seed).items():
        best = {}
        for name, b in backends.items():
            fn(b)
            n, _ = timeit.Timer(lambda: fn(b)).autorange()
            best[name] = min(timeit.repeat(lambda: fn(b), number=n, repeat=args.repeat)) / n
        speed = f"{best['python'] / best['cython']:9.1f}x" if "cython" in best else ""
        print(f"{label:32s}" + "".join(f"{best[k] * 1e3:12.3f}ms" for k in backends) + "  " + speed)


if __name__ == "__main__":
    main()
