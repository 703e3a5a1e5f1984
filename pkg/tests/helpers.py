"""Small random instances shared across test modules."""
import numpy as np

from dynatraj.model import Dataset, Hyperparams, IndividualRecord, ModelParams


def random_params(rng, G=3, q=3, hyper=None, scale=1.0):
    hyper = hyper or Hyperparams.defaults()
    W = rng.normal(scale=scale, size=(G, q))
    W[0] = 0.0
    beta = 70 + 15 * rng.normal(size=(G, hyper.basis_z.dim))
    Lambda = rng.normal(scale=3.0, size=(hyper.basis_p.dim, q))
    return ModelParams(Lambda=Lambda, W=W, beta=beta, hyper=hyper)


def random_individual(rng, q=3, n=None, id_="a", t_max=22.0, n_max=6):
    n = int(rng.integers(1, n_max + 1)) if n is None else n
    t = np.sort(rng.uniform(0, t_max, n))
    y = 70 + 10 * rng.normal(size=n)
    x = np.concatenate([[1.0], (rng.random(q - 1) < 0.5).astype(float)])
    return IndividualRecord(id_, t, y, x, x)


def random_dataset(rng, M=5, q=3, **kw):
    return Dataset(tuple(random_individual(rng, q, id_=f"i{k}", **kw) for k in range(M)),
                   tuple(f"x{k}" for k in range(1, q)), tuple(f"x{k}" for k in range(1, q)))
