"""Compiled kernels vs the numpy fallback.

Times the NLL/gradient kernel, the all-pairs concordance kernel and one
training epoch of the clinical model on each backend, and checks that the two
agree. Run with ``python benchmarks/bench_kernels.py [--repeat N]``.
"""
import argparse
import time

import numpy as np

from ontram import kernels
from ontram.synthetic import GeneratorSpec, generate_rct, raw_design
from ontram.training import TrainConfig, parameter_init, train


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def nll_case(n, P=12, K=7, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, P))
    y = rng.integers(0, K, n)
    theta = np.linspace(-2, 2, K - 1)
    beta = rng.normal(0, 0.5, P)
    eta = rng.normal(0, 1, n)
    return X, y, theta, beta, eta


def concordance_case(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(-20, 21, n) / 20.0, rng.integers(-1, 2, n).astype(float)


def epoch_case(n=2000, seed=0):
    spec = GeneratorSpec(n=n, seed=seed)
    d = raw_design(generate_rct(spec).table)
    init = parameter_init(spec.scale, d.feature_names, d.treatment_index, d.y)
    return d, init


def run_epoch(d, init, backend):
    # the training loop goes through the dispatch module, so switch its default
    saved = kernels.BACKEND
    kernels.BACKEND = backend
    try:
        return train(init, d, TrainConfig("clinical", epochs=1, batch_size=32, seed=0)).params
    finally:
        kernels.BACKEND = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = ["numpy"]
    try:
        kernels.get_backend("compiled")
        backends.insert(0, "compiled")
    except ImportError:
        print("compiled kernels not built; timing the numpy fallback only")

    rows = []
    for n in (32, 1000, 100_000):
        case = nll_case(n)
        out = {b: kernels.nll_grad(*case, backend=b) for b in backends}
        if len(backends) == 2:
            diff = max(np.abs(np.asarray(a) - np.asarray(b)).max()
                       for a, b in zip(out["compiled"], out["numpy"]))
            assert diff < 1e-10, diff
        rows.append((f"nll_grad n={n}",
                     {b: best_of(lambda b=b: kernels.nll_grad(*case, backend=b), args.repeat)
                      for b in backends}))

    for n in (200, 2000, 8000):
        pred, obs = concordance_case(n)
        out = {b: kernels.pair_concordance(pred, obs, backend=b) for b in backends}
        assert len(set(out.values())) == 1, out
        rows.append((f"pair_concordance n={n}",
                     {b: best_of(lambda b=b: kernels.pair_concordance(pred, obs, backend=b),
                                 args.repeat) for b in backends}))

    d, init = epoch_case()
    fits = {b: run_epoch(d, init, b) for b in backends}
    if len(backends) == 2:
        assert np.allclose(fits["compiled"].beta, fits["numpy"].beta, atol=1e-10)
    rows.append(("training epoch n=2000 batch 32",
                 {b: best_of(lambda b=b: run_epoch(d, init, b), args.repeat)
                  for b in backends}))

    header = f"{'case':34s}" + "".join(f"{b:>12s}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    for name, t in rows:
        line = f"{name:34s}" + "".join(f"{t[b] * 1e3:10.3f}ms" for b in backends)
        if len(backends) == 2:
            line += f"{t['numpy'] / t['compiled']:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
