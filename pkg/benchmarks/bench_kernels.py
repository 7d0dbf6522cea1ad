"""Element kernel timings: compiled extension vs numpy fallback.

Element assembly inside the Newton loops (HF, transfer, local correction and
reduced solves) dominates run time, so both residual-only and
residual+Jacobian calls are timed on a Q3 mesh.

    python3 benchmarks/bench_kernels.py [--elems 40] [--degree 3] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from pumrom import fem, kernels, models


def setup(elems, degree, seed=0):
    disc = fem.build_discretization(((0, 1), (0, 1)), (elems, elems), degree)
    rng = np.random.default_rng(seed)
    E, Q = disc.nelem, disc.ref.Q
    c = models.Coefficients.zeros(E, Q, nonlinear=True)
    c.mu1[:] = rng.uniform(0.1, 0.2, E)
    c.mu2[:] = rng.uniform(30, 40, E)
    c.source[:] = rng.random((E, Q))
    u = 0.5 * rng.random(disc.ndof)
    return disc, c, u[disc.elem_dofs]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--elems", type=int, default=40)
    ap.add_argument("--degree", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    disc, c, ue = setup(args.elems, args.degree)
    print(f"{disc.nelem} elements, Q{args.degree}, {disc.ref.Q} quadrature points each")
    print(f"{'backend':<10}{'residual [ms]':>16}{'res+jac [ms]':>16}")
    times = {}
    for b in kernels.available_backends():
        run = lambda jac: kernels.element_kernel(ue, disc.ref, disc.hx, disc.hy, c, jac, b)
        run(True)
        t_r = min(timeit.repeat(lambda: run(False), number=1, repeat=args.repeat)) * 1e3
        t_j = min(timeit.repeat(lambda: run(True), number=1, repeat=args.repeat)) * 1e3
        times[b] = (t_r, t_j)
        print(f"{b:<10}{t_r:>16.2f}{t_j:>16.2f}")
    if len(times) == 2:
        print(f"speedup (res+jac): {times['python'][1] / times['compiled'][1]:.2f}x")
        a = kernels.element_kernel(ue, disc.ref, disc.hx, disc.hy, c, True, "compiled")
        p = kernels.element_kernel(ue, disc.ref, disc.hx, disc.hy, c, True, "python")
        print("max |difference|:", max(np.abs(x - y).max() for x, y in zip(a, p)))
    return times


if __name__ == "__main__":
    main()
