"""Time the adaptive quadrature likelihood: numba kernel vs numpy fallback.

Usage: python benchmarks/bench_agq.py [--clusters 60] [--repeat 200]

Both backends are called directly, so the SWMEDIATE_NUMBA flag does not
matter here. Reports the median wall time of one likelihood-plus-gradient
evaluation at the fitted optimum for each backend.
"""

import argparse
import statistics
import time

import numpy as np

from swmediate.models import MEDIATOR, OUTCOME, PreparedGLMM, _kernels, build_design_matrix
from swmediate.simulation import SimulationScenario, calibrate_coefficients, generate


def _time(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--clusters", type=int, default=60)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--nodes", type=int, default=15)
    args = ap.parse_args()

    sc = SimulationScenario(data_type="ybmc", n_clusters=args.clusters, seed=1)
    ds = generate(sc, 0, calibrate_coefficients(sc))
    # with a continuous mediator the outcome rows do not collapse: the heavier case
    sc_b = sc.replace(data_type="ybmb")
    ds_b = generate(sc_b, 0, calibrate_coefficients(sc_b))

    print(f"I={args.clusters}, nodes={args.nodes}, median of {args.repeat} calls")
    print(f"{'model':<24}{'rows':>7}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}")
    for label, data, target in (("ybmc outcome", ds, OUTCOME), ("ybmb outcome", ds_b, OUTCOME),
                                ("ybmb mediator", ds_b, MEDIATOR)):
        prep = PreparedGLMM(build_design_matrix(data, target))
        fit = prep.fit()
        beta, sigma = fit.coef, fit.variance.random_intercept_sd
        keep = prep.keep_mask()
        call = (prep.X, prep.trials, prep.succ, prep.offsets, keep, beta, sigma, prep.z, prep.w, True)
        _kernels.agq_numba(*call)  # compile outside the timing
        a = _kernels.agq_numpy(*call)
        b = _kernels.agq_numba(*call)
        assert abs(a[0] - b[0]) < 1e-9 * max(1.0, abs(a[0])) and np.allclose(a[1], b[1], atol=1e-8)
        t_np = _time(lambda: _kernels.agq_numpy(*call), args.repeat)
        t_nb = _time(lambda: _kernels.agq_numba(*call), args.repeat)
        print(f"{label:<24}{prep.X.shape[0]:>7}{t_np * 1e3:>11.3f}{t_nb * 1e3:>11.3f}{t_np / t_nb:>9.1f}")


if __name__ == "__main__":
    main()
