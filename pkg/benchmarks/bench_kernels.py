"""Time the hot kernels with numba on and off.

Each mode runs in its own interpreter because the switch is read at import:

    python benchmarks/bench_kernels.py
"""
import json
import os
import subprocess
import sys

WORKLOAD = r"""
import json, time
import numpy as np
from masked_ntk._accel import NUMBA_ENABLED
from masked_ntk.analytic import expected_gradient_exact, expected_loss_exact
from masked_ntk.bivariate import bvn_cdf
from masked_ntk.mc import mc_masked_loss
from masked_ntk.model import init_network, synthetic_regression
from masked_ntk.ntk import eigenvalues, h_infinity

small = synthetic_regression(6, 5, 1)
small_net = init_network(8, 5, 1.0, 2, 3)
mid = synthetic_regression(60, 10, 4)
mid_net = init_network(30, 10, 1.0, 5, 6)
grid = np.linspace(-3.0, 3.0, 40)

cases = {
    "bvn_cdf x1600": lambda: [bvn_cdf(a, b, 0.6) for a in grid for b in grid],
    "expected_loss_exact n=60 m=30": lambda: expected_loss_exact(mid_net, mid, 0.3),
    "expected_gradient_exact n=60 m=30": lambda: expected_gradient_exact(mid_net, mid, 0.3, 0),
    "mc_masked_loss 1e5 batches": lambda: mc_masked_loss(small_net, small, 0.3, 10**5, 0),
    "jacobi eigenvalues n=60": lambda: eigenvalues(h_infinity(mid)),
}
out = {"numba": NUMBA_ENABLED, "seconds": {}}
for name, fn in cases.items():
    fn()  # compile or warm caches
    reps, start = 0, time.perf_counter()
    while reps < 3 or time.perf_counter() - start < 0.5:
        fn()
        reps += 1
    out["seconds"][name] = (time.perf_counter() - start) / reps
print(json.dumps(out))
"""


def run(disable):
    env = dict(os.environ, MASKED_NTK_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKLOAD], env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main():
    fast, slow = run(False), run(True)
    if not fast["numba"]:
        print("numba is not importable; both columns use the interpreted path")
    print(f"{'kernel':40s} {'numba s':>12s} {'python s':>12s} {'speedup':>9s}")
    for name, t_fast in fast["seconds"].items():
        t_slow = slow["seconds"][name]
        print(f"{name:40s} {t_fast:12.5f} {t_slow:12.5f} {t_slow / t_fast:9.1f}")


if __name__ == "__main__":
    main()
