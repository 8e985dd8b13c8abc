"""
How much of a weight matrix survives rank truncation
=====================================================

Transformer projection weights tend to have quickly decaying singular
values. If the squared spectrum decays like ``rho**i``, the share of
squared Frobenius norm kept by the top ``r`` singular values is close to
``1 - rho**r``. This script checks that estimate on synthetic matrices and
prints the time/memory trade-off of truncating at a few ranks.
"""

import numpy as np

from loratransfer import energy_retained, geometric_decay_eta, spectrum_report
from loratransfer.diagnostics import geometric_matrix, tradeoff_table

# Closed form versus an explicit 3072-long geometric spectrum at r = 320
for rho in (0.92, 0.94, 0.97):
    sigma = np.sqrt(rho ** np.arange(1, 3073))
    print(f"rho={rho:.2f}  1-rho^320={geometric_decay_eta(rho, 320):.10f}  "
          f"spectrum eta(320)={energy_retained(sigma, 320):.10f}")

# Fitting rho back from a matrix that was built with a known spectrum
W = geometric_matrix(256, 256, rho=0.94, seed=0)
rep = spectrum_report(W, ranks=[8, 32, 64, 128], base_key="synthetic")
print(f"\nfitted rho = {rep.fitted_rho:.4f} (built with 0.94)")
for (r, eta), (_, bound) in zip(rep.eta_curve, rep.tail_bound):
    print(f"  r={r:4d}  eta={eta:.6f}  reconstruction error={bound:.4f}")

# Predicted cost of rank-r truncation for a 3072 x 3072 weight. The dense
# reference at that size is slow to time repeatedly, so a smaller matrix is
# measured instead.
print("\npredicted ratios for 3072 x 3072")
for row in tradeoff_table((3072, 3072), [40, 80, 160, 320], measure=False):
    print(f"  r={row['r']:4d}  time~{row['predicted_time_ratio']:.3f}  memory~{row['predicted_memory_ratio']:.3f}")

print("\nmeasured on 1024 x 1024")
for row in tradeoff_table((1024, 1024), [40, 80, 160], repeats=3, rho=0.97):
    print(f"  r={row['r']:4d}  {row['measured_time'] * 1e3:7.1f} ms  eta={row['eta']:.5f}")
