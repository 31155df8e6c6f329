"""
Landweber iteration on a first-kind system
==========================================

The tolerance on the relative change is the regularization knob: loose
tolerances stop near the starting point, tight ones approach least squares.
"""

import numpy as np

from labelshift.fredholm import DiscretizedFredholm, DivergenceError, landweber_solve

rng = np.random.default_rng(3)
phi, y = rng.normal(size=(20, 15)), rng.normal(size=20)
exact = np.linalg.lstsq(phi, y, rcond=None)[0]

for tol in (1e-4, 1e-8, 1e-12, 1e-20):
    p = DiscretizedFredholm(phi, y, np.ones(15), tol=tol, max_iter=200_000, spectral_guard=True)
    a, diag = landweber_solve(p)
    print(f"tol={tol:.0e}  iterations={diag.iterations:6d}  sup|a - lstsq|={np.abs(a - exact).max():.2e}")

# The closed-form solver stops exactly where the step-by-step loop does.
p = DiscretizedFredholm(phi, y, np.ones(15), tol=1e-10, spectral_guard=True)
a_loop, d_loop = landweber_solve(p, method="loop")
a_spec, d_spec = landweber_solve(p, method="spectral")
print("loop vs spectral:", d_loop.iterations, d_spec.iterations, np.abs(a_loop - a_spec).max())

# A step above 2 / sigma_max^2 diverges and is reported, not returned.
try:
    landweber_solve(DiscretizedFredholm(phi, y, np.ones(15), step=10 / np.linalg.norm(phi, 2) ** 2))
except DivergenceError as exc:
    print("divergence:", exc)
