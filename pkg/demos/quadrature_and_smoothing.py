"""
Gauss-Legendre rules and Nadaraya-Watson smoothing
==================================================

The building blocks used inside the flexible estimators.
"""

import numpy as np
from scipy.stats import norm

from labelshift.kernels import KernelSpec, default_bandwidth_1d, nw_regress_1d
from labelshift.quadrature import gauss_legendre, integrate, trapezoid

# A 50-point rule on [-5, 5] captures all but 6e-7 of a standard normal.
rule = gauss_legendre(50, -5.0, 5.0)
print("normal mass, 50-point GL:", integrate(rule, norm.pdf))
print("normal mass, 50-point trapezoid:", integrate(trapezoid(50, -5.0, 5.0), norm.pdf))

# m points integrate every polynomial of degree 2m - 1 exactly.
r3 = gauss_legendre(3, 0.0, 1.0)
print("int_0^1 t^5 dt with 3 points:", integrate(r3, lambda t: t ** 5), "(exact 1/6)")

# Smoothing a noisy curve in y with the default bandwidth n1^(-1/3).
rng = np.random.default_rng(0)
y = np.sort(rng.uniform(-2, 2, 400))
v = np.sin(2 * y) + rng.normal(0, 0.3, y.size)
spec = KernelSpec("gaussian", default_bandwidth_1d(y.size))
grid = np.linspace(-1.5, 1.5, 7)
fit = nw_regress_1d(spec, y, v, None, grid)
for g, f in zip(grid, fit):
    print(f"  y={g:+.2f}  smooth={f:+.3f}  truth={np.sin(2 * g):+.3f}")
