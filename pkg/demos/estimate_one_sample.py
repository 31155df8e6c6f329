"""
Mean and median of a shifted population from one stacked sample
===============================================================

Draws one sample of size 1000 from the simulation design, where the target
mean and median are both 1, and compares the estimators.  The working ratio
exp(-0.7 + 1.2 y) is wrong (the truth is exp(-0.5 + y)), and so is the
outcome model used by the doubly flexible estimator.
"""

import time

from labelshift.estimators import MEAN, Estimand, doubly_flexible, oracle, shift_dependent, singly_flexible
from labelshift.models import ExpTilt, fit_gaussian_linear, normalize_ratio, paper_features
from labelshift.sampling import generate_paper_design

syn = generate_paper_design(1000, seed=2024)
s = syn.sample
print(f"n={s.n}  source rows={s.n1}  pi={s.pi:.3f}")

ratio = normalize_ratio(ExpTilt(-0.7, 1.2), s)
outcome = fit_gaussian_linear(s, paper_features)

for estimand in (MEAN, Estimand.quantile(0.5)):
    print(f"\n{estimand.label}")
    runs = {
        "oracle": lambda: oracle(syn, estimand),
        "shift-dependent": lambda: shift_dependent(s, ratio, estimand),
        "doubly-flexible": lambda: doubly_flexible(s, ratio, outcome, estimand),
        "singly-flexible": lambda: singly_flexible(s, ratio, estimand=estimand),
    }
    for name, run in runs.items():
        t0 = time.perf_counter()
        res = run()
        print(f"  {name:16s} theta={res.theta:.4f}  se={res.se:.4f}  "
              f"ci=({res.ci[0]:.3f}, {res.ci[1]:.3f})  [{time.perf_counter() - t0:.1f}s]")
