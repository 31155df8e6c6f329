"""
A family of target populations with the same covariate marginal
===============================================================

Without the shared conditional of x given y, the target outcome distribution
is not pinned down by the target covariates: every t below yields a different
q_Y but the same pr(X = 0) in the target population.
"""

from fractions import Fraction

from labelshift.sampling import example1_q_y, example1_target_marginal

for t in (Fraction(1, 30), Fraction(1, 25), Fraction(1, 20), Fraction(3, 50)):
    q = example1_q_y(t)
    print(f"t={str(t):5s}  q_Y={[str(v) for v in q]}  pr(X=0)={example1_target_marginal(t, exact=True)}")
