"""
A small Monte Carlo study
=========================

Twenty replicates of the simulation design at n = 500.  The full-size study
(200 replicates at n = 1000) is ``labelshift simulate``.
"""

from labelshift.estimators import MEAN
from labelshift.simulation import SimConfig, emit_table, run_study

config = SimConfig(n=500, replicates=20, seed=7, estimands=(MEAN,),
                   estimators=("oracle", "shift-dependent*", "doubly-flexible*", "singly-flexible*"))
result = run_study(config)
print(emit_table(result.rows, "markdown"))
