"""
Checking every gradient
=======================

Each training loss ships its own analytic gradient. Here they are compared
against central differences on small random float64 models.
"""
import numpy as np

from sfrl.gradcheck import run_suite
from sfrl.nn import grad_check

# the checker itself on a known function
rep = grad_check(lambda p: (float(np.sum(p**3)), 3 * p**2), np.array([1.0, -2.0, 0.5]))
print("cubic:", rep.max_rel_err, rep.passed)

# a wrong gradient is caught
rep = grad_check(lambda p: (float(np.sum(p**2)), 2.2 * p), np.array([3.0]), tol=1e-3)
print("corrupted:", round(rep.max_rel_err, 4), rep.passed)

for r in run_suite(instances=20, tol=1e-3):
    print(f"{r.name:<24} max rel err {r.max_rel_err:.1e}  {'ok' if r.passed else 'FAIL'}")
