"""Numerical self-verification.

The package carries its own verification suites (also exposed as
`latentcir verify`): finite-difference checks of every trainable parameter
group against the autodiff engine, brute-force oracles for both losses and
both retrieval metrics, and a property sweep over the samplers.
"""

import time

from latentcir.verify import run_suites

start = time.perf_counter()
reports = run_suites(["grad", "oracle", "invariants"])
for report in reports:
    print(report.render())
print(f"\nall suites finished in {time.perf_counter() - start:.1f}s; "
      f"overall: {'PASS' if all(r.passed for r in reports) else 'FAIL'}")
