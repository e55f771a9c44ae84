#!/usr/bin/env python3
"""Regenerate the degree-5 ln(1 + t), t in [0, 1), coefficients used by `log_approx`.

Fits in t = m - 1 with the constant term pinned to zero so that ln(1) is exact,
using least squares on Chebyshev-distributed samples (near-minimax). Prints the
Rust constant block to paste into src/fxp/approx.rs.
"""
import numpy as np

DEGREE = 5
SAMPLES = 4096

k = np.arange(SAMPLES)
t = 0.5 - 0.5 * np.cos(np.pi * (k + 0.5) / SAMPLES)
target = np.log1p(t)
basis = np.stack([t ** p for p in range(1, DEGREE + 1)], axis=1)
coef, *_ = np.linalg.lstsq(basis, target, rcond=None)

grid = np.linspace(0.0, 1.0, 100001)
fit = sum(c * grid ** (p + 1) for p, c in enumerate(coef))
err = np.max(np.abs(fit - np.log1p(grid)))

print(f"// max |error| on [0, 1]: {err:.3e}")
print(f"const LN1P_COEFFS: [f64; {DEGREE}] = [")
for c in coef:
    print(f"    {c:.17e},")
print("];")
