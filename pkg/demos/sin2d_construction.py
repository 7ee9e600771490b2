"""A single attention layer that approximates sin(x1) + sin(x2).

The weights are not trained. Each grid cell gets a memory token whose value
is f at the cell center, and a sharp softmax picks the nearest center.
Refining the grid shrinks the error, and each model carries a certificate
comparing the measured error with its analytic bound.
"""

import math

from uatformer import (
    Box, build_lookup_transformer, estimate_sup_error, partition_domain, sample_representatives, select_sharpness,
)
from uatformer.experiments import sin2d_target

box = Box([0.0, 0.0], [2 * math.pi, 2 * math.pi])
delta = 1e-3

print(f"{'grid':>6} {'cells':>6} {'beta':>10} {'sup error':>10} {'bound':>8}")
for res in (4, 8, 16, 32):
    factor = 128 // res  # always certify on the same 128 x 128 grid
    rho = (factor - 1) / factor
    part = partition_domain(box, res)
    reps = sample_representatives(part, sin2d_target)
    beta = select_sharpness(part, delta, rho)
    model = build_lookup_transformer(part, reps, beta, delta=delta, margin_fraction=rho)
    rep = estimate_sup_error(model, part, sin2d_target, factor)
    print(f"{res:>3}x{res:<2} {part.count:>6} {beta:>10.1f} {rep.empirical_sup:>10.4f} {rep.analytic_bound:>8.4f}")

x = [1.0, 2.0]
print(f"\nT({x}) = {model(x)[0]:.4f}, f({x}) = {sin2d_target(x)[0]:.4f}")
w = model.attention(part.centroids[:1])[0]
print(f"attention at a cell center: {w[1:].max():.6f} on its own cell, self token {w[0]:.1e}")
