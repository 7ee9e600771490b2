"""Memorizing a finite table with one attention layer.

With one region per stored point the lookup becomes exact up to the
leakage budget delta.
"""

import numpy as np

from uatformer.experiments import memorize_model
from uatformer.serialize import load_model, save_model

model, xs, ys = memorize_model(n_pairs=50, delta=1e-8, seed=0)
err = np.abs(model.evaluate_flat(xs) - ys).max()
print(f"50 random pairs [0,1]^4 -> [0,1]^2, beta = {model.spec.beta:.3g}")
print(f"worst recall error: {err:.2e}")

save_model(model, "memorize_demo.uatt")
again = load_model("memorize_demo.uatt")
same = np.array_equal(again.evaluate_flat(xs), model.evaluate_flat(xs))
print(f"reloaded from disk, outputs bitwise identical: {same}")
