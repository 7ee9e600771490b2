"""Checking hand-written backprop against finite differences."""

import numpy as np

from uatformer import Loss, grad_check, init_block_params, loss_and_grad

rng = np.random.default_rng(1)
p = init_block_params(d=8, n_heads=2, d_ff=16, rng=rng, random_biases=True, use_layernorm=True)
x = rng.normal(size=(4, 8))
target = rng.normal(size=(4, 8))

value, grads = loss_and_grad(p, x, target, Loss("mse"))
print(f"MSE loss {value:.6f}; gradient groups: {', '.join(grads)}")

report = grad_check(x, target, p, Loss("mse"))
print(report.summary())

# Corrupt one entry and the check points straight at it.
bad = dict(grads)
bad["ffn.w1"] = grads["ffn.w1"].copy()
bad["ffn.w1"][0, 0] += 0.1
print("\nafter nudging one W1 entry by 0.1:")
print(grad_check(x, target, p, Loss("mse"), analytic=bad).summary())
