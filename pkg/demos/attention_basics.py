"""Attention from the ground up.

Builds one self-attention head by hand, looks at its weights, then shows
that a block without positional information cannot tell token order apart.
"""

import numpy as np

from uatformer import (
    attention_weights, init_block_params, positional_encoding, self_attention, transformer_block,
)
from uatformer.transformer import HeadParams

rng = np.random.default_rng(0)

# Three 4-dimensional tokens and a single head with d_k = d_v = 2.
x = rng.normal(size=(3, 4))
head = HeadParams(wq=rng.normal(size=(4, 2)), wk=rng.normal(size=(4, 2)), wv=rng.normal(size=(4, 2)))

w = attention_weights(x @ head.wq, x @ head.wk, scale_dim=2)
print("attention weights (rows sum to one):")
print(np.round(w, 4))
print("row sums:", w.sum(axis=1))
print("head output:\n", np.round(self_attention(x, head, 2), 4))

# A full block: two heads, an FFN and residual connections.
p = init_block_params(d=4, n_heads=2, d_ff=8, rng=rng)
perm = np.array([2, 0, 1])
gap = np.abs(transformer_block(x[perm], p) - transformer_block(x, p)[perm]).max()
print(f"\nshuffling tokens just shuffles the outputs: max gap {gap:.1e}")

pe = positional_encoding(3, 4)
gap = np.abs(transformer_block(x[perm] + pe, p) - transformer_block(x + pe, p)[perm]).max()
print(f"with sinusoidal positions added the symmetry breaks: max gap {gap:.3f}")
