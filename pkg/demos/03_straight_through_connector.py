"""
Gradients through a tokenizer
=============================

The composite model feeds CNN outputs to the transformer as digit tokens. The
forward pass is the hard lookup; the backward pass pretends each digit is a
softmax over digit centers. This script checks both halves.

Run with ``python demos/03_straight_through_connector.py``.
"""

# %%
import torch

from pipebench import connector as cn

torch.manual_seed(0)
table = torch.randn(10, 4, dtype=torch.float64)
v = torch.tensor([0.517, 0.898, 0.0449], dtype=torch.float64, requires_grad=True)

# %%
# Forward: exactly the embedding of the hard digit.
out = cn.soft_digit_embed(v, 1, table)
print(torch.equal(out, table[torch.tensor([5, 8, 0])]))

# %%
# Backward: nonzero, so the CNN below the connector receives a signal.
out.sum().backward()
print(v.grad)

# %%
# The soft weights concentrate on the true digit and smear near boundaries.
w = cn.soft_digit_weights(torch.tensor([0.55, 0.59, 0.5999], dtype=torch.float64), 1)
print(w.argmax(-1), w.max(-1).values)
