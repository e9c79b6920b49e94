"""Reverse-mode gradients on a tiny residual graph, checked against finite differences.

The engine records every primitive op behind a scalar loss and walks the
trace backwards. `finite_diff_grad` is the independent oracle: central
differences, one coordinate at a time.
"""

import numpy as np

from finedrop import autodiff as ad

rng = np.random.default_rng(0)
x = ad.Tensor(rng.normal(size=(4, 3)))
w1 = ad.Tensor(rng.normal(size=(3, 5)) * 0.5, requires_grad=True)
w2 = ad.Tensor(rng.normal(size=(5, 3)) * 0.5, requires_grad=True)

# one residual block: h = x + relu(x w1) w2, loss = sum(h * h)
h = ad.add(x, ad.matmul(ad.relu(ad.matmul(x, w1)), w2))
loss = ad.tensor_sum(ad.elementwise_mul(h, h))
ad.backward(loss)

record = ad.ComputationRecord.trace(loss)
print(f"loss = {loss.item():.6f} through {len(record.entries)} primitive ops:")
print("  " + " -> ".join(entry.op for entry in record.entries))


def loss_fn(params):
    a, b = params
    hh = x.data + np.maximum(x.data @ a, 0.0) @ b
    return float((hh * hh).sum())


fd = ad.finite_diff_grad(loss_fn, [w1.data, w2.data], eps=1e-5)
for name, tensor, ref in (("w1", w1, fd[0]), ("w2", w2, fd[1])):
    err = np.linalg.norm(tensor.grad - ref) / np.linalg.norm(ref)
    print(f"grad({name}): reverse-mode vs central differences, rel err {err:.2e}")

# gradients accumulate only after an explicit reset; a second backward
# without one is an error rather than a silent double-count
try:
    ad.backward(loss)
except Exception as exc:
    print(f"second backward without reset -> {type(exc).__name__}: {exc}")
