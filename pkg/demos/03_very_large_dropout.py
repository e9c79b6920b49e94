"""Inverted dropout at rate 0.9: what surviving 10% of a representation looks like.

Masked units are zero with probability `rate`; survivors are rescaled by
1/(1-rate) at train time, which makes the masked output an unbiased
estimate of the clean one, and makes eval mode a strict no-op.
"""

import numpy as np

from finedrop.regularizers import DropoutSpec, apply_inverted_dropout, dropout_mask

rng = np.random.default_rng(3)

mask = dropout_mask(20, 0.9, rng)
print("one rate-0.9 mask over 20 units:", mask.astype(int))
print(f"   survivors: {int(mask.sum())} of 20, rescaled by 1/(1-0.9) = 10x")

phi = np.ones((50_000, 8))
for rate in (0.5, 0.9, 0.95):
    spec = DropoutSpec.seeded(rate, seed=42)
    out = apply_inverted_dropout(phi, spec)
    mean = out.mean(axis=0)
    sd = np.sqrt(rate / ((1 - rate) * phi.shape[0]))
    print(f"rate {rate}: sample mean of rescaled output = {mean.mean():.4f} "
          f"(unbiased, coordinate sd {sd:.4f})")

spec_eval = DropoutSpec(0.95, mode="eval")
out_eval = apply_inverted_dropout(phi, spec_eval)
print("eval mode returns the input itself, untouched:", out_eval is phi)

spec_zero = DropoutSpec.seeded(0.0, seed=42)
out_zero = apply_inverted_dropout(phi, spec_zero)
print("rate 0 skips the rng stream entirely:", out_zero is phi,
      "| next draw equals a fresh stream's:",
      spec_zero.rng.random() == np.random.default_rng(42).random())
