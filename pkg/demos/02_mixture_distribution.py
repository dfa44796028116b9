"""
The zero-inflated log-normal output distribution
================================================

Each step of the forecast is a mixture of a point mass at zero and a
log-normal shifted left by 0.001. Four raw numbers select it.
"""

import numpy as np
from claimcast import distributions as D

raw = np.array([0.4, -0.2, np.log(250.0), 20.0])
p = D.MixtureParams(raw)
print(f"payment probability w1 = {float(p.w1):.3f}")
print(f"log-normal location mu = {float(p.mu):.3f}, scale = {float(p.sigma_ln):.3f}")
print(f"expected payment       = {float(D.mixture_mean(p)):.2f}")

# the scale stays inside (0.001, 0.701) whatever v4 is
for v4 in (-1e6, -300.0, 0.0, 300.0, 1e6):
    print(f"  v4 = {v4:>10}: sigma = {float(D.lognormal_scale(v4)):.6f}")

# log-likelihood of a zero and of a payment
print("log p(0)   =", float(D.mixture_logprob(0.0, p)))
print("log p(300) =", float(D.mixture_logprob(300.0, p)))

# sampling agrees with the closed-form mean
draws = D.mixture_sample(p, np.random.default_rng(1), size=200_000)
print(f"share of zeros {np.mean(draws == 0):.3f} (w2 = {float(p.w2):.3f})")
print(f"sample mean {draws.mean():.2f}")
