"""
Simulated claims, the cutoff split and a chain-ladder benchmark
===============================================================

Simulate a small book, censor it at the end of 2005, and estimate the
unpaid amount with volume-weighted age-to-age factors on a report-year
triangle.
"""

import numpy as np
from claimcast import chainladder as cl
from claimcast import data

claims = data.simulate_claims(2000, seed=1)
train, holdout = data.split_by_cutoff(claims, 2005)
print(len(claims), "claims simulated,", len(train), "reported by the cutoff")

c = train[0]
print("one claim:", c.claim_id, c.lob, c.claim_code, "accident", c.accident_year, "report", c.report_year)
print("  observed flows :", np.round(c.cash_flows[:c.n_observed], 2))
print("  open statuses  :", c.statuses[:c.n_observed].astype(int))

samples = data.expand_training_samples(train)
print(len(samples), "training samples, one per observed development year")

tri = cl.build_triangle(train, 2005)
factors = cl.ata_factors(tri)
print("age-to-age factors:", np.round(factors.factors, 4))

estimate, rows = cl.unpaid_estimate(tri, factors.filled(1.0) if factors.undefined else factors)
actual = cl.actual_unpaid(holdout, train)
print(f"chain ladder unpaid {estimate:,.0f}")
print(f"actual unpaid       {actual:,.0f}")
print(f"error               {(estimate - actual) / actual:+.2%}")
