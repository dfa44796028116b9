"""
Training a small network and sampling cash-flow paths
=====================================================

A short training run on a few hundred claims, then point estimates,
sampled paths and the spread of the payment probability across weight
draws for one open claim.
"""

import numpy as np
from claimcast import data, forecast, network, training

claims = data.simulate_claims(400, seed=2)
train, holdout = data.split_by_cutoff(claims, 2005)
samples = data.expand_training_samples(train)
stats = data.fit_normalization(samples)
inputs = data.transform(samples, stats)

model = network.init_model(stats.vocab_sizes(), seed=0)
config = training.TrainConfig(max_epochs=8, minibatch=64)
model, log = training.train(model, inputs, config, verbose=True)

points = forecast.build_scoring_points(train, stats)
total, rows = forecast.aggregate_unpaid([model], points)
print(f"{len(points)} open claims, expected unpaid {total:,.0f}")

# one claim: epistemic spread (weights) and aleatoric spread (outcomes)
one = points.take(np.array([0]))
paths = forecast.sample_path_array([model], one, n_epistemic=20, n_aleatoric=50, seed=0)
totals = paths.sum(axis=2).ravel()
print("claim", one.claim_ids[0], "horizon", int(forecast.horizons(one)[0]))
print(f"  path totals: mean {totals.mean():.1f}, 5% {np.quantile(totals, 0.05):.1f}, "
      f"95% {np.quantile(totals, 0.95):.1f}")

summary = forecast.posterior_summary([model], one, n_weight_draws=200)[0]
print("  payment probability by future year (mean over draws):", np.round(summary.w1.mean(axis=0), 3))
print("  spread across draws (sd):", np.round(summary.w1.std(axis=0), 4))
