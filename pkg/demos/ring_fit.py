"""Fit a bump-decoder model to a synthetic head-direction ring and decode held-out bins.

Run: python3 demos/ring_fit.py
"""

import numpy as np

from faelvm import ModelConfig, SynthConfig, TrainConfig, generate_ring_ensemble, geodesic_error, infer_variational, multi_seed_fit
from faelvm.inference import hybrid_infer

spikes, gt = generate_ring_ensemble(SynthConfig(n_neurons=30, n_bins=2000, seed=0))
train, test = spikes[:, :1000], spikes[:, 1000:]

# single fits can land in poor local optima, so keep the best of five initializations
mc = ModelConfig(decoder="bump", nonlinearity="exp", learn_coeff=True)
result, _ = multi_seed_fit(train, mc, TrainConfig(learning_rate=0.01, num_worse=10), n_seeds=5)
print(f"train LLH {result.train_llh:.1f} after {len(result.history)} epochs (best epoch {result.best_epoch})")

z_var = infer_variational(result.model, test)
z_hyb = hybrid_infer(result.model, test, M=10, steps=500, lr=0.001, rng=np.random.default_rng(0))
truth = gt.latents[1000:]
print(f"geodesic error on held-out bins: encoder {geodesic_error(truth, z_var):.3f} rad, hybrid {geodesic_error(truth, z_hyb):.3f} rad")
