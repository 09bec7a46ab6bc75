"""Recover two ring ensembles from mixed spikes and compare with PCA baselines.

Run: python3 demos/ensemble_detection.py
"""

from faelvm.experiments import EnsembleConfig, run_ensemble_rep

rep = run_ensemble_rep(0, EnsembleConfig(n_bins=500))
print(f"chance accuracy {rep.chance:.3f}")
for name, acc in sorted(rep.accuracy.items(), key=lambda kv: -kv[1]):
    print(f"{name:>12s}  {acc:.3f}")
