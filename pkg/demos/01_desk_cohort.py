"""
Nine devices, three cohorts
===========================

Walks through one desk-scale experiment: build the synthetic cohorts,
estimate how far apart the devices' data are, then train MtFEEL next to
local training and the shared-model baselines.
"""
import numpy as np

from mtfeel.data import desk_cohorts, synth_cohorts
from mtfeel.discrepancy import DdeConfig, dde_run
from mtfeel.objective import PenaltyConfig
from mtfeel.train import TrainConfig, baseline_train, cross_cohort_mass, mtfeel_train

np.set_printoptions(precision=2, suppress=True, linewidth=120)

# Cohort A holds labels 0-5, B holds 6-9, C holds 3-7. Each device keeps
# 20 samples for training and 80 for testing.
data = synth_cohorts(desk_cohorts(), d_in=20, seed=0, spread=0.8)
print("devices:", data.N, "cohorts:", data.cohort_of)

# Pairwise discrepancies. Devices in one cohort should look close, the rest far.
dhat = dde_run(data, DdeConfig(iterations=200, eta=0.01, init_std=0.01))
print(dhat)

# MtFEEL learns one model per device and a row of importance weights.
cfg = TrainConfig(rounds=300, eta=0.3, mu=0.5, lr_schedule="inv_sqrt_t")
state, hist = mtfeel_train(data, dhat, cfg, PenaltyConfig.uniform(data.train_counts))
print("learned importance weights:")
print(state.alpha)
print("largest weight placed outside a device's cohort: %.2e" % cross_cohort_mass(state.alpha, data))

results = {"mtfeel": hist[-1].mean_test_acc}
for algo, eta in (("local", 0.3), ("fedsgd", 0.3), ("fedavg", 0.1)):
    _, h = baseline_train(algo, data, TrainConfig(rounds=300, eta=eta))
    results[algo] = h[-1].mean_test_acc

for algo, acc in results.items():
    print(f"{algo:8s} mean test accuracy {acc:.3f}")
