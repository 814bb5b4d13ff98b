#! /usr/bin/env python3

# Q-learning on a contextual bandit built from a synthetic classification set.
# Compares how plastic the final network is with a regression (MSE) head at a short
# and a long horizon, and with a two-hot categorical head at the long horizon.

import dataclasses

import numpy as np

from plasticity_lab import harness
from plasticity_lab.tasks import BanditMDP, synth_dataset

seeds = (0, 1, 2)
steps = 5000
probe_steps = 500
smoothing = 0.1  # two-hot label smoothing

base = harness.BanditConfig(width=128, depth=2, steps=steps, batch_size=64, target_update_period=500, cadence=1000)
variants = {
    "mse, gamma 0": (0.0, base),
    "mse, gamma 0.99": (0.99, base),
    "two-hot, gamma 0.99": (0.99, dataclasses.replace(base, loss="two_hot", smoothing=smoothing)),
}

for name, (discount, config) in variants.items():
    probe_losses = []
    for seed in seeds:
        mdp = BanditMDP(synth_dataset(10, 32, 100, seed), reward_scale=1.0, discount=discount)
        result = harness.run_bandit_dqn(mdp, config, seed)
        probe = harness.probe_plasticity(result.final_network, harness.ProbeConfig(steps=probe_steps, seed=seed), result.probe_inputs)
        probe_losses.append(probe.final_loss)
    print(f"{name:>20}: probe loss {np.mean(probe_losses):.4f} +- {np.std(probe_losses):.4f}")
