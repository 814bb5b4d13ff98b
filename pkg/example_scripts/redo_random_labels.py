#! /usr/bin/env python3

# Trains the same network through a stream of random-label tasks, once plain and once
# with ReDO resets, then probes how well each final network can still fit a new function.

import dataclasses
import logging

from plasticity_lab import harness
from plasticity_lab.network import mlp_spec
from plasticity_lab.optimizers import ResetPolicy
from plasticity_lab.records import loss_by_task
from plasticity_lab.tasks import DatasetConfig, TaskConfig, dataset_from_config

seed = 0
steps_per_task = 1000
num_tasks = 10
redo_interval = 100  # steps between ReDO scans
redo_threshold = 0.1
probe_steps = 500

logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")

base = harness.ExperimentConfig(
    network=mlp_spec(32, 10, 128, 2),
    task=TaskConfig(
        dataset=DatasetConfig(num_classes=10, input_dim=32, n_per_class=50),
        mode="random_labels", steps_per_task=steps_per_task, num_tasks=num_tasks,
    ),
    training=harness.TrainingConfig(batch_size=128, cadence=steps_per_task, eval_size=500, probe_size=128),
)
variants = {
    "plain": base,
    "redo": dataclasses.replace(base, reset=ResetPolicy(redo_threshold=redo_threshold, redo_interval=redo_interval)),
}

for name, config in variants.items():
    outcome = harness.iterated_training(config, seed)
    if outcome.diverged:
        print(f"{name}: diverged at step {outcome.step}")
        continue
    print(f"{name}: task, first accuracy, last accuracy, last dead fraction")
    for task, _, _, _, _, first_acc, last_acc in loss_by_task(outcome.records):
        dead = [r.dead_frac for r in outcome.records if r.task == task][-1]
        print(f"  {task:3d} {first_acc:.3f} {last_acc:.3f} {dead:.3f}")
    probe_inputs = dataset_from_config(config.task.dataset, seed=seed).inputs[:config.training.probe_size]
    result = harness.probe_plasticity(outcome.network, harness.ProbeConfig(steps=probe_steps, seed=seed), probe_inputs)
    print(f"{name}: probe loss {result.initial_loss:.3f} -> {result.final_loss:.4f}")
