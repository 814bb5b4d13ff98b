"""Desk-scale runs of the qualitative plasticity experiments, enabled with PLAB_SLOW=1.

Each test takes minutes on a CPU.
"""
import dataclasses
import os
import unittest

import numpy as np

from plasticity_lab import harness
from plasticity_lab.network import mlp_spec
from plasticity_lab.optimizers import RegularizerConfig
from plasticity_lab.records import loss_by_task
from plasticity_lab.tasks import BanditMDP, DatasetConfig, TaskConfig, synth_dataset

SLOW = os.environ.get("PLAB_SLOW") == "1"
SEEDS = (0, 1, 2)


def random_label_config(steps_per_task: int, num_tasks: int, epsilon: float = 1.0, norm: str | None = None,
                        l2: float = 0.0) -> harness.ExperimentConfig:
    return harness.ExperimentConfig(
        network=mlp_spec(32, 10, 128, 2, norm=norm),
        task=TaskConfig(
            dataset=DatasetConfig(num_classes=10, input_dim=32, n_per_class=50),
            mode="random_labels", epsilon=epsilon, steps_per_task=steps_per_task, num_tasks=num_tasks,
        ),
        regularizer=RegularizerConfig(l2_coefficient=l2),
        training=harness.TrainingConfig(batch_size=128, cadence=steps_per_task, eval_size=500, probe_size=128),
    )


@unittest.skipUnless(SLOW, "set PLAB_SLOW=1 to run")
class TestPlasticityExperiments(unittest.TestCase):
    def test_offset_dose_response_is_monotone(self):
        rows = harness.run_offset_dose_response((0, 8, 16, 32), harness.DoseConfig(seeds=SEEDS))
        losses = [row.finetune_loss for row in rows]
        self.assertEqual([row.treatment for row in rows], [0.0, 8.0, 16.0, 32.0])
        self.assertTrue(all(a < b for a, b in zip(losses, losses[1:])), losses)

    def test_small_relabel_fraction_keeps_plasticity(self):
        # equal budget of relabeled samples: 20 full re-randomizations against 2000 one-percent ones
        final = {}
        for epsilon in (0.01, 1.0):
            steps_per_task = max(1, round(2000 * epsilon))
            config = random_label_config(steps_per_task, round(20 / epsilon), epsilon)
            final[epsilon] = np.mean([harness.run_iterated_training(config, seed)[-1].accuracy for seed in SEEDS])
        self.assertGreater(final[0.01] - final[1.0], 0.02)

    def test_stale_optimizer_spikes_dead_units(self):
        config = random_label_config(2000, 2)
        stale_wins = 0
        for seed in SEEDS:
            result = harness.run_task_switch_microscope(config, seed, steps=500)
            if result.peak_dead("stale") >= result.peak_dead("reset"):
                stale_wins += 1
            stale = result.runs["stale"]
            self.assertGreater(max(r.metrics.entropy for r in stale[1:101]), stale[0].metrics.entropy)
        self.assertGreaterEqual(stale_wins, 2)

    def test_layer_norm_and_l2_mitigate(self):
        def accuracy_drop(config):
            drops, finals = [], []
            for seed in SEEDS:
                table = loss_by_task(harness.run_iterated_training(config, seed))
                drops.append(table[0][6] - table[-1][6])
                finals.append(table[-1][6])
            return np.mean(drops), np.mean(finals)

        baseline_drop, baseline_final = accuracy_drop(random_label_config(1000, 20))
        mitigated_drop, mitigated_final = accuracy_drop(random_label_config(1000, 20, norm="layer", l2=1e-4))
        self.assertGreater(baseline_drop, mitigated_drop)
        self.assertGreaterEqual(mitigated_final, baseline_final)

    def test_target_scale_hurts_bandit_plasticity(self):
        base = harness.BanditConfig(width=128, depth=2, steps=5000, batch_size=64, target_update_period=500)
        probe = harness.ProbeConfig(steps=500)

        def probe_loss(discount, config):
            losses = []
            for seed in SEEDS:
                mdp = BanditMDP(synth_dataset(10, 32, 100, seed), reward_scale=1.0, discount=discount)
                result = harness.run_bandit_dqn(mdp, config, seed)
                losses.append(harness.probe_plasticity(
                    result.final_network, dataclasses.replace(probe, seed=seed), result.probe_inputs,
                ).final_loss)
            return np.mean(losses)

        myopic = probe_loss(0.0, base)
        far_sighted = probe_loss(0.99, base)
        two_hot = probe_loss(0.99, dataclasses.replace(base, loss="two_hot", smoothing=0.1))
        self.assertGreater(far_sighted, myopic)
        self.assertLess(two_hot, far_sighted)


if __name__ == "__main__":
    unittest.main()
