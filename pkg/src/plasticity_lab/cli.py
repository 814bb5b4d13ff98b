from argparse import ArgumentParser, Namespace, RawDescriptionHelpFormatter
import json
import logging
from pathlib import Path
import sys
from typing import NoReturn

import numpy as np

from . import __version__, harness, records
from .checkpoint import read_checkpoint, save_checkpoint
from .config import load_config, parse_document
from .diagnostics import full_report
from .gradcheck import run_gradcheck
from .network import Network
from .optimizers import OptimizerConfig
from .tasks import BanditMDP, dataset_from_config, synth_dataset
from .utils import (
    DivergenceError, PlasticityLabError, logger, parse_int_list, parse_number, parse_number_list, parse_switch, pretty_list,
    substream,
)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_DIVERGED = 2

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


class _Parser(ArgumentParser):
    # usage errors are validation errors, not argparse's default exit code 2
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        abort(message)


def _common_options() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Log debug messages")
    common.add_argument("-q", "--quiet", action="store_true", help="Only log warnings and errors")
    common.add_argument("--force", action="store_true", help="Overwrite existing output files")
    return common


def get_parser() -> ArgumentParser:
    parser = _Parser(
        formatter_class=RawDescriptionHelpFormatter,
        prog="plab",
        description="\n".join([
            "Desk-scale experiments on the loss of plasticity in neural networks.",
            "",
            "Most number values accept decimals, percentages and fractions (ie '0.25', '25%' or '1/4')",
            "Lists are comma separated, ie '--offsets 0,8,16,32'",
            "If your value starts with a '-', you must add a = between option and value, ie '--gamma=-0'",
            "",
            "Datasets other than 'synthetic' are read from the directory in PLAB_DATA_DIR.",
            f"Exit codes: {EXIT_OK} success, {EXIT_INVALID} invalid input, {EXIT_DIVERGED} training diverged",
        ]),
        epilog=f"Version: {__version__}",
    )
    common = _common_options()
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    run = sub.add_parser("run", parents=[common], help="Iterated training on a task stream")
    run.add_argument("--config", type=Path, required=True, help="JSON config document")
    run.add_argument("--out", type=Path, required=True, help="Output directory")
    run.add_argument("--seed", type=int, help="Run only this seed instead of every seed of the config")
    run.add_argument("--jobs", type=int, default=1, help="Parallel runs when running several seeds")

    probe = sub.add_parser("probe", parents=[common], help="Plasticity probe on a checkpoint")
    probe.add_argument("--checkpoint", type=Path, required=True)
    probe.add_argument("--rho", type=parse_number, default=1.0, help="Norm of the output perturbation (default: 1)")
    probe.add_argument("--steps", type=int, default=2000, help="Probe training steps (default: 2000)")
    probe.add_argument("--lr", type=parse_number, default=1e-3, help="Learning rate of the fresh Adam optimizer")
    probe.add_argument("--inputs", type=int, default=256, metavar="N", help="Number of probe inputs (default: 256)")
    probe.add_argument("--seed", type=int, default=0, help="Seed of the perturbation and the probe inputs")
    probe.add_argument("--out", type=Path, help="Write the result as JSON instead of printing it")

    bandit = sub.add_parser("bandit", parents=[common], help="Q-learning on the classification bandit")
    bandit.add_argument("--gamma", type=parse_number, default=0.99, help="Discount (default: 0.99)")
    bandit.add_argument("--alpha", type=parse_number, default=1.0, help="Reward for the correct label (default: 1)")
    bandit.add_argument("--loss", choices=("mse", "two_hot"), default="mse")
    bandit.add_argument("--smoothing", type=parse_number, default=0.0, help="Two-hot label smoothing")
    bandit.add_argument("--bound", type=int, help="Two-hot support bound, defaults to ceil(alpha / (1 - gamma))")
    bandit.add_argument("--steps", type=int, default=10_000)
    bandit.add_argument("--target-period", type=int, default=500, help="Steps between target network updates")
    bandit.add_argument("--layer-norm", action="store_true")
    bandit.add_argument("--l2", type=parse_number, default=0.0, help="L2 coefficient")
    bandit.add_argument("--lr", type=parse_number, default=1e-3)
    bandit.add_argument("--classes", type=int, default=10, help="Classes (actions) of the synthetic dataset")
    bandit.add_argument("--input-dim", type=int, default=32)
    bandit.add_argument("--probe-steps", type=int, default=0, help="Run the plasticity probe on the final network for this many steps")
    bandit.add_argument("--seed", type=int, default=0)
    bandit.add_argument("--out", type=Path, required=True, help="Output directory")

    dose = sub.add_parser("dose", parents=[common], help="Offset dose-response of pretraining")
    dose.add_argument("--offsets", type=parse_number_list, default=[0, 8, 16, 32], help="Target offsets (default: 0,8,16,32)")
    dose.add_argument("--scales", type=parse_number_list, help="Run the centered-and-scaled control with these scales instead")
    dose.add_argument("--seeds", type=parse_int_list, default=[0, 1, 2], help="Seeds (default: 0,1,2)")
    dose.add_argument("--steps", type=int, default=2000, help="Pretraining and fine-tuning steps each")
    dose.add_argument("--frequency", type=parse_number, default=1e5)
    dose.add_argument("--width", type=int, default=256)
    dose.add_argument("--depth", type=int, default=4)
    dose.add_argument("--batch-size", type=int, default=512)
    dose.add_argument("--out", type=Path, required=True, help="Output directory for dose.csv")

    micro = sub.add_parser("microscope", parents=[common], help="Dense logging after one task switch")
    micro.add_argument("--config", type=Path, required=True)
    micro.add_argument("--out", type=Path, required=True)
    micro.add_argument("--seed", type=int)
    micro.add_argument("--steps", type=int, default=500, help="Logged steps after the switch (default: 500)")
    micro.add_argument("--reset-optimizer", type=parse_switch, metavar="{on,off}", help="Only run one variant (default: both)")

    diag = sub.add_parser("diagnose", parents=[common], help="eNTK, feature SVD and unit census of a checkpoint")
    diag.add_argument("--checkpoint", type=Path, required=True)
    diag.add_argument("--out", type=Path, required=True, help="JSONL output file")
    diag.add_argument("--batch", type=int, default=128, help="Probe batch size (default: 128)")
    diag.add_argument("--seed", type=int, default=0)

    grad = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of every layer and loss")
    grad.add_argument("--cases", type=int, default=100)
    grad.add_argument("--seed", type=int, default=0)

    export = sub.add_parser("export-plot", parents=[common], help="Fold metrics.csv into plot-ready tables")
    export.add_argument("source", type=Path, help="Run directory or metrics.csv")

    return parser


def abort(reason: str, code: int = EXIT_INVALID) -> NoReturn:
    print("ERROR: " + reason, file=sys.stderr)
    raise SystemExit(code)


def _configure_logging(options: Namespace) -> None:
    level = logging.DEBUG if options.verbose else logging.WARNING if options.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def _probe_inputs(ckpt_extra: dict, net: Network, size: int, seed: int) -> "numpy array":
    """samples of the dataset a checkpoint was trained on, or Gaussian inputs without one"""
    rng = substream(seed, "probe", 2)
    if "config" in ckpt_extra:
        config, _ = parse_document(ckpt_extra["config"])
        base = dataset_from_config(config.task.dataset, seed=config.seeds[0]).reshaped(net.spec.input_shape)
        return base.inputs[np.sort(rng.choice(len(base), size=min(size, len(base)), replace=False))]
    return rng.normal(size=(size, *net.spec.input_shape))


def _write_json(path: Path | None, payload: dict, force: bool) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is None:
        print(text)
        return
    records.check_writable(path, force)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n", encoding="utf-8")


def cmd_run(options: Namespace) -> int:
    config, applied = load_config(options.config)
    logger.debug(f"Defaults applied: {pretty_list(sorted(applied))}")
    if options.seed is not None or len(config.seeds) == 1:
        seed = config.seeds[0] if options.seed is None else options.seed
        results = [harness.run_to_directory(config, seed, options.out, options.force)]
    else:
        results = harness.run_grid([config], options.out, jobs=options.jobs, force=options.force)
    diverged = [str(path) for path, div in results if div]
    if diverged:
        logger.error(f"Diverged: {pretty_list(diverged)}")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_probe(options: Namespace) -> int:
    ckpt = read_checkpoint(options.checkpoint)
    probe = harness.ProbeConfig(
        rho=options.rho, seed=options.seed, steps=options.steps, optimizer=OptimizerConfig(lr=options.lr),
    )
    result = harness.probe_plasticity(ckpt.network, probe, _probe_inputs(ckpt.extra, ckpt.network, options.inputs, options.seed))
    _write_json(options.out, result.to_dict(), options.force)
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def cmd_bandit(options: Namespace) -> int:
    mdp = BanditMDP(
        synth_dataset(options.classes, options.input_dim, 100, options.seed),
        reward_scale=options.alpha, discount=options.gamma,
    )
    config = harness.BanditConfig(
        loss=options.loss, smoothing=options.smoothing, bound=options.bound, steps=options.steps,
        target_update_period=options.target_period, layer_norm=options.layer_norm,
        l2_coefficient=options.l2, optimizer=OptimizerConfig(lr=options.lr),
    )
    # refuse before training, RunWriter checks its own files
    outputs = [records.CHECKPOINT_FILE] + ([records.PROBE_FILE] if options.probe_steps else [])
    for name in outputs:
        records.check_writable(options.out / name, options.force)
    with records.RunWriter(options.out, force=options.force) as writer:
        result = harness.run_bandit_dqn(mdp, config, options.seed, writer)
    step, net = result.checkpoints[-1]
    save_checkpoint(options.out / records.CHECKPOINT_FILE, net, config.optimizer.new_state(), seed=options.seed, step=step, force=options.force)
    if result.records[-1].diverged:
        return EXIT_DIVERGED
    if options.probe_steps:
        probe = harness.probe_plasticity(net, harness.ProbeConfig(seed=options.seed, steps=options.probe_steps), result.probe_inputs)
        _write_json(options.out / records.PROBE_FILE, probe.to_dict(), options.force)
        logger.info(f"Probe loss after {options.probe_steps} steps: {probe.final_loss:.4g}")
    return EXIT_OK


def cmd_dose(options: Namespace) -> int:
    config = harness.DoseConfig(
        seeds=tuple(options.seeds), frequency=options.frequency, width=options.width,
        depth=options.depth, batch_size=options.batch_size,
        pretrain_steps=options.steps, finetune_steps=options.steps,
    )
    if options.scales is not None:
        rows = harness.run_centered_scaled_control(options.scales, config)
    else:
        rows = harness.run_offset_dose_response(options.offsets, config)
    options.out.mkdir(parents=True, exist_ok=True)
    records.write_table(options.out / records.DOSE_FILE, records.DOSE_HEADER, (row.row() for row in rows), options.force)
    return EXIT_OK


def cmd_microscope(options: Namespace) -> int:
    config, _ = load_config(options.config)
    result = harness.run_task_switch_microscope(config, options.seed, options.steps, options.reset_optimizer)
    for variant, recs in result.runs.items():
        with records.RunWriter(options.out / variant, force=options.force) as writer:
            for rec in recs:
                writer.write_record(rec.metrics)
                writer.write_diagnostic(rec.metrics.step, "microscope", rec.to_dict())
    if any(len(recs) <= options.steps for recs in result.runs.values()):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_diagnose(options: Namespace) -> int:
    ckpt = read_checkpoint(options.checkpoint)
    batch = _probe_inputs(ckpt.extra, ckpt.network, options.batch, options.seed)
    records.check_writable(options.out, options.force)
    options.out.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps({"step": ckpt.step, "kind": "report", "payload": full_report(ckpt.network, batch)}, sort_keys=True)
    options.out.write_text(line + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(options: Namespace) -> int:
    report = run_gradcheck(options.cases, options.seed)
    print(f"{len(report.results)} cases, max relative error {report.max_error:.3g}")
    for failure in report.failures:
        print(f"FAILED {failure.case.name}: {failure.max_rel_error:.3g} on {failure.worst_tensor}")
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_export_plot(options: Namespace) -> int:
    for path in records.export_plot_tables(options.source, options.force):
        print(path)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "probe": cmd_probe,
    "bandit": cmd_bandit,
    "dose": cmd_dose,
    "microscope": cmd_microscope,
    "diagnose": cmd_diagnose,
    "gradcheck": cmd_gradcheck,
    "export-plot": cmd_export_plot,
}


def main(argv: list[str] | None = None) -> int:
    try:
        options = get_parser().parse_args(argv)
        _configure_logging(options)
        return COMMANDS[options.command](options)
    except SystemExit as se:
        return se.code if isinstance(se.code, int) else EXIT_INVALID
    except DivergenceError as de:
        print(f"ERROR: {de}", file=sys.stderr)
        return EXIT_DIVERGED
    except (PlasticityLabError, ValueError) as err:
        print(f"ERROR: {err}", file=sys.stderr)
        return EXIT_INVALID


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
