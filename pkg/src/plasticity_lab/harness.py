"""Experiment drivers: iterated training, plasticity probes, the bandit Q-learner and dose-response studies."""
from concurrent.futures import ProcessPoolExecutor
import dataclasses
from math import ceil
from pathlib import Path
import time
from typing import Any, Callable, Iterable

import numpy as np

from .checkpoint import save_checkpoint
from .diagnostics import (
    AlignmentCensus, full_report, gradient_alignment_census, param_norms, predictive_entropy, unit_census,
)
from .losses import LOSS_KINDS, TwoHotCodec, mse_loss, smoothed_one_hot, two_hot_loss, xent_loss
from .network import Network, NetworkSpec, backward, feature_index, forward, init_network, mlp_spec
from .optimizers import (
    OptimizerConfig, OptimizerState, RegularizerConfig, ResetPolicy, activation_scores, apply_l2,
    feature_norm_penalty, optimizer_step, redo_reset, rescale_weights_to_init, reset_optimizer_state,
)
from .records import CHECKPOINT_FILE, CONFIG_FILE, MetricLog, MetricRecord, RunWriter, check_writable
from .tasks import (
    BanditMDP, Dataset, RegressionTargetGen, TaskConfig, bandit_reward, bandit_transition,
    dataset_from_config, gen_regression_targets, iter_tasks, sine_features,
)
from .utils import (
    ConfigError, DivergenceError, NonFiniteError, TargetRangeError, as_tensor, logger, pretty_time_delta, substream,
)

CENSUS_PROBE_MIN = 32


@dataclasses.dataclass(frozen=True)
class LossConfig:
    kind: str = "xent"
    smoothing: float = 0.0
    bound: int = 100  # two-hot support [-bound, bound]

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}", path="loss.kind", value=self.kind)
        if not 0 <= self.smoothing < 1:
            raise ConfigError("smoothing must be in [0, 1)", path="loss.smoothing", value=self.smoothing)
        if self.bound < 1:
            raise ConfigError("bound must be positive", path="loss.bound", value=self.bound)

    @property
    def codec(self) -> TwoHotCodec:
        return TwoHotCodec(self.bound, self.smoothing)


@dataclasses.dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 128
    cadence: int = 100  # steps between metric records
    heavy_cadence: int | None = None  # steps between full diagnostic reports, None disables them
    eval_size: int = 1024
    probe_size: int = 256
    reset_optimizer_on_switch: bool = False

    def __post_init__(self) -> None:
        for name in ("batch_size", "cadence", "eval_size", "probe_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1", path=f"training.{name}", value=getattr(self, name))
        if self.heavy_cadence is not None and self.heavy_cadence < 1:
            raise ConfigError("heavy_cadence must be at least 1", path="training.heavy_cadence", value=self.heavy_cadence)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkSpec
    task: TaskConfig = TaskConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    regularizer: RegularizerConfig = RegularizerConfig()
    reset: ResetPolicy = ResetPolicy()
    loss: LossConfig = LossConfig()
    training: TrainingConfig = TrainingConfig()
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("at least one seed is needed", path="seeds")
        if self.task.target is not None and self.loss.kind == "xent":
            raise ConfigError("regression targets need the mse or two_hot loss", path="loss.kind", value=self.loss.kind)

    @property
    def budget(self) -> int:
        return self.task.steps_per_task * self.task.num_tasks


def loss_and_grad(loss: LossConfig, outputs: "numpy array (b, k)", targets: "numpy array", num_classes: int | None) -> tuple[float, "numpy array (b, k)"]:
    if loss.kind == "xent":
        if num_classes is None:
            raise ConfigError("cross entropy needs class labels", path="loss.kind", value=loss.kind)
        return xent_loss(outputs, targets, loss.smoothing)
    if loss.kind == "two_hot":
        return two_hot_loss(loss.codec, outputs, targets)
    if num_classes is not None:
        return mse_loss(outputs, smoothed_one_hot(targets, num_classes))
    return mse_loss(outputs, np.reshape(targets, outputs.shape))


def accuracy(outputs: "numpy array (b, k)", targets: "numpy array", num_classes: int | None) -> float | None:
    if num_classes is None:
        return None
    return float((outputs.argmax(axis=-1) == targets).mean())


def check_head(spec: NetworkSpec, loss: LossConfig, base: Dataset) -> None:
    """network output width must fit the loss and the dataset"""
    out = spec.output_shape
    if loss.kind == "two_hot":
        expected = loss.codec.num_atoms
    elif base.is_classification:
        expected = base.num_classes
    else:
        expected = 1
    if out != (expected,):
        raise ConfigError(f"network output shape {out} does not fit the {loss.kind} head, expected ({expected},)", path="network")
    if np.prod(spec.input_shape) != np.prod(base.input_shape):
        raise ConfigError(f"network input shape {spec.input_shape} does not fit dataset inputs {base.input_shape}", path="network.input_shape")


def train_step(
    net: Network, state: OptimizerState, x: "numpy array", y: "numpy array", loss: LossConfig,
    regularizer: RegularizerConfig, num_classes: int | None = None, step: int = 0,
) -> float:
    """one optimizer step in place; returns the task loss (without penalties)"""
    out, trace = forward(net, x, "train")
    value, grad = loss_and_grad(loss, out, y, num_classes)
    if not np.isfinite(value):
        raise DivergenceError(step, value)
    extra = None
    if regularizer.feature_norm_coefficient:
        fi = feature_index(net.spec)
        if fi > 0:
            _, penalty_grad = feature_norm_penalty(trace.inputs[fi], regularizer.feature_norm_coefficient)
            extra = {fi - 1: penalty_grad}
    grads = apply_l2(backward(net, trace, grad, extra).params, net.params, regularizer.l2_coefficient)
    try:
        net.params = optimizer_step(state, net.params, grads)
    except NonFiniteError as nfe:
        raise DivergenceError(step, value) from nfe
    return value


def apply_resets(policy: ResetPolicy, net: Network, state: OptimizerState, probe_x: "numpy array", seed: int, step: int) -> None:
    if policy.redo_interval is not None and step % policy.redo_interval == 0:
        redo_reset(net, activation_scores(net, probe_x), state, policy.redo_threshold, substream(seed, "redo", step))
    if policy.rescale_to_init and step % policy.rescale_interval == 0:
        rescale_weights_to_init(net)


def evaluate(
    net: Network, x: "numpy array", y: "numpy array", probe_x: "numpy array", loss: LossConfig,
    num_classes: int | None, step: int, task: int,
) -> MetricRecord:
    out, _ = forward(net, x, "eval")
    value, _ = loss_and_grad(loss, out, y, num_classes)
    census = unit_census(net, probe_x, min_batch=min(CENSUS_PROBE_MIN, probe_x.shape[0]))
    norms = param_norms(net)
    return MetricRecord(
        step=step, task=task, loss=value, accuracy=accuracy(out, y, num_classes),
        dead_frac=census.dead_fraction, zombie_frac=census.zombie_fraction,
        param_norm=norms.total, entropy=predictive_entropy(out) if num_classes is not None else None,
        layer_norms=norms.per_layer,
    )


def _diverged_record(net: Network, step: int, task: int) -> MetricRecord:
    return MetricRecord(
        step=step, task=task, loss=float("nan"), accuracy=None, dead_frac=float("nan"),
        zombie_frac=float("nan"), param_norm=param_norms(net).total, entropy=None, diverged=True,
    )


@dataclasses.dataclass
class _RunState:
    """everything a training driver needs for one (config, seed) pair"""
    config: ExperimentConfig
    seed: int
    net: Network
    state: OptimizerState
    base: Dataset
    eval_idx: "numpy array"
    probe_idx: "numpy array"

    @property
    def moving_target(self) -> RegressionTargetGen | None:
        target = self.config.task.target
        return target if target is not None and target.kind == "moving_sine" else None

    def targets(self, ds: Dataset, idx: "numpy array", step: int) -> "numpy array":
        if self.moving_target is not None:
            return gen_regression_targets(self.moving_target, ds.inputs[idx], step)
        return ds.targets[idx]

    def evaluate(self, ds: Dataset, step: int, task: int) -> MetricRecord:
        return evaluate(
            self.net, ds.inputs[self.eval_idx], self.targets(ds, self.eval_idx, step),
            ds.inputs[self.probe_idx], self.config.loss, ds.num_classes, step, task,
        )


def _setup(config: ExperimentConfig, seed: int, data_dir: Path | str | None) -> _RunState:
    net = init_network(config.network, seed)
    base = dataset_from_config(config.task.dataset, data_dir, seed)
    if config.task.target is not None:
        base = Dataset(inputs=base.inputs, targets=gen_regression_targets(config.task.target, base.inputs, 0))
    check_head(config.network, config.loss, base)
    base = base.reshaped(config.network.input_shape)
    rng = substream(seed, "probe")
    n = len(base)
    return _RunState(
        config=config, seed=seed, net=net, state=config.optimizer.new_state(), base=base,
        eval_idx=np.sort(rng.choice(n, size=min(config.training.eval_size, n), replace=False)),
        probe_idx=np.sort(rng.choice(n, size=min(config.training.probe_size, n), replace=False)),
    )


@dataclasses.dataclass
class TrainingOutcome:
    records: list[MetricRecord]
    network: Network
    optimizer: OptimizerState
    seed: int
    step: int

    @property
    def diverged(self) -> bool:
        return bool(self.records) and self.records[-1].diverged


def run_iterated_training(
    config: ExperimentConfig, seed: int | None = None, sink: RunWriter | None = None,
    data_dir: Path | str | None = None,
) -> list[MetricRecord]:
    return iterated_training(config, seed, sink, data_dir).records


def iterated_training(
    config: ExperimentConfig, seed: int | None = None, sink: RunWriter | None = None,
    data_dir: Path | str | None = None,
) -> TrainingOutcome:
    """Train through every task of the stream.

    Records are taken at step 0, every `cadence` steps and in pairs around
    each task switch: the last record of the old task and the first record
    of the new one share the step. A diverged run ends with a record whose
    `diverged` flag is set.
    """
    seed = config.seeds[0] if seed is None else seed
    run = _setup(config, seed, data_dir)
    tcfg = config.training
    log = MetricLog(sink)
    rng = substream(seed, "train")
    step = 0
    start = time.perf_counter()
    for task_index, ds in enumerate(iter_tasks(config.task.stream(run.base, seed))):
        if task_index:
            logger.info(f"Task {task_index} starts at step {step}")
            if tcfg.reset_optimizer_on_switch:
                reset_optimizer_state(run.state)
        log.append(run.evaluate(ds, step, task_index))
        probe_x = ds.inputs[run.probe_idx]
        try:
            for _ in range(config.task.steps_per_task):
                idx = rng.choice(len(ds), size=min(tcfg.batch_size, len(ds)), replace=False)
                train_step(
                    run.net, run.state, ds.inputs[idx], run.targets(ds, idx, step),
                    config.loss, config.regularizer, ds.num_classes, step,
                )
                step += 1
                apply_resets(config.reset, run.net, run.state, probe_x, seed, step)
                if step % tcfg.cadence == 0:
                    log.append(run.evaluate(ds, step, task_index))
                    logger.debug(f"step {step}: loss {log.last.loss:.4g}")
                if tcfg.heavy_cadence is not None and step % tcfg.heavy_cadence == 0:
                    log.diagnostic(step, "report", full_report(run.net, probe_x))
        except DivergenceError as de:
            logger.error(f"{de}, aborting run")
            log.append(_diverged_record(run.net, step + 1, task_index))
            log.diagnostic(step + 1, "diverged", {"task": task_index, "loss": repr(de.loss)})
            log.flush()
            return TrainingOutcome(log.records, run.net, run.state, seed, step + 1)
        if log.last.step != step:
            log.append(run.evaluate(ds, step, task_index))
        log.flush()
    logger.info(f"Ran {step} steps in {pretty_time_delta(time.perf_counter() - start)}")
    return TrainingOutcome(log.records, run.net, run.state, seed, step)


@dataclasses.dataclass(frozen=True)
class ProbeConfig:
    rho: float = 1.0  # norm of the output perturbation
    seed: int = 0
    steps: int = 2000
    optimizer: OptimizerConfig = OptimizerConfig()
    frequency: float = 1e5
    batch_size: int | None = None  # None: full probe set every step

    def __post_init__(self) -> None:
        if not (np.isfinite(self.rho) and self.rho > 0):
            raise ConfigError("rho must be positive and finite", path="probe.rho", value=self.rho)
        if self.steps < 1:
            raise ConfigError("probe steps must be at least 1", path="probe.steps", value=self.steps)
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1", path="probe.batch_size", value=self.batch_size)


@dataclasses.dataclass
class ProbeResult:
    curve: list[tuple[int, float]]  # (step, loss) at steps 0, 1, 2, 4, ... and the last step
    diverged: bool = False

    @property
    def initial_loss(self) -> float:
        return self.curve[0][1]

    @property
    def final_loss(self) -> float:
        return self.curve[-1][1]

    def to_dict(self) -> dict[str, Any]:
        return {"curve": [[s, l] for s, l in self.curve], "final_loss": self.final_loss, "diverged": self.diverged}


def probe_perturbation(inputs: "numpy array", outputs: int, probe: ProbeConfig) -> "numpy array (n, outputs)":
    """high-frequency function of the inputs, scaled to Frobenius norm rho"""
    eta = sine_features(RegressionTargetGen(frequency=probe.frequency, seed=probe.seed), inputs, outputs)
    return eta * (probe.rho / np.linalg.norm(eta))


def probe_plasticity(checkpoint: Network, probe: ProbeConfig, inputs: "numpy array") -> ProbeResult:
    """Fit a copy of the checkpoint to its own outputs plus a fixed perturbation.

    The loss is the summed squared error ||f(theta_T; X) - f(theta; X) + eta(X)||^2,
    so it starts at exactly rho^2. Training runs in eval mode, keeping
    normalization statistics frozen.
    """
    x = as_tensor(inputs, "probe inputs")
    net = checkpoint.copy()
    reference, _ = forward(checkpoint, x, "eval")
    reference = reference.reshape(x.shape[0], -1)
    target = reference + probe_perturbation(x, reference.shape[1], probe)
    state = probe.optimizer.new_state()
    rng = substream(probe.seed, "probe", 1)
    marks = {0, probe.steps} | {2**k for k in range(probe.steps.bit_length())}
    curve = []

    def full_loss() -> float:
        out, _ = forward(net, x, "eval")
        return float(((out.reshape(target.shape) - target)**2).sum())

    for step in range(probe.steps + 1):
        if step in marks:
            curve.append((step, full_loss()))
            if not np.isfinite(curve[-1][1]):
                return ProbeResult(curve=curve, diverged=True)
        if step == probe.steps:
            break
        idx = slice(None) if probe.batch_size is None else rng.choice(x.shape[0], size=min(probe.batch_size, x.shape[0]), replace=False)
        out, trace = forward(net, x[idx], "eval")
        grad = 2 * (out.reshape(target[idx].shape) - target[idx])
        try:
            net.params = optimizer_step(state, net.params, backward(net, trace, grad.reshape(out.shape)).params)
        except NonFiniteError:
            logger.warning(f"Probe diverged at step {step}")
            return ProbeResult(curve=curve, diverged=True)
    return ProbeResult(curve=curve)


class ReplayBuffer:
    """fixed-capacity FIFO of (observation, action, reward, next observation)"""
    def __init__(self, capacity: int = 100_000) -> None:
        if capacity < 1:
            raise ConfigError("capacity must be at least 1", path="bandit.buffer_capacity", value=capacity)
        self.capacity = capacity
        self._obs: "numpy array | None" = None
        self._next_obs: "numpy array | None" = None
        self._actions = np.zeros(capacity, dtype=np.int64)
        self._rewards = np.zeros(capacity)
        self._next = 0  # slot of the next write, which holds the oldest entry once full
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, obs: "numpy array", action: int, reward: float, next_obs: "numpy array") -> None:
        if self._obs is None:
            self._obs = np.zeros((self.capacity, *np.shape(obs)))
            self._next_obs = np.zeros((self.capacity, *np.shape(obs)))
        i = self._next
        self._obs[i] = obs
        self._next_obs[i] = next_obs
        self._actions[i] = action
        self._rewards[i] = reward
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> "numpy array":
        # storage slots from oldest to newest
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    def oldest(self) -> tuple["numpy array", int, float, "numpy array"]:
        if not self._size:
            raise IndexError("replay buffer is empty")
        i = int(self._order()[0])
        return self._obs[i], int(self._actions[i]), float(self._rewards[i]), self._next_obs[i]

    def sample(self, rng: np.random.Generator, batch_size: int) -> tuple["numpy array", "numpy array", "numpy array", "numpy array"]:
        if not self._size:
            raise IndexError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        return self._obs[idx], self._actions[idx], self._rewards[idx], self._next_obs[idx]

    def observations(self) -> "numpy array":
        """stored observations, oldest first"""
        if not self._size:
            return np.zeros((0,))
        return self._obs[self._order()]


@dataclasses.dataclass(frozen=True)
class BanditConfig:
    loss: str = "mse"  # mse or two_hot
    smoothing: float = 0.0
    bound: int | None = None  # two-hot support, default ceil(alpha / (1 - gamma))
    width: int = 256
    depth: int = 2
    layer_norm: bool = False
    l2_coefficient: float = 0.0
    steps: int = 10_000
    batch_size: int = 128
    target_update_period: int = 500
    buffer_capacity: int = 100_000
    optimizer: OptimizerConfig = OptimizerConfig()
    cadence: int = 500
    checkpoint_every: int | None = None  # None keeps only the final network
    probe_size: int = 256

    def __post_init__(self) -> None:
        if self.loss not in ("mse", "two_hot"):
            raise ConfigError("bandit loss must be mse or two_hot", path="bandit.loss", value=self.loss)
        if not 0 <= self.smoothing < 1:
            raise ConfigError("smoothing must be in [0, 1)", path="bandit.smoothing", value=self.smoothing)
        for name in ("steps", "batch_size", "target_update_period", "cadence", "probe_size", "width", "depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1", path=f"bandit.{name}", value=getattr(self, name))
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be at least 1", path="bandit.checkpoint_every", value=self.checkpoint_every)
        RegularizerConfig(l2_coefficient=self.l2_coefficient)


@dataclasses.dataclass
class BanditResult:
    records: list[MetricRecord]
    checkpoints: list[tuple[int, Network]]
    probe_inputs: "numpy array"  # drawn from the replay buffer
    codec: TwoHotCodec | None

    @property
    def final_network(self) -> Network:
        return self.checkpoints[-1][1]


def q_values(net: Network, obs: "numpy array", num_actions: int, codec: TwoHotCodec | None) -> "numpy array (b, a)":
    out, _ = forward(net, obs, "eval")
    if codec is None:
        return out
    return codec.decode_logits(out.reshape(out.shape[0], num_actions, codec.num_atoms))


def td_loss_and_grad(
    out: "numpy array (b, k)", actions: "numpy array (b,)", td_targets: "numpy array (b,)",
    num_actions: int, codec: TwoHotCodec | None,
) -> tuple[float, "numpy array (b, k)"]:
    """loss on the taken actions only; other outputs get zero gradient"""
    rows = np.arange(out.shape[0])
    if codec is None:
        pred = out[rows, actions]
        value, g = mse_loss(pred[:, np.newaxis], td_targets[:, np.newaxis])
        grad = np.zeros_like(out)
        grad[rows, actions] = g[:, 0]
        return value, grad
    logits = out.reshape(out.shape[0], num_actions, codec.num_atoms)
    value, g = two_hot_loss(codec, logits[rows, actions], td_targets)
    grad = np.zeros_like(logits)
    grad[rows, actions] = g
    return value, grad.reshape(out.shape)


def _bandit_record(net: Network, inputs: "numpy array", labels: "numpy array", probe_x: "numpy array",
                   num_actions: int, codec: TwoHotCodec | None, loss: float, step: int) -> MetricRecord:
    greedy = q_values(net, inputs, num_actions, codec).argmax(axis=1)
    census = unit_census(net, probe_x, min_batch=min(CENSUS_PROBE_MIN, probe_x.shape[0]))
    norms = param_norms(net)
    return MetricRecord(
        step=step, task=0, loss=loss, accuracy=float((greedy == labels).mean()),
        dead_frac=census.dead_fraction, zombie_frac=census.zombie_fraction,
        param_norm=norms.total, entropy=None, layer_norms=norms.per_layer,
    )


def run_bandit_dqn(
    mdp: BanditMDP, config: BanditConfig = BanditConfig(), seed: int = 0, sink: RunWriter | None = None,
) -> BanditResult:
    """Q-learning from a uniformly random behaviour policy.

    Every step one transition goes into the replay buffer and one minibatch
    is sampled from it. TD targets r + gamma * max_a Q_target(s', a) come from
    a target network copied every `target_update_period` steps. With the
    two-hot head the support has to cover the value scale alpha / (1 - gamma).
    Records report the mean TD loss since the previous record and the
    accuracy of the greedy action.
    """
    num_actions = mdp.num_actions
    codec = None
    if config.loss == "two_hot":
        bound = config.bound if config.bound is not None else ceil(mdp.value_scale)
        if bound < mdp.value_scale:
            raise TargetRangeError(mdp.value_scale, bound)
        codec = TwoHotCodec(bound, config.smoothing)
    out_dim = num_actions if codec is None else num_actions * codec.num_atoms
    inputs = mdp.dataset.inputs.reshape(len(mdp.dataset), -1)
    labels = mdp.dataset.targets
    spec = mlp_spec(
        inputs.shape[1], out_dim, config.width, config.depth,
        norm="layer" if config.layer_norm else None, seed=seed,
    )
    net = init_network(spec, seed)
    target = net.copy()
    state = config.optimizer.new_state()
    rng = substream(seed, "bandit")
    probe_rng = substream(seed, "probe")
    eval_idx = np.sort(probe_rng.choice(len(inputs), size=min(1024, len(inputs)), replace=False))
    census_x = inputs[eval_idx[:config.probe_size]]
    buffer = ReplayBuffer(config.buffer_capacity)
    log = MetricLog(sink)
    checkpoints: list[tuple[int, Network]] = []
    recent: list[float] = []

    def record(step: int) -> None:
        loss = float(np.mean(recent)) if recent else float("nan")
        log.append(_bandit_record(net, inputs[eval_idx], labels[eval_idx], census_x, num_actions, codec, loss, step))
        recent.clear()

    logger.info(f"Bandit agent: {config.loss} head, gamma {mdp.discount}, value scale {mdp.value_scale:.4g}")
    obs, label = bandit_transition(mdp, rng)
    step = 0
    try:
        for step in range(1, config.steps + 1):
            action = int(rng.integers(num_actions))
            reward = bandit_reward(mdp, action, label)
            next_obs, next_label = bandit_transition(mdp, rng)
            buffer.push(obs.reshape(-1), action, reward, next_obs.reshape(-1))
            obs, label = next_obs, next_label

            o, a, r, o2 = buffer.sample(rng, config.batch_size)
            td_targets = r + mdp.discount * q_values(target, o2, num_actions, codec).max(axis=1)
            if codec is not None:
                # only rounding can leave the support, the bound covers alpha / (1 - gamma)
                td_targets = np.clip(td_targets, -codec.bound, codec.bound)
            out, trace = forward(net, o, "train")
            value, grad = td_loss_and_grad(out, a, td_targets, num_actions, codec)
            if not np.isfinite(value):
                raise DivergenceError(step, value)
            grads = apply_l2(backward(net, trace, grad).params, net.params, config.l2_coefficient)
            try:
                net.params = optimizer_step(state, net.params, grads)
            except NonFiniteError as nfe:
                raise DivergenceError(step, value) from nfe
            recent.append(value)

            if step % config.target_update_period == 0:
                target = net.copy()
            if step % config.cadence == 0:
                record(step)
            if config.checkpoint_every is not None and step % config.checkpoint_every == 0:
                checkpoints.append((step, net.copy()))
    except DivergenceError as de:
        logger.error(f"{de}, aborting bandit run")
        log.append(_diverged_record(net, step, 0))
        log.diagnostic(step, "diverged", {"loss": repr(de.loss)})
    else:
        if log.last is None or log.last.step != step:
            record(step)
    log.flush()
    if not checkpoints or checkpoints[-1][0] != step:
        checkpoints.append((step, net.copy()))
    observations = buffer.observations()
    chosen = probe_rng.choice(len(observations), size=min(config.probe_size, len(observations)), replace=False)
    return BanditResult(records=log.records, checkpoints=checkpoints, probe_inputs=observations[np.sort(chosen)], codec=codec)


@dataclasses.dataclass(frozen=True)
class DoseConfig:
    """pretrain / fine-tune study on sine targets of a frozen random network"""
    seeds: tuple[int, ...] = (0, 1, 2)
    frequency: float = 1e5
    finetune_offset: float = 0.0
    input_dim: int = 32
    num_samples: int = 1024
    width: int = 256
    depth: int = 4
    batch_size: int = 512
    pretrain_steps: int = 2000
    finetune_steps: int = 2000
    optimizer: OptimizerConfig = OptimizerConfig()
    final_window: int = 10  # losses of the last steps that are averaged

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("at least one seed is needed", path="dose.seeds")
        for name in ("input_dim", "num_samples", "width", "depth", "batch_size", "pretrain_steps", "finetune_steps", "final_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1", path=f"dose.{name}", value=getattr(self, name))
        RegressionTargetGen(frequency=self.frequency, offset=self.finetune_offset)


@dataclasses.dataclass(frozen=True)
class DoseRow:
    treatment: float
    pretrain_loss: float
    finetune_loss: float
    finetune_loss_std: float
    seeds: int

    def row(self) -> tuple[float, float, float, float, int]:
        return self.treatment, self.pretrain_loss, self.finetune_loss, self.finetune_loss_std, self.seeds


def fit_regression(
    net: Network, state: OptimizerState, x: "numpy array", y: "numpy array", steps: int, batch_size: int,
    rng: np.random.Generator,
) -> list[float]:
    """minibatch MSE regression in place, returns the loss of every step"""
    losses = []
    y = y.reshape(x.shape[0], -1)
    for step in range(steps):
        idx = rng.choice(x.shape[0], size=min(batch_size, x.shape[0]), replace=False)
        out, trace = forward(net, x[idx], "train")
        value, grad = mse_loss(out, y[idx])
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        try:
            net.params = optimizer_step(state, net.params, backward(net, trace, grad).params)
        except NonFiniteError as nfe:
            raise DivergenceError(step, value) from nfe
        losses.append(value)
    return losses


def _dose_study(treatments: Iterable[float], pretrain_target: Callable[[float, int], RegressionTargetGen], config: DoseConfig) -> list[DoseRow]:
    rows = []
    for treatment in sorted(treatments):
        pretrain, finetune = [], []
        for seed in config.seeds:
            x = substream(seed, "task").normal(size=(config.num_samples, config.input_dim))
            rng = substream(seed, "train")
            net = init_network(mlp_spec(config.input_dim, 1, config.width, config.depth, seed=seed), seed)
            y = gen_regression_targets(pretrain_target(treatment, 2 * seed), x)
            losses = fit_regression(net, config.optimizer.new_state(), x, y, config.pretrain_steps, config.batch_size, rng)
            pretrain.append(np.mean(losses[-config.final_window:]))
            # fresh target function and a fresh optimizer for fine-tuning
            y = gen_regression_targets(RegressionTargetGen(frequency=config.frequency, offset=config.finetune_offset, seed=2 * seed + 1), x)
            losses = fit_regression(net, config.optimizer.new_state(), x, y, config.finetune_steps, config.batch_size, rng)
            finetune.append(np.mean(losses[-config.final_window:]))
        rows.append(DoseRow(
            treatment=float(treatment), pretrain_loss=float(np.mean(pretrain)),
            finetune_loss=float(np.mean(finetune)), finetune_loss_std=float(np.std(finetune)),
            seeds=len(config.seeds),
        ))
        logger.info(f"Treatment {treatment:g}: pretrain {rows[-1].pretrain_loss:.4g}, fine-tune {rows[-1].finetune_loss:.4g}")
    return rows


def run_offset_dose_response(offsets: Iterable[float] = (0, 8, 16, 32), config: DoseConfig = DoseConfig()) -> list[DoseRow]:
    """Pretrain on sin(M f(x)) + b for every offset b, then fine-tune on a fresh zero-offset target."""
    return _dose_study(
        offsets, lambda b, seed: RegressionTargetGen(frequency=config.frequency, offset=b, seed=seed), config,
    )


def run_centered_scaled_control(scales: Iterable[float], config: DoseConfig = DoseConfig(), center: float = 0.0) -> list[DoseRow]:
    """Like the offset study, pretraining on c + alpha f(x) + sin(M g(x)) for every scale alpha."""
    return _dose_study(
        scales,
        lambda alpha, seed: RegressionTargetGen(
            kind="centered_scaled", frequency=config.frequency, center=center, scale=alpha, seed=seed,
        ),
        config,
    )


@dataclasses.dataclass
class MicroscopeRecord:
    metrics: MetricRecord
    dead_count: int
    zombie_count: int
    alignment: AlignmentCensus

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.metrics.step,
            "loss": self.metrics.loss,
            "accuracy": self.metrics.accuracy,
            "entropy": self.metrics.entropy,
            "dead_count": self.dead_count,
            "zombie_count": self.zombie_count,
            "alignment": self.alignment.to_dict(),
        }


@dataclasses.dataclass
class MicroscopeResult:
    # "stale" keeps the optimizer state across the switch, "reset" clears it
    runs: dict[str, list[MicroscopeRecord]]

    def peak_dead(self, variant: str) -> int:
        return max(r.dead_count for r in self.runs[variant])


MICROSCOPE_VARIANTS = {"stale": False, "reset": True}


def _microscope_record(run: _RunState, ds: Dataset, step: int) -> MicroscopeRecord:
    net = run.net
    x = ds.inputs[run.eval_idx]
    y = ds.targets[run.eval_idx]
    out, trace = forward(net, x, "eval")
    value, grad = loss_and_grad(run.config.loss, out, y, ds.num_classes)
    probe_x = ds.inputs[run.probe_idx]
    census = unit_census(net, probe_x, min_batch=min(CENSUS_PROBE_MIN, probe_x.shape[0]))
    metrics = MetricRecord(
        step=step, task=1, loss=value, accuracy=accuracy(out, y, ds.num_classes),
        dead_frac=census.dead_fraction, zombie_frac=census.zombie_fraction,
        param_norm=param_norms(net).total, entropy=predictive_entropy(out) if ds.num_classes is not None else None,
    )
    return MicroscopeRecord(
        metrics=metrics, dead_count=census.dead_count, zombie_count=census.zombie_count,
        alignment=gradient_alignment_census(net, trace, grad),
    )


def run_task_switch_microscope(
    config: ExperimentConfig, seed: int | None = None, steps: int = 500, reset_optimizer: bool | None = None,
    data_dir: Path | str | None = None,
) -> MicroscopeResult:
    """Dense logging of the first `steps` steps after one task switch.

    The network is trained on task 0 for `steps_per_task` steps; from that
    checkpoint task 1 is trained once with the persisted optimizer state and
    once with a reset one (or only the variant selected by `reset_optimizer`),
    both with the same minibatch order.
    """
    if steps < 1:
        raise ConfigError("microscope steps must be at least 1", path="steps", value=steps)
    seed = config.seeds[0] if seed is None else seed
    run = _setup(config, seed, data_dir)
    stream = dataclasses.replace(config.task.stream(run.base, seed), num_tasks=2)
    tasks = list(iter_tasks(stream))
    tcfg = config.training
    rng = substream(seed, "train")
    logger.info(f"Training task 0 for {config.task.steps_per_task} steps")
    for step in range(config.task.steps_per_task):
        idx = rng.choice(len(tasks[0]), size=min(tcfg.batch_size, len(tasks[0])), replace=False)
        train_step(run.net, run.state, tasks[0].inputs[idx], tasks[0].targets[idx], config.loss, config.regularizer, tasks[0].num_classes, step)
    checkpoint, checkpoint_state = run.net, run.state

    variants = MICROSCOPE_VARIANTS if reset_optimizer is None else {
        name: flag for name, flag in MICROSCOPE_VARIANTS.items() if flag == reset_optimizer
    }
    ds = tasks[1]
    runs = {}
    for name, reset in variants.items():
        run.net = checkpoint.copy()
        run.state = reset_optimizer_state(checkpoint_state.copy()) if reset else checkpoint_state.copy()
        variant_rng = substream(seed, "train", 1)
        records = [_microscope_record(run, ds, 0)]
        try:
            for step in range(1, steps + 1):
                idx = variant_rng.choice(len(ds), size=min(tcfg.batch_size, len(ds)), replace=False)
                train_step(run.net, run.state, ds.inputs[idx], ds.targets[idx], config.loss, config.regularizer, ds.num_classes, step)
                records.append(_microscope_record(run, ds, step))
        except DivergenceError as de:
            logger.error(f"{de}, stopping the {name} variant")
        runs[name] = records
        logger.info(f"{name}: peak dead units {max(r.dead_count for r in records)}")
    return MicroscopeResult(runs=runs)


def run_moving_target(
    config: ExperimentConfig, seed: int | None = None, sink: RunWriter | None = None,
    data_dir: Path | str | None = None,
) -> list[MetricRecord]:
    """iterated training on sin(M f(x)) + sin(t / period); records carry the per-layer weight norms"""
    if config.task.target is None or config.task.target.kind != "moving_sine":
        raise ConfigError("moving target runs need a moving_sine target", path="task.target.kind")
    return run_iterated_training(config, seed, sink, data_dir)


def run_dir(out_dir: Path | str, index: int, seed: int) -> Path:
    return Path(out_dir) / f"run{index:03d}" / f"seed{seed}"


def run_to_directory(
    config: ExperimentConfig, seed: int, out_dir: Path | str, force: bool = False,
    data_dir: Path | str | None = None,
) -> tuple[Path, bool]:
    """iterated training writing metrics, diagnostics, the config and the final checkpoint into out_dir"""
    from .config import config_to_document, dump_config  # config documents embed harness types

    path = Path(out_dir)
    config_path = path / CONFIG_FILE
    checkpoint_path = path / CHECKPOINT_FILE
    for p in (config_path, checkpoint_path):
        check_writable(p, force)
    with RunWriter(path, force=force) as writer:
        config_path.write_text(dump_config(dataclasses.replace(config, seeds=(seed,))), encoding="utf-8")
        outcome = iterated_training(config, seed, writer, data_dir)
    save_checkpoint(
        checkpoint_path, outcome.network, outcome.optimizer, seed=seed, step=outcome.step,
        extra={"config": config_to_document(dataclasses.replace(config, seeds=(seed,)))}, force=force,
    )
    return path, outcome.diverged


def _grid_job(job: tuple[int, ExperimentConfig, int, Path, bool, Path | str | None]) -> tuple[Path, bool]:
    index, config, seed, out_dir, force, data_dir = job
    return run_to_directory(config, seed, run_dir(out_dir, index, seed), force, data_dir)


def run_grid(
    configs: Iterable[ExperimentConfig], out_dir: Path | str, jobs: int = 1, force: bool = False,
    data_dir: Path | str | None = None,
) -> list[tuple[Path, bool]]:
    """Run every (config, seed) pair into its own directory; returns (directory, diverged) per run."""
    if jobs < 1:
        raise ConfigError("jobs must be at least 1", path="jobs", value=jobs)
    work = [
        (i, config, seed, Path(out_dir), force, data_dir)
        for i, config in enumerate(configs)
        for seed in config.seeds
    ]
    logger.info(f"Running {len(work)} runs with {jobs} worker(s)")
    if jobs == 1:
        return [_grid_job(job) for job in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_grid_job, work))
