"""Datasets, nonstationary task streams, regression targets and the contextual bandit.

Task 0 of every stream is the untransformed base dataset. All randomness is
drawn from `substream(seed, "task", task_index)` or, for the frozen target
networks, from the "target" stream, so every task is reproducible on its own.
"""
import dataclasses
from functools import lru_cache
from math import floor
import os
from pathlib import Path
from typing import Iterator

import numpy as np

from .dataset_format import load_cifar10_bin, load_mnist_idx
from .network import Network, forward, init_network, mlp_spec
from .utils import ConfigError, as_tensor, logger, substream

TASK_MODES = ("stationary", "random_labels", "permute_classes", "permute_pixels", "continual", "composite", "growing")
TARGET_KINDS = ("offset_sine", "centered_scaled", "moving_sine")
DATASET_NAMES = ("synthetic", "mnist", "cifar10")

SYNTH_SEPARATION = 4.0  # distance between class means

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
CIFAR_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))


@dataclasses.dataclass(frozen=True)
class Dataset:
    inputs: "numpy array (n, ...)"
    # integer labels for classification, float (n,) or (n, k) for regression
    targets: "numpy array (n,) | (n, k)"
    num_classes: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", as_tensor(self.inputs, "inputs"))
        object.__setattr__(self, "targets", np.asarray(self.targets))
        if self.inputs.ndim < 2 or self.inputs.shape[0] < 1:
            raise ConfigError("dataset needs at least one sample", value=self.inputs.shape)
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise ConfigError(f"{self.inputs.shape[0]} inputs but {self.targets.shape[0]} targets")
        if self.num_classes is not None:
            if self.num_classes < 1:
                raise ConfigError("num_classes must be positive", value=self.num_classes)
            labels = np.asarray(self.targets)
            if not np.issubdtype(labels.dtype, np.integer):
                raise ConfigError("classification targets must be integer labels", value=str(labels.dtype))
            if labels.min() < 0 or labels.max() >= self.num_classes:
                raise ConfigError(f"labels must be in [0, {self.num_classes})", value=(int(labels.min()), int(labels.max())))
        else:
            object.__setattr__(self, "targets", as_tensor(self.targets, "targets"))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.num_classes is not None

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, indices: "numpy array") -> "Dataset":
        return dataclasses.replace(self, inputs=self.inputs[indices], targets=self.targets[indices])

    def reshaped(self, input_shape: tuple[int, ...]) -> "Dataset":
        if tuple(input_shape) == self.input_shape:
            return self
        if np.prod(input_shape) != np.prod(self.input_shape):
            raise ConfigError(f"cannot reshape inputs of shape {self.input_shape} to {tuple(input_shape)}")
        return dataclasses.replace(self, inputs=self.inputs.reshape(len(self), *input_shape))


def synth_dataset(num_classes: int, input_dim: int, n_per_class: int, seed: int = 0) -> Dataset:
    """Gaussian clusters with unit within-class variance, class means 4 apart."""
    for name, v in (("num_classes", num_classes), ("input_dim", input_dim), ("n_per_class", n_per_class)):
        if v < 1:
            raise ConfigError(f"{name} must be positive", path=name, value=v)
    rng = substream(seed, "task")
    if input_dim >= num_classes:
        # scaled simplex corners, pairwise distance sqrt(2) * scale
        means = np.zeros((num_classes, input_dim))
        means[np.arange(num_classes), np.arange(num_classes)] = SYNTH_SEPARATION / np.sqrt(2)
        means -= means.mean(axis=0)
    else:
        means = np.zeros((num_classes, input_dim))
        means[:, 0] = SYNTH_SEPARATION * (np.arange(num_classes) - (num_classes - 1) / 2)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    inputs = means[labels] + rng.normal(size=(labels.shape[0], input_dim))
    order = rng.permutation(labels.shape[0])
    return Dataset(inputs=inputs[order], targets=labels[order], num_classes=num_classes)


def _require_classification(ds: Dataset, what: str) -> None:
    if not ds.is_classification:
        raise ConfigError(f"{what} needs a classification dataset")


def randomize_labels(ds: Dataset, epsilon: float, seed: "int | np.random.Generator") -> Dataset:
    """resample the labels of exactly floor(epsilon*N) distinct samples uniformly over all classes"""
    _require_classification(ds, "randomize_labels")
    if not 0 <= epsilon <= 1:
        raise ConfigError("epsilon must be in [0, 1]", path="epsilon", value=epsilon)
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "task")
    count = floor(epsilon * len(ds))
    if not count:
        return ds
    chosen = rng.choice(len(ds), size=count, replace=False)
    labels = ds.targets.copy()
    labels[chosen] = rng.integers(0, ds.num_classes, size=count)
    return dataclasses.replace(ds, targets=labels)


def permute_pixels(inputs: "numpy array (n, ...)", permutation: "numpy array (d,)") -> "numpy array (n, ...)":
    n = inputs.shape[0]
    return inputs.reshape(n, -1)[:, permutation].reshape(inputs.shape)


@dataclasses.dataclass(frozen=True)
class TaskStream:
    base: Dataset
    mode: str = "random_labels"
    epsilon: float = 1.0  # random_labels
    fraction: float = 0.5  # continual
    steps_per_task: int = 2000
    num_tasks: int = 10
    seed: int = 0
    # transformed samples also get new uniform labels (continual, composite, growing)
    relabel: bool = False

    def __post_init__(self) -> None:
        if self.mode not in TASK_MODES:
            raise ConfigError(f"mode must be one of {TASK_MODES}", path="task.mode", value=self.mode)
        if self.mode != "stationary" and self.mode != "permute_pixels":
            _require_classification(self.base, f"mode {self.mode}")
        for name in ("epsilon", "fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1]", path=f"task.{name}", value=getattr(self, name))
        if self.steps_per_task < 1:
            raise ConfigError("steps_per_task must be at least 1", path="task.steps_per_task", value=self.steps_per_task)
        if self.num_tasks < 0:
            raise ConfigError("num_tasks must not be negative", path="task.num_tasks", value=self.num_tasks)

    @property
    def total_steps(self) -> int:
        return self.steps_per_task * self.num_tasks


def _transform_subset(stream: TaskStream, ds: Dataset, indices: "numpy array", rng: np.random.Generator) -> Dataset:
    perm = rng.permutation(int(np.prod(ds.input_shape)))
    inputs = ds.inputs.copy()
    inputs[indices] = permute_pixels(ds.inputs[indices], perm)
    targets = ds.targets
    if stream.relabel and ds.is_classification:
        targets = targets.copy()
        high = int(targets.max()) + 1 if stream.mode == "growing" else ds.num_classes
        targets[indices] = rng.integers(0, high, size=len(indices))
    return dataclasses.replace(ds, inputs=inputs, targets=targets)


def next_task(stream: TaskStream, task_index: int) -> Dataset:
    if not 0 <= task_index < stream.num_tasks:
        raise ConfigError(f"task index must be in [0, {stream.num_tasks})", path="task_index", value=task_index)
    base = stream.base
    mode = stream.mode
    if mode == "stationary":
        return base
    if mode == "random_labels":
        # cumulative: every switch re-randomizes epsilon of the current labels
        ds = base
        for i in range(1, task_index + 1):
            ds = randomize_labels(ds, stream.epsilon, substream(stream.seed, "task", i))
        return ds
    if mode == "growing":
        present = base.targets <= min(task_index, base.num_classes - 1)
        ds = base.subset(np.flatnonzero(present))
        if not task_index:
            return ds
        return _transform_subset(stream, ds, np.arange(len(ds)), substream(stream.seed, "task", task_index))
    if not task_index:
        return base
    rng = substream(stream.seed, "task", task_index)
    if mode == "permute_classes":
        return dataclasses.replace(base, targets=rng.permutation(base.num_classes)[base.targets])
    if mode == "permute_pixels":
        return dataclasses.replace(base, inputs=permute_pixels(base.inputs, rng.permutation(int(np.prod(base.input_shape)))))
    if mode == "continual":
        chosen = rng.choice(len(base), size=floor(stream.fraction * len(base)), replace=False)
        return _transform_subset(stream, base, chosen, rng)
    # composite: the transformed subset is drawn once per stream
    fixed = substream(stream.seed, "task", 0).choice(len(base), size=floor(stream.fraction * len(base)), replace=False)
    return _transform_subset(stream, base, fixed, rng)


def iter_tasks(stream: TaskStream) -> Iterator[Dataset]:
    if stream.mode == "random_labels":
        ds = stream.base
        for i in range(stream.num_tasks):
            if i:
                ds = randomize_labels(ds, stream.epsilon, substream(stream.seed, "task", i))
            yield ds
        return
    for i in range(stream.num_tasks):
        yield next_task(stream, i)


@dataclasses.dataclass(frozen=True)
class RegressionTargetGen:
    """Targets computed from frozen random networks.

    offset_sine:     sin(M * f(x)) + b
    centered_scaled: c + alpha * f(x) + sin(M * g(x)), g an independent frozen net
    moving_sine:     sin(M * f(x)) + sin(t / period)
    """
    kind: str = "offset_sine"
    frequency: float = 1e5  # M
    offset: float = 0.0  # b
    center: float = 0.0  # c
    scale: float = 1.0  # alpha
    period: float = 20.0
    width: int = 64
    depth: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in TARGET_KINDS:
            raise ConfigError(f"kind must be one of {TARGET_KINDS}", path="target.kind", value=self.kind)
        if not self.frequency >= 1:
            raise ConfigError("frequency must be at least 1", path="target.frequency", value=self.frequency)
        if not self.period > 0:
            raise ConfigError("period must be positive", path="target.period", value=self.period)
        for name in ("offset", "center", "scale"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite", path=f"target.{name}", value=getattr(self, name))


@lru_cache(maxsize=32)
def _frozen_net(gen: RegressionTargetGen, input_dim: int, key: int, outputs: int = 1) -> Network:
    spec = mlp_spec(input_dim, outputs, gen.width, gen.depth, seed=gen.seed)
    return init_network(spec, stream="target", key=key)


def _frozen_output(gen: RegressionTargetGen, inputs: "numpy array (n, ...)", key: int, outputs: int = 1) -> "numpy array (n, outputs)":
    flat = np.asarray(inputs, dtype=np.float64).reshape(inputs.shape[0], -1)
    out, _ = forward(_frozen_net(gen, flat.shape[1], key, outputs), flat, "eval")
    return out


def sine_features(gen: RegressionTargetGen, inputs: "numpy array (n, ...)", outputs: int = 1) -> "numpy array (n, outputs)":
    """sin(M * f(x)) + b for a frozen random net f with `outputs` outputs"""
    return np.sin(gen.frequency * _frozen_output(gen, inputs, 0, outputs)) + gen.offset


def gen_regression_targets(gen: RegressionTargetGen, inputs: "numpy array (n, ...)", step: int = 0) -> "numpy array (n,)":
    if gen.kind == "offset_sine":
        return sine_features(gen, inputs)[:, 0]
    if gen.kind == "centered_scaled":
        high_freq = np.sin(gen.frequency * _frozen_output(gen, inputs, 1)[:, 0])
        return gen.center + gen.scale * _frozen_output(gen, inputs, 0)[:, 0] + high_freq
    return np.sin(gen.frequency * _frozen_output(gen, inputs, 0)[:, 0]) + np.sin(step / gen.period)


@dataclasses.dataclass(frozen=True)
class BanditMDP:
    dataset: Dataset
    reward_scale: float = 1.0  # alpha
    discount: float = 0.99  # gamma

    def __post_init__(self) -> None:
        _require_classification(self.dataset, "BanditMDP")
        if not 0 <= self.discount < 1:
            raise ConfigError("discount must be in [0, 1)", path="bandit.discount", value=self.discount)
        if not self.reward_scale > 0:
            raise ConfigError("reward_scale must be positive", path="bandit.reward_scale", value=self.reward_scale)

    @property
    def num_actions(self) -> int:
        return self.dataset.num_classes

    @property
    def value_scale(self) -> float:
        """value of always acting correctly, alpha / (1 - gamma)"""
        return self.reward_scale / (1 - self.discount)


def bandit_transition(mdp: BanditMDP, rng: np.random.Generator) -> tuple["numpy array", int]:
    """uniformly sampled state; the next state never depends on the action"""
    i = int(rng.integers(len(mdp.dataset)))
    return mdp.dataset.inputs[i], int(mdp.dataset.targets[i])


def bandit_reward(mdp: BanditMDP, action: int, label: int) -> float:
    return mdp.reward_scale if action == label else 0.0


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    name: str = "synthetic"
    num_classes: int = 10
    input_dim: int = 32
    n_per_class: int = 100
    # use only the first `limit` samples of file datasets
    limit: int | None = None

    def __post_init__(self) -> None:
        if self.name not in DATASET_NAMES:
            raise ConfigError(f"dataset must be one of {DATASET_NAMES}", path="task.dataset.name", value=self.name)
        for name in ("num_classes", "input_dim", "n_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive", path=f"task.dataset.{name}", value=getattr(self, name))
        if self.limit is not None and self.limit < 1:
            raise ConfigError("limit must be positive", path="task.dataset.limit", value=self.limit)


@dataclasses.dataclass(frozen=True)
class TaskConfig:
    dataset: DatasetConfig = DatasetConfig()
    mode: str = "random_labels"
    epsilon: float = 1.0
    fraction: float = 0.5
    relabel: bool = False
    steps_per_task: int = 2000
    num_tasks: int = 10
    # regression targets replace the dataset labels when set
    target: RegressionTargetGen | None = None

    def __post_init__(self) -> None:
        if self.mode not in TASK_MODES:
            raise ConfigError(f"mode must be one of {TASK_MODES}", path="task.mode", value=self.mode)
        if self.target is not None and self.mode not in ("stationary", "permute_pixels"):
            raise ConfigError("regression targets only support the stationary and permute_pixels modes", path="task.mode", value=self.mode)

    def stream(self, base: Dataset, seed: int) -> TaskStream:
        return TaskStream(
            base=base, mode=self.mode, epsilon=self.epsilon, fraction=self.fraction,
            steps_per_task=self.steps_per_task, num_tasks=self.num_tasks, seed=seed, relabel=self.relabel,
        )


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / f"{name}.gz", data_dir / "cifar-10-batches-bin" / name):
        if candidate.exists():
            return candidate
    raise ConfigError(f"dataset file {name} not found", path="PLAB_DATA_DIR", value=str(data_dir))


def dataset_from_config(cfg: DatasetConfig, data_dir: Path | str | None = None, seed: int = 0) -> Dataset:
    if cfg.name == "synthetic":
        return synth_dataset(cfg.num_classes, cfg.input_dim, cfg.n_per_class, seed)
    if data_dir is None:
        data_dir = os.environ.get("PLAB_DATA_DIR")
        if not data_dir:
            raise ConfigError(f"dataset {cfg.name} needs PLAB_DATA_DIR to be set", path="task.dataset.name", value=cfg.name)
    data_dir = Path(data_dir)
    if cfg.name == "mnist":
        ds = load_mnist_idx(*(_find(data_dir, f) for f in MNIST_FILES))
    else:
        ds = load_cifar10_bin([_find(data_dir, f) for f in CIFAR_FILES])
    if cfg.limit is not None and cfg.limit < len(ds):
        ds = ds.subset(np.arange(cfg.limit))
    logger.info(f"Using {len(ds)} samples of {cfg.name}")
    return ds
