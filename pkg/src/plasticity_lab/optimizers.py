import dataclasses
from typing import Any

import numpy as np

from .layers import Activation, DecomposedNorm, Dense, Flatten, PARAMETERIZED
from .network import Network, forward, init_std
from .utils import ConfigError, NonFiniteError, logger

ALGORITHMS = ("sgd", "adam")


@dataclasses.dataclass
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # first/second moments per parameter name, created on first step
    m: dict[str, "numpy array"] = dataclasses.field(default_factory=dict)
    v: dict[str, "numpy array"] = dataclasses.field(default_factory=dict)
    t: int = 0

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}", path="optimizer.algorithm", value=self.algorithm)
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ConfigError("learning rate must be positive", path="optimizer.lr", value=self.lr)
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1)", path=f"optimizer.{name}", value=getattr(self, name))
        if not self.eps > 0:
            raise ConfigError("eps must be positive", path="optimizer.eps", value=self.eps)

    def hyperparams(self) -> dict[str, Any]:
        return {"algorithm": self.algorithm, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def fresh(self) -> "OptimizerState":
        """new state with the same hyperparameters"""
        return OptimizerState(**self.hyperparams())

    def copy(self) -> "OptimizerState":
        return dataclasses.replace(
            self,
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
        )


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        self.new_state()  # validates

    def new_state(self) -> OptimizerState:
        return OptimizerState(**dataclasses.asdict(self))


@dataclasses.dataclass(frozen=True)
class RegularizerConfig:
    l2_coefficient: float = 0.0
    feature_norm_coefficient: float = 0.0

    def __post_init__(self) -> None:
        for name in ("l2_coefficient", "feature_norm_coefficient"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and non-negative", path=f"regularizer.{name}", value=v)


@dataclasses.dataclass(frozen=True)
class ResetPolicy:
    redo_threshold: float = 0.1
    redo_interval: int | None = None  # None disables ReDO
    rescale_to_init: bool = False
    rescale_interval: int = 1

    def __post_init__(self) -> None:
        if not self.redo_threshold >= 0:
            raise ConfigError("redo_threshold must be non-negative", path="reset.redo_threshold", value=self.redo_threshold)
        if self.redo_interval is not None and self.redo_interval < 1:
            raise ConfigError("redo_interval must be at least 1", path="reset.redo_interval", value=self.redo_interval)
        if self.rescale_interval < 1:
            raise ConfigError("rescale_interval must be at least 1", path="reset.rescale_interval", value=self.rescale_interval)


def _check_grads(grads: dict[str, "numpy array"]) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient of {name}")


def sgd_step(state: OptimizerState, params: dict[str, "numpy array"], grads: dict[str, "numpy array"]) -> dict[str, "numpy array"]:
    _check_grads(grads)
    state.t += 1
    return {
        name: (p - state.lr * grads[name]) if name in grads else p
        for name, p in params.items()
    }


def adam_step(state: OptimizerState, params: dict[str, "numpy array"], grads: dict[str, "numpy array"]) -> dict[str, "numpy array"]:
    _check_grads(grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1**state.t
    correction2 = 1 - b2**state.t
    out = {}
    for name, p in params.items():
        if name not in grads:
            out[name] = p
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {p.shape}", path=name)
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        out[name] = p - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return out


def optimizer_step(state: OptimizerState, params: dict[str, "numpy array"], grads: dict[str, "numpy array"]) -> dict[str, "numpy array"]:
    if state.algorithm == "adam":
        return adam_step(state, params, grads)
    return sgd_step(state, params, grads)


def reset_optimizer_state(state: OptimizerState) -> OptimizerState:
    for moments in (state.m, state.v):
        for name, value in moments.items():
            moments[name] = np.zeros_like(value)
    state.t = 0
    return state


def apply_l2(grads: dict[str, "numpy array"], params: dict[str, "numpy array"], coefficient: float) -> dict[str, "numpy array"]:
    """gradient of (coefficient/2)*||W||^2 over weight tensors; biases and norm parameters are exempt"""
    if coefficient < 0:
        raise ConfigError("L2 coefficient must be non-negative", value=coefficient)
    if not coefficient:
        return grads
    return {
        name: g + coefficient * params[name] if name.endswith(".weight") else g
        for name, g in grads.items()
    }


def feature_norm_penalty(features: "numpy array (b, ...)", coefficient: float) -> tuple[float, "numpy array (b, ...)"]:
    """coefficient * batch mean of the squared feature norm"""
    b = features.shape[0]
    return float(coefficient * (features**2).sum() / b), 2 * coefficient * features / b


def rescale_weights_to_init(net: Network) -> tuple[Network, list[str]]:
    """scale every weight tensor back to its Frobenius norm at init, keeping its direction"""
    skipped = []
    for name, init_norm in net.init_layer_norms:
        current = float(np.linalg.norm(net.params[name]))
        if current < 1e-12:
            logger.warning(f"Not rescaling {name}: norm {current:.3g} is too small")
            skipped.append(name)
            continue
        net.params[name] = net.params[name] * (init_norm / current)
    return net, skipped


def activation_scores(net: Network, probe_batch: "numpy array") -> dict[int, "numpy array (units,)"]:
    """mean |activation| per unit (channel for conv layers) over the probe batch"""
    _, trace = forward(net, probe_batch, "eval")
    out = {}
    for i, act in trace.activations.items():
        axes = (0,) if act.ndim == 2 else (0, 2, 3)
        out[i] = np.abs(act).mean(axis=axes)
    return out


def _neighbours(net: Network, act_index: int) -> tuple[int | None, list[int], int | None]:
    # incoming parameterized layer, per-unit norms in between, outgoing parameterized layer
    layers = net.spec.layers
    incoming = None
    norms = []
    for j in range(act_index - 1, -1, -1):
        if isinstance(layers[j], PARAMETERIZED):
            incoming = j
            break
        if isinstance(layers[j], DecomposedNorm) and layers[j].affine:
            norms.append(j)
        elif isinstance(layers[j], Activation):
            break
    outgoing = None
    for j in range(act_index + 1, len(layers)):
        if isinstance(layers[j], PARAMETERIZED):
            outgoing = j
            break
        if not isinstance(layers[j], (Flatten, DecomposedNorm)):
            break
    return incoming, norms, outgoing


def _zero_moments(state: OptimizerState, name: str, index: Any) -> None:
    for moments in (state.m, state.v):
        if name in moments:
            moments[name] = moments[name].copy()
            moments[name][index] = 0.0


def redo_reset(
    net: Network, scores: dict[int, "numpy array"], state: OptimizerState, threshold: float,
    rng: np.random.Generator,
) -> tuple[Network, OptimizerState, int]:
    """Re-initialize units whose normalized activity score is at most `threshold`.

    Incoming weights are re-drawn from the init distribution, incoming biases
    and norm parameters reset, outgoing weights zeroed and the matching
    optimizer moment slices cleared.
    """
    shapes = net.spec.shapes()
    total = 0
    for act_index, unit_scores in sorted(scores.items()):
        layer_mean = unit_scores.mean()
        # 0/0 counts as 0, so a silent layer is reset entirely
        normalized = unit_scores / layer_mean if layer_mean > 0 else np.zeros_like(unit_scores)
        units = np.flatnonzero(normalized <= threshold)
        if not units.size:
            continue
        incoming, norms, outgoing = _neighbours(net, act_index)
        if incoming is None:
            continue
        w_name = f"{incoming}.weight"
        weight = net.params[w_name].copy()
        weight[units] = rng.normal(0.0, init_std(net.spec, incoming), size=weight[units].shape)
        net.params[w_name] = weight
        _zero_moments(state, w_name, units)
        b_name = f"{incoming}.bias"
        if b_name in net.params:
            bias = net.params[b_name].copy()
            bias[units] = 0.0
            net.params[b_name] = bias
            _zero_moments(state, b_name, units)
        for j in norms:
            for suffix, value in (("gain", 1.0), ("shift", 0.0)):
                name = f"{j}.{suffix}"
                p = net.params[name].copy()
                p[units] = value
                net.params[name] = p
                _zero_moments(state, name, units)
        if outgoing is not None:
            o_name = f"{outgoing}.weight"
            out_weight = net.params[o_name].copy()
            act_shape = shapes[act_index + 1]
            if isinstance(net.spec.layers[outgoing], Dense) and len(act_shape) == 3:
                # flattened channels feed contiguous column blocks
                block = act_shape[1] * act_shape[2]
                columns = (units[:, None] * block + np.arange(block)[None, :]).ravel()
            else:
                columns = units
            out_weight[:, columns] = 0.0
            net.params[o_name] = out_weight
            _zero_moments(state, o_name, (slice(None), columns))
        total += units.size
    if total:
        logger.info(f"ReDO reset {total} units")
    return net, state, total
