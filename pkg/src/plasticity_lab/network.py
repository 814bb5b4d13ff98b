"""Network specification, parameter storage, forward/backward passes.

Parameters are stored in a flat dict named "<layer index>.<suffix>", in layer
order and, within a layer, in the order given by the layer's param_shapes().
That order (then row-major within each tensor) is the flattening order used
for per-sample gradients and therefore for the empirical NTK.
"""
import dataclasses
from hashlib import sha256
import json
from typing import Any, Literal

import numpy as np

from .layers import (
    Activation, BatchNorm, Conv2D, DecomposedNorm, Dense, Flatten, LayerNorm, LayerSpec,
    PARAMETERIZED, layer_from_dict, layer_to_dict,
)
from .utils import ConfigError, PreconditionError, ShapeError, as_tensor, substream

INIT_SCHEMES = ("fan_in_gaussian", "he_gaussian")
RELU_FAMILY = ("relu", "leaky_relu", "gelu")
MODES = ("train", "eval")


@dataclasses.dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    init: str = "he_gaussian"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"init must be one of {INIT_SCHEMES}", path="init", value=self.init)
        if not self.layers:
            raise ConfigError("network needs at least one layer", path="layers")
        if any(d <= 0 for d in self.input_shape):
            raise ConfigError("input dimensions must be positive", path="input_shape", value=self.input_shape)
        self.shapes()  # validates adjacent dimensions

    def shapes(self) -> list[tuple[int, ...]]:
        """input shape of every layer, followed by the output shape"""
        out = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                out.append(layer.out_shape(out[-1]))
            except ShapeError as se:
                raise ConfigError(f"incompatible dimensions: {se.msg}", path=i) from se
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "layers": [layer_to_dict(layer) for layer in self.layers],
            "input_shape": list(self.input_shape),
            "init": self.init,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], path: str = "network") -> "NetworkSpec":
        for key in data:
            if key not in ("layers", "input_shape", "init", "seed"):
                raise ConfigError("unknown key", path=f"{path}.{key}", value=data[key])
        for key in ("layers", "input_shape"):
            if key not in data:
                raise ConfigError("missing required key", path=f"{path}.{key}")
        return cls(
            layers=tuple(layer_from_dict(d, path=f"{path}.layers[{i}]") for i, d in enumerate(data["layers"])),
            input_shape=tuple(data["input_shape"]),
            init=data.get("init", "he_gaussian"),
            seed=data.get("seed", 0),
        )

    def spec_hash(self) -> str:
        return sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def mlp_spec(
    input_dim: int, output_dim: int, width: int = 256, depth: int = 4, *,
    activation: str = "relu", norm: str | None = None, input_offset: float = 0.0,
    init: str = "he_gaussian", seed: int = 0,
) -> NetworkSpec:
    """depth hidden layers of the given width; norm ('layer'/'batch') goes before each nonlinearity"""
    layers: list[LayerSpec] = []
    d = input_dim
    for _ in range(depth):
        layers.append(Dense(d, width))
        if norm == "layer":
            layers.append(LayerNorm())
        elif norm == "batch":
            layers.append(BatchNorm())
        elif norm is not None:
            raise ConfigError("norm must be 'layer', 'batch' or None", path="norm", value=norm)
        layers.append(Activation(activation, input_offset=input_offset))
        d = width
    layers.append(Dense(d, output_dim))
    return NetworkSpec(layers=tuple(layers), input_shape=(input_dim,), init=init, seed=seed)


def cnn_spec(
    input_shape: tuple[int, int, int], output_dim: int, channels: int = 32, depth: int = 4, *,
    dense_width: int = 256, activation: str = "relu", norm: str | None = None,
    init: str = "he_gaussian", seed: int = 0,
) -> NetworkSpec:
    """depth 3x3 'same' conv layers (stride 2 from the third on), then one hidden dense layer"""
    layers: list[LayerSpec] = []
    c = input_shape[0]
    for i in range(depth):
        layers.append(Conv2D(c, channels, 3, stride=2 if i >= 2 else 1, padding="same"))
        if norm == "layer":
            layers.append(LayerNorm())
        elif norm == "batch":
            layers.append(BatchNorm())
        layers.append(Activation(activation))
        c = channels
    layers.append(Flatten())
    spec = NetworkSpec(layers=tuple(layers), input_shape=input_shape, init=init, seed=seed)
    flat = spec.output_shape[0]
    layers += [Dense(flat, dense_width), Activation(activation), Dense(dense_width, output_dim)]
    return NetworkSpec(layers=tuple(layers), input_shape=input_shape, init=init, seed=seed)


@dataclasses.dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, "numpy array"]
    buffers: dict[str, "numpy array"]
    # (weight name, Frobenius norm at init), fixed at construction
    init_layer_norms: tuple[tuple[str, float], ...]

    def copy(self) -> "Network":
        return Network(
            spec=self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            init_layer_norms=self.init_layer_norms,
        )

    def layer_params(self, index: int) -> dict[str, "numpy array"]:
        prefix = f"{index}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def layer_buffers(self, index: int) -> dict[str, "numpy array"]:
        prefix = f"{index}."
        return {k[len(prefix):]: v for k, v in self.buffers.items() if k.startswith(prefix)}

    @property
    def weight_names(self) -> list[str]:
        return [k for k in self.params if k.endswith(".weight")]

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


def next_activation(spec: NetworkSpec, index: int) -> Activation | None:
    """nonlinearity fed by parameterized layer `index` (skipping norms and flatten)"""
    for layer in spec.layers[index + 1:]:
        if isinstance(layer, Activation):
            return layer
        if isinstance(layer, PARAMETERIZED):
            return None
    return None


def init_std(spec: NetworkSpec, index: int) -> float:
    layer = spec.layers[index]
    gain = 1.0
    if spec.init == "he_gaussian":
        act = next_activation(spec, index)
        if act is not None and act.function in RELU_FAMILY:
            gain = 2.0
    return float(np.sqrt(gain / layer.fan_in))


def _layer_norms(params: dict[str, "numpy array"]) -> tuple[tuple[str, float], ...]:
    return tuple((k, float(np.linalg.norm(v))) for k, v in params.items() if k.endswith(".weight"))


def init_network(spec: NetworkSpec, seed: int | None = None, *, stream: str = "init", key: int = 0) -> Network:
    rng = substream(spec.seed if seed is None else seed, stream, key)
    params: dict[str, "numpy array"] = {}
    buffers: dict[str, "numpy array"] = {}
    for i, (layer, in_shape) in enumerate(zip(spec.layers, spec.shapes())):
        for name, shape in layer.param_shapes(in_shape).items():
            if name == "weight":
                params[f"{i}.{name}"] = rng.normal(0.0, init_std(spec, i), size=shape)
            elif name == "gain":
                params[f"{i}.{name}"] = np.ones(shape)
            else:
                params[f"{i}.{name}"] = np.zeros(shape)
        for name, shape in layer.buffer_shapes(in_shape).items():
            buffers[f"{i}.{name}"] = np.zeros(shape) if name == "running_mean" else np.ones(shape)
    return Network(spec=spec, params=params, buffers=buffers, init_layer_norms=_layer_norms(params))


def absolute_value_init(net: Network) -> Network:
    """copy of the network with every parameter replaced by its absolute value"""
    params = {k: np.abs(v) for k, v in net.params.items()}
    return Network(
        spec=net.spec,
        params=params,
        buffers={k: v.copy() for k, v in net.buffers.items()},
        init_layer_norms=_layer_norms(params),
    )


@dataclasses.dataclass
class ForwardTrace:
    spec: NetworkSpec
    mode: Literal["train", "eval"]
    inputs: list["numpy array"]  # input of every layer
    outputs: list["numpy array"]  # output of every layer
    caches: list[Any]

    @property
    def batch_size(self) -> int:
        return self.inputs[0].shape[0]

    @property
    def preactivations(self) -> dict[int, "numpy array"]:
        """argument of the nonlinearity (including input offset) per activation layer"""
        return {i: self.caches[i] for i, layer in enumerate(self.spec.layers) if isinstance(layer, Activation)}

    @property
    def activations(self) -> dict[int, "numpy array"]:
        return {i: self.outputs[i] for i, layer in enumerate(self.spec.layers) if isinstance(layer, Activation)}


@dataclasses.dataclass
class Gradients:
    params: dict[str, "numpy array"]
    inputs: "numpy array"
    # gradient w.r.t. the input of every layer
    layer_inputs: list["numpy array"]


def forward(net: Network, batch: "numpy array", mode: str = "train", *, update_stats: bool = True) -> tuple["numpy array", ForwardTrace]:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x = as_tensor(batch, "batch")
    if x.ndim < 2 or x.shape[0] < 1 or x.shape[1:] != net.spec.input_shape:
        raise ShapeError(f"expected batch of shape (B, {', '.join(map(str, net.spec.input_shape))}), got {x.shape}", layer=0)
    train = mode == "train"
    trace = ForwardTrace(spec=net.spec, mode=mode, inputs=[], outputs=[], caches=[])
    for i, layer in enumerate(net.spec.layers):
        trace.inputs.append(x)
        try:
            x, cache, new_buffers = layer.forward(net.layer_params(i), net.layer_buffers(i), x, train=train, update_stats=update_stats)
        except PreconditionError as pe:
            raise PreconditionError(f"layer {i}: {pe}") from pe
        if new_buffers:
            for name, value in new_buffers.items():
                net.buffers[f"{i}.{name}"] = value
        trace.outputs.append(x)
        trace.caches.append(cache)
    return x, trace


def backward(
    net: Network, trace: ForwardTrace, output_grad: "numpy array",
    extra_grads: dict[int, "numpy array"] | None = None,
) -> Gradients:
    """reverse pass; extra_grads are added to the gradient arriving at a layer's output"""
    if trace.spec != net.spec or len(trace.caches) != len(net.spec.layers):
        raise PreconditionError("trace was not produced by this network")
    grad = np.asarray(output_grad, dtype=np.float64)
    if grad.shape != trace.outputs[-1].shape:
        raise ShapeError(f"output gradient shape {grad.shape} does not match output {trace.outputs[-1].shape}", layer=len(net.spec.layers) - 1)
    param_grads: dict[str, "numpy array"] = {}
    layer_inputs: list["numpy array"] = [None] * len(net.spec.layers)  # type: ignore
    for i in reversed(range(len(net.spec.layers))):
        if extra_grads and i in extra_grads:
            grad = grad + extra_grads[i]
        grad, grads = net.spec.layers[i].backward(net.layer_params(i), trace.caches[i], grad)
        for name, g in grads.items():
            param_grads[f"{i}.{name}"] = g
        layer_inputs[i] = grad
    # same order as net.params
    ordered = {k: param_grads[k] for k in net.params}
    return Gradients(params=ordered, inputs=grad, layer_inputs=layer_inputs)


def flatten_params(params: dict[str, "numpy array"]) -> "numpy array (p,)":
    if not params:
        return np.zeros(0)
    return np.concatenate([v.ravel() for v in params.values()])


def unflatten_params(template: dict[str, "numpy array"], flat: "numpy array (p,)") -> dict[str, "numpy array"]:
    out = {}
    offset = 0
    for k, v in template.items():
        out[k] = flat[offset:offset + v.size].reshape(v.shape).copy()
        offset += v.size
    if offset != flat.shape[0]:
        raise ShapeError(f"flat vector has {flat.shape[0]} entries, expected {offset}")
    return out


def per_sample_output_gradient(net: Network, x: "numpy array", output_index: int = 0) -> "numpy array (p,)":
    """gradient of one scalar output w.r.t. all parameters, in eval mode"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.spec.input_shape:
        x = x[np.newaxis]
    out, trace = forward(net, x, "eval")
    if out.ndim != 2 or not 0 <= output_index < out.shape[1]:
        raise ConfigError("output index out of range", path="output_index", value=output_index)
    seed_grad = np.zeros_like(out)
    seed_grad[0, output_index] = 1.0
    return flatten_params(backward(net, trace, seed_grad).params)


def feature_index(spec: NetworkSpec) -> int:
    """index of the last parameterized layer, whose input are the penultimate features"""
    for i in reversed(range(len(spec.layers))):
        if isinstance(spec.layers[i], PARAMETERIZED):
            return i
    raise ConfigError("network has no parameterized layer", path="layers")


def has_batch_statistics(spec: NetworkSpec) -> bool:
    return any(isinstance(layer, DecomposedNorm) and layer.uses_batch for layer in spec.layers)
