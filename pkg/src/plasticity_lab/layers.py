"""Layer kinds with explicit forward and backward passes.

Every layer is a frozen dataclass describing its hyperparameters. Parameters
and running statistics are not stored on the layer, they live in the owning
`Network` and are handed in as dicts keyed by suffix ("weight", "bias",
"gain", "shift", "running_mean", "running_var").

Shapes exclude the batch axis: dense features are (F,), images (C, H, W).
"""
import dataclasses
from typing import Any, ClassVar, Literal, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .utils import ConfigError, PreconditionError, ShapeError

ACTIVATION_FUNCTIONS = ("relu", "leaky_relu", "gelu", "tanh", "abs", "identity")
NORM_AXES = ("none", "batch", "feature")
PADDING_MODES = ("valid", "same")

GELU_C = np.sqrt(2 / np.pi)
GELU_A = 0.044715

DEFAULT_NORM_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1

SHAPE = tuple[int, ...]


def _check_positive(layer: Any, *names: str) -> None:
    for n in names:
        v = getattr(layer, n)
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise ConfigError(f"{layer.kind}.{n} must be a positive integer", value=v)


@dataclasses.dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    has_bias: bool = True
    kind: ClassVar[str] = "dense"

    def __post_init__(self) -> None:
        _check_positive(self, "in_features", "out_features")

    @property
    def fan_in(self) -> int:
        return self.in_features

    def out_shape(self, in_shape: SHAPE) -> SHAPE:
        if in_shape != (self.in_features,):
            raise ShapeError(f"dense layer expects input shape ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def param_shapes(self, in_shape: SHAPE) -> dict[str, SHAPE]:
        shapes = {"weight": (self.out_features, self.in_features)}
        if self.has_bias:
            shapes["bias"] = (self.out_features,)
        return shapes

    def buffer_shapes(self, in_shape: SHAPE) -> dict[str, SHAPE]:
        return {}

    def forward(self, params: dict, buffers: dict, x: "numpy array (b, in)", *, train: bool, update_stats: bool = True):
        y = x @ params["weight"].T
        if self.has_bias:
            y = y + params["bias"]
        return y, x, None

    def backward(self, params: dict, cache: Any, grad: "numpy array (b, out)"):
        x = cache
        grads = {"weight": grad.T @ x}
        if self.has_bias:
            grads["bias"] = grad.sum(axis=0)
        return grad @ params["weight"], grads


@dataclasses.dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: Literal["valid", "same"] = "valid"
    kind: ClassVar[str] = "conv2d"

    def __post_init__(self) -> None:
        _check_positive(self, "in_channels", "out_channels", "kernel", "stride")
        if self.padding not in PADDING_MODES:
            raise ConfigError("conv2d.padding must be 'valid' or 'same'", value=self.padding)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def _pads(self, size: int) -> tuple[int, int]:
        if self.padding == "valid":
            return 0, 0
        out = -(-size // self.stride)  # ceil
        total = max((out - 1) * self.stride + self.kernel - size, 0)
        return total // 2, total - total // 2

    def _out_size(self, size: int) -> int:
        lo, hi = self._pads(size)
        return (size + lo + hi - self.kernel) // self.stride + 1

    def out_shape(self, in_shape: SHAPE) -> SHAPE:
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"conv2d expects input shape ({self.in_channels}, H, W), got {in_shape}")
        h, w = self._out_size(in_shape[1]), self._out_size(in_shape[2])
        if h < 1 or w < 1:
            raise ShapeError(f"conv2d kernel {self.kernel} does not fit input {in_shape}")
        return (self.out_channels, h, w)

    def param_shapes(self, in_shape: SHAPE) -> dict[str, SHAPE]:
        return {
            "weight": (self.out_channels, self.in_channels, self.kernel, self.kernel),
            "bias": (self.out_channels,),
        }

    def buffer_shapes(self, in_shape: SHAPE) -> dict[str, SHAPE]:
        return {}

    def forward(self, params: dict, buffers: dict, x: "numpy array (b, c, h, w)", *, train: bool, update_stats: bool = True):
        (h_lo, h_hi), (w_lo, w_hi) = self._pads(x.shape[2]), self._pads(x.shape[3])
        xp = np.pad(x, ((0, 0), (0, 0), (h_lo, h_hi), (w_lo, w_hi)))
        # (b, c, oh, ow, k, k)
        windows = sliding_window_view(xp, (self.kernel, self.kernel), axis=(2, 3))[:, :, ::self.stride, ::self.stride]
        y = np.einsum("bchwij,ocij->bohw", windows, params["weight"]) + params["bias"][None, :, None, None]
        return y, (x.shape, xp.shape, (h_lo, w_lo), windows), None

    def backward(self, params: dict, cache: Any, grad: "numpy array (b, o, oh, ow)"):
        x_shape, xp_shape, (h_lo, w_lo), windows = cache
        weight = params["weight"]
        grads = {
            "weight": np.einsum("bohw,bchwij->ocij", grad, windows),
            "bias": grad.sum(axis=(0, 2, 3)),
        }
        oh, ow = grad.shape[2], grad.shape[3]
        s = self.stride
        dxp = np.zeros(xp_shape)
        for i in range(self.kernel):
            for j in range(self.kernel):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.einsum("bohw,oc->bchw", grad, weight[:, :, i, j])
        dx = dxp[:, :, h_lo:h_lo + x_shape[2], w_lo:w_lo + x_shape[3]]
        return dx, grads


@dataclasses.dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "flatten"

    def out_shape(self, in_shape: SHAPE) -> SHAPE:
        return (int(np.prod(in_shape)),)

    def param_shapes(self, in_shape: SHAPE) -> dict[str, SHAPE]:
        return {}

    def buffer_shapes(self, in_shape: SHAPE) -> dict[str, SHAPE]:
        return {}

    def forward(self, params: dict, buffers: dict, x: "numpy array (b, ...)", *, train: bool, update_stats: bool = True):
        return x.reshape(x.shape[0], -1), x.shape, None

    def backward(self, params: dict, cache: Any, grad: "numpy array (b, f)"):
        return grad.reshape(cache), {}


def activation_value(function: str, z: "numpy array", slope: float = 0.01) -> "numpy array":
    if function == "relu":
        return np.maximum(z, 0.0)
    if function == "leaky_relu":
        return np.where(z > 0, z, slope * z)
    if function == "gelu":
        # tanh approximation
        return 0.5 * z * (1 + np.tanh(GELU_C * (z + GELU_A * z**3)))
    if function == "tanh":
        return np.tanh(z)
    if function == "abs":
        return np.abs(z)
    if function == "identity":
        return z
    raise ConfigError("Unknown activation", value=function)


def activation_derivative(function: str, z: "numpy array", slope: float = 0.01) -> "numpy array":
    if function == "relu":
        return (z > 0).astype(np.float64)
    if function == "leaky_relu":
        return np.where(z > 0, 1.0, slope)
    if function == "gelu":
        t = np.tanh(GELU_C * (z + GELU_A * z**3))
        return 0.5 * (1 + t) + 0.5 * z * (1 - t**2) * GELU_C * (1 + 3 * GELU_A * z**2)
    if function == "tanh":
        return 1 - np.tanh(z)**2
    if function == "abs":
        return np.sign(z)
    if function == "identity":
        return np.ones_like(z)
    raise ConfigError("Unknown activation", value=function)


@dataclasses.dataclass(frozen=True)
class Activation:
    function: str = "relu"
    slope: float = 0.01  # leaky_relu only
    input_offset: float = 0.0
    kind: ClassVar[str] = "activation"

    def __post_init__(self) -> None:
        if self.function not in ACTIVATION_FUNCTIONS:
            raise ConfigError(f"activation.function must be one of {ACTIVATION_FUNCTIONS}", value=self.function)
        if self.function == "leaky_relu" and not 0 < self.slope < 1:
            raise ConfigError("activation.slope must be in (0, 1)", value=self.slope)
        if not np.isfinite(self.input_offset):
            raise ConfigError("activation.input_offset must be finite", value=self.input_offset)

    def out_shape(self, in_shape: SHAPE) -> SHAPE:
        return in_shape

    def param_shapes(self, in_shape: SHAPE) -> dict[str, SHAPE]:
        return {}

    def buffer_shapes(self, in_shape: SHAPE) -> dict[str, SHAPE]:
        return {}

    def forward(self, params: dict, buffers: dict, x: "numpy array", *, train: bool, update_stats: bool = True):
        # cache holds the preactivation, i.e. the argument of the nonlinearity
        z = x + self.input_offset if self.input_offset else x
        return activation_value(self.function, z, self.slope), z, None

    def backward(self, params: dict, cache: Any, grad: "numpy array"):
        return grad * activation_derivative(self.function, cache, self.slope), {}


def _norm_axes(ndim: int) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
    # batch axes, feature axes, broadcast shape of per-channel statistics
    if ndim == 2:
        return (0,), (1,), (1, -1)
    if ndim == 4:
        return (0, 2, 3), (1, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"normalization needs 2D or 4D input, got {ndim}D")


@dataclasses.dataclass(frozen=True)
class DecomposedNorm:
    """Mean subtraction and scaling, each along its own axis (or skipped).

    Batch-axis statistics are tracked as running averages and used in eval
    mode; feature-axis statistics are always per sample. Scaling divides by
    the root mean square of the (centered) signal along the scale axis.
    """
    center_axis: Literal["none", "batch", "feature"] = "feature"
    scale_axis: Literal["none", "batch", "feature"] = "feature"
    eps: float = DEFAULT_NORM_EPS
    momentum: float = DEFAULT_MOMENTUM
    affine: bool = False
    kind: ClassVar[str] = "decomposed_norm"

    def __post_init__(self) -> None:
        if self.center_axis not in NORM_AXES or self.scale_axis not in NORM_AXES:
            raise ConfigError(f"normalization axes must be in {NORM_AXES}", value=(self.center_axis, self.scale_axis))
        if not self.eps > 0:
            raise ConfigError(f"{self.kind}.eps must be positive", value=self.eps)
        if not 0 < self.momentum < 1:
            raise ConfigError(f"{self.kind}.momentum must be in (0, 1)", value=self.momentum)

    @property
    def uses_batch(self) -> bool:
        return "batch" in (self.center_axis, self.scale_axis)

    def out_shape(self, in_shape: SHAPE) -> SHAPE:
        if len(in_shape) not in (1, 3):
            raise ShapeError(f"{self.kind} needs (F,) or (C, H, W) input, got {in_shape}")
        return in_shape

    def param_shapes(self, in_shape: SHAPE) -> dict[str, SHAPE]:
        if not self.affine:
            return {}
        return {"gain": (in_shape[0],), "shift": (in_shape[0],)}

    def buffer_shapes(self, in_shape: SHAPE) -> dict[str, SHAPE]:
        out = {}
        if self.center_axis == "batch":
            out["running_mean"] = (in_shape[0],)
        if self.scale_axis == "batch":
            out["running_var"] = (in_shape[0],)
        return out

    def forward(self, params: dict, buffers: dict, x: "numpy array", *, train: bool, update_stats: bool = True):
        batch_axes, feature_axes, bshape = _norm_axes(x.ndim)
        if self.uses_batch and train and x.shape[0] < 2:
            raise PreconditionError(f"{self.kind} with batch statistics needs a batch of at least 2 in train mode")
        m = self.momentum
        new_buffers = {}

        if self.center_axis == "none":
            c = x
        elif self.center_axis == "feature":
            c = x - x.mean(axis=feature_axes, keepdims=True)
        elif train:
            mean = x.mean(axis=batch_axes, keepdims=True)
            c = x - mean
            if update_stats:
                new_buffers["running_mean"] = (1 - m) * buffers["running_mean"] + m * mean.reshape(-1)
        else:
            c = x - buffers["running_mean"].reshape(bshape)

        if self.scale_axis == "none":
            s = None
            y = c
        else:
            if self.scale_axis == "feature":
                sq = (c**2).mean(axis=feature_axes, keepdims=True)
            elif train:
                sq = (c**2).mean(axis=batch_axes, keepdims=True)
                if update_stats:
                    new_buffers["running_var"] = (1 - m) * buffers["running_var"] + m * sq.reshape(-1)
            else:
                sq = buffers["running_var"].reshape(bshape)
            s = np.sqrt(sq + self.eps)
            y = c / s

        out = y
        if self.affine:
            out = y * params["gain"].reshape(bshape) + params["shift"].reshape(bshape)
        return out, (c, s, y, train), new_buffers or None

    def backward(self, params: dict, cache: Any, grad: "numpy array"):
        c, s, y, train = cache
        batch_axes, feature_axes, bshape = _norm_axes(grad.ndim)
        grads = {}
        if self.affine:
            grads["gain"] = (grad * y).sum(axis=batch_axes)
            grads["shift"] = grad.sum(axis=batch_axes)
            grad = grad * params["gain"].reshape(bshape)

        if s is None:
            dc = grad
        elif self.scale_axis == "feature" or train:
            axes = feature_axes if self.scale_axis == "feature" else batch_axes
            dc = grad / s - c * (grad * c).mean(axis=axes, keepdims=True) / s**3
        else:
            # running statistics are constants
            dc = grad / s

        if self.center_axis == "feature" or (self.center_axis == "batch" and train):
            axes = feature_axes if self.center_axis == "feature" else batch_axes
            return dc - dc.mean(axis=axes, keepdims=True), grads
        return dc, grads


@dataclasses.dataclass(frozen=True)
class LayerNorm(DecomposedNorm):
    """per-sample normalization over all features, applied to preactivations"""
    eps: float = DEFAULT_NORM_EPS
    affine: bool = True
    center_axis: Literal["feature"] = dataclasses.field(default="feature", init=False)
    scale_axis: Literal["feature"] = dataclasses.field(default="feature", init=False)
    momentum: float = dataclasses.field(default=DEFAULT_MOMENTUM, init=False)
    kind: ClassVar[str] = "layer_norm"


@dataclasses.dataclass(frozen=True)
class BatchNorm(DecomposedNorm):
    eps: float = DEFAULT_NORM_EPS
    momentum: float = DEFAULT_MOMENTUM
    affine: bool = True
    center_axis: Literal["batch"] = dataclasses.field(default="batch", init=False)
    scale_axis: Literal["batch"] = dataclasses.field(default="batch", init=False)
    kind: ClassVar[str] = "batch_norm"


LayerSpec = Union[Dense, Conv2D, Flatten, Activation, LayerNorm, BatchNorm, DecomposedNorm]
LAYER_KINDS: dict[str, type] = {
    cls.kind: cls
    for cls in (Dense, Conv2D, Flatten, Activation, LayerNorm, BatchNorm, DecomposedNorm)
}
PARAMETERIZED = (Dense, Conv2D)
NORMALIZATIONS = (DecomposedNorm,)  # LayerNorm and BatchNorm are subclasses


def layer_to_dict(layer: LayerSpec) -> dict[str, Any]:
    return {"kind": layer.kind} | {
        f.name: getattr(layer, f.name)
        for f in dataclasses.fields(layer)
        if f.init
    }


def layer_from_dict(data: dict[str, Any], path: str = "layer") -> LayerSpec:
    if not isinstance(data, dict) or "kind" not in data:
        raise ConfigError("layer must be an object with a 'kind'", path=path, value=data)
    kind = data["kind"]
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind, expected one of {tuple(LAYER_KINDS)}", path=f"{path}.kind", value=kind)
    cls = LAYER_KINDS[kind]
    allowed = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key != "kind" and key not in allowed:
            raise ConfigError("unknown key", path=f"{path}.{key}", value=data[key])
    try:
        return cls(**{k: v for k, v in data.items() if k != "kind"})
    except ConfigError as ce:
        raise ConfigError(ce.msg, path=path, value=ce.value) from ce
