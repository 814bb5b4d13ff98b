"""Central finite differences against the analytic backward pass.

Every case builds a small network around one layer kind (or one loss), draws
a batch and compares a sample of parameter and input gradient coordinates.
The error of a tensor is max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8).
"""
import dataclasses
from typing import Any, Callable

import numpy as np

from .layers import ACTIVATION_FUNCTIONS, NORM_AXES, Activation, BatchNorm, Conv2D, DecomposedNorm, Dense, Flatten, LayerNorm
from .losses import TwoHotCodec, mse_loss, two_hot_loss, xent_loss
from .network import Network, NetworkSpec, backward, forward, init_network
from .utils import logger, substream

FD_STEP = 1e-5
TOLERANCE = 1e-5
COORDS_PER_TENSOR = 20
# piecewise activations are not differentiable at their kink
KINK_MARGIN = 1e-3
PIECEWISE = ("relu", "leaky_relu", "abs")
MAX_RESAMPLES = 20

CASE_KINDS = (
    "dense", "dense_no_bias", "conv_valid", "conv_same_strided", "flatten", "activation",
    "layer_norm", "batch_norm", "decomposed_norm", "mse", "xent", "two_hot",
)
LOSS_CASES = ("mse", "xent", "two_hot")


@dataclasses.dataclass(frozen=True)
class GradcheckCase:
    kind: str
    spec: NetworkSpec
    batch_size: int
    # "projection" is a fixed random linear function of the outputs
    loss: str = "projection"
    smoothing: float = 0.0

    @property
    def name(self) -> str:
        return f"{self.kind}[{', '.join(layer.kind for layer in self.spec.layers)}]"


@dataclasses.dataclass
class CaseResult:
    case: GradcheckCase
    max_rel_error: float
    worst_tensor: str
    coordinates: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict[str, Any]:
        return {
            "case": self.case.name,
            "max_rel_error": self.max_rel_error,
            "worst_tensor": self.worst_tensor,
            "coordinates": self.coordinates,
            "passed": self.passed,
        }


@dataclasses.dataclass
class GradcheckReport:
    results: list[CaseResult]

    @property
    def max_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    @property
    def failures(self) -> list[CaseResult]:
        return [r for r in self.results if not r.passed]

    @property
    def passed(self) -> bool:
        return not self.failures


def _dims(rng: np.random.Generator) -> tuple[int, int, int]:
    return int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 4))


def build_case(kind: str, index: int, seed: int = 0) -> GradcheckCase:
    rng = substream(seed, "probe", index)
    d_in, d_hidden, d_out = _dims(rng)
    c_in, size = int(rng.integers(1, 3)), int(rng.integers(4, 7))
    batch = int(rng.integers(3, 6))

    def dense_net(*mid: Any) -> NetworkSpec:
        return NetworkSpec(layers=(Dense(d_in, d_hidden), *mid, Dense(d_hidden, d_out)), input_shape=(d_in,), seed=index)

    def conv_net(conv: Conv2D, *mid: Any) -> NetworkSpec:
        shape = conv.out_shape((c_in, size, size))
        flat = int(np.prod(shape))
        return NetworkSpec(
            layers=(conv, *mid, Flatten(), Dense(flat, d_out)), input_shape=(c_in, size, size), seed=index,
        )

    if kind == "dense":
        spec = dense_net(Activation("tanh"))
    elif kind == "dense_no_bias":
        spec = NetworkSpec(layers=(Dense(d_in, d_hidden, has_bias=False), Activation("gelu"), Dense(d_hidden, d_out, has_bias=False)), input_shape=(d_in,), seed=index)
    elif kind == "conv_valid":
        spec = conv_net(Conv2D(c_in, d_hidden, int(rng.integers(1, 4))))
    elif kind == "conv_same_strided":
        spec = conv_net(Conv2D(c_in, d_hidden, 3, stride=int(rng.integers(1, 3)), padding="same"))
    elif kind == "flatten":
        spec = conv_net(Conv2D(c_in, d_hidden, 2), Activation("tanh"))
    elif kind == "activation":
        # one function per round through CASE_KINDS
        function = ACTIVATION_FUNCTIONS[(index // len(CASE_KINDS)) % len(ACTIVATION_FUNCTIONS)]
        spec = dense_net(Activation(function, slope=0.1, input_offset=float(rng.normal())))
    elif kind == "layer_norm":
        if rng.random() < 0.5:
            spec = dense_net(LayerNorm(), Activation("gelu"))
        else:
            spec = conv_net(Conv2D(c_in, d_hidden, 3, padding="same"), LayerNorm(), Activation("tanh"))
    elif kind == "batch_norm":
        if rng.random() < 0.5:
            spec = dense_net(BatchNorm(), Activation("relu"))
        else:
            spec = conv_net(Conv2D(c_in, d_hidden, 3, padding="same"), BatchNorm(), Activation("tanh"))
    elif kind == "decomposed_norm":
        norm = DecomposedNorm(
            center_axis=NORM_AXES[int(rng.integers(len(NORM_AXES)))],
            scale_axis=NORM_AXES[int(rng.integers(len(NORM_AXES)))],
            affine=bool(rng.random() < 0.5),
        )
        spec = dense_net(norm, Activation("tanh"))
    elif kind in LOSS_CASES:
        if kind == "two_hot":
            d_out = TwoHotCodec(int(rng.integers(2, 5))).num_atoms
        spec = dense_net(Activation("relu"))
        return GradcheckCase(kind=kind, spec=spec, batch_size=batch, loss=kind, smoothing=float(rng.choice([0.0, 0.1])))
    else:
        raise ValueError(f"unknown gradcheck case {kind!r}")
    return GradcheckCase(kind=kind, spec=spec, batch_size=batch)


def _loss_fn(case: GradcheckCase, out_shape: tuple[int, ...], rng: np.random.Generator) -> Callable:
    b = out_shape[0]
    if case.loss == "projection":
        projection = rng.normal(size=out_shape)
        return lambda out: (float((out * projection).sum()), projection)
    if case.loss == "mse":
        target = rng.normal(size=out_shape)
        return lambda out: mse_loss(out, target)
    if case.loss == "xent":
        labels = rng.integers(0, out_shape[1], size=b)
        return lambda out: xent_loss(out, labels, case.smoothing)
    codec = TwoHotCodec((out_shape[1] - 1) // 2, case.smoothing)
    values = rng.uniform(-codec.bound, codec.bound, size=b)
    return lambda out: two_hot_loss(codec, out, values)


def _near_kink(net: Network, x: "numpy array") -> bool:
    _, trace = forward(net, x, "train", update_stats=False)
    for i, z in trace.preactivations.items():
        if net.spec.layers[i].function in PIECEWISE:
            # the input offset is part of the preactivation
            if (np.abs(z) < KINK_MARGIN).any():
                return True
    return False


def _rel_error(analytic: "numpy array", numeric: "numpy array") -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_case(case: GradcheckCase, seed: int = 0, index: int = 0, tolerance: float = TOLERANCE) -> CaseResult:
    """compare analytic and numeric gradients of one case; batch statistics are used but never stored"""
    rng = substream(seed, "probe", index, 1)
    for attempt in range(MAX_RESAMPLES):
        net = init_network(case.spec, seed, stream="probe", key=index * MAX_RESAMPLES + attempt)
        # random non-trivial norm parameters
        for name in net.params:
            if name.endswith((".gain", ".shift")):
                net.params[name] = net.params[name] + 0.5 * rng.normal(size=net.params[name].shape)
        x = rng.normal(size=(case.batch_size, *case.spec.input_shape))
        if not _near_kink(net, x):
            break
    else:
        logger.warning(f"{case.name}: inputs stay close to an activation kink")
    out, trace = forward(net, x, "train", update_stats=False)
    loss_fn = _loss_fn(case, out.shape, rng)
    _, grad = loss_fn(out)
    grads = backward(net, trace, grad)

    def loss_at(params: dict[str, "numpy array"], inputs: "numpy array") -> float:
        probe = Network(spec=net.spec, params=params, buffers=net.buffers, init_layer_norms=net.init_layer_norms)
        value, _ = loss_fn(forward(probe, inputs, "train", update_stats=False)[0])
        return value

    tensors = {name: (net.params[name], grads.params[name]) for name in net.params}
    tensors["input"] = (x, grads.inputs)
    worst, worst_name, count = 0.0, "", 0
    for name, (value, analytic) in tensors.items():
        coords = rng.choice(value.size, size=min(COORDS_PER_TENSOR, value.size), replace=False)
        numeric = np.zeros(coords.shape[0])
        for k, flat_index in enumerate(coords):
            idx = np.unravel_index(flat_index, value.shape)
            shifted = []
            for sign in (1, -1):
                moved = value.copy()
                moved[idx] += sign * FD_STEP
                if name == "input":
                    shifted.append(loss_at(net.params, moved))
                else:
                    shifted.append(loss_at(net.params | {name: moved}, x))
            numeric[k] = (shifted[0] - shifted[1]) / (2 * FD_STEP)
        error = _rel_error(analytic.ravel()[coords], numeric)
        count += coords.shape[0]
        if error >= worst:
            worst, worst_name = error, name
    return CaseResult(case=case, max_rel_error=worst, worst_tensor=worst_name, coordinates=count, tolerance=tolerance)


def run_gradcheck(cases: int = 100, seed: int = 0, tolerance: float = TOLERANCE) -> GradcheckReport:
    """run `cases` cases, cycling through every layer kind and loss"""
    results = []
    for i in range(cases):
        case = build_case(CASE_KINDS[i % len(CASE_KINDS)], i, seed)
        result = check_case(case, seed, i, tolerance)
        logger.debug(f"{case.name}: max relative error {result.max_rel_error:.3g}")
        if not result.passed:
            logger.warning(f"Gradient mismatch in {case.name}: {result.max_rel_error:.3g} on {result.worst_tensor}")
        results.append(result)
    return GradcheckReport(results=results)
