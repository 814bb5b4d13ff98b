"""Measurements of a network's trainability.

Everything here is read-only on the network: forward passes run in eval mode
(running statistics are used and never updated) unless noted otherwise.
"""
import dataclasses
from typing import Any, Callable

import numpy as np
from scipy.linalg import eigh, svd
from scipy.optimize import minimize
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh
from scipy.special import log_softmax

from .layers import Activation, DecomposedNorm, activation_derivative
from .network import (
    ForwardTrace, Network, backward, feature_index, flatten_params, forward, per_sample_output_gradient,
    unflatten_params,
)
from .utils import ConfigError, PreconditionError, as_tensor, logger, substream

CENSUS_MIN_BATCH = 32
SATURATION_THRESHOLD = 3.0  # tanh'(3) < 0.01
ZOMBIE_STD_RATIO = 0.05  # relative to the layer median, smooth activations only
MAX_ENTK_BATCH = 64
SVD_BATCH = 128
SRANK_DELTA = 0.01
RANK_THRESHOLD = 1e-8
DIAG_RANK1_RESTARTS = 20


def _per_unit(z: "numpy array (b, u) | (b, c, h, w)") -> "numpy array (samples, units)":
    if z.ndim == 2:
        return z
    # conv layers: every spatial position of a channel is a sample of that unit
    return np.moveaxis(z, 1, -1).reshape(-1, z.shape[1])


@dataclasses.dataclass
class LayerCensus:
    layer: int
    function: str
    preact_mean: "numpy array (u,)"
    preact_var: "numpy array (u,)"
    dead: "numpy array (u,) bool"
    zombie: "numpy array (u,) bool"
    saturated: "numpy array (u,) bool"

    @property
    def num_units(self) -> int:
        return self.dead.shape[0]

    @property
    def dead_fraction(self) -> float:
        return float(self.dead.mean())

    @property
    def zombie_fraction(self) -> float:
        return float(self.zombie.mean())

    @property
    def saturated_fraction(self) -> float:
        return float(self.saturated.mean())

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "function": self.function,
            "units": self.num_units,
            "dead_fraction": self.dead_fraction,
            "zombie_fraction": self.zombie_fraction,
            "saturated_fraction": self.saturated_fraction,
        }


@dataclasses.dataclass
class UnitCensus:
    layers: list[LayerCensus]

    @property
    def num_units(self) -> int:
        return sum(l.num_units for l in self.layers)

    @property
    def dead_count(self) -> int:
        return int(sum(l.dead.sum() for l in self.layers))

    @property
    def zombie_count(self) -> int:
        return int(sum(l.zombie.sum() for l in self.layers))

    @property
    def dead_fraction(self) -> float:
        return self.dead_count / self.num_units if self.num_units else 0.0

    @property
    def zombie_fraction(self) -> float:
        return self.zombie_count / self.num_units if self.num_units else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "dead_fraction": self.dead_fraction,
            "zombie_fraction": self.zombie_fraction,
            "layers": [l.to_dict() for l in self.layers],
        }


def classify_units(function: str, z: "numpy array (samples, units)") -> tuple["numpy array", "numpy array", "numpy array"]:
    """(dead, zombie, saturated) flags for one activation layer"""
    units = z.shape[1]
    no = np.zeros(units, dtype=bool)
    if function == "relu":
        return (z <= 0).all(axis=0), (z > 0).all(axis=0), no
    if function in ("leaky_relu", "abs"):
        return no, (z > 0).all(axis=0) | (z < 0).all(axis=0), no
    if function == "identity":
        return no, np.ones(units, dtype=bool), no
    # smooth activations
    saturated = (np.abs(z) > SATURATION_THRESHOLD).all(axis=0)
    dead = (z < -SATURATION_THRESHOLD).all(axis=0) if function == "gelu" else no
    std = z.std(axis=0)
    zombie = (std < ZOMBIE_STD_RATIO * np.median(std)) & ~dead
    return dead, zombie, saturated


def unit_census(net: Network, probe_batch: "numpy array", min_batch: int = CENSUS_MIN_BATCH) -> UnitCensus:
    probe_batch = np.asarray(probe_batch, dtype=np.float64)
    if probe_batch.ndim < 2 or probe_batch.shape[0] == 0:
        raise PreconditionError("unit census needs a non-empty probe batch")
    if probe_batch.shape[0] < min_batch:
        raise PreconditionError(f"unit census needs at least {min_batch} probe samples, got {probe_batch.shape[0]}")
    _, trace = forward(net, probe_batch, "eval")
    out = []
    for i, z in trace.preactivations.items():
        function = net.spec.layers[i].function
        zu = _per_unit(z)
        dead, zombie, saturated = classify_units(function, zu)
        out.append(LayerCensus(
            layer=i, function=function,
            preact_mean=zu.mean(axis=0), preact_var=zu.var(axis=0),
            dead=dead, zombie=zombie, saturated=saturated,
        ))
    return UnitCensus(layers=out)


@dataclasses.dataclass
class PreactivationStats:
    mean: dict[int, "numpy array (u,)"]
    var: dict[int, "numpy array (u,)"]
    # mean absolute change per layer against a reference, if one was given
    mean_drift: dict[int, float] | None = None
    var_drift: dict[int, float] | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "layers": {
                str(i): {"mean": float(self.mean[i].mean()), "var": float(self.var[i].mean())}
                for i in self.mean
            },
        }
        if self.mean_drift is not None:
            out["mean_drift"] = {str(k): v for k, v in self.mean_drift.items()}
            out["var_drift"] = {str(k): v for k, v in self.var_drift.items()}
        return out


def preactivation_stats(trace: ForwardTrace, reference: PreactivationStats | None = None) -> PreactivationStats:
    means, variances = {}, {}
    for i, z in trace.preactivations.items():
        zu = _per_unit(z)
        means[i] = zu.mean(axis=0)
        variances[i] = zu.var(axis=0)
    stats = PreactivationStats(mean=means, var=variances)
    if reference is not None:
        if set(reference.mean) != set(means):
            raise ConfigError("reference statistics come from a different architecture")
        stats.mean_drift = {i: float(np.abs(means[i] - reference.mean[i]).mean()) for i in means}
        stats.var_drift = {i: float(np.abs(variances[i] - reference.var[i]).mean()) for i in means}
    return stats


@dataclasses.dataclass
class ParamNorms:
    per_layer: dict[int, float]
    per_param: dict[str, float]

    @property
    def total(self) -> float:
        return float(np.sqrt(sum(v**2 for v in self.per_param.values())))

    def to_dict(self) -> dict[str, Any]:
        return {"total": self.total, "per_layer": {str(k): v for k, v in self.per_layer.items()}}


def param_norms(net: Network) -> ParamNorms:
    per_param = {k: float(np.linalg.norm(v)) for k, v in net.params.items()}
    squares: dict[int, float] = {}
    for k, v in per_param.items():
        layer = int(k.split(".", 1)[0])
        squares[layer] = squares.get(layer, 0.0) + v**2
    return ParamNorms(per_layer={k: float(np.sqrt(v)) for k, v in squares.items()}, per_param=per_param)


def explicit_jacobian(net: Network, batch: "numpy array", output_index: int = 0) -> "numpy array (n, p)":
    """rows are d f(x_i)[output_index] / d theta, from one batched eval-mode trace"""
    out, trace = forward(net, batch, "eval")
    if out.ndim != 2 or not 0 <= output_index < out.shape[1]:
        raise ConfigError("output index out of range", path="output_index", value=output_index)
    rows = []
    for i in range(out.shape[0]):
        seed_grad = np.zeros_like(out)
        seed_grad[i, output_index] = 1.0
        rows.append(flatten_params(backward(net, trace, seed_grad).params))
    return np.stack(rows)


def numeric_rank(matrix: "numpy array (m, n)", rel_threshold: float = RANK_THRESHOLD) -> int:
    s = svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)
    if not s.size or s[0] == 0:
        return 0
    return int((s > rel_threshold * s[0]).sum())


def diag_rank1_fit(
    K: "numpy array (n, n)", max_iter: int = 50, tol: float = 1e-10,
    init_diag: "numpy array (n,) | None" = None,
) -> tuple["numpy array (n,)", "numpy array (n, n)", float]:
    """Alternating fit of K by diag(d) + R with R rank one.

    Returns (d, R, relative Frobenius residual).
    """
    K = np.asarray(K, dtype=np.float64)
    norm = np.linalg.norm(K)
    if norm == 0:
        return np.zeros(K.shape[0]), np.zeros_like(K), 0.0
    d = np.zeros(K.shape[0]) if init_diag is None else np.asarray(init_diag, dtype=np.float64)
    residual = np.inf
    R = np.zeros_like(K)
    for _ in range(max_iter):
        w, v = eigh(K - np.diag(d))
        R = max(w[-1], 0.0) * np.outer(v[:, -1], v[:, -1])
        d = np.diag(K - R).copy()
        new_residual = np.linalg.norm(K - np.diag(d) - R) / norm
        stalled = residual - new_residual < tol
        residual = new_residual
        if stalled:
            break
    return d, R, float(residual)


def _offdiag_objective(u: "numpy array (n,)", K: "numpy array (n, n)") -> tuple[float, "numpy array (n,)"]:
    # with d = diag(K - uu^T) only the off-diagonal entries are left
    E = K - np.outer(u, u)
    np.fill_diagonal(E, 0.0)
    return float((E * E).sum()), -4 * (E @ u)


def diag_rank1_residual(
    K: "numpy array (n, n)", max_iter: int = 50, tol: float = 1e-10,
    restarts: int = DIAG_RANK1_RESTARTS, seed: int = 0,
) -> float:
    """Relative residual of the best diagonal-plus-rank-1 fit.

    The alternating fit is run from d=0 and d=diag(K). Its two rank-1 factors and
    `restarts` random ones are then refined by L-BFGS, and the smallest residual wins.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ConfigError("matrix must be square", value=K.shape)
    if not np.allclose(K, K.T, rtol=0, atol=1e-10 * max(1.0, np.abs(K).max())):
        raise ConfigError("matrix must be symmetric")
    norm = np.linalg.norm(K)
    if norm == 0:
        return 0.0
    K = K / norm
    n = K.shape[0]
    best = np.inf
    starts = []
    for init_diag in (None, np.diag(K)):
        _, R, residual = diag_rank1_fit(K, max_iter, tol, init_diag=init_diag)
        best = min(best, residual)
        w, v = eigh(R)
        starts.append(np.sqrt(max(w[-1], 0.0)) * v[:, -1])
    rng = substream(seed, "restart")
    starts.extend(rng.normal(size=n) / np.sqrt(n) for _ in range(restarts))
    for u in starts:
        result = minimize(
            _offdiag_objective, u, args=(K,), jac=True, method="L-BFGS-B",
            options={"maxiter": 5000, "ftol": 1e-16, "gtol": 1e-12},
        )
        best = min(best, float(np.sqrt(max(result.fun, 0.0))))
    return float(best)


@dataclasses.dataclass
class ENTKReport:
    gram: "numpy array (n, n)"
    cosine: "numpy array (n, n)"
    # False where a sample has a zero gradient and cosine is undefined (reported as 0)
    cosine_defined: "numpy array (n,) bool"
    eigenvalues: "numpy array (n,)"  # descending
    diag_rank1_residual: float

    def numeric_rank(self, rel_threshold: float = RANK_THRESHOLD) -> int:
        return numeric_rank(self.gram, rel_threshold)

    def to_dict(self) -> dict[str, Any]:
        return {
            "gram": self.gram.tolist(),
            "cosine": self.cosine.tolist(),
            "cosine_defined": self.cosine_defined.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "diag_rank1_residual": self.diag_rank1_residual,
            "numeric_rank": self.numeric_rank(),
        }


def entk_from_gradients(grads: "numpy array (n, p)") -> ENTKReport:
    K = grads @ grads.T
    K = (K + K.T) / 2
    diag = np.diag(K).copy()
    defined = diag > 0
    if not defined.all():
        logger.warning(f"{int((~defined).sum())} samples have zero output gradient, cosine undefined there")
    scale = np.where(defined, 1 / np.sqrt(np.where(defined, diag, 1.0)), 0.0)
    cosine = np.clip(K * scale[:, None] * scale[None, :], -1.0, 1.0)
    cosine[np.diag_indices_from(cosine)] = defined.astype(np.float64)
    eigenvalues = eigh(K, eigvals_only=True)[::-1]
    return ENTKReport(
        gram=K, cosine=cosine, cosine_defined=defined,
        eigenvalues=eigenvalues.copy(), diag_rank1_residual=diag_rank1_residual(K),
    )


def entk_gram(net: Network, batch: "numpy array", output_index: int = 0) -> ENTKReport:
    """K[i, j] = <grad f(x_i), grad f(x_j)> for one scalar output"""
    batch = as_tensor(batch, "batch")
    if batch.shape[0] > MAX_ENTK_BATCH:
        raise ConfigError(f"eNTK batch must not exceed {MAX_ENTK_BATCH} samples", path="batch", value=batch.shape[0])
    grads = np.stack([per_sample_output_gradient(net, x, output_index) for x in batch])
    return entk_from_gradients(grads)


def first_order_loss_decrease(K: "numpy array (n, n)", residual: "numpy array (n,)", lr: float) -> float:
    """predicted change of the batch-mean squared error after one SGD step, -(4 lr / n^2) r^T K r"""
    r = np.asarray(residual, dtype=np.float64).reshape(-1)
    n = r.shape[0]
    return float(-(4 * lr / n**2) * r @ np.asarray(K) @ r)


def _forward_from(net: Network, start: int, x: "numpy array") -> "numpy array":
    for i in range(start, len(net.spec.layers)):
        x, _, _ = net.spec.layers[i].forward(net.layer_params(i), net.layer_buffers(i), x, train=False)
    return x


@dataclasses.dataclass
class SVDReport:
    singular_values: "numpy array"
    delta: float
    srank: int
    top_direction_outputs: "numpy array (n, k)"

    def to_dict(self) -> dict[str, Any]:
        return {
            "singular_values": self.singular_values.tolist(),
            "delta": self.delta,
            # stands in for "effective feature rank"
            "srank_delta": self.srank,
            "top_direction_outputs": self.top_direction_outputs.tolist(),
        }


def feature_svd(net: Network, batch: "numpy array", delta: float = SRANK_DELTA, layer: int | None = None) -> SVDReport:
    """SVD of the n x d matrix of inputs to `layer` (default: the penultimate features)"""
    if layer is None:
        layer = feature_index(net.spec)
    _, trace = forward(net, batch, "eval")
    features = trace.inputs[layer]
    F = features.reshape(features.shape[0], -1)
    U, s, Vt = svd(F, full_matrices=False)
    srank = int((s > delta * s[0]).sum()) if s.size and s[0] > 0 else 0
    projected = (s[0] * np.outer(U[:, 0], Vt[0])).reshape(features.shape)
    return SVDReport(
        singular_values=s, delta=delta, srank=srank,
        top_direction_outputs=_forward_from(net, layer, projected),
    )


def predictive_entropy(logits: "numpy array (b, k)") -> float:
    logp = log_softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    return float(-(np.exp(logp) * logp).sum(axis=-1).mean())


@dataclasses.dataclass
class AlignmentCensus:
    """fraction of units per activation layer whose preactivation gradient has one strict sign over the batch"""
    negative: dict[int, float]
    positive: dict[int, float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "negative": {str(k): v for k, v in self.negative.items()},
            "positive": {str(k): v for k, v in self.positive.items()},
        }


def gradient_alignment_census(net: Network, trace: ForwardTrace, loss_grad: "numpy array") -> AlignmentCensus:
    grads = backward(net, trace, loss_grad)
    negative, positive = {}, {}
    for i, layer in enumerate(net.spec.layers):
        if not isinstance(layer, Activation):
            continue
        # the input offset does not change the derivative w.r.t. the preactivation
        g = _per_unit(grads.layer_inputs[i])
        negative[i] = float((g < 0).all(axis=0).mean())
        positive[i] = float((g > 0).all(axis=0).mean())
    return AlignmentCensus(negative=negative, positive=positive)


@dataclasses.dataclass
class SharpnessReport:
    eigenvalue: float
    iterations: int  # Hessian-vector products
    converged: bool

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def top_hessian_eigenvalue(
    grad_fn: Callable, theta: "numpy array (p,)", iters: int = 100, tol: float = 1e-6, seed: int = 0,
) -> SharpnessReport:
    """Largest Hessian eigenvalue of a loss given only its gradient.

    Hessian-vector products are central differences of the gradient,
    Hv ~ (g(theta + h v) - g(theta - h v)) / 2h with h = 1e-4 (1 + |theta|) / |v|,
    fed to Lanczos (ARPACK through `eigsh`). `iters` bounds the Lanczos restarts,
    `tol` is the relative accuracy of the Ritz value.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    p = theta.shape[0]
    step = 1e-4 * (1 + np.linalg.norm(theta))
    calls = 0

    def hvp(v: "numpy array (p,)") -> "numpy array (p,)":
        nonlocal calls
        v = np.asarray(v, dtype=np.float64).ravel()
        norm = np.linalg.norm(v)
        if norm == 0:
            return np.zeros(p)
        calls += 1
        h = step / norm
        return (grad_fn(theta + h * v) - grad_fn(theta - h * v)) / (2 * h)

    if p < 3:
        # ARPACK needs k < p - 1, build the whole Hessian instead
        H = np.column_stack([hvp(e) for e in np.eye(p)])
        top = eigh((H + H.T) / 2, eigvals_only=True)[-1]
        return SharpnessReport(eigenvalue=float(top), iterations=calls, converged=True)
    v0 = substream(seed, "probe").normal(size=p)
    try:
        w = eigsh(
            LinearOperator((p, p), matvec=hvp, dtype=np.float64), k=1, which="LA",
            v0=v0, maxiter=iters, tol=tol, return_eigenvectors=False,
        )
    except ArpackNoConvergence as anc:
        logger.warning(f"Sharpness Lanczos did not converge in {iters} restarts ({calls} Hessian-vector products)")
        if anc.eigenvalues.size:
            return SharpnessReport(eigenvalue=float(np.max(anc.eigenvalues)), iterations=calls, converged=False)
        v0 /= np.linalg.norm(v0)
        return SharpnessReport(eigenvalue=float(v0 @ hvp(v0)), iterations=calls, converged=False)
    return SharpnessReport(eigenvalue=float(w[0]), iterations=calls, converged=True)


def sharpness_top_eig(
    net: Network, loss_fn: Callable, batch: "numpy array",
    iters: int = 100, tol: float = 1e-6, seed: int = 0,
) -> SharpnessReport:
    """loss_fn maps network outputs to (loss, d loss / d outputs); batch statistics are used but never stored"""
    work = net.copy()

    def grad_fn(flat: "numpy array (p,)") -> "numpy array (p,)":
        work.params = unflatten_params(net.params, flat)
        out, trace = forward(work, batch, "train", update_stats=False)
        _, g = loss_fn(out)
        return flatten_params(backward(work, trace, g).params)

    return top_hessian_eigenvalue(grad_fn, flatten_params(net.params), iters, tol, seed)


@dataclasses.dataclass
class LinearizationProbe:
    # per activation layer, fraction of units whose slope is the same on every input
    constant_slope_fraction: dict[int, float]

    @property
    def fully_linearized(self) -> bool:
        return all(f == 1.0 for f in self.constant_slope_fraction.values())

    def to_dict(self) -> dict[str, Any]:
        return {str(k): v for k, v in self.constant_slope_fraction.items()}


def linearization_probe(net: Network, X: "numpy array") -> LinearizationProbe:
    _, trace = forward(net, X, "eval")
    out = {}
    for i, z in trace.preactivations.items():
        layer = net.spec.layers[i]
        slopes = _per_unit(activation_derivative(layer.function, z, layer.slope))
        out[i] = float((slopes == slopes[:1]).all(axis=0).mean())
    return LinearizationProbe(constant_slope_fraction=out)


@dataclasses.dataclass
class RankBoundResult:
    entk_rank: int
    input_rank: int
    bound_holds: bool

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def rank_bound_check(net: Network, X: "numpy array", rel_threshold: float = RANK_THRESHOLD, output_index: int = 0) -> RankBoundResult:
    """rank(K(X, X)) <= rank(X) for a network that acts linearly on X.

    Biases make the network affine in x, so the input rank is then taken
    of X with an appended column of ones.
    """
    if any(isinstance(layer, DecomposedNorm) for layer in net.spec.layers):
        raise PreconditionError("rank bound needs a network without normalization layers")
    probe = linearization_probe(net, X)
    if not probe.fully_linearized:
        raise PreconditionError(f"network is not linearized on X: constant slope fractions {probe.to_dict()}")
    flat = np.asarray(X, dtype=np.float64).reshape(X.shape[0], -1)
    if any(k.endswith(".bias") for k in net.params):
        flat = np.hstack([flat, np.ones((flat.shape[0], 1))])
    entk_rank = entk_gram(net, X, output_index).numeric_rank(rel_threshold)
    input_rank = numeric_rank(flat, rel_threshold)
    return RankBoundResult(entk_rank=entk_rank, input_rank=input_rank, bound_holds=entk_rank <= input_rank)


def full_report(
    net: Network, batch: "numpy array", *, output_index: int = 0,
    entk_size: int = MAX_ENTK_BATCH, svd_size: int = SVD_BATCH,
) -> dict[str, Any]:
    """census, norms, eNTK, feature SVD and entropy as one JSON-serializable payload"""
    batch = as_tensor(batch, "batch")
    out: dict[str, Any] = {"param_norms": param_norms(net).to_dict()}
    if batch.shape[0] >= CENSUS_MIN_BATCH:
        out["census"] = unit_census(net, batch).to_dict()
    logits, _ = forward(net, batch, "eval")
    if logits.ndim == 2 and logits.shape[1] > 1:
        out["entropy"] = predictive_entropy(logits)
    out["entk"] = entk_gram(net, batch[:entk_size], output_index).to_dict()
    out["svd"] = feature_svd(net, batch[:svd_size]).to_dict()
    return out
