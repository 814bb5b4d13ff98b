"""Checkpoint files: the network spec, every tensor and the optimizer state as JSON.

Tensors are stored as `{"shape": [...], "values": "v0 v1 ..."}` where every
value is printed with 17 significant digits, which reproduces any float64
bit-exactly. Writing the same state twice gives identical bytes.
"""
import dataclasses
import json
from pathlib import Path
from typing import Any

import numpy as np

from .network import Network, NetworkSpec
from .optimizers import OptimizerState
from .utils import CheckpointError, ConfigError, logger

CHECKPOINT_VERSION = 1


def encode_tensor(array: "numpy array") -> dict[str, Any]:
    array = np.asarray(array, dtype=np.float64)
    return {"shape": list(array.shape), "values": " ".join(f"{v:.17g}" for v in array.ravel())}


def decode_tensor(data: dict[str, Any], name: str = "tensor") -> "numpy array":
    try:
        shape = tuple(int(d) for d in data["shape"])
        text = data["values"]
        values = np.array([float(v) for v in text.split()], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed tensor {name}: {exc}") from exc
    if values.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor {name} has {values.size} values for shape {shape}")
    return values.reshape(shape)


def _encode_tensors(tensors: dict[str, "numpy array"]) -> dict[str, Any]:
    return {name: encode_tensor(value) for name, value in tensors.items()}


def _decode_tensors(data: dict[str, Any], section: str) -> dict[str, "numpy array"]:
    return {name: decode_tensor(value, f"{section}.{name}") for name, value in data.items()}


@dataclasses.dataclass
class Checkpoint:
    network: Network
    optimizer: OptimizerState
    seed: int = 0
    step: int = 0
    # free-form JSON metadata, e.g. the experiment that produced the checkpoint
    extra: dict[str, Any] = dataclasses.field(default_factory=dict)


def checkpoint_to_document(ckpt: Checkpoint) -> dict[str, Any]:
    net, opt = ckpt.network, ckpt.optimizer
    return {
        "schema_version": CHECKPOINT_VERSION,
        "spec_hash": net.spec.spec_hash(),
        "network": net.spec.to_dict(),
        "seed": ckpt.seed,
        "step": ckpt.step,
        "params": _encode_tensors(net.params),
        "buffers": _encode_tensors(net.buffers),
        "init_layer_norms": [[name, f"{norm:.17g}"] for name, norm in net.init_layer_norms],
        "optimizer": {
            "hyperparams": opt.hyperparams(),
            "t": opt.t,
            "m": _encode_tensors(opt.m),
            "v": _encode_tensors(opt.v),
        },
        "extra": ckpt.extra,
    }


def dumps_checkpoint(ckpt: Checkpoint) -> str:
    # hyperparameters go through json, which already writes floats in their shortest exact form
    return json.dumps(checkpoint_to_document(ckpt), indent=1, sort_keys=True) + "\n"


def save_checkpoint(
    path: Path | str, net: Network, optimizer: OptimizerState, *, seed: int = 0, step: int = 0,
    extra: dict[str, Any] | None = None, force: bool = False,
) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise ConfigError("checkpoint exists, use --force to overwrite", path=str(path))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_checkpoint(Checkpoint(net, optimizer, seed, step, extra or {})), encoding="utf-8")
    logger.debug(f"Saved checkpoint at step {step} to {path}")
    return path


def _require(doc: dict[str, Any], key: str) -> Any:
    if key not in doc:
        raise CheckpointError(f"missing key {key!r}")
    return doc[key]


def checkpoint_from_document(doc: Any) -> Checkpoint:
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    version = _require(doc, "schema_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}, expected {CHECKPOINT_VERSION}")
    try:
        spec = NetworkSpec.from_dict(_require(doc, "network"))
    except ConfigError as ce:
        raise CheckpointError(f"invalid network spec: {ce}") from ce
    if _require(doc, "spec_hash") != spec.spec_hash():
        raise CheckpointError(f"spec hash {doc['spec_hash']} does not match the stored network ({spec.spec_hash()})")
    params = _decode_tensors(_require(doc, "params"), "params")
    buffers = _decode_tensors(_require(doc, "buffers"), "buffers")
    net = Network(
        spec=spec, params=params, buffers=buffers,
        init_layer_norms=tuple((name, float(norm)) for name, norm in _require(doc, "init_layer_norms")),
    )
    expected = {
        f"{i}.{name}": shape
        for i, (layer, in_shape) in enumerate(zip(spec.layers, spec.shapes()))
        for name, shape in layer.param_shapes(in_shape).items()
    }
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        raise CheckpointError("stored parameters do not fit the network spec")
    opt_doc = _require(doc, "optimizer")
    try:
        optimizer = OptimizerState(**_require(opt_doc, "hyperparams"))
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"invalid optimizer state: {exc}") from exc
    optimizer.t = int(_require(opt_doc, "t"))
    optimizer.m = _decode_tensors(_require(opt_doc, "m"), "optimizer.m")
    optimizer.v = _decode_tensors(_require(opt_doc, "v"), "optimizer.v")
    return Checkpoint(
        network=net, optimizer=optimizer, seed=int(_require(doc, "seed")), step=int(_require(doc, "step")),
        extra=doc.get("extra", {}),
    )


def loads_checkpoint(text: str) -> Checkpoint:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as jde:
        # a truncated file fails at its end, pos is the character offset of the failure
        offset = len(text[:jde.pos].encode("utf-8"))
        raise CheckpointError(f"invalid or truncated checkpoint: {jde.msg}", offset=offset) from jde
    return checkpoint_from_document(doc)


def read_checkpoint(path: Path | str) -> Checkpoint:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as ose:
        raise CheckpointError(f"cannot read {path}: {ose.strerror}") from ose
    except UnicodeDecodeError as ude:
        raise CheckpointError(f"{path} is not a text checkpoint", offset=ude.start) from ude
    return loads_checkpoint(text)


def load_checkpoint(path: Path | str) -> tuple[Network, OptimizerState]:
    ckpt = read_checkpoint(path)
    return ckpt.network, ckpt.optimizer
