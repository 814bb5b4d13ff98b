"""JSON config documents for ExperimentConfig.

A document is an object with `"schema_version": 1` and the optional sections
`network`, `task`, `optimizer`, `regularizer`, `reset`, `loss`, `training`
and `seeds`. Leaf keys that exist in exactly one section may also be given at
the top level, e.g. `{"schema_version": 1, "lr": 0.01}`.

The network section is either a full spec (`layers`, `input_shape`, ...) or a
builder description (`{"builder": "mlp", "width": 64, "depth": 2}`) whose input
and output sizes follow from the dataset and the loss head.
"""
import dataclasses
import json
from pathlib import Path
import types
from typing import Any, Union, get_args, get_origin

from .harness import ExperimentConfig, LossConfig, TrainingConfig
from .network import NetworkSpec, cnn_spec, mlp_spec
from .optimizers import OptimizerConfig, RegularizerConfig, ResetPolicy
from .tasks import DatasetConfig, RegressionTargetGen, TaskConfig
from .utils import ConfigError

SCHEMA_VERSION = 1

SECTIONS: dict[str, type] = {
    "task": TaskConfig,
    "optimizer": OptimizerConfig,
    "regularizer": RegularizerConfig,
    "reset": ResetPolicy,
    "loss": LossConfig,
    "training": TrainingConfig,
}
# dataclass-valued fields inside sections
NESTED: dict[type, dict[str, type]] = {
    TaskConfig: {"dataset": DatasetConfig, "target": RegressionTargetGen},
}
SPEC_KEYS = ("layers", "input_shape", "init", "seed")
BUILDER_KEYS = ("builder", "width", "depth", "channels", "dense_width", "activation", "norm", "input_offset", "init", "seed")
BUILDERS = ("mlp", "cnn")
TOP_LEVEL_KEYS = ("schema_version", "network", "seeds", *SECTIONS)


def _leaf_paths(cls: type, prefix: str) -> list[str]:
    out = []
    for f in dataclasses.fields(cls):
        nested = NESTED.get(cls, {}).get(f.name)
        if nested is DatasetConfig:
            out += _leaf_paths(nested, f"{prefix}.{f.name}")
        elif nested is None:
            out.append(f"{prefix}.{f.name}")
    return out


def _shorthand_index() -> dict[str, str]:
    """leaf name -> dotted path, for names that occur in exactly one place"""
    seen: dict[str, list[str]] = {}
    for section, cls in SECTIONS.items():
        for path in _leaf_paths(cls, section):
            seen.setdefault(path.rsplit(".", 1)[1], []).append(path)
    return {name: paths[0] for name, paths in seen.items() if len(paths) == 1 and name not in TOP_LEVEL_KEYS}


SHORTHAND = _shorthand_index()


def _expand_shorthand(doc: dict[str, Any]) -> dict[str, Any]:
    """move top-level shorthand leaves into (copies of) their sections"""
    out = {
        key: dict(value) if key in SECTIONS and isinstance(value, dict) else value
        for key, value in doc.items()
        if key in TOP_LEVEL_KEYS or key not in SHORTHAND
    }
    for key, value in doc.items():
        if key in TOP_LEVEL_KEYS or key not in SHORTHAND:
            continue
        *parents, leaf = SHORTHAND[key].split(".")
        node = out
        for p in parents:
            child = node.get(p)
            if child is None:
                child = {}
            elif not isinstance(child, dict):
                raise ConfigError("section must be an object", path=p, value=child)
            node[p] = child = dict(child)
            node = child
        if leaf in node:
            raise ConfigError(f"{key} is given twice", path=SHORTHAND[key])
        node[leaf] = value
    return out


def _check_keys(data: Any, allowed: tuple[str, ...] | list[str], path: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError("expected an object", path=path or "<root>", value=data)
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r}", path=f"{path}.{key}" if path else key, value=data[key])


def _check_unknown(doc: dict[str, Any]) -> None:
    _check_keys(doc, TOP_LEVEL_KEYS, "")
    for section, cls in SECTIONS.items():
        if section in doc:
            _check_section_keys(doc[section], cls, section)
    if "network" in doc:
        net = doc["network"]
        _check_keys(net, SPEC_KEYS if isinstance(net, dict) and "layers" in net else BUILDER_KEYS, "network")


def _check_section_keys(data: Any, cls: type, path: str) -> None:
    _check_keys(data, [f.name for f in dataclasses.fields(cls)], path)
    for name, nested in NESTED.get(cls, {}).items():
        if data.get(name) is not None:
            _check_section_keys(data[name], nested, f"{path}.{name}")


def _coerce(value: Any, annotation: Any, path: str) -> Any:
    origin = get_origin(annotation)
    if origin in (Union, types.UnionType):
        options = get_args(annotation)
        if value is None:
            if type(None) in options:
                return None
            raise ConfigError("value must not be null", path=path)
        inner = [o for o in options if o is not type(None)]
        return _coerce(value, inner[0], path)
    if value is None:
        raise ConfigError("value must not be null", path=path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError("expected a list", path=path, value=value)
        item = get_args(annotation)[0]
        return tuple(_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected true or false", path=path, value=value)
        return value
    if annotation is int:
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer", path=path, value=value)
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("expected a number", path=path, value=value)
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError("expected a string", path=path, value=value)
        return value
    return value


def _parse_section(cls: type, data: dict[str, Any], path: str, applied: set[str]) -> Any:
    kwargs = {}
    for f in dataclasses.fields(cls):
        fpath = f"{path}.{f.name}"
        nested = NESTED.get(cls, {}).get(f.name)
        if f.name not in data:
            applied.add(fpath)
            continue
        value = data[f.name]
        if nested is not None:
            kwargs[f.name] = None if value is None else _parse_section(nested, value, fpath, applied)
        else:
            kwargs[f.name] = _coerce(value, f.type, fpath)
    return cls(**kwargs)


def _head_width(task: TaskConfig, loss: LossConfig) -> int:
    if loss.kind == "two_hot":
        return loss.codec.num_atoms
    if task.target is None:
        return task.dataset.num_classes
    return 1


def _input_shape(dataset: DatasetConfig) -> tuple[int, ...]:
    if dataset.name == "mnist":
        return (1, 28, 28)
    if dataset.name == "cifar10":
        return (3, 32, 32)
    return (dataset.input_dim,)


def _parse_network(data: dict[str, Any] | None, task: TaskConfig, loss: LossConfig, applied: set[str]) -> NetworkSpec:
    if data is not None and "layers" in data:
        for key in ("init", "seed"):
            if key not in data:
                applied.add(f"network.{key}")
        return NetworkSpec.from_dict(data)
    data = {} if data is None else data
    for key in BUILDER_KEYS:
        if key not in data:
            applied.add(f"network.{key}")
    builder = data.get("builder", "mlp")
    if builder not in BUILDERS:
        raise ConfigError(f"builder must be one of {BUILDERS}", path="network.builder", value=builder)
    input_shape = _input_shape(task.dataset)
    outputs = _head_width(task, loss)
    common = {
        "activation": _coerce(data.get("activation", "relu"), str, "network.activation"),
        "norm": _coerce(data.get("norm"), str | None, "network.norm"),
        "init": _coerce(data.get("init", "he_gaussian"), str, "network.init"),
        "seed": _coerce(data.get("seed", 0), int, "network.seed"),
    }
    depth = _coerce(data.get("depth", 4), int, "network.depth")
    if depth < 1:
        raise ConfigError("depth must be at least 1", path="network.depth", value=depth)
    if builder == "cnn":
        if len(input_shape) != 3:
            raise ConfigError("the cnn builder needs an image dataset", path="network.builder", value=builder)
        return cnn_spec(
            input_shape, outputs, _coerce(data.get("channels", 32), int, "network.channels"), depth,
            dense_width=_coerce(data.get("dense_width", 256), int, "network.dense_width"), **common,
        )
    input_dim = 1
    for d in input_shape:
        input_dim *= d
    return mlp_spec(
        input_dim, outputs, _coerce(data.get("width", 256), int, "network.width"), depth,
        input_offset=_coerce(data.get("input_offset", 0.0), float, "network.input_offset"), **common,
    )


def parse_document(doc: Any) -> tuple[ExperimentConfig, set[str]]:
    """validate a decoded document; returns the config and the dotted paths that were defaulted"""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object", value=type(doc).__name__)
    doc = _expand_shorthand(doc)
    _check_unknown(doc)
    applied: set[str] = set()
    sections = {
        name: _parse_section(cls, doc.get(name, {}), name, applied)
        for name, cls in SECTIONS.items()
    }
    for name in SECTIONS:
        if name not in doc:
            applied.add(name)
    network = _parse_network(doc.get("network"), sections["task"], sections["loss"], applied)
    if "seeds" in doc:
        seeds = _coerce(doc["seeds"], tuple[int, ...], "seeds")
    else:
        seeds = (0,)
        applied.add("seeds")
    if "schema_version" not in doc:
        raise ConfigError("missing required key", path="schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version, expected {SCHEMA_VERSION}", path="schema_version", value=doc["schema_version"])
    return ExperimentConfig(network=network, seeds=seeds, **sections), applied


def parse_config(text: str) -> tuple[ExperimentConfig, set[str]]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as jde:
        raise ConfigError(f"invalid JSON: {jde.msg}", path=f"line {jde.lineno} column {jde.colno}") from jde
    return parse_document(doc)


def load_config(path: Path | str) -> tuple[ExperimentConfig, set[str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as ose:
        raise ConfigError(f"cannot read config: {ose.strerror}", path=str(path)) from ose
    return parse_config(text)


def config_to_document(config: ExperimentConfig) -> dict[str, Any]:
    doc: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "network": config.network.to_dict()}
    for name in SECTIONS:
        doc[name] = dataclasses.asdict(getattr(config, name))
    doc["seeds"] = list(config.seeds)
    return doc


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config_to_document(config), indent=2, sort_keys=True) + "\n"
