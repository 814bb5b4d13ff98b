import logging
from typing import Any
import zlib

import numpy as np

logger = logging.getLogger("plasticity_lab")

# named random substreams, see substream()
RNG_STREAMS = ("init", "task", "target", "train", "probe", "bandit", "redo", "restart")


class PlasticityLabError(Exception):
    """common base of all errors raised by this package"""


class ConfigError(PlasticityLabError, ValueError):
    def __init__(self, msg: str, path: str | int | None = None, value: Any = None) -> None:
        super().__init__(msg)
        self.msg = msg
        self.path = path
        self.value = value

    def __str__(self) -> str:
        where = f" at {self.path}" if self.path is not None else ""
        what = f" (got {self.value!r})" if self.value is not None else ""
        return f"{self.msg}{where}{what}"

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self})"


class ShapeError(PlasticityLabError, ValueError):
    def __init__(self, msg: str, layer: int | None = None) -> None:
        super().__init__(msg)
        self.msg = msg
        self.layer = layer

    def __str__(self) -> str:
        if self.layer is None:
            return self.msg
        return f"layer {self.layer}: {self.msg}"

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self})"


class NonFiniteError(PlasticityLabError, ValueError):
    def __init__(self, name: str) -> None:
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"non-finite values in {self.name}"

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class TargetRangeError(PlasticityLabError, ValueError):
    def __init__(self, value: float, bound: int) -> None:
        super().__init__(value)
        self.value = value
        self.bound = bound

    def __str__(self) -> str:
        return f"target {self.value} outside of two-hot support [-{self.bound}, {self.bound}]"

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self})"


class DatasetFormatError(PlasticityLabError, ValueError):
    def __init__(self, msg: str, path: Any = None, offset: int | None = None) -> None:
        super().__init__(msg)
        self.msg = msg
        self.path = path
        self.offset = offset

    def __str__(self) -> str:
        return f"{self.path}: {self.msg} (byte offset {self.offset})"

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self})"


class CheckpointError(PlasticityLabError, ValueError):
    def __init__(self, msg: str, offset: int | None = None) -> None:
        super().__init__(msg)
        self.msg = msg
        self.offset = offset

    def __str__(self) -> str:
        if self.offset is None:
            return self.msg
        return f"{self.msg} (byte offset {self.offset})"

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self})"


class PreconditionError(PlasticityLabError, RuntimeError):
    pass


class DivergenceError(PlasticityLabError, RuntimeError):
    def __init__(self, step: int, loss: float) -> None:
        super().__init__(step, loss)
        self.step = step
        self.loss = loss

    def __str__(self) -> str:
        return f"training diverged at step {self.step} (loss {self.loss})"


def as_tensor(data: Any, name: str = "tensor") -> "numpy array (float64)":
    out = np.ascontiguousarray(data, dtype=np.float64)
    if not np.isfinite(out).all():
        raise NonFiniteError(name)
    return out


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """independent generator for one named purpose, e.g. substream(seed, "task", task_index)"""
    if name not in RNG_STREAMS:
        raise ValueError(f"Unknown random stream {name!r}")
    # crc32 is stable across interpreter runs, unlike hash()
    # the key count keeps (name,) apart from (name, 0), SeedSequence pads with zeros
    entropy = [seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode()), len(keys), *keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def parse_number(val: str) -> float:
    if not val:
        raise ValueError("Value empty")
    if "/" in val:
        num, denom = val.split("/", 1)
        return float(num) / float(denom)
    elif val.endswith("%"):
        return float(val[:-1]) / 100
    return float(val)


def parse_number_list(val: str) -> list[float]:
    # "0,8,16,32" or "1/2,25%"
    if not val:
        raise ValueError("Value empty")
    out = []
    for i, part in enumerate(val.split(",")):
        try:
            out.append(parse_number(part.strip()))
        except ValueError:
            raise ValueError(f"Error parsing entry #{i+1} ({part!r})")
    return out


def parse_int_list(val: str) -> list[int]:
    # "0,1,2", fractions are an error
    out = []
    for i, number in enumerate(parse_number_list(val)):
        if not number.is_integer():
            raise ValueError(f"Entry #{i+1} ({number:g}) is not an integer")
        out.append(int(number))
    return out


def parse_switch(val: str) -> bool:
    if val.lower() in ("on", "true", "1", "yes"):
        return True
    if val.lower() in ("off", "false", "0", "no"):
        return False
    raise ValueError("Must be 'on' or 'off'")


def pretty_time_delta(seconds: float) -> str:
    seconds = abs(seconds)
    if seconds < 1:
        return f"{seconds*1000:.0f} ms"
    if seconds < 120:
        return f"{seconds:.1f} s"
    return f"{seconds/60:.1f} min"


def pretty_list(data: list[Any]) -> str:
    if not data:
        return ""
    if len(data) == 1:
        return str(data[0])
    return ", ".join(map(str, data[:-1])) + f" and {data[-1]}"
