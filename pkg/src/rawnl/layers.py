"""Parameter storage, initialization and the simplified ConvNeXt block."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .core import Tensor, add, conv2d, gelu, ntf
from .core.tensor import ShapeError

CONVNEXT_EXPANSION = 4


@dataclass
class ParamSpec:
    shape: tuple
    fan_in: int = 1
    init: str = "kaiming"  # "kaiming" or "zeros"


@dataclass
class Param:
    value: Tensor
    m: np.ndarray
    v: np.ndarray

    @property
    def grad(self) -> np.ndarray:
        if self.value.grad is None:
            self.value.zero_grad()
        return self.value.grad


class ParamStore:
    """Ordered name -> (value, grad, m, v) registry of learnable tensors."""

    def __init__(self):
        self._params: "OrderedDict[str, Param]" = OrderedDict()
        self.adam_t = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = Param(t, np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name].value
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def param(self, name: str) -> Param:
        return self._params[name]

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_elements(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.value.zero_grad()

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        out.adam_t = self.adam_t
        for name, p in self._params.items():
            out.add(name, p.value.data.astype(dtype))
            q = out._params[name]
            q.m, q.v = p.m.astype(dtype), p.v.astype(dtype)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(np.float32)

    def set(self, name: str, value) -> None:
        p = self._params[name]
        arr = np.asarray(value, dtype=p.value.dtype)
        if arr.shape != p.value.shape:
            raise ShapeError(f"{name}: shape {arr.shape} != {p.value.shape}")
        p.value.data[...] = arr

    # --- checkpoints ---

    def save(self, directory, config: Optional[dict] = None, moments: bool = False) -> None:
        d = Path(directory)
        (d / "params").mkdir(parents=True, exist_ok=True)
        if moments:
            (d / "m").mkdir(exist_ok=True)
            (d / "v").mkdir(exist_ok=True)
        entries = []
        for name, p in self._params.items():
            ntf.save(d / "params" / f"{name}.ntf", p.value.data)
            if moments:
                ntf.save(d / "m" / f"{name}.ntf", p.m)
                ntf.save(d / "v" / f"{name}.ntf", p.v)
            entries.append({"name": name, "shape": list(p.value.shape)})
        manifest = {"params": entries, "config": config, "adam_t": self.adam_t, "moments": moments}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> tuple["ParamStore", Optional[dict]]:
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        store = cls()
        store.adam_t = manifest.get("adam_t", 0)
        for entry in manifest["params"]:
            name = entry["name"]
            arr = ntf.load(d / "params" / f"{name}.ntf")
            if list(arr.shape) != entry["shape"]:
                raise ShapeError(f"{name}: file shape {arr.shape} != manifest {entry['shape']}")
            store.add(name, arr)
            if manifest.get("moments"):
                p = store._params[name]
                p.m = ntf.load(d / "m" / f"{name}.ntf")
                p.v = ntf.load(d / "v" / f"{name}.ntf")
        return store, manifest.get("config")


def init_params(specs: "OrderedDict[str, ParamSpec]", seed: int) -> ParamStore:
    """Kaiming-uniform weights with bound 1/sqrt(fan_in); biases and zero-marked tensors start at 0."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, spec in specs.items():
        if spec.init == "zeros":
            value = np.zeros(spec.shape, dtype=np.float32)
        else:
            bound = 1.0 / np.sqrt(spec.fan_in)
            value = rng.uniform(-bound, bound, spec.shape).astype(np.float32)
        store.add(name, value)
    return store


def conv_specs(prefix: str, cin: int, cout: int, k: int, groups: int = 1,
               zero: bool = False) -> "OrderedDict[str, ParamSpec]":
    fan_in = (cin // groups) * k * k
    return OrderedDict([
        (f"{prefix}.weight", ParamSpec((cout, cin // groups, k, k), fan_in, "zeros" if zero else "kaiming")),
        (f"{prefix}.bias", ParamSpec((cout,), fan_in, "zeros")),
    ])


def conv(x: Tensor, params: ParamStore, prefix: str, padding: int = 0, stride: int = 1, groups: int = 1) -> Tensor:
    return conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride=stride,
                  padding=padding, groups=groups)


def convnext_specs(prefix: str, c: int) -> "OrderedDict[str, ParamSpec]":
    specs = OrderedDict()
    specs.update(conv_specs(f"{prefix}.dw", c, c, 7, groups=c))
    specs.update(conv_specs(f"{prefix}.pw1", c, CONVNEXT_EXPANSION * c, 1))
    specs.update(conv_specs(f"{prefix}.pw2", CONVNEXT_EXPANSION * c, c, 1))
    return specs


def convnext_forward(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """Normalization-free ConvNeXt block: x + pw2(gelu(pw1(dw7x7(x))))."""
    c = params[f"{prefix}.dw.weight"].shape[0]
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"{prefix}: expected {c} input channels, got shape {x.shape}")
    h = conv(x, params, f"{prefix}.dw", padding=3, groups=c)
    h = gelu(conv(h, params, f"{prefix}.pw1"))
    h = conv(h, params, f"{prefix}.pw2")
    return add(x, h)
