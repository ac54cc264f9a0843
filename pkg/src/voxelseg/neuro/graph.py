"""Parameter container shared by all network builders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import load_parameters, save_parameters
from .tensor import Parameter


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: tuple


class NetworkGraph:
    """Ordered, uniquely named parameters plus a layer census.

    Subclasses implement ``forward``; parameters are registered in
    construction order, which is also checkpoint order.
    """

    def __init__(self):
        self._params: dict = {}
        self.layers: list = []

    def add_param(self, name: str, data, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(data, name, trainable)
        self._params[name] = p
        return p

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def parameters(self) -> list:
        return list(self._params.values())

    def trainable_parameters(self) -> list:
        return [p for p in self._params.values() if p.trainable]

    def n_trainable(self) -> int:
        return int(sum(p.size for p in self.trainable_parameters()))

    def conv_layers(self) -> list:
        return [l for l in self.layers if l.kind == "conv"]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, p in self._params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def save(self, path) -> None:
        save_parameters(self.parameters(), path)

    def load(self, path) -> None:
        stored = load_parameters(path)
        names = [n for n, _, _ in stored]
        if names != list(self._params):
            raise ValueError("checkpoint parameter names do not match this graph")
        self.load_state_dict({n: a for n, a, _ in stored})

    def forward(self, *inputs):
        raise NotImplementedError

    def __call__(self, *inputs):
        return self.forward(*inputs)
