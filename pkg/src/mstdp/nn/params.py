from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Parameter


class ParameterStore:
    """Named, ordered collection of parameters shared by all layers of a model."""

    def __init__(self, seed: int = 0):
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        self.rng = np.random.default_rng(seed)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, name: str, value) -> Parameter:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        p = Parameter(np.array(value, dtype=np.float64), name=name)
        self.params[name] = p
        return p

    def glorot(self, name: str, shape: tuple) -> Parameter:
        fan_in, fan_out = shape[0], shape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-limit, limit, size=shape))

    def normal(self, name: str, shape: tuple, std: float) -> Parameter:
        return self.add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape: tuple) -> Parameter:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> Parameter:
        return self.add(name, np.ones(shape))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_values(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state(self, state: dict):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if self.params[k].data.shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} != {self.params[k].data.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)
