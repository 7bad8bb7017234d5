"""Named parameter storage and the Adam update."""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .autodiff import Node, parameter


class ParamStore:
    """Named trainable leaves plus Adam moment buffers and a step counter."""

    def __init__(self) -> None:
        self.params: dict[str, Node] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = parameter(value)
        self.params[name] = node
        self.m[name] = np.zeros_like(node.value)
        self.v[name] = np.zeros_like(node.value)
        return node

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def frozen(self) -> dict[str, Node]:
        """Constant views of every parameter: usable in a graph, never updated by it."""
        return {k: Node(p.value) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items()}

    def n_coords(self) -> int:
        return int(np.sum([p.value.size for p in self.params.values()]))

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "params": {k: p.value.tolist() for k, p in self.params.items()},
            "m": {k: a.tolist() for k, a in self.m.items()},
            "v": {k: a.tolist() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: Mapping) -> None:
        if set(state["params"]) != set(self.params):
            raise ValueError("parameter names do not match the store layout")
        for k, p in self.params.items():
            arr = np.asarray(state["params"][k], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.value.shape}")
            p.value[...] = arr
            self.m[k] = np.asarray(state["m"][k], dtype=np.float64).reshape(arr.shape)
            self.v[k] = np.asarray(state["v"][k], dtype=np.float64).reshape(arr.shape)
            p.zero_grad()
        self.step = int(state["step"])


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps_adam: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update, in place. Gradients are left as they are."""
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps_adam)
    return store
