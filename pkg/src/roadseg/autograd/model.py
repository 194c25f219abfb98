"""Parameter-bag base class shared by the trainable models."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .ops import RunningStats
from .tensor import Tensor


class Model:
    """Holds named parameters (requires-grad tensors) and norm buffers.

    Parameters are rebound wholesale after each optimizer step; buffers
    (batchnorm running stats) mutate in place during training forwards.
    """

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, RunningStats] = {}

    def add_param(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def replace_params(self, new: dict[str, Tensor]) -> None:
        if set(new) != set(self.params):
            raise ValueError("parameter names do not match the model")
        self.params = new

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.params.items()
        }

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.params.items()}
        for name, rs in self.buffers.items():
            state[f"{name}.running_mean"] = rs.mean.copy()
            state[f"{name}.running_var"] = rs.var.copy()
        return state

    def save(self, path: Union[str, Path]) -> None:
        save_checkpoint(path, self.state_arrays())

    def load(self, path: Union[str, Path]) -> None:
        self.load_state(load_checkpoint(path))

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ValueError(
                    f"checkpoint shape {state[name].shape} does not match {name!r} {p.data.shape}"
                )
            self.params[name] = Tensor(state[name], requires_grad=True)
        for name, rs in self.buffers.items():
            mean = state.get(f"{name}.running_mean")
            var = state.get(f"{name}.running_var")
            if mean is not None:
                rs.mean = mean.copy()
            if var is not None:
                rs.var = var.copy()
