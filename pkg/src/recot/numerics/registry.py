"""Named parameter store with deterministic ordering."""
from __future__ import annotations

import numpy as np

from .tensor import Node, Tensor, default_dtype

__all__ = ["ParamRegistry", "DuplicateParamError"]


class DuplicateParamError(ValueError):
    """A parameter name was registered twice."""


class ParamRegistry:
    """Ordered mapping from unique names to trainable leaf nodes.

    Insertion order is the canonical order for checkpoint serialization and
    gradient clipping, so model construction must register parameters in a
    deterministic sequence.
    """

    def __init__(self):
        self._entries: dict[str, Node] = {}

    def add(self, name: str, array: np.ndarray) -> Node:
        if name in self._entries:
            raise DuplicateParamError(f"parameter {name!r} registered twice")
        node = Node(Tensor(array, dtype=default_dtype(), context=f"param:{name}"),
                    requires_grad=True)
        self._entries[name] = node
        return node

    # -- common initializers -------------------------------------------------

    def kaiming(self, name: str, shape: tuple[int, ...], rng: np.random.Generator) -> Node:
        """Fan-in scaled uniform init for conv and linear weights."""
        fan_in = int(np.prod(shape[1:])) if len(shape) > 2 else shape[0]
        limit = np.sqrt(6.0 / fan_in)
        return self.add(name, rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Node:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple[int, ...]) -> Node:
        return self.add(name, np.ones(shape))

    def normal(self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
               std: float = 0.02) -> Node:
        return self.add(name, rng.normal(0.0, std, size=shape))

    # -- access --------------------------------------------------------------

    def __getitem__(self, name: str) -> Node:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def nodes(self) -> list[Node]:
        return list(self._entries.values())

    def scalar_count(self) -> int:
        return sum(node.value.size for node in self._entries.values())

    def zero_grad(self) -> None:
        for node in self._entries.values():
            node.grad = None

    # -- serialization -------------------------------------------------------

    def export_state(self) -> dict[str, np.ndarray]:
        return {name: node.value.array.copy() for name, node in self._entries.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = [n for n in self._entries if n not in state]
        extra = [n for n in state if n not in self._entries]
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, node in self._entries.items():
            arr = np.asarray(state[name], dtype=node.value.dtype)
            if arr.shape != node.value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {node.value.shape}")
            node.value.array[...] = arr
