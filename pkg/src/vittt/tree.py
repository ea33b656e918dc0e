"""Helpers for walking nested parameter dataclasses.

Arrays stored under two names (the shared learnable W0, for instance) are one
object; every helper here preserves that identity.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Iterator

import numpy as np


def iter_tensors(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(name, array)`` pairs in declaration order, each array once."""
    seen: set[int] = set()

    def walk(node, name):
        if node is None:
            return
        if isinstance(node, np.ndarray):
            if id(node) not in seen:
                seen.add(id(node))
                yield name, node
            return
        if isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                yield from walk(item, f"{name}.{i}" if name else str(i))
            return
        if dataclasses.is_dataclass(node):
            for f in dataclasses.fields(node):
                yield from walk(getattr(node, f.name), f"{name}.{f.name}" if name else f.name)

    yield from walk(obj, prefix)


def tree_map(fn: Callable[[str, np.ndarray], object], obj, prefix: str = ""):
    """Rebuild ``obj`` with every array replaced by ``fn(name, array)``.

    ``fn`` is called once per distinct array; aliases receive the same result.
    """
    memo: dict[int, object] = {}
    names = {id(arr): name for name, arr in iter_tensors(obj, prefix)}

    def go(node):
        if node is None:
            return None
        if isinstance(node, np.ndarray):
            key = id(node)
            if key not in memo:
                memo[key] = fn(names[key], node)
            return memo[key]
        if isinstance(node, list):
            return [go(item) for item in node]
        if isinstance(node, tuple):
            return tuple(go(item) for item in node)
        if dataclasses.is_dataclass(node):
            return dataclasses.replace(node, **{f.name: go(getattr(node, f.name)) for f in dataclasses.fields(node)})
        return node

    return go(obj)


def count(obj) -> int:
    return sum(arr.size for _, arr in iter_tensors(obj))
