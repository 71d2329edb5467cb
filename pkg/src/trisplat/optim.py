"""Adaptive moment estimation over named parameter groups.

State (first/second moments) lives per group and survives soup resizes via
:meth:`Adam.remap`, where surviving rows keep their moments and fresh rows
start at zero. Learning rates may be constants or step-indexed callables.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

LrLike = float | Callable[[int], float]


def exponential_lr(init: float, final: float, total_steps: int) -> Callable[[int], float]:
    """Exponential decay from ``init`` to ``final`` over ``total_steps``."""
    if total_steps <= 0:
        return lambda step: init
    ratio = final / init
    return lambda step: init * ratio ** (min(step, total_steps) / total_steps)


class Adam:
    def __init__(
        self,
        shapes: dict[str, tuple],
        lrs: dict[str, LrLike],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-15,
    ):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of every group present in ``grads``."""
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            lr = self.lrs[name]
            lr_t = lr(self.t - 1) if callable(lr) else lr
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[name] -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def remap(self, index_map: np.ndarray, groups: list[str] | None = None) -> None:
        """Rebuild moment rows after a soup resize.

        ``index_map[i_new]`` is the old row feeding new row i_new, or -1 for a
        fresh row (zero moments). Applies to every group whose leading axis
        matched the old row count (or the explicit ``groups`` list).
        """
        index_map = np.asarray(index_map, dtype=np.int64)
        old = index_map[index_map >= 0]
        names = groups if groups is not None else list(self.m.keys())
        for name in names:
            for store in (self.m, self.v):
                arr = store[name]
                new = np.zeros((index_map.size,) + arr.shape[1:])
                keep = index_map >= 0
                new[keep] = arr[index_map[keep]]
                store[name] = new

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        for k in list(self.m.keys()):
            self.m[k] = np.array(arrays[f"m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"v.{k}"], dtype=np.float64)
