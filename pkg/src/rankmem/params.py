"""Flat parameter storage.

All trainable scalars of a model stage live in one contiguous float64
vector with named reshaped views; gradients mirror the layout.  The
optimizer then works on two flat vectors, and freezing a stage is a
single writeable flag on the arena.
"""

from __future__ import annotations

import numpy as np


class ParamStore:
    """Named views over one flat value vector and one flat gradient vector."""

    def __init__(self, specs: list[tuple[str, tuple[int, ...], bool]]):
        self._specs = list(specs)
        self._offsets: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        total = 0
        for name, shape, _decay in specs:
            if name in self._offsets:
                raise ValueError(f"duplicate parameter {name!r}")
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            self._offsets[name] = (total, size, tuple(shape))
            total += size
        self.flat = np.zeros(total)
        self.grad = np.zeros(total)
        self.decay_mask = np.zeros(total)
        for name, shape, decay in specs:
            start, size, _ = self._offsets[name]
            self.decay_mask[start:start + size] = 1.0 if decay else 0.0

    @property
    def size(self) -> int:
        return self.flat.size

    @property
    def names(self) -> list[str]:
        return [name for name, _, _ in self._specs]

    def _view(self, base: np.ndarray, name: str) -> np.ndarray:
        start, size, shape = self._offsets[name]
        return base[start:start + size].reshape(shape)

    def __contains__(self, name: str) -> bool:
        return name in self._offsets

    def __getitem__(self, name: str) -> np.ndarray:
        return self._view(self.flat, name)

    def grad_of(self, name: str) -> np.ndarray:
        return self._view(self.grad, name)

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def freeze(self) -> None:
        self.flat.setflags(write=False)

    def thaw(self) -> None:
        self.flat.setflags(write=True)

    def export(self) -> dict[str, np.ndarray]:
        return {name: self[name].copy() for name in self.names}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name in self.names:
            view = self[name]
            view[...] = np.asarray(values[name], dtype=np.float64).reshape(view.shape)

    def check_finite_grad(self) -> None:
        """Raise with the offending parameter name on NaN/Inf gradients."""
        if np.all(np.isfinite(self.grad)):
            return
        for name in self.names:
            if not np.all(np.isfinite(self.grad_of(name))):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")

    def region(self, names: list[str], base: np.ndarray | None = None) -> np.ndarray:
        """Stacked view over consecutively laid-out same-shape parameters.

        The slice is a genuine view of the flat vector (no copies), which
        is what makes per-block parameter stacks free in the hot loop.
        """
        if not names:
            raise ValueError("empty region")
        start, size, shape = self._offsets[names[0]]
        expected = start
        for name in names:
            off, sz, shp = self._offsets[name]
            if off != expected or shp != shape:
                raise ValueError("region parameters must be contiguous and same-shape")
            expected = off + sz
        base = self.flat if base is None else base
        return base[start:expected].reshape((len(names),) + shape)

    def grad_region(self, names: list[str]) -> np.ndarray:
        return self.region(names, base=self.grad)
