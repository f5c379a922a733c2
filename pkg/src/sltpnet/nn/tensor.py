from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(eq=False)
class Tensor:
    """Array of reals with an optional gradient buffer of the same shape.

    Activations use the N x C x D x H x W layout, with W the x axis (fastest
    in memory), H the y axis and D the z axis.
    """

    data: np.ndarray
    grad: Optional[np.ndarray] = None
    trainable: bool = True
    name: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ValueError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"{self.name or 'tensor'}: gradient shape {g.shape} != {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None, self.trainable, self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), None, self.trainable, self.name)

    def __repr__(self):
        kind = "param" if self.trainable else "buffer"
        return f"Tensor({self.name!r}, shape={self.shape}, dtype={self.data.dtype}, {kind})"
