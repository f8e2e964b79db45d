"""Adaptive moment estimation with linear warmup."""

from collections.abc import Iterable

import numpy as np

from .autodiff import Tensor

__all__ = ["Adam", "warmup_lr", "clip_grad_norm"]


def warmup_lr(step: int, lr: float, warmup_steps: int) -> float:
    """Learning rate for 1-based ``step``: linear ramp, then constant."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return lr
    return lr * step / warmup_steps


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns:
        The norm before clipping.
    """
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * p.dtype.type(factor)
    return total


class Adam:
    """Adam over a fixed list of parameter tensors.

    Parameters whose ``grad`` is None are skipped for that step.
    """

    __slots__ = ("params", "lr", "warmup_steps", "betas", "eps", "step_count", "_m", "_v")

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float,
        *,
        warmup_steps: int = 0,
        betas: tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-8,
    ) -> None:
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    @property
    def current_lr(self) -> float:
        """Rate the next step() will use."""
        return warmup_lr(self.step_count + 1, self.lr, self.warmup_steps)

    def step(self) -> float:
        """Apply one update and return the learning rate used."""
        self.step_count += 1
        t = self.step_count
        lr = warmup_lr(t, self.lr, self.warmup_steps)
        b1, b2 = self.betas
        c1 = 1 - b1**t
        c2 = 1 - b2**t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
            update = (lr / c1) * self._m[i] / (np.sqrt(self._v[i] / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        """Snapshot of the moment estimates and step count."""
        return {
            "step_count": self.step_count,
            "m": [a.copy() for a in self._m],
            "v": [a.copy() for a in self._v],
        }

    def load_state(self, state: dict) -> None:
        self.step_count = state["step_count"]
        self._m = [a.copy() for a in state["m"]]
        self._v = [a.copy() for a in state["v"]]
