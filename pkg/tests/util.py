import functools
import json
from pathlib import Path

import numpy as np

from qraug.autodiff import Tape, Tensor

VECTORS = Path(__file__).parent / "test-vectors"


def load_vectors(name: str) -> list[dict]:
    return json.loads((VECTORS / name).read_text(encoding="utf-8"))["tests"]


def numeric_grad(f, x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x.data``.

    ``x.data`` is rebound for each perturbation and restored afterwards.
    """
    base = x.data
    grad = np.zeros_like(base, dtype=np.float64)
    for i in np.ndindex(base.shape):
        up = base.copy()
        up[i] += eps
        x.data = up
        hi = f().item()
        down = base.copy()
        down[i] -= eps
        x.data = down
        lo = f().item()
        grad[i] = (hi - lo) / (2 * eps)
    x.data = base
    return grad


def check_grad(f, inputs: list[Tensor], rtol: float = 1e-5, atol: float = 1e-7) -> None:
    """Compare tape gradients of ``f()`` against finite differences for every input."""
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.array(t.grad) for t in inputs]
    for t, g in zip(inputs, analytic):
        np.testing.assert_allclose(g, numeric_grad(f, t), rtol=rtol, atol=atol)


def naive_levenshtein(a, b) -> int:
    """Textbook recursion, for cross-checking the dynamic program."""

    @functools.lru_cache(maxsize=None)
    def d(i: int, j: int) -> int:
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def param(shape, seed: int = 0, scale: float = 1.0) -> Tensor:
    """Float64 tensor with gradient tracking and reproducible values."""
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)
