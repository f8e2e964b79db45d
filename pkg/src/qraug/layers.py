"""Parameter containers and the transformer building blocks.

Layers are plain functions over a ``Params`` mapping; parameter names are
dotted paths (``enc.0.attn.q.w``) so checkpoints stay readable.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "INIT_STD",
    "Params",
    "linear",
    "layer_norm",
    "attention",
    "feed_forward",
    "sinusoidal_positions",
    "causal_mask",
]

INIT_STD = 0.02  #: Standard deviation of weight matrices at initialization


class Params:
    """Ordered name to Tensor mapping with seeded initialization."""

    __slots__ = ("_tensors", "_rng", "dtype")

    def __init__(self, rng: np.random.Generator | None = None, dtype=np.float32) -> None:
        self._tensors: dict[str, Tensor] = {}
        self._rng = rng
        self.dtype = np.dtype(dtype)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"parameter {name} defined twice")
        t = Tensor(data, requires_grad=True, dtype=self.dtype)
        self._tensors[name] = t
        return t

    def normal(self, name: str, shape: tuple[int, ...], std: float = INIT_STD) -> Tensor:
        if self._rng is None:
            raise RuntimeError("params were created without a generator")
        return self._add(name, self._rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(name, np.ones(shape))

    def add_linear(self, name: str, d_in: int, d_out: int) -> None:
        self.normal(f"{name}.w", (d_in, d_out))
        self.zeros(f"{name}.b", (d_out,))

    def add_norm(self, name: str, d: int) -> None:
        self.ones(f"{name}.g", (d,))
        self.zeros(f"{name}.b", (d,))

    def arrays(self) -> dict[str, np.ndarray]:
        """Copies of the current values, by name."""
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def assign(self, arrays: dict[str, np.ndarray]) -> None:
        """Replace values in place of the existing tensors.

        Raises:
            ValueError: If names or shapes differ from the defined parameters.
        """
        missing = self._tensors.keys() - arrays.keys()
        extra = arrays.keys() - self._tensors.keys()
        if missing or extra:
            raise ValueError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self._tensors.items():
            a = np.asarray(arrays[name])
            if a.shape != t.shape:
                raise ValueError(f"parameter {name} has shape {a.shape}, expected {t.shape}")
            t.data = a.astype(self.dtype, copy=True)


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def layer_norm(x: Tensor, params: Params, name: str) -> Tensor:
    return ad.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def attention(
    query: Tensor, memory: Tensor, params: Params, name: str, n_heads: int, blocked: np.ndarray
) -> Tensor:
    """Multi-head scaled dot-product attention.

    Args:
        query: (batch, tq, d) inputs the queries come from.
        memory: (batch, tk, d) inputs the keys and values come from.
        params: Holds ``{name}.q``, ``.k``, ``.v`` and ``.o`` projections.
        name: Parameter prefix.
        n_heads: Head count; must divide d.
        blocked: Boolean (batch, tq, tk), true where attention is not allowed.
    """
    b, tq, d = query.shape
    if d % n_heads:
        raise ValueError(f"model width {d} is not divisible by {n_heads} heads")
    q = _heads(linear(query, params, f"{name}.q"), n_heads)
    k = ad.transpose(_heads(linear(memory, params, f"{name}.k"), n_heads), (0, 1, 3, 2))
    v = _heads(linear(memory, params, f"{name}.v"), n_heads)
    scores = ad.scale(ad.matmul(q, k), 1.0 / np.sqrt(d // n_heads))
    weights = ad.softmax(ad.mask_fill(scores, blocked[:, None, :, :]))
    out = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3))
    return linear(ad.reshape(out, (b, tq, d)), params, f"{name}.o")


def feed_forward(x: Tensor, params: Params, name: str) -> Tensor:
    return linear(ad.gelu(linear(x, params, f"{name}.in")), params, f"{name}.out")


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    """Fixed (length, d) sine/cosine position table."""
    pos = np.arange(length)[:, None]
    rates = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: d // 2])
    return table


def causal_mask(length: int) -> np.ndarray:
    """(length, length) boolean, true above the diagonal."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)
