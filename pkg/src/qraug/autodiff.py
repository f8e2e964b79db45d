"""Reverse-mode automatic differentiation over dense numpy arrays.

Only the operations the seq2seq model and the sentence encoders need are
provided. Operations executed inside a ``Tape`` context are recorded and can
be differentiated with ``Tape.backward``; outside of a tape nothing is
recorded, which is how decoding runs.

Example:
    with Tape() as tape:
        loss = softmax_cross_entropy(matmul(x, w), targets, pad_id=0)
    tape.backward(loss)
    w.grad  # same shape as w.data
"""

import contextlib
import contextvars
from collections.abc import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64  #: Precision used when none is requested
NEG_INF = -1e9  #: Fill value for masked logits (finite, so softmax stays finite)
LAYER_NORM_EPS = 1e-5  #: Added to the variance inside the square root

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "qraug_active_tape", default=None
)


class Tensor:
    """A dense real array with an optional gradient.

    ``data`` is never modified in place. Parameters are updated by rebinding
    ``data`` to a new array between tapes.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, *, requires_grad: bool = False, dtype=None) -> None:
        if dtype is None:
            src = np.asarray(data)
            dtype = src.dtype if src.dtype.kind == "f" else DEFAULT_DTYPE
        self.data: np.ndarray = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = object.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(
        self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Backward
    ) -> None:
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Nodes are appended in execution order, so walking them backwards is a
    reverse topological order and each node is visited exactly once.
    """

    __slots__ = ("_nodes", "_leaves", "_produced", "_token")

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise RuntimeError("tape is already active")
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def ops(self) -> list[str]:
        """Names of the recorded operations, in execution order."""
        return [n.op for n in self._nodes]

    @property
    def leaves(self) -> list[Tensor]:
        """Tracked tensors that were used as inputs but not produced here."""
        return list(self._leaves.values())

    def _record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Backward) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._produced.add(id(output))
        self._nodes.append(_Node(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        """Propagate adjoints from a scalar ``loss`` to every tracked leaf.

        Leaf gradients are assigned, not accumulated, so replaying the same
        tape gives identical gradients. Leaves the loss does not depend on
        receive zeros.

        Raises:
            ValueError: If loss is not a scalar.
            RuntimeError: If loss was not produced on this tape.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise RuntimeError("loss was not recorded on this tape")
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = adjoints.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
        for key, leaf in self._leaves.items():
            g = adjoints.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=leaf.dtype)


def active_tape() -> Tape | None:
    """Return the tape recording in the current context, if any."""
    return _ACTIVE.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the enclosed block, even inside a tape."""
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


def tensor(values, *, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a tensor from nested sequences or an array (values are copied)."""
    return Tensor(values, requires_grad=requires_grad, dtype=dtype)


def constant_like(values, like: Tensor) -> Tensor:
    """Create an untracked tensor in the dtype of ``like``."""
    return Tensor(values, dtype=like.dtype)


def _check(*items) -> None:
    for t in items:
        if not isinstance(t, Tensor):
            raise TypeError(f"expected Tensor, got {type(t).__name__}")


def _emit(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, backward: Backward) -> Tensor:
    out = Tensor._wrap(data, any(t.requires_grad for t in inputs))
    tape = _ACTIVE.get()
    if tape is not None and out.requires_grad:
        tape._record(op, inputs, out, backward)
    return out


def _trailing(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small) :] == small


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _trailing(a.shape, b.shape) or _trailing(b.shape, a.shape):
        return
    raise ValueError(
        f"{op}: shapes {a.shape} and {b.shape} do not broadcast "
        "(only trailing-dimension broadcasting is supported)"
    )


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1, *shape)).sum(axis=0)


# Elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may match the trailing dimensions of ``a``."""
    _check(a, b)
    _broadcast_check("add", a, b)
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a, b)
    _broadcast_check("sub", a, b)
    return _emit(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a, b)
    _broadcast_check("mul", a, b)
    return _emit(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant."""
    _check(a)
    c = a.dtype.type(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    _check(a)
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1 - y * y),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    _check(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _emit("gelu", (a,), y, backward)


def mask_fill(a: Tensor, mask, value: float = NEG_INF) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``.

    ``mask`` is a constant boolean array broadcastable to ``a``; masked
    entries receive no gradient.
    """
    _check(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask
    return _emit(
        "mask_fill",
        (a,),
        np.where(mask, a.dtype.type(value), a.data),
        lambda g: (g * keep,),
    )


# Shape


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    _check(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _emit("reshape", (a,), y, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    _check(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along an existing axis."""
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    _check(*tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ValueError(f"concat shape mismatch: {shapes}") from e
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tensors, y, lambda g: tuple(np.split(g, cuts, axis=axis)))


# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` is either a matrix applied to the last axis of ``a``, or a batch of
    matrices with the same leading extents as ``a``.

    Raises:
        ValueError: If inner extents or batch extents disagree.
    """
    _check(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        k, n = b.shape

        def backward(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:

        def backward(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    else:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data, backward)


# Normalization and reductions


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check(a)
    y = np.exp(a.data - _logsumexp(a.data, axis))

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), y, backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check(a)
    y = a.data - _logsumexp(a.data, axis)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (a,), y, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``.

    A constant input normalizes to zeros (``eps`` keeps the division finite).
    """
    _check(x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match feature size {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gxhat = g * gamma.data
        gx = inv_std / d * (
            d * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = g.reshape(-1, d)
        return gx, (lead * xhat.reshape(-1, d)).sum(axis=0), lead.sum(axis=0)

    return _emit("layer_norm", (x, gamma, beta), xhat * gamma.data + beta.data, backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    """Sum of all entries, as a scalar tensor."""
    _check(a)
    return _emit("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype), lambda g: (np.broadcast_to(g, a.shape),))


def mean(a: Tensor) -> Tensor:
    """Mean of all entries, as a scalar tensor."""
    _check(a)
    n = a.data.size
    return _emit(
        "mean",
        (a,),
        np.asarray(a.data.mean(), dtype=a.dtype),
        lambda g: (np.broadcast_to(g / n, a.shape),),
    )


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over axis 1 of ``x`` (batch, time, features), counting only valid positions.

    Raises:
        ValueError: If some row has no valid position.
    """
    _check(x)
    mask = np.asarray(mask, dtype=x.dtype)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ValueError(f"masked_mean expects (B, T, D) with a (B, T) mask, got {x.shape} and {mask.shape}")
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("masked_mean over an empty sequence")
    w = mask / counts
    y = np.einsum("bt,btd->bd", w, x.data)
    return _emit("masked_mean", (x,), y, lambda g: (w[:, :, None] * g[:, None, :],))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm.

    Raises:
        ValueError: If some vector has zero norm.
    """
    _check(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero vector")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _emit("l2_normalize", (x,), y, backward)


# Indexing


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` of any shape.

    The backward pass scatters (and sums) into the rows that were used.

    Raises:
        ValueError: If an id is outside ``[0, rows)``.
    """
    _check(table)
    ids = np.asarray(ids, dtype=np.int64)
    rows, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise ValueError(f"token id {bad} out of range for table with {rows} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _emit("embedding_lookup", (table,), table.data[ids], backward)


def pick(a: Tensor, ids) -> Tensor:
    """Select one entry per row along the last axis: ``out[i] = a[i, ids[i]]``."""
    _check(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ValueError(f"pick index shape {ids.shape} does not match {a.shape[:-1]}")
    idx = ids[..., None]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g[..., None], axis=-1)
        return (ga,)

    return _emit("pick", (a,), np.take_along_axis(a.data, idx, axis=-1)[..., 0], backward)


# Losses


def softmax_cross_entropy(logits: Tensor, target_ids, pad_id: int) -> Tensor:
    """Mean negative log-likelihood of ``target_ids`` over non-pad positions.

    Args:
        logits: Scores with the vocabulary on the last axis.
        target_ids: Integer ids shaped like ``logits`` without its last axis,
            or a TokenSequence.
        pad_id: Positions holding this id contribute nothing.

    Raises:
        ValueError: On shape mismatch, out-of-range ids, or an all-pad target.
    """
    _check(logits)
    target = np.asarray(getattr(target_ids, "ids", target_ids), dtype=np.int64)
    if target.shape != logits.shape[:-1]:
        raise ValueError(
            f"target shape {target.shape} does not match logits {logits.shape}"
        )
    v = logits.shape[-1]
    if target.size and (target.min() < 0 or target.max() >= v):
        raise ValueError(f"target id out of range for vocabulary of {v}")
    valid = target != pad_id
    count = int(valid.sum())
    if count == 0:
        raise ValueError("target has no non-pad positions")
    logp = logits.data - _logsumexp(logits.data, -1)
    nll = -np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    loss = np.asarray((nll * valid).sum() / count, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, target[..., None], np.take_along_axis(grad, target[..., None], -1) - 1, -1
        )
        return (grad * (valid[..., None] * (g / count)),)

    return _emit("softmax_cross_entropy", (logits,), loss, backward)


__all__ = [
    # constants
    "DEFAULT_DTYPE",
    "NEG_INF",
    "LAYER_NORM_EPS",
    # core
    "Tensor",
    "Tape",
    "active_tape",
    "no_grad",
    "tensor",
    "constant_like",
    # ops
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "gelu",
    "mask_fill",
    "reshape",
    "transpose",
    "concat",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "sum",
    "mean",
    "masked_mean",
    "l2_normalize",
    "embedding_lookup",
    "pick",
    "softmax_cross_entropy",
]
