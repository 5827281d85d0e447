"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations take plain tensors or tensors bound to a Tape. When any operand is
bound, the result is recorded on that tape so ``backward`` can later push the
adjoint of a scalar loss back to every watched leaf.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

HEADER_DTYPE = "<u4"
PAYLOAD_DTYPE = "<f4"
HEADER_ITEM_BYTES = 4
PAYLOAD_ITEM_BYTES = 4


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


class Tensor:
    """
    Immutable n-dimensional array of 64-bit floats.

    A tensor may be bound to a Tape (``tape`` and ``index`` set), in which case
    operations on it are recorded for differentiation.
    """

    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape=None, index=None):
        array = np.array(data, dtype=np.float64)
        array.flags.writeable = False
        self.data = array
        self.tape = tape
        self.index = index

    @classmethod
    def _wrap(cls, array, tape=None, index=None):
        # takes ownership of a freshly computed array, no copy
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        array.flags.writeable = False
        tensor.data = array
        tensor.tape = tape
        tensor.index = index
        return tensor

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(shape))

    @classmethod
    def ones(cls, shape) -> "Tensor":
        return cls._wrap(np.ones(shape))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(
                f"item() needs a single element, got shape {self.shape}"
            )
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        bound = f", tape node {self.index}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{bound})"


@dataclass
class Node:
    op: str
    inputs: Tuple[Optional[int], ...]
    shape: Tuple[int, ...]
    backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]]


class Tape:
    """
    Ordered record of operations. Nodes are appended as operations run, so every
    node's operands precede it.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self):
        return len(self.nodes)

    def watch(self, tensor: Tensor) -> Tensor:
        """
        Mark ``tensor`` as a leaf whose gradient ``backward`` will report.
        """
        self.nodes.append(Node("leaf", (), tensor.shape, None))
        return Tensor._wrap(tensor.data, self, len(self.nodes) - 1)

    def watch_all(self, tensors: Iterable[Tensor]) -> List[Tensor]:
        return [self.watch(tensor) for tensor in tensors]

    def record(self, op, operands, value, backward) -> Tensor:
        inputs = tuple(
            operand.index if operand.tape is self else None for operand in operands
        )
        self.nodes.append(Node(op, inputs, tuple(np.shape(value)), backward))
        return Tensor._wrap(value, self, len(self.nodes) - 1)


class Gradients:
    """Gradient per watched leaf, looked up by the leaf tensor itself."""

    def __init__(self, tape: Tape, by_index: Dict[int, Tensor]):
        self._tape = tape
        self._by_index = by_index

    def __getitem__(self, leaf: Tensor) -> Tensor:
        if leaf.tape is not self._tape or leaf.index not in self._by_index:
            raise ContractError("tensor is not a leaf watched on this tape")
        return self._by_index[leaf.index]

    def __len__(self):
        return len(self._by_index)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _tape_of(operands: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for operand in operands:
        if operand.tape is None:
            continue
        if tape is not None and operand.tape is not tape:
            raise ContractError("operands are recorded on different tapes")
        tape = operand.tape
    return tape


def _result(op, operands, value, backward) -> Tensor:
    tape = _tape_of(operands)
    if tape is None:
        return Tensor._wrap(value)
    return tape.record(op, operands, value, backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", (a, b), a.data * b.data, backward)


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _result("scale", (a,), a.data * factor, backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", (a, b), a.data @ b.data, backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def backward(g):
        return (g * mask,)

    return _result("relu", (a,), np.maximum(a.data, 0.0), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _result("reshape", (a,), value, backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(tensor) for tensor in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        value = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    except ValueError as ex:
        raise ShapeError(f"concat: {ex}") from None
    sizes = [tensor.shape[axis] for tensor in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result("concat", tensors, value, backward)


def total(a) -> Tensor:
    """Sum of all elements, as a scalar."""
    a = _as_tensor(a)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", (a,), np.asarray(a.data.sum()), backward)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    count = a.size

    def backward(g):
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result("mean", (a,), np.asarray(a.data.mean()), backward)


def row_norms_sum(a) -> Tensor:
    """
    Sum over rows of the Euclidean norm of each row. Rows with zero norm get a
    zero subgradient.
    """
    a = _as_tensor(a)
    rows = a.data.reshape(a.shape[0], -1) if a.ndim > 1 else a.data.reshape(1, -1)
    norms = np.sqrt((rows * rows).sum(axis=1))

    def backward(g):
        safe = np.where(norms > 0.0, norms, 1.0)
        unit = np.where(norms[:, None] > 0.0, rows / safe[:, None], 0.0)
        return ((g * unit).reshape(a.shape),)

    return _result("row_norms_sum", (a,), np.asarray(norms.sum()), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """
    Mean over the batch of -log softmax(logits)[label], stabilized by
    subtracting each row's maximum.

    :param logits: [B x K] scores
    :param labels: B integer class indices in [0, K)
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch x classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {batch}")
    if batch == 0:
        raise ContractError("cross entropy of an empty batch")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise DomainError(f"labels must lie in [0, {classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sums = exp.sum(axis=1)
    rows = np.arange(batch)
    losses = np.log(sums) - shifted[rows, labels]

    def backward(g):
        grad = exp / sums[:, None]
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _result(
        "softmax_cross_entropy", (logits,), np.asarray(losses.mean()), backward
    )


def softmax(logits) -> np.ndarray:
    """Row-wise softmax probabilities (no tape recording)."""
    data = _as_tensor(logits).data
    shifted = data - data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """
    Reverse pass from a scalar ``loss`` recorded on ``tape``.

    Every node between the loss and the start of the tape is visited once, in
    reverse recording order. Watched leaves that the loss does not reach get a
    zero gradient.
    """
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    adjoints: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    adjoints[loss.index] = np.ones(loss.shape)
    for index in range(loss.index, -1, -1):
        node = tape.nodes[index]
        grad = adjoints[index]
        if grad is None or node.backward is None:
            continue
        for operand, operand_grad in zip(node.inputs, node.backward(grad)):
            if operand is None or operand_grad is None:
                continue
            if adjoints[operand] is None:
                adjoints[operand] = operand_grad
            else:
                adjoints[operand] = adjoints[operand] + operand_grad

    gradients = {}
    for index, node in enumerate(tape.nodes):
        if node.op != "leaf":
            continue
        grad = adjoints[index]
        gradients[index] = Tensor._wrap(np.zeros(node.shape) if grad is None else grad)
    return Gradients(tape, gradients)


def sgd_step(param: Tensor, grad: Tensor, lr: float) -> Tensor:
    if param.shape != grad.shape:
        raise ShapeError(f"sgd_step: parameter {param.shape} vs gradient {grad.shape}")
    return Tensor._wrap(param.data - lr * grad.data)


def serialized_nbytes(shape: Sequence[int]) -> int:
    """Size of one tensor record: rank, dims, then one float32 per element."""
    size = int(np.prod(shape, dtype=np.int64))
    return HEADER_ITEM_BYTES * (1 + len(shape)) + PAYLOAD_ITEM_BYTES * size


def to_bytes(tensor: Tensor) -> bytes:
    header = np.array([tensor.ndim, *tensor.shape], dtype=HEADER_DTYPE)
    return header.tobytes() + tensor.data.astype(PAYLOAD_DTYPE).tobytes()


def from_bytes(blob: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """
    Decode the tensor record starting at ``offset``.

    :return: the tensor (widened back to float64) and the offset just past it
    """
    (rank,) = np.frombuffer(blob, dtype=HEADER_DTYPE, count=1, offset=offset)
    offset += HEADER_ITEM_BYTES
    dims = np.frombuffer(blob, dtype=HEADER_DTYPE, count=int(rank), offset=offset)
    shape = tuple(int(d) for d in dims)
    offset += HEADER_ITEM_BYTES * int(rank)
    count = int(np.prod(shape, dtype=np.int64))
    values = np.frombuffer(blob, dtype=PAYLOAD_DTYPE, count=count, offset=offset)
    offset += PAYLOAD_ITEM_BYTES * count
    return Tensor(values.reshape(shape)), offset
