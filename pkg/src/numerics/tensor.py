from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union
from logging import Logger, basicConfig, getLogger, INFO
from contextvars import ContextVar, Token
from dataclasses import dataclass
from zlib import crc32
import numpy as np

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

DTYPE = np.float64
GELU_COEF: float = float(np.sqrt(2.0 / np.pi))

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """
    Exception raised when operand shapes are not conformable.
    """

    pass


class IndexRangeError(ValueError):
    """
    Exception raised when a gather index falls outside the table.
    """

    pass


class TapeError(Exception):
    """
    Exception raised on misuse of a Tape (nesting, foreign or non-scalar loss).
    """

    pass


class Tensor:
    """
    Dense 64-bit array with an optional place on the active Tape.

    Attributes:
        data (np.ndarray): Row-major float64 storage.
        requires_grad (bool): True for trainable leaves and for values derived from them.
        is_leaf (bool): False for values produced by a recorded primitive.
        grad (np.ndarray): Gradient written by the last backward pass.
        version (int): Incremented on every in-place assignment.
    """

    __array_priority__ = 100

    def __init__(
        self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.ascontiguousarray(np.array(data, dtype=DTYPE))
        self.requires_grad: bool = requires_grad
        self.is_leaf: bool = True
        self.name: Optional[str] = name
        self.grad: Optional[np.ndarray] = None
        self.version: int = 0

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        """Returns a copy of the underlying array."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def assign(self, value: np.ndarray) -> None:
        """
        Replaces the stored values in place and bumps the version counter.
        Args:
            value: Array with exactly this tensor's shape.
        """
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self.data.shape:
            raise ShapeError(
                f"cannot assign shape {value.shape} to tensor "
                f"'{self.name}' of shape {self.data.shape}"
            )
        self.data = np.ascontiguousarray(value.copy())
        self.version += 1

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __truediv__(self, other: Union[float, int]) -> "Tensor":
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        return swapaxes(self, axis1, axis2)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    """Creates a trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data: ArrayLike) -> Tensor:
    """Creates a non-trainable value."""
    return data if isinstance(data, Tensor) else Tensor(data)


@dataclass
class Node:
    """One recorded primitive: output, inputs and the local vector-Jacobian product."""

    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward_fn: BackwardFn


_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class Tape:
    """
    Append-only record of primitives executed while the tape is active.

    A tape is single-owner: it is bound to the current context on entry and
    cannot be nested. Primitives run outside any tape compute values only.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self._leaves: Dict[int, Tensor] = {}
        self._outputs: Dict[int, Tensor] = {}
        self._token: Optional[Token] = None

    def __enter__(self) -> "Tape":
        if _ACTIVE_TAPE.get() is not None:
            raise TapeError("a tape is already active in this context")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type: type, exc_value: Exception, traceback: any) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn
    ) -> None:
        for tensor in inputs:
            if tensor.requires_grad and tensor.is_leaf:
                self._leaves.setdefault(id(tensor), tensor)
        self.nodes.append(Node(op, output, inputs, backward_fn))
        self._outputs[id(output)] = output

    @property
    def leaves(self) -> List[Tensor]:
        """Trainable leaves touched by at least one recorded primitive."""
        return list(self._leaves.values())

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._outputs


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


@dataclass
class MatmulRecord:
    operands: Tuple[Optional[str], Optional[str]]
    multiply_adds: int


class MatmulCounter:
    """
    Records the multiply-add count of every matmul executed while active.
    Operands are identified by tensor name (None for unnamed intermediates).
    """

    def __init__(self) -> None:
        self.records: List[MatmulRecord] = []
        self._token: Optional[Token] = None

    def __enter__(self) -> "MatmulCounter":
        self._token = _ACTIVE_COUNTER.set(self)
        return self

    def __exit__(self, exc_type: type, exc_value: Exception, traceback: any) -> None:
        _ACTIVE_COUNTER.reset(self._token)
        return None

    def add(self, a: "Tensor", b: "Tensor", out_shape: Tuple[int, ...]) -> None:
        macs = int(np.prod(out_shape)) * a.shape[-1]
        self.records.append(MatmulRecord((a.name, b.name), macs))

    @property
    def total(self) -> int:
        return sum(r.multiply_adds for r in self.records)


_ACTIVE_COUNTER: ContextVar[Optional[MatmulCounter]] = ContextVar(
    "active_counter", default=None
)


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(
    op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn
) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        out.is_leaf = False
        tape.record(op, out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Batched matrix product a[..., m, k] @ b[..., k, n].
    Raises:
        ShapeError: If inner extents differ or batch extents do not broadcast.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(
            f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast"
        ) from e

    def backward(g: np.ndarray):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    out = np.matmul(a.data, b.data)
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(a, b, out.shape)
    return _emit("matmul", out, (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or a.size % known != 0:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def backward(g: np.ndarray):
        return (g.reshape(a.shape),)

    return _emit("reshape", a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray):
        return (np.transpose(g, inverse),)

    return _emit("transpose", np.transpose(a.data, axes), (a,), backward)


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; the gradient is written back into the window."""

    def backward(g: np.ndarray):
        grad = np.zeros_like(a.data)
        grad[index] += g
        return (grad,)

    return _emit("take", a.data[index], (a,), backward)


def reduce_sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    def backward(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def softmax_lastdim(x: ArrayLike) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: last extent must be >= 1, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", probs, (x,), backward)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out


def sigmoid(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    y = _stable_sigmoid(x.data)

    def backward(g: np.ndarray):
        return (g * y * (1.0 - y),)

    return _emit("sigmoid", y, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    u = GELU_COEF * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def backward(g: np.ndarray):
        du = GELU_COEF * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _emit("gelu", y, (x,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalizes the last axis to unit RMS, then scales by ``gain``."""
    width = x.shape[-1]
    scale = (np.mean(x.data * x.data, axis=-1, keepdims=True) + eps) ** -0.5
    normed = x.data * scale

    def backward(g: np.ndarray):
        g_normed = g * gain.data
        dot = (x.data * g_normed).sum(axis=-1, keepdims=True)
        grad_x = scale * (g_normed - (scale * scale / width) * x.data * dot)
        grad_gain = _unbroadcast(g * normed, gain.shape)
        return grad_x, grad_gain

    return _emit("rms_norm", normed * gain.data, (x, gain), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """
    Replaces entries where ``mask`` is True by ``value`` (may be -inf).
    The filled entries receive no gradient.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)

    def backward(g: np.ndarray):
        return (np.where(mask, 0.0, g),)

    return _emit("masked_fill", np.where(mask, value, x.data), (x,), backward)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """
    Looks up rows of ``table`` by integer index; gradients scatter-add into the rows used.
    Raises:
        IndexRangeError: If an index is negative or beyond the table.
    """
    indices = np.asarray(indices, dtype=np.int64)
    rows = table.shape[0]
    if indices.size:
        bad = indices[(indices < 0) | (indices >= rows)]
        if bad.size:
            raise IndexRangeError(
                f"index {int(bad.reshape(-1)[0])} out of range for table with {rows} rows"
            )

    def backward(g: np.ndarray):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return _emit("gather_rows", table.data[indices], (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """
    Per-position negative log-softmax at ``targets``; output has logits.shape[:-1].
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        )
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        grad = np.exp(log_probs)
        np.put_along_axis(
            grad,
            targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        return (grad * g[..., None],)

    return _emit("cross_entropy", -picked, (logits,), backward)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _rotate_half_transpose(g: np.ndarray) -> np.ndarray:
    half = g.shape[-1] // 2
    return np.concatenate([g[..., half:], -g[..., :half]], axis=-1)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotates feature pairs (i, i + d/2) of the last axis by per-position angles."""
    if x.shape[-1] % 2:
        raise ShapeError(f"rotary: last extent must be even, got {x.shape}")

    def backward(g: np.ndarray):
        return (g * cos + _rotate_half_transpose(g * sin),)

    return _emit("rotary", x.data * cos + _rotate_half(x.data) * sin, (x,), backward)


def backward(
    loss: Tensor, tape: Tape, leaves: Optional[Iterable[Tensor]] = None
) -> Dict[Tensor, np.ndarray]:
    """
    Runs reverse-mode differentiation from a scalar loss over the tape.
    Args:
        loss: Scalar tensor produced on ``tape``.
        tape: The tape active when ``loss`` was computed.
        leaves: Leaves to report; defaults to every trainable leaf the tape touched.
    Returns:
        Mapping leaf -> gradient. Unreached leaves get zeros. Each leaf's ``grad``
        attribute is set as well.
    Raises:
        TapeError: If the loss is not a scalar or was not produced on ``tape``.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss was not produced on this tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward_fn(g)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad

    targets = tape.leaves if leaves is None else list(leaves)
    result: Dict[Tensor, np.ndarray] = {}
    for leaf in targets:
        grad = grads.get(id(leaf))
        grad = np.zeros_like(leaf.data) if grad is None else np.array(grad, copy=True)
        leaf.grad = grad
        result[leaf] = grad
    logger.debug(f"Backward over {len(tape)} nodes, {len(result)} leaves")
    return result


def seeded_normal(seed: int, name: str, shape: Sequence[int], std: float) -> np.ndarray:
    """
    Draws N(0, std^2) values from a stream keyed by (seed, name), so a tensor's
    initial values do not depend on which other tensors exist.
    """
    rng = np.random.default_rng([int(seed), crc32(name.encode("utf-8"))])
    return rng.standard_normal(tuple(shape)) * std
