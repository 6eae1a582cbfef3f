"""Dense 4D tensors and the tape used for reverse-mode differentiation.

Every tensor is an ``(N, C, H, W)`` array of float32 or float64. Operations in
:mod:`gamair.ops` record a :class:`TapeNode` on the active :class:`Tape` when at
least one input requires a gradient; :meth:`Tape.backward` then walks the tape
in reverse order and accumulates gradients into the leaves.

Usage::

    x = Tensor(np.random.randn(1, 2, 4, 4), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(ops.mul(x, x))
    tape.backward(loss)
    x.grad  # == 2 * x.data
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import BackwardError, ShapeError

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class OpKind(enum.Enum):
    LEAF = "leaf"
    CONV2D = "conv2d"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    SCALE = "scale"
    MEAN_REDUCE = "mean_reduce"
    TRANSPOSE = "transpose_permute"
    EXPAND = "replicate_expand"
    SPACE_TO_DEPTH = "space_to_depth"
    DEPTH_TO_SPACE = "depth_to_space"
    LAYER_NORM = "layer_norm_channel"
    CHANNEL_SLICE = "channel_slice"
    CONCAT = "concat_channels"
    RELU = "relu"
    SIGMOID = "sigmoid"
    ABS = "abs"
    SQUARE = "square"
    LOG = "log"
    SUM_ALL = "sum_all"


class Tensor:
    """A 4D numeric array with an optional gradient.

    ``data`` is a contiguous numpy array; operations never modify it in place.
    Parameters are the one exception: optimizers rebind ``data`` between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node_id", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in DTYPES else np.float32
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if arr.dtype not in DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4D (N, C, H, W); got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all dimensions must be >= 1; got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._node_id: Optional[int] = None

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype: Any = np.float32, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape: Sequence[int], dtype: Any = np.float32, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(tuple(shape), dtype=dtype), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> Optional[int]:
        return self._node_id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype: Any) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.mul(self, other)

    def __neg__(self) -> "Tensor":
        from . import ops

        return ops.scale(self, -1.0)


@dataclass
class TapeNode:
    """One recorded operation.

    ``input_ids`` holds the node id of each input, or ``None`` for inputs that
    do not require gradients. ``backward_fn`` maps the output gradient to one
    gradient (or ``None``) per input.
    """

    node_id: int
    op_kind: OpKind
    input_ids: tuple[Optional[int], ...]
    saved_ctx: dict = field(default_factory=dict)
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
    leaf: Optional[Tensor] = None


_local = threading.local()


def current_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records differentiable operations performed while it is active.

    A tape belongs to the thread that entered it. Nodes are appended in
    execution order, so the node list is already topologically sorted.
    """

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self._leaf_ids: dict[int, int] = {}
        self._released = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def release(self) -> None:
        """Drop the recorded nodes and the arrays their closures keep alive.

        Output tensors point back at their tape, so an unreleased tape is only
        reclaimed by the cyclic garbage collector. Training loops call this
        after each backward pass to keep memory flat.
        """
        self.nodes.clear()
        self._leaf_ids.clear()
        self._released = True

    def _input_id(self, t: Tensor) -> Optional[int]:
        if not t.requires_grad:
            return None
        if t._tape is self and t._node_id is not None:
            return t._node_id
        key = id(t)
        nid = self._leaf_ids.get(key)
        if nid is None or self.nodes[nid].leaf is not t:
            nid = len(self.nodes)
            self.nodes.append(TapeNode(nid, OpKind.LEAF, (), leaf=t))
            self._leaf_ids[key] = nid
        return nid

    def record(
        self,
        out: Tensor,
        op_kind: OpKind,
        inputs: Sequence[Tensor],
        backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
        saved_ctx: Optional[dict] = None,
    ) -> TapeNode:
        ids = tuple(self._input_id(t) for t in inputs)
        node = TapeNode(len(self.nodes), op_kind, ids, saved_ctx or {}, backward_fn)
        self.nodes.append(node)
        out.requires_grad = True
        out._tape = self
        out._node_id = node.node_id
        return node

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if loss.shape != (1, 1, 1, 1):
            raise BackwardError(f"loss must have shape (1, 1, 1, 1), got {loss.shape}")
        if loss._tape is not self or loss._node_id is None:
            raise BackwardError("loss was not recorded on this tape (detached or foreign tensor)")
        if self._released:
            raise BackwardError("tape was released; record the computation again")
        grads: dict[int, np.ndarray] = {loss._node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss._node_id + 1]):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node.op_kind is OpKind.LEAF:
                leaf = node.leaf
                assert leaf is not None
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
                continue
            assert node.backward_fn is not None
            for nid, gi in zip(node.input_ids, node.backward_fn(g)):
                if nid is None or gi is None:
                    continue
                prev = grads.get(nid)
                grads[nid] = gi if prev is None else prev + gi


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar ``loss`` through the tape that recorded it."""
    if loss._tape is None:
        raise BackwardError("loss was not recorded on any tape (detached tensor)")
    loss._tape.backward(loss)


# -- binary blob --------------------------------------------------------------


def tensor_to_bytes(t: Tensor) -> bytes:
    """Little-endian blob: u8 dtype tag (0=f32, 1=f64), four u32 dims, raw data."""
    tag = _DTYPE_TAGS[t.dtype]
    le = t.data.astype(t.dtype.newbyteorder("<"), copy=False)
    return struct.pack("<B4I", tag, *t.shape) + le.tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one blob starting at ``offset``; returns the tensor and the next offset."""
    header = struct.calcsize("<B4I")
    if len(buf) - offset < header:
        raise EOFError("tensor header truncated")
    tag, *dims = struct.unpack_from("<B4I", buf, offset)
    if tag not in (0, 1):
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = np.dtype("<f4") if tag == 0 else np.dtype("<f8")
    count = int(np.prod(dims))
    start = offset + header
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise EOFError("tensor data truncated")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims)
    return Tensor(arr.astype(dtype.newbyteorder("="))), end
