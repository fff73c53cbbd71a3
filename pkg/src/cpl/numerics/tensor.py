"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op builds its output with :func:`_record`, which appends a
node to the thread's active :class:`Tape` whenever one of the inputs requires a
gradient. :func:`backward` walks that tape in reverse append order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from finite inputs."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Node:
    __slots__ = ("tape", "out", "parents", "backward_fn", "op")

    def __init__(self, tape, out, parents, backward_fn, op):
        self.tape = tape
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Append-only record of differentiable ops.

    A tape is consumed by the first :func:`backward` call that runs on it; a
    fresh tape is opened automatically for subsequent ops.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def _state():
    st = _local
    if not hasattr(st, "tape"):
        st.tape = Tape()
        st.enabled = True
        st.recorder = None
    return st


def current_tape() -> Tape:
    st = _state()
    if st.tape.consumed:
        st.tape = Tape()
    return st.tape


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops return constant tensors."""
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


@contextlib.contextmanager
def branch_record():
    """Collect the branch pattern of every non-smooth op evaluated inside.

    relu/abs record the sign pattern of their input and the gate records its
    retained set. Two evaluations whose patterns differ straddle a kink, so a
    finite difference across them is not a derivative.
    """
    st = _state()
    prev = st.recorder
    rec: list[np.ndarray] = []
    st.recorder = rec
    try:
        yield rec
    finally:
        st.recorder = prev


def record_branch(pattern: np.ndarray) -> None:
    rec = _state().recorder
    if rec is not None:
        rec.append(np.array(pattern, copy=True))


def _check_finite(arr: np.ndarray, op: str) -> None:
    # the sum overflows only for huge finite values, so fall back to the full check
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op} produced a non-finite value")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(self, o)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: add(neg(self), o)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(self, o)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __pow__ = lambda self, p: power(self, p)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return mul(self, 1.0 / o)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.name = None
    st = _state()
    track = st.enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        tape = current_tape()
        out._node = Node(tape, out, tuple(parents), backward_fn, op)
        tape.nodes.append(out._node)
    return out


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Each leaf receives its total gradient in a single addition, however many
    times it was used. The tape is consumed afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if loss._node is None:
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any tensor that requires grad")
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = loss._node.tape
    if tape.consumed:
        raise TapeError("this tape was already consumed by an earlier backward call")
    grads: dict[int, np.ndarray] = {id(loss): seed}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgrads = node.backward_fn(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
            if p._node is None:
                leaves[key] = p
    for key, leaf in leaves.items():
        g = grads[key]
        if g.shape != leaf.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match leaf {leaf.shape}")
        leaf.grad = np.array(g, dtype=leaf.dtype) if leaf.grad is None else leaf.grad + g
    tape.consumed = True
    for node in tape.nodes:
        if node.out is not loss:
            # spent intermediates become constants
            node.out._node = None
            node.out.requires_grad = False
        node.out = None
        node.parents = ()
        node.backward_fn = None
    tape.nodes.clear()


# --------------------------------------------------------------------------
# elementwise


def _scalar_or_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.size <= b.size else (b, a)
    if small.size != 1 or small.ndim > big.ndim:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_operand(b, like: Tensor):
    if isinstance(b, Tensor):
        return b
    if isinstance(b, (int, float, np.integer, np.floating)):
        return float(b)
    raise TypeError(f"unsupported operand {type(b).__name__}")


def add(a: Tensor, b) -> Tensor:
    b = _binary_operand(b, a)
    if not isinstance(b, Tensor):
        return _record(a.data + b, (a,), lambda g: (g,), "add")
    _scalar_or_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b) -> Tensor:
    b = _binary_operand(b, a)
    if not isinstance(b, Tensor):
        return _record(a.data - b, (a,), lambda g: (g,), "sub")
    _scalar_or_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _binary_operand(b, a)
    if not isinstance(b, Tensor):
        return _record(a.data * b, (a,), lambda g: (g * b,), "mul")
    _scalar_or_same(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise TypeError("power exponent must be a python scalar")
    p = float(p)
    ad = a.data
    with np.errstate(all="ignore"):
        out = ad**p
    return _record(out, (a,), lambda g: (g * p * ad ** (p - 1.0),), "power")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    record_branch(mask)
    return _record(np.where(mask, ad, 0).astype(ad.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    record_branch(ad > 0)
    s = np.sign(ad)
    return _record(np.abs(ad), (a,), lambda g: (g * s,), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _record(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def elementwise(kind: str, a: Tensor, b=None, **kw) -> Tensor:
    """Dispatch by name: add, sub, mul, clip, relu, power."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "relu":
        return relu(a)
    if kind == "power":
        return power(a, b)
    if kind == "clip":
        return clip(a, kw.get("lo", 0.0) if b is None else b[0], kw.get("hi", 1.0) if b is None else b[1])
    raise ValueError(f"unknown elementwise op {kind!r}")


def detach(a: Tensor) -> Tensor:
    """Same values, cut from the tape."""
    return Tensor(a.data, requires_grad=False)


def astype(a: Tensor, dtype) -> Tensor:
    """Cast to ``dtype``; the gradient is cast back to the input's dtype."""
    src = a.dtype
    return _record(a.data.astype(dtype), (a,), lambda g: (g.astype(src),), "astype")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; backward passes the gradient to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {hard.shape} vs {soft.shape}")
    return _record(hard.copy(), (soft,), lambda g: (g,), "straight_through")


# --------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """numpy broadcasting made explicit; backward sums over the expanded axes."""
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)
    if lead < 0:
        raise ShapeError(f"cannot broadcast {src} to {shape}")
    axes = tuple(range(lead)) + tuple(lead + i for i, d in enumerate(src) if d == 1 and shape[lead + i] != 1)

    def bw(g):
        return (g.sum(axis=axes).reshape(src) if axes else g,)

    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record(out, (a,), bw, "broadcast_to")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    src = a.shape
    ax = axis % a.ndim

    def bw(g):
        out = np.zeros(src, dtype=g.dtype)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (out,)

    return _record(np.take(a.data, idx, axis=ax), (a,), bw, "take")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of an empty list")
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("stack of an empty list")

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _record(np.stack([p.data for p in parts], axis=axis), parts, bw, "stack")


# --------------------------------------------------------------------------
# reductions


def _nonempty(a: Tensor, op: str):
    if a.size == 0:
        raise ShapeError(f"{op} of an empty tensor")


def sum_(a: Tensor, axis=None) -> Tensor:
    _nonempty(a, "sum")
    src = a.shape
    dtype = a.dtype

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, src).astype(dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).astype(dtype),)

    return _record(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    _nonempty(a, "mean")
    src = a.shape
    count = a.size if axis is None else int(np.prod([src[i] for i in np.atleast_1d(axis)]))
    scale = 1.0 / count
    dtype = a.dtype

    def bw(g):
        if axis is None:
            return (np.full(src, g.reshape(()) * scale, dtype=dtype),)
        return (np.broadcast_to(np.expand_dims(g * scale, axis), src).astype(dtype),)

    return _record(np.asarray(a.data.mean(axis=axis)), (a,), bw, "mean")


def l1_mean(a: Tensor) -> Tensor:
    """mean(|a|)."""
    _nonempty(a, "l1_mean")
    return mean(abs_(a))


def l2_sq_mean(a: Tensor) -> Tensor:
    """mean(a**2): a squared l2 distance averaged over elements."""
    _nonempty(a, "l2_sq_mean")
    ad = a.data
    scale = 2.0 / ad.size
    return _record(np.asarray((ad * ad).mean()), (a,), lambda g: (ad * (g.reshape(()) * scale),), "l2_sq_mean")


def reduction(kind: str, a: Tensor) -> Tensor:
    fn = {"mean": mean, "sum": sum_, "l1_mean": l1_mean, "l2_sq_mean": l2_sq_mean}.get(kind)
    if fn is None:
        raise ValueError(f"unknown reduction {kind!r}")
    return fn(a)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), bw, "matmul")


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    zd = z.data
    e = np.exp(zd - zd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (z,), bw, "softmax")


def masked_softmax(z: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over the entries where ``mask`` holds, exact zeros elsewhere.

    The mask is a constant: logits outside it receive no gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != z.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match logits {z.shape}")
    if not mask.any(axis=axis).all():
        raise ValueError("masked_softmax needs at least one retained entry per row")
    zd = z.data
    zmax = np.where(mask, zd, -np.inf).max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, zd - zmax, 0.0)), 0.0).astype(zd.dtype, copy=False)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (z,), bw, "masked_softmax")


# --------------------------------------------------------------------------
# convolution and resampling (N x C x H x W, a missing N is added and removed)


def _as_batched(a: Tensor):
    if a.ndim == 3:
        return reshape(a, (1,) + a.shape), True
    if a.ndim != 4:
        raise ShapeError(f"expected C x H x W or N x C x H x W, got {a.shape}")
    return a, False


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-d cross-correlation.

    ``w`` is C_out x C_in x kh x kw with odd kernel extents. ``padding='same'``
    pads by kh//2 on each side (zero padding); ``'valid'`` does not pad.
    """
    x, squeeze = _as_batched(x)
    if w.ndim != 4:
        raise ShapeError(f"kernels must be C_out x C_in x kh x kw, got {w.shape}")
    N, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernels expect {Ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    s = int(stride)
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    dtype = x.dtype

    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # kh kw C O
    hs, ws = s * (Ho - 1) + 1, s * (Wo - 1) + 1
    out = np.zeros((N, Ho, Wo, O), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + hs : s, j : j + ws : s, :] @ wt[i, j]
    if bias is not None:
        out += bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # N Ho Wo O
        g2 = gh.reshape(-1, O)
        gx = gw = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + hs : s, j : j + ws : s, :] += gh @ wt[i, j].T
            gx = dxp[:, ph : ph + H, pw : pw + W, :].transpose(0, 3, 1, 2)
        if w.requires_grad:
            dwt = np.empty((kh, kw, C, O), dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    win = np.ascontiguousarray(xp[:, i : i + hs : s, j : j + ws : s, :]).reshape(-1, C)
                    dwt[i, j] = win.T @ g2
            gw = dwt.transpose(3, 2, 0, 1)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    y = _record(out.transpose(0, 3, 1, 2), parents, bw, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    x, squeeze = _as_batched(x)
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {H}x{W}")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g):
        gg = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        return (gg,)

    y = _record(out, (x,), bw, "avg_pool2")
    return reshape(y, y.shape[1:]) if squeeze else y


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x, squeeze = _as_batched(x)
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)

    y = _record(out, (x,), bw, "upsample2")
    return reshape(y, y.shape[1:]) if squeeze else y


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: C x H x W -> C, N x C x H x W -> N x C."""
    return mean(x, axis=(-2, -1))
