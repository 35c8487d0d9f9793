"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tape`` records every differentiable operation executed inside its
``with`` block, in execution order (which is a valid topological order of
the computation graph). ``Tape.gradients`` replays the record backwards,
pushing vector-Jacobian products from a scalar loss down to the leaves.

Conventions:
  * forward values are plain ``np.ndarray``; float32 by default, float64
    when the caller supplies float64 inputs (used by gradient checks),
  * every op validates shapes up front and raises ``ShapeError`` with the
    offending shapes in the message,
  * every op checks its output for NaN/Inf and raises ``NonFiniteError``
    naming the op, so a diverging training step aborts at the first bad
    value instead of propagating garbage,
  * ops never mutate their input arrays; vjp closures never mutate the
    incoming adjoint, so calling ``gradients`` twice gives identical
    results.

The tape stack is thread-local: concurrent evaluations on different
threads do not see each other's recordings.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "REGISTERED_OPS",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "transpose_last2",
    "reshape",
    "concat",
    "relu",
    "sigmoid",
    "log",
    "clamp_min",
    "softmax_rows",
    "dwconv",
    "take_along_last",
    "global_avg_pool",
    "channel_max_pool",
    "channel_avg_pool",
    "sum_all",
    "mean_all",
    "sum_last",
    "band_attention",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf; ``op`` names the offender."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


# Names of all differentiable ops; tests iterate this to guarantee every
# op has a finite-difference check.
REGISTERED_OPS = (
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "transpose_last2",
    "reshape",
    "concat",
    "relu",
    "sigmoid",
    "log",
    "clamp_min",
    "softmax_rows",
    "dwconv",
    "take_along_last",
    "global_avg_pool",
    "channel_max_pool",
    "channel_avg_pool",
    "sum_all",
    "mean_all",
    "sum_last",
    "band_attention",
)

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    # float64 is honored only when handed an actual float64 array; lists
    # and ints default to float32.
    if isinstance(data, np.ndarray) and arr.dtype == np.float64:
        return arr
    if arr.dtype != np.float32:
        return arr.astype(np.float32)
    return arr


def _check_finite(op: str, data: np.ndarray) -> None:
    # One fused pass; float64 accumulator so large float32 sums cannot
    # overflow into a false positive.
    if not np.isfinite(np.sum(data, dtype=np.float64)):
        raise NonFiniteError(op)


class Tensor:
    """Array node in the computation graph.

    Leaves are built directly (``Tensor(data, requires_grad=True)``);
    interior nodes are built by ops. ``grad`` is populated on leaves by
    ``Tape.gradients`` for convenience and is overwritten, not
    accumulated, on each call.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = "leaf"
        self._parents = ()
        self._vjp = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(op={self._op!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    # Arithmetic sugar; python scalars are accepted where noted.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _node(op: str, data: np.ndarray, parents: tuple, vjp) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._op = op
    out._parents = parents
    out._vjp = vjp
    if out.requires_grad:
        stack = _tape_stack()
        if stack:
            stack[-1]._nodes.append(out)
    return out


class Tape:
    """Execution-ordered op record for one backward pass."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def gradients(self, loss: Tensor, wrt) -> dict:
        """Gradient of scalar ``loss`` w.r.t. each tensor in ``wrt``.

        Returns ``{tensor: ndarray}`` with a zero array for any tensor
        the loss does not depend on. Also overwrites ``.grad`` on the
        requested tensors.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss.data.ndim != 0:
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        wrt = list(wrt)
        if loss._op != "leaf" and not any(loss is n for n in self._nodes):
            raise ValueError("loss was not recorded on this tape")

        adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        visited: dict[int, np.ndarray] = {}
        for node in reversed(self._nodes):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            visited[id(node)] = g
            for parent, contrib in zip(node._parents, node._vjp(g)):
                if contrib is None or not parent.requires_grad:
                    continue
                key = id(parent)
                held = adjoint.get(key)
                adjoint[key] = contrib if held is None else held + contrib

        out = {}
        for t in wrt:
            g = adjoint.get(id(t))
            if g is None:
                g = visited.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            elif g.shape != t.data.shape:
                g = np.broadcast_to(g, t.data.shape).copy()
            t.grad = g
            out[t] = g
        return out


def _tensor_operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_guard(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def add(a: Tensor, b) -> Tensor:
    b = _tensor_operand(b, a)
    _binary_guard("add", a, b)
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _node("add", a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _tensor_operand(b, a)
    _binary_guard("sub", a, b)
    ash, bsh = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _node("sub", a.data - b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _node("neg", -a.data, (a,), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_guard("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node("mul", ad * bd, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _node("scale", a.data * c, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
    if ad.dtype != bd.dtype:
        raise ShapeError(f"matmul: dtype mismatch {ad.dtype} vs {bd.dtype}")

    def vjp(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _node("matmul", ad @ bd, (a, b), vjp)


def transpose_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"transpose_last2: need ndim >= 2, got {a.data.shape}")

    def vjp(g):
        return (g.swapaxes(-1, -2),)

    return _node("transpose_last2", a.data.swapaxes(-1, -2), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _node("reshape", data, (a,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    arrays = [t.data for t in tensors]
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or arr.dtype != ref.dtype:
            raise ShapeError("concat: rank or dtype mismatch between parts")
        for i, (x, y) in enumerate(zip(ref.shape, arr.shape)):
            if i != ax and x != y:
                raise ShapeError(f"concat: shapes {ref.shape} and {arr.shape} differ off-axis")
    sizes = [arr.shape[ax] for arr in arrays]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _node("concat", np.concatenate(arrays, axis=ax), tuple(tensors), vjp)


def relu(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (g * (ad > 0),)

    return _node("relu", np.maximum(ad, 0), (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # exp only of non-positive values, so no overflow at any input.
    t = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t)).astype(x.dtype, copy=False)

    def vjp(g):
        return (g * (y * (1.0 - y)),)

    return _node("sigmoid", y, (a,), vjp)


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(ad)

    def vjp(g):
        return (g / ad,)

    return _node("log", data, (a,), vjp)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    lo = float(lo)
    ad = a.data

    def vjp(g):
        return (g * (ad > lo),)

    return _node("clamp_min", np.maximum(ad, lo), (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows are the leading axes."""
    x = a.data
    if x.ndim < 1:
        raise ShapeError("softmax_rows: need at least one axis")
    m = x.max(axis=-1, keepdims=True)
    y = np.subtract(x, m)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _node("softmax_rows", y, (a,), vjp)


def dwconv(x: Tensor, k: Tensor) -> Tensor:
    """Depthwise 2-D convolution, zero padded to preserve spatial shape.

    ``x`` is (..., H, W, C); ``k`` is (ks, ks, C) with odd ks. Each
    channel is convolved with its own ks x ks kernel (cross-correlation
    orientation).
    """
    xd, kd = x.data, k.data
    if xd.ndim < 3:
        raise ShapeError(f"dwconv: input must be (..., H, W, C), got {xd.shape}")
    if kd.ndim != 3 or kd.shape[0] != kd.shape[1]:
        raise ShapeError(f"dwconv: kernel must be (ks, ks, C), got {kd.shape}")
    ks = kd.shape[0]
    if ks % 2 == 0:
        raise ShapeError(f"dwconv: even kernel size {ks} not supported")
    if kd.shape[2] != xd.shape[-1]:
        raise ShapeError(f"dwconv: channel mismatch, input {xd.shape[-1]} vs kernel {kd.shape[2]}")
    if xd.dtype != kd.dtype:
        raise ShapeError(f"dwconv: dtype mismatch {xd.dtype} vs {kd.dtype}")

    h, w = xd.shape[-3], xd.shape[-2]
    p = ks // 2
    pad = [(0, 0)] * (xd.ndim - 3) + [(p, p), (p, p), (0, 0)]
    xp = np.pad(xd, pad)
    out = np.zeros_like(xd)
    for u in range(ks):
        for v in range(ks):
            out += kd[u, v] * xp[..., u : u + h, v : v + w, :]

    # Reduce every axis but the channel one, e.g. 'abcz,abcz->z' for 4-D.
    lead = "abcdefgh"[: xd.ndim - 1]
    subs = f"{lead}z,{lead}z->z"

    def vjp(g):
        gp = np.zeros_like(xp)
        for u in range(ks):
            for v in range(ks):
                gp[..., u : u + h, v : v + w, :] += kd[u, v] * g
        gx = gp[..., p : p + h, p : p + w, :]
        gk = np.empty_like(kd)
        for u in range(ks):
            for v in range(ks):
                gk[u, v] = np.einsum(subs, xp[..., u : u + h, v : v + w, :], g)
        return gx, gk

    return _node("dwconv", out, (x, k), vjp)


def take_along_last(a: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis; indices are ints."""
    idx = np.asarray(indices)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(f"take_along_last: indices {idx.shape} must match leading dims of {a.data.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take_along_last: indices must be integers")
    idx3 = idx[..., None]
    data = np.take_along_axis(a.data, idx3, axis=-1)[..., 0]
    ashape = a.data.shape

    def vjp(g):
        ga = np.zeros(ashape, dtype=g.dtype)
        np.put_along_axis(ga, idx3, g[..., None], axis=-1)
        return (ga,)

    return _node("take_along_last", data, (a,), vjp)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the two spatial axes: (..., H, W, C) -> (..., C)."""
    xd = a.data
    if xd.ndim < 3:
        raise ShapeError(f"global_avg_pool: input must be (..., H, W, C), got {xd.shape}")
    h, w = xd.shape[-3], xd.shape[-2]
    inv = 1.0 / (h * w)
    shape = xd.shape

    def vjp(g):
        return (np.broadcast_to(g[..., None, None, :] * inv, shape),)

    return _node("global_avg_pool", xd.mean(axis=(-3, -2)), (a,), vjp)


def channel_max_pool(a: Tensor) -> Tensor:
    """Max over the channel axis, kept: (..., H, W, C) -> (..., H, W, 1).

    Ties route the gradient to the lowest channel index.
    """
    xd = a.data
    if xd.ndim < 1:
        raise ShapeError("channel_max_pool: need a channel axis")
    idx = xd.argmax(axis=-1)[..., None]
    data = np.take_along_axis(xd, idx, axis=-1)
    shape = xd.shape

    def vjp(g):
        ga = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(ga, idx, g, axis=-1)
        return (ga,)

    return _node("channel_max_pool", data, (a,), vjp)


def channel_avg_pool(a: Tensor) -> Tensor:
    """Mean over the channel axis, kept: (..., H, W, C) -> (..., H, W, 1)."""
    xd = a.data
    if xd.ndim < 1:
        raise ShapeError("channel_avg_pool: need a channel axis")
    c = xd.shape[-1]
    inv = 1.0 / c
    shape = xd.shape

    def vjp(g):
        return (np.broadcast_to(g * inv, shape),)

    return _node("channel_avg_pool", xd.mean(axis=-1, keepdims=True), (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape

    def vjp(g):
        return (np.broadcast_to(g, shape),)

    return _node("sum_all", a.data.sum(), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    inv = 1.0 / a.data.size

    def vjp(g):
        return (np.broadcast_to(g * inv, shape),)

    return _node("mean_all", a.data.mean(), (a,), vjp)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis: (..., k) -> (...)."""
    if a.data.ndim < 1:
        raise ShapeError("sum_last: need at least one axis")
    k = a.data.shape[-1]
    shape = a.data.shape

    def vjp(g):
        return (np.broadcast_to(g[..., None], shape),)

    return _node("sum_last", a.data.sum(axis=-1), (a,), vjp)


# Raw attention matrices kept for the backward pass, per op call; above
# this the backward recomputes them head by head instead.
_ATTN_CACHE_CAP = 512 * 1024 * 1024


def _attention_rows(x: np.ndarray, ch: float, needs_shift: bool) -> tuple:
    """One head's raw kernel over band tokens, w_ij = exp(ch*x_i*x_j).

    Returns (w, s0, y, tau) with s0 the row sums, y = (w @ x)/s0 the
    row-stochastic output, and tau = ch * x. The matrix is left
    unnormalized; consumers fold 1/s0 into their row vectors. When
    ``needs_shift`` the per-row max ch*x_i*x_j is subtracted before
    exp; since rows scale a fixed vector x, that max is tau_i * (max x)
    or tau_i * (min x) by sign, avoiding a full (B, B) reduction.
    """
    tau = ch * x
    w = tau[..., :, None] * x[..., None, :]
    if needs_shift:
        hi = np.max(x, axis=-1, keepdims=True)
        lo = np.min(x, axis=-1, keepdims=True)
        rowmax = np.where(tau >= 0, tau * hi, tau * lo)
        w -= rowmax[..., :, None]
    np.exp(w, out=w)
    s0 = w.sum(axis=-1)
    y = np.matmul(w, x[..., None])[..., 0] / s0
    return w, s0, y, tau


def band_attention(x: Tensor, c: Tensor, beta: Tensor) -> Tensor:
    """Multi-head self-attention over scalar band tokens, heads summed.

    For tokens that are scalars, Q/K/V projections collapse: with
    per-head query/key/value/output vectors, the attention logits are
    c_h * x_i * x_j where c_h = (wq_h . wk_h)/sqrt(d_k), and the head's
    contribution to output token i is beta_h * (A_h x)_i with
    beta_h = wv_h . wo_h. This op evaluates

        out = sum_h beta_h * softmax_rows(c_h * x xT) x

    exactly, head by head, without keeping (B, B) maps on the tape
    (they are recomputed in the backward pass).

    ``x`` is (..., B); ``c`` and ``beta`` are (n_heads,).
    """
    xd, cd, bd = x.data, c.data, beta.data
    if xd.ndim < 1:
        raise ShapeError("band_attention: x needs at least one axis")
    if cd.ndim != 1 or bd.shape != cd.shape:
        raise ShapeError(f"band_attention: c and beta must be equal 1-D head vectors, got {cd.shape} and {bd.shape}")
    if xd.dtype != cd.dtype or xd.dtype != bd.dtype:
        raise ShapeError("band_attention: dtype mismatch between x, c, beta")
    n_heads = cd.shape[0]
    # Logits are bounded by |c_h| * max|x|^2; skip the max-shift when
    # safely inside exp range.
    xmax2 = float(np.max(np.abs(xd))) ** 2 if xd.size else 0.0
    shifts = [abs(float(cd[h])) * xmax2 > 60.0 for h in range(n_heads)]
    bands = xd.shape[-1] if xd.ndim else 1
    cache = xd.nbytes * bands * n_heads <= _ATTN_CACHE_CAP

    out = np.zeros_like(xd)
    saved = []
    for h in range(n_heads):
        w, s0, y, tau = _attention_rows(xd, float(cd[h]), shifts[h])
        saved.append((w if cache else None, s0, y, tau))
        out += bd[h] * y

    def vjp(g):
        gx = np.zeros_like(xd)
        gc = np.zeros_like(cd)
        gb = np.zeros_like(bd)
        x2 = xd * xd
        for h in range(n_heads):
            w, s0, y, tau = saved[h]
            if w is None:
                w, s0, y, tau = _attention_rows(xd, float(cd[h]), shifts[h])
            gy = bd[h] * g
            gb[h] = np.sum(g * y, dtype=np.float64)
            # Per row i the logit gradient is a_ij gy_i (x_j - y_i) with
            # a = w/s0; all j-sums below fold 1/s0 into the row vectors,
            # so the big matrix is touched by two matmuls only.
            q = np.matmul(w, x2[..., None])[..., 0] / s0
            dtau = gy * (q - y * y)
            u = np.stack([gy / s0, gy * tau / s0, gy * tau * y / s0], axis=-2)
            e = np.matmul(u, w)
            # value path, key path (x_j and -y_i halves), query path
            gx += e[..., 0, :] + xd * e[..., 1, :] - e[..., 2, :] + float(cd[h]) * dtau
            gc[h] = np.sum(dtau * xd, dtype=np.float64)
        return gx, gc, gb

    return _node("band_attention", out, (x, c, beta), vjp)
