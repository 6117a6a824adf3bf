"""Reverse-mode automatic differentiation over dense real/complex tensors.

Define-by-run: each forward pass records primitive applications on an ambient
Tape (creation order is already topological), and ``Tape.backward`` walks the
records in reverse. Tensors are plain numpy arrays in float64 or complex128;
complex values are expected only inside FFT / analytic-signal subgraphs.

Gradient convention for complex nodes: the stored gradient of z = a + ib is
dL/da + i*dL/db for a real-valued loss L. Under this convention the adjoint
of any C-linear map is its conjugate transpose, which is what the FFT rules
below implement.
"""
from __future__ import annotations

import numpy as np

REAL = np.float64
COMPLEX = np.complex128

_TAPE_STACK: list["Tape"] = []


class TapeMismatchError(RuntimeError):
    """A Variable was used under a tape other than the one that created it."""


class GradCheckError(RuntimeError):
    """grad_check hit a non-finite function value or gradient."""


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x)
    if np.iscomplexobj(arr):
        return arr.astype(COMPLEX, copy=False)
    return arr.astype(REAL, copy=False)


class Variable:
    """A tensor tracked on a tape. ``value`` is immutable by convention."""

    __slots__ = ("value", "tape", "node_id", "requires_grad")

    def __init__(self, value, tape=None, node_id=-1, requires_grad=False):
        self.value = _as_array(value)
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every method defers to the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp):
        self.parents = parents  # tuple of node ids
        self.vjp = vjp          # grad -> tuple of parent grads (None allowed)


class Tape:
    """Record of one forward evaluation; nodes are topologically ordered."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._shapes: list[tuple] = []
        self._dtypes: list = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def _register(self, value, parents, vjp) -> Variable:
        self._nodes.append(_Node(parents, vjp))
        self._shapes.append(value.shape)
        self._dtypes.append(value.dtype)
        return Variable(value, self, len(self._nodes) - 1, requires_grad=True)

    def leaf(self, value, requires_grad=True) -> Variable:
        value = _as_array(value)
        if not requires_grad:
            return Variable(value)
        return self._register(value, (), None)

    def backward(self, root: Variable, seed: float = 1.0) -> "GradientMap":
        """Accumulate d(root)/d(leaf) for every grad-requiring leaf.

        ``seed`` is the upstream gradient planted at the (scalar) root;
        backward is linear in it.
        """
        if not isinstance(root, Variable) or root.tape is not self:
            raise TapeMismatchError("root does not belong to this tape")
        if root.value.size != 1:
            raise ValueError(
                f"backward requires a scalar root, got shape {root.value.shape}")
        grads: list = [None] * len(self._nodes)
        grads[root.node_id] = np.full(root.value.shape, seed,
                                      dtype=self._dtypes[root.node_id])
        for nid in range(root.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self._nodes[nid]
            if node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = np.zeros(self._shapes[pid],
                                          dtype=self._dtypes[pid])
                grads[pid] += pg
            grads[nid] = None  # free as we go
        return GradientMap(self, grads)


class GradientMap:
    """Result of a backward pass; unreached leaves read as zero tensors."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def wrt(self, var: Variable) -> np.ndarray:
        if var.tape is not self._tape:
            raise TapeMismatchError("variable does not belong to this tape")
        g = self._grads[var.node_id]
        if g is None:
            return np.zeros(var.value.shape, dtype=var.value.dtype)
        return g


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def constant(x) -> Variable:
    return Variable(_as_array(x))


def _lift(x) -> Variable:
    return x if isinstance(x, Variable) else constant(x)


def _record(value, inputs, vjp) -> Variable:
    """Register an op output if any input requires grad, else a constant."""
    tape = None
    for v in inputs:
        if v.requires_grad:
            if v.tape is not _active_tape():
                raise TapeMismatchError(
                    "grad-requiring input created under a different tape")
            tape = v.tape
    if tape is None:
        return Variable(value)
    parents = tuple(v.node_id if v.requires_grad else -1 for v in inputs)
    # drop constant parents from the record
    live = tuple(p for p in parents if p >= 0)

    def dispatch(g, _vjp=vjp, _parents=parents):
        outs = _vjp(g)
        return tuple(o for p, o in zip(_parents, outs) if p >= 0)

    return tape._register(value, live, dispatch)


def _unbroadcast(grad: np.ndarray, shape: tuple, dtype) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape`` and project dtype."""
    if grad.ndim > len(shape):
        grad = grad.sum(axis=tuple(range(grad.ndim - len(shape))))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    if not np.iscomplexobj(np.empty(0, dtype)) and np.iscomplexobj(grad):
        grad = grad.real
    return grad.astype(dtype, copy=False)


# --------------------------------------------------------------------------
# arithmetic primitives
# --------------------------------------------------------------------------

def add(a, b) -> Variable:
    a, b = _lift(a), _lift(b)
    out = a.value + b.value

    def vjp(g):
        return (_unbroadcast(g, a.value.shape, a.value.dtype),
                _unbroadcast(g, b.value.shape, b.value.dtype))

    return _record(out, (a, b), vjp)


def sub(a, b) -> Variable:
    a, b = _lift(a), _lift(b)
    out = a.value - b.value

    def vjp(g):
        return (_unbroadcast(g, a.value.shape, a.value.dtype),
                _unbroadcast(-g, b.value.shape, b.value.dtype))

    return _record(out, (a, b), vjp)


def mul(a, b) -> Variable:
    """Elementwise product; complex factors use the conjugate rule."""
    a, b = _lift(a), _lift(b)
    out = a.value * b.value
    av, bv = a.value, b.value

    def vjp(g):
        return (_unbroadcast(g * np.conj(bv), av.shape, av.dtype),
                _unbroadcast(g * np.conj(av), bv.shape, bv.dtype))

    return _record(out, (a, b), vjp)


def div(a, b) -> Variable:
    a, b = _lift(a), _lift(b)
    out = a.value / b.value
    av, bv = a.value, b.value

    def vjp(g):
        ga = g / np.conj(bv)
        gb = -g * np.conj(av) / np.conj(bv) ** 2
        return (_unbroadcast(ga, av.shape, av.dtype),
                _unbroadcast(gb, bv.shape, bv.dtype))

    return _record(out, (a, b), vjp)


def neg(a) -> Variable:
    a = _lift(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def scalar_mul(c: float, a) -> Variable:
    a = _lift(a)
    c = float(c)
    return _record(c * a.value, (a,), lambda g: (c * g,))


def detach(a) -> Variable:
    """Forward value, no gradient (stop-gradient)."""
    a = _lift(a)
    return Variable(a.value)


def straight_through(hard: np.ndarray, soft: Variable) -> Variable:
    """Forward ``hard``, backward through ``soft``."""
    return add(constant(_as_array(hard) - soft.value), soft)


# --------------------------------------------------------------------------
# reductions, matmul, shaping
# --------------------------------------------------------------------------

def vsum(a, axis=None, keepdims=False) -> Variable:
    a = _lift(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)
    shp = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shp).astype(a.value.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shp).astype(a.value.dtype, copy=True),)

    return _record(out, (a,), vjp)


def vmean(a, axis=None, keepdims=False) -> Variable:
    a = _lift(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scalar_mul(1.0 / n, vsum(a, axis=axis, keepdims=keepdims))


def matmul(a, b) -> Variable:
    """2-D x 2-D, 2-D x 3-D (shared left), or batched 3-D x 3-D product."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        out = av @ bv

        def vjp(g):
            return (g @ np.conj(bv).T, np.conj(av).T @ g)
    elif av.ndim == 2 and bv.ndim == 3:
        out = np.einsum("ij,bjk->bik", av, bv)

        def vjp(g):
            return (np.einsum("bik,bjk->ij", g, np.conj(bv)),
                    np.einsum("ij,bik->bjk", np.conj(av), g))
    elif av.ndim == 3 and bv.ndim == 3:
        out = np.einsum("bij,bjk->bik", av, bv)

        def vjp(g):
            return (np.einsum("bik,bjk->bij", g, np.conj(bv)),
                    np.einsum("bij,bik->bjk", np.conj(av), g))
    else:
        raise ValueError(f"unsupported matmul ranks {av.ndim} x {bv.ndim}")

    def vjp_cast(g, _v=vjp):
        ga, gb = _v(g)
        return (_unbroadcast(ga, av.shape, av.dtype),
                _unbroadcast(gb, bv.shape, bv.dtype))

    return _record(out, (a, b), vjp_cast)


def reshape(a, shape) -> Variable:
    a = _lift(a)
    old = a.value.shape
    return _record(a.value.reshape(shape), (a,),
                   lambda g: (g.reshape(old),))


def transpose_last2(a) -> Variable:
    a = _lift(a)
    return _record(np.swapaxes(a.value, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def index(a, key) -> Variable:
    """Basic slicing/indexing; adjoint scatters into a zero tensor."""
    a = _lift(a)
    out = a.value[key]
    shp, dt = a.value.shape, a.value.dtype

    def vjp(g):
        ga = np.zeros(shp, dtype=dt)
        np.add.at(ga, key, g)
        return (ga,)

    return _record(np.array(out, copy=True), (a,), vjp)


def concat(parts, axis=-1) -> Variable:
    parts = [_lift(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), vjp)


def flip(a, axis=-1) -> Variable:
    a = _lift(a)
    return _record(np.flip(a.value, axis=axis).copy(), (a,),
                   lambda g: (np.flip(g, axis=axis).copy(),))


def take_rows(a, row_index: np.ndarray) -> Variable:
    """Per-example channel gather: a is (B, C, T), row_index is (B, C)."""
    a = _lift(a)
    B = a.value.shape[0]
    bidx = np.arange(B)[:, None]
    out = a.value[bidx, row_index, :]
    shp, dt = a.value.shape, a.value.dtype

    def vjp(g):
        ga = np.zeros(shp, dtype=dt)
        np.add.at(ga, (bidx, row_index), g)
        return (ga,)

    return _record(out, (a,), vjp)


def gather_labels(a, labels: np.ndarray) -> Variable:
    """Pick a[i, labels[i]] for each row i of a 2-D tensor."""
    a = _lift(a)
    rows = np.arange(a.value.shape[0])
    out = a.value[rows, labels]
    shp, dt = a.value.shape, a.value.dtype

    def vjp(g):
        ga = np.zeros(shp, dtype=dt)
        np.add.at(ga, (rows, labels), g)
        return (ga,)

    return _record(out, (a,), vjp)


# --------------------------------------------------------------------------
# nonlinearities
# --------------------------------------------------------------------------

def sigmoid(a) -> Variable:
    a = _lift(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))  # overflow-free form
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Variable:
    a = _lift(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,),
                   lambda g: (g * mask,))


def vexp(a) -> Variable:
    a = _lift(a)
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * np.conj(out),))


def vlog(a) -> Variable:
    a = _lift(a)
    return _record(np.log(a.value), (a,), lambda g: (g / np.conj(a.value),))


def vcos(a) -> Variable:
    a = _lift(a)
    av = a.value
    return _record(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def vsin(a) -> Variable:
    a = _lift(a)
    av = a.value
    return _record(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def varccos(a) -> Variable:
    a = _lift(a)
    av = np.clip(a.value, -1.0, 1.0)
    denom = np.sqrt(np.maximum(1.0 - av * av, 1e-30))
    return _record(np.arccos(av), (a,), lambda g: (-g / denom,))


def softmax(a, axis=-1) -> Variable:
    a = _lift(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (a,), vjp)


def log_softmax(a, axis=-1) -> Variable:
    a = _lift(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp)


# --------------------------------------------------------------------------
# convolution / pooling (cross-correlation semantics)
# --------------------------------------------------------------------------

def conv1d(x, w, bias=None, padding: int | tuple = 0) -> Variable:
    """Batched 1-D cross-correlation: x (N, Cin, T), w (Cout, Cin, K).

    Runs through an im2col layout so both directions are single BLAS calls;
    the input gradient folds the column gradient back with a length-K loop.
    """
    x, w = _lift(x), _lift(w)
    xv, wv = x.value, w.value
    N, Cin, T = xv.shape
    Cout, Cin_w, K = wv.shape
    if Cin != Cin_w:
        raise ValueError(f"channel mismatch: input {Cin}, kernel {Cin_w}")
    if isinstance(padding, tuple):
        pl, pr = padding
    else:
        pl = pr = int(padding)
    xp = np.pad(xv, ((0, 0), (0, 0), (pl, pr)))
    Tp = xp.shape[-1]
    Tout = Tp - K + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=-1)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(
        N * Tout, Cin * K)
    w2 = wv.reshape(Cout, Cin * K)
    out2 = cols @ w2.T                                     # (N*Tout, Cout)
    out = out2.reshape(N, Tout, Cout).transpose(0, 2, 1).copy()
    inputs = [x, w]
    if bias is not None:
        bias = _lift(bias)
        out += bias.value[None, :, None]
        inputs.append(bias)

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(
            N * Tout, Cout)
        gw = (g2.T @ cols).reshape(Cout, Cin, K)
        gck = (w2.T @ g2.T).reshape(Cin, K, N, Tout)
        gxp = np.zeros((N, Cin, Tp))
        for k in range(K):
            gxp[:, :, k:k + Tout] += gck[:, k].transpose(1, 0, 2)
        gx = gxp[:, :, pl:pl + T]
        outs = [gx, gw]
        if bias is not None:
            outs.append(g.sum(axis=(0, 2)))
        return tuple(outs)

    return _record(out, tuple(inputs), vjp)


def maxpool1d(x, k: int) -> Variable:
    """Non-overlapping max pool along the last axis; ties pick lowest index."""
    x = _lift(x)
    xv = x.value
    T = xv.shape[-1]
    Tp = (T // k) * k
    trimmed = xv[..., :Tp]
    blocks = trimmed.reshape(*xv.shape[:-1], Tp // k, k)
    arg = blocks.argmax(axis=-1)  # argmax returns the first (lowest) maximum
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    shp, dt = xv.shape, xv.dtype

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=dt)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros(shp, dtype=dt)
        gx[..., :Tp] = gb.reshape(*shp[:-1], Tp)
        return (gx,)

    return _record(out, (x,), vjp)


# --------------------------------------------------------------------------
# complex / spectral primitives
# --------------------------------------------------------------------------

def fft(a, axis=-1) -> Variable:
    """Unnormalized DFT along ``axis``; adjoint is the conjugate transpose."""
    a = _lift(a)
    if a.value.shape[axis] < 2:
        raise ValueError("fft requires axis length >= 2")
    out = np.fft.fft(a.value, axis=axis)
    n = a.value.shape[axis]
    real_in = not np.iscomplexobj(a.value)

    def vjp(g):
        ga = np.fft.ifft(g, axis=axis) * n
        return (ga.real if real_in else ga,)

    return _record(out, (a,), vjp)


def ifft(a, axis=-1) -> Variable:
    a = _lift(a)
    if a.value.shape[axis] < 2:
        raise ValueError("ifft requires axis length >= 2")
    out = np.fft.ifft(a.value, axis=axis)
    n = a.value.shape[axis]
    real_in = not np.iscomplexobj(a.value)

    def vjp(g):
        ga = np.fft.fft(g, axis=axis) / n
        return (ga.real if real_in else ga,)

    return _record(out, (a,), vjp)


def make_complex(re, im) -> Variable:
    re, im = _lift(re), _lift(im)
    out = re.value + 1j * im.value

    def vjp(g):
        return (_unbroadcast(g.real, re.value.shape, re.value.dtype),
                _unbroadcast(g.imag, im.value.shape, im.value.dtype))

    return _record(out.astype(COMPLEX), (re, im), vjp)


def real(a) -> Variable:
    a = _lift(a)
    return _record(np.ascontiguousarray(a.value.real), (a,),
                   lambda g: (g.astype(COMPLEX),))


def imag(a) -> Variable:
    a = _lift(a)
    return _record(np.ascontiguousarray(a.value.imag), (a,),
                   lambda g: ((1j * g).astype(COMPLEX),))


def conj(a) -> Variable:
    a = _lift(a)
    return _record(np.conj(a.value), (a,), lambda g: (np.conj(g),))


def modulus(a) -> Variable:
    """Complex modulus (or absolute value for real input)."""
    a = _lift(a)
    av = a.value
    out = np.abs(av)

    def vjp(g):
        safe = np.where(out == 0.0, 1.0, out)
        ga = g * av / safe
        if not np.iscomplexobj(av):
            ga = ga.real
        return (ga.astype(av.dtype),)

    return _record(out, (a,), vjp)


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------

def grad_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``f`` maps one leaf Variable to a scalar Variable and must be pure: any
    randomness has to be frozen by the caller before each evaluation.
    Relative error per coordinate is |g_ad - g_fd| / max(1, |g_fd|).
    """
    if h <= 0:
        raise ValueError("grad_check requires h > 0")
    x = np.asarray(x, dtype=REAL)

    def eval_only(arr):
        with Tape() as t:
            out = f(t.leaf(arr, requires_grad=False))
        val = np.asarray(out.value, dtype=REAL)
        if val.size != 1:
            raise ValueError("grad_check target must be scalar")
        if not np.isfinite(val).all():
            raise GradCheckError("function returned a non-finite value")
        return float(val.reshape(()))

    with Tape() as tape:
        xv = tape.leaf(x)
        y = f(xv)
        if y.value.size != 1:
            raise ValueError("grad_check target must be scalar")
        if not np.isfinite(y.value).all():
            raise GradCheckError("function returned a non-finite value")
        g_ad = tape.backward(y).wrt(xv)
    if not np.isfinite(g_ad).all():
        raise GradCheckError("reverse-mode gradient is non-finite")

    g_fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += h
        f_plus = eval_only(bump.reshape(x.shape))
        bump[i] -= 2 * h
        f_minus = eval_only(bump.reshape(x.shape))
        fd_flat[i] = (f_plus - f_minus) / (2 * h)

    denom = np.maximum(1.0, np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if flat.size else 0.0
