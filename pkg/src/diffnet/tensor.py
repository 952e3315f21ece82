"""Dense float64 tensors with a reverse-mode tape.

Every tensor created inside a :class:`Tape` records the primitive that
produced it and a closure mapping the upstream gradient to gradients for
each parent.  Tensors created without a tape are plain constants, so the
same model code runs in inference mode with no recording overhead.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "tape", "op", "parents", "backward_fn", "name")

    def __init__(self, value, tape=None, op="const", parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def leaf(self, value, name=None) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), tape=self, op="leaf", name=name)
        self.nodes.append(t)
        return t

    def record(self, value, op, parents, backward_fn) -> Tensor:
        t = Tensor(value, tape=self, op=op, parents=parents, backward_fn=backward_fn)
        self.nodes.append(t)
        return t

    def backward(self, root: Tensor) -> None:
        if root.value.size != 1 or root.value.ndim > 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape is not self:
            raise ValueError("root was not recorded on this tape")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or parent.tape is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64)
                else:
                    parent.grad = parent.grad + g
        for node in self.nodes:
            if node.op == "leaf" and node.grad is None:
                node.grad = np.zeros_like(node.value)


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every node of ``root``'s tape."""
    if root.tape is None:
        raise ValueError("root is a constant; nothing to differentiate")
    root.tape.backward(root)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor):
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = x.tape
    return tape


def _make(value, op, parents, backward_fn) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value, op=op)
    return tape.record(value, op, tuple(parents), backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("elementwise-mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, "elementwise-mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.value * c, "scalar-mul", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        a2 = av if av.ndim == 2 else av[None, :]
        b2 = bv if bv.ndim == 2 else bv[:, None]
        g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
        ga = (g2 @ b2.T).reshape(av.shape)
        gb = (a2.T @ g2).reshape(bv.shape)
        return ga, gb

    return _make(av @ bv, "matmul", (a, b), back)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat-last-axis: no inputs")
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat-last-axis: incompatible shapes " + ", ".join(str(x.shape) for x in xs)
        ) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(value, "concat-last-axis", tuple(xs),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim == 0:
        raise ShapeError("gather-rows: cannot gather from a scalar")
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"gather-rows: index out of range for shape {a.shape}")
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], "gather-rows", (a,), back)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _make(a.value[..., start:stop].copy(), "slice", (a,), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def total(a) -> Tensor:
    """Sum of all entries, as a scalar."""
    a = as_tensor(a)
    shape = a.shape
    return _make(np.array(a.value.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def reduce_mean(a, axis: int) -> Tensor:
    a = as_tensor(a)
    n = a.shape[axis]
    return _make(a.value.mean(axis=axis), "mean", (a,),
                 lambda g: (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,))


def reduce_max(a, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if a.value.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"max: empty axis {axis} in shape {a.shape}")
    arg = np.argmax(a.value, axis=axis)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _make(np.take_along_axis(a.value, np.expand_dims(arg, axis), axis).squeeze(axis),
                 "max", (a,), back)


def max_over_time(m) -> Tensor:
    m = as_tensor(m)
    if m.value.ndim != 2 or m.shape[0] == 0:
        raise ShapeError(f"max_over_time: need a T×d matrix with T ≥ 1, got shape {m.shape}")
    return reduce_max(m, axis=0)


# ------------------------------------------------------------- nonlinearities


def _unary(a, op, f, df) -> Tensor:
    a = as_tensor(a)
    x = a.value
    y = f(x)
    return _make(y, op, (a,), lambda g: (g * df(x, y),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    return _unary(a, "sigmoid", _sigmoid, lambda x, y: y * (1.0 - y))


def tanh(a) -> Tensor:
    return _unary(a, "tanh", np.tanh, lambda x, y: 1.0 - y * y)


def _selu(x):
    return SELU_SCALE * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu(a) -> Tensor:
    return _unary(a, "selu", _selu,
                  lambda x, y: np.where(x > 0, SELU_SCALE, SELU_SCALE * SELU_ALPHA * np.exp(np.minimum(x, 0.0))))


def exp(a) -> Tensor:
    return _unary(a, "exp", np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary(a, "log", np.log, lambda x, y: 1.0 / x)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"selu": selu, "tanh": tanh}


def softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    if v.value.ndim == 0 or v.shape[axis] == 0:
        raise ShapeError(f"softmax: empty input of shape {v.shape}")
    z = np.exp(v.value - v.value.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)
    return _make(y, "softmax", (v,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    if v.value.ndim == 0 or v.shape[axis] == 0:
        raise ShapeError(f"log_softmax: empty input of shape {v.shape}")
    shifted = v.value - v.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _make(y, "log-softmax", (v,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ----------------------------------------------------------- fused operations


def _row_normalize(x: np.ndarray):
    norms = np.sqrt((x * x).sum(axis=-1))
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    unit = np.where((norms < NORM_EPS)[:, None], 0.0, x / safe[:, None])
    return unit, norms, safe


def _row_normalize_back(d_unit, unit, norms, safe):
    proj = (d_unit * unit).sum(axis=-1, keepdims=True)
    dx = (d_unit - unit * proj) / safe[:, None]
    dx[norms < NORM_EPS] = 0.0
    return dx


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarity of the rows of ``a`` (M×d) and ``b`` (N×d).

    Rows with norm below 1e-12 give similarity 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: incompatible shapes {a.shape} and {b.shape}")
    ua, na, sa = _row_normalize(a.value)
    ub, nb, sb = _row_normalize(b.value)
    sim = ua @ ub.T

    def back(g):
        return (_row_normalize_back(g @ ub, ua, na, sa),
                _row_normalize_back(g.T @ ua, ub, nb, sb))

    return _make(sim, "cosine", (a, b), back)


def cosine(a, b) -> Tensor:
    """Cosine similarity of two vectors as a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    return reshape(cosine_matrix(reshape(a, (1, -1)), reshape(b, (1, -1))), ())


def pad_stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack T_i×d sequences into a zero-padded B×T_max×d array."""
    xs = [as_tensor(x) for x in xs]
    if not xs or any(x.value.ndim != 2 for x in xs) or len({x.shape[1] for x in xs}) != 1:
        raise ShapeError("pad-stack: need matrices with a common width, got "
                         + ", ".join(str(x.shape) for x in xs))
    lengths = [x.shape[0] for x in xs]
    out = np.zeros((len(xs), max(lengths), xs[0].shape[1]))
    for i, x in enumerate(xs):
        out[i, :lengths[i]] = x.value
    return _make(out, "pad-stack", tuple(xs), lambda g: tuple(g[i, :n] for i, n in enumerate(lengths)))


def take_sequence(a, index: int, length: int) -> Tensor:
    """Rows ``[:length]`` of item ``index`` of a B×T×d array."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[index, :length] = g
        return (out,)

    return _make(a.value[index, :length].copy(), "take-sequence", (a,), back)


def _reversal_index(lengths, t_max):
    """Per-row permutation reversing the valid prefix and fixing the padding."""
    idx = np.tile(np.arange(t_max), (len(lengths), 1))
    for i, n in enumerate(lengths):
        idx[i, :n] = np.arange(n - 1, -1, -1)
    return idx


def lstm_sequence(x, wx, wh, b, reverse: bool = False, lengths=None) -> Tensor:
    """Run one LSTM direction over a sequence as a single tape node.

    ``x`` is T×in, or B×T×in with right padding described by ``lengths``.
    Gate layout in the 4h columns is input, forget, candidate, output.
    Output position t holds the state after consuming input t, so a reversed
    pass stays aligned with the input; padded positions output zeros.
    """
    x, wx, wh, b = (as_tensor(v) for v in (x, wx, wh, b))
    single = x.value.ndim == 2
    xv = x.value[None] if single else x.value
    if xv.ndim != 3 or xv.shape[1] == 0:
        raise ShapeError(f"lstm: need a T×in input with T ≥ 1, got shape {x.shape}")
    n_in, four_h = wx.shape
    hid = four_h // 4
    if xv.shape[2] != n_in or wh.shape != (hid, four_h) or b.shape != (four_h,):
        raise ShapeError(
            f"lstm: input {x.shape} does not match weights {wx.shape}, {wh.shape}, {b.shape}"
        )
    B, T_, _ = xv.shape
    lengths = np.full(B, T_) if lengths is None else np.asarray(lengths)
    if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > T_:
        raise ShapeError(f"lstm: lengths {lengths.tolist()} do not fit input {x.shape}")
    mask = (np.arange(T_)[None, :] < lengths[:, None])[:, :, None]
    rows = np.arange(B)[:, None]
    perm = _reversal_index(lengths, T_) if reverse else None
    if reverse:
        xv = xv[rows, perm]
    wxv, whv, bv = wx.value, wh.value, b.value
    xz = xv @ wxv + bv
    H = np.zeros((B, T_, hid))
    C = np.zeros((B, T_ + 1, hid))  # C[:, 0] is the initial cell
    S = np.zeros((B, T_, four_h))  # gate activations, candidate in the third block
    h = np.zeros((B, hid))
    for t in range(T_):
        z = xz[:, t] + h @ whv
        s = _sigmoid(z)
        s[:, 2 * hid:3 * hid] = np.tanh(z[:, 2 * hid:3 * hid])
        S[:, t] = s
        c = s[:, hid:2 * hid] * C[:, t] + s[:, :hid] * s[:, 2 * hid:3 * hid]
        C[:, t + 1] = c
        h = s[:, 3 * hid:] * np.tanh(c)
        H[:, t] = h
    out = H * mask
    if reverse:
        out = out[rows, perm]
    if single:
        out = out[0]

    def back(gH):
        gH = gH[None] if single else gH
        if reverse:
            gH = gH[rows, perm]
        gH = gH * mask
        i, f, g, o = S[..., :hid], S[..., hid:2 * hid], S[..., 2 * hid:3 * hid], S[..., 3 * hid:]
        tc = np.tanh(C[:, 1:])
        # d z / d c for the i, f, g blocks and d z / d h for the o block
        factors = np.concatenate([g * i * (1 - i), C[:, :-1] * f * (1 - f), i * (1 - g * g), tc * o * (1 - o)],
                                 axis=-1)
        dc_dh = o * (1 - tc * tc)
        dz_all = np.zeros((B, T_, four_h))
        dh_next = np.zeros((B, hid))
        dc_next = np.zeros((B, hid))
        for t in range(T_ - 1, -1, -1):
            dh = gH[:, t] + dh_next
            dc = dc_next + dh * dc_dh[:, t]
            dz = np.concatenate((dc, dc, dc, dh), axis=1) * factors[:, t]
            dz_all[:, t] = dz
            dh_next = dz @ whv.T
            dc_next = dc * f[:, t]
        h_prev = np.zeros((B, T_, hid))
        h_prev[:, 1:] = H[:, :-1]
        dx = dz_all @ wxv.T
        if reverse:
            dx = dx[rows, perm]
        flat_dz = dz_all.reshape(-1, four_h)
        return ((dx[0] if single else dx), xv.reshape(-1, n_in).T @ flat_dz,
                h_prev.reshape(-1, hid).T @ flat_dz, flat_dz.sum(axis=0))

    return _make(out, "lstm", (x, wx, wh, b), back)


def lstm_cell_step(x, h_prev, c_prev, wx, wh, b):
    """One LSTM step composed from primitives; returns ``(h, c)``."""
    x, h_prev, c_prev, wx, wh, b = (as_tensor(v) for v in (x, h_prev, c_prev, wx, wh, b))
    hid = wh.shape[0]
    if x.shape != (wx.shape[0],) or h_prev.shape != (hid,) or c_prev.shape != (hid,) \
            or wx.shape[1] != 4 * hid or b.shape != (4 * hid,):
        raise ShapeError(
            f"lstm_cell_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"do not match weights {wx.shape}, {wh.shape}, {b.shape}"
        )
    z = add(add(matmul(x, wx), matmul(h_prev, wh)), b)
    i = sigmoid(slice_last(z, 0, hid))
    f = sigmoid(slice_last(z, hid, 2 * hid))
    g = tanh(slice_last(z, 2 * hid, 3 * hid))
    o = sigmoid(slice_last(z, 3 * hid, 4 * hid))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


# ----------------------------------------------------------- randomness


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator (numpy's documented default bit generator)."""
    return np.random.Generator(np.random.PCG64(seed))


def dropout_mask(shape, rate: float, rng: np.random.Generator, training: bool) -> np.ndarray:
    """Inverted-dropout mask: kept entries are scaled by 1/(1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# ------------------------------------------------------- gradient checking


def finite_diff_check(f: Callable[[dict], Tensor], params: dict, step: float = 1e-5) -> float:
    """Compare autodiff against central differences for every parameter entry.

    ``f`` maps a dict of named tensors to a scalar tensor.  Returns the max
    over entries of ``|autodiff - fd| / max(1, |fd|)``.
    """
    def evaluate(values):
        return float(f({k: Tensor(v) for k, v in values.items()}).value)

    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if evaluate(params) != evaluate(params):
        raise ValueError("function is not deterministic (is dropout active?)")

    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    root = f(leaves)
    tape.backward(root)

    worst = 0.0
    for name, value in params.items():
        grad = leaves[name].grad
        flat = value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = evaluate(params)
            flat[j] = orig - step
            down = evaluate(params)
            flat[j] = orig
            fd = (up - down) / (2 * step)
            err = abs(grad.reshape(-1)[j] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    if not math.isfinite(worst):
        raise ValueError("gradient check produced a non-finite error")
    return worst
