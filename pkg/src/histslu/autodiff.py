"""Reverse-mode automatic differentiation over dense float64 tensors.

Every trainable model in this package is composed from the primitives here.
A forward pass records nodes onto the active :class:`Tape` whenever an input
requires gradients; :func:`backward` replays the tape in reverse and
accumulates gradients into leaf tensors.
"""

import itertools

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "OptimizerState",
    "ShapeMismatch",
    "NonFiniteInput",
    "apply_primitive",
    "backward",
    "optimizer_step",
    "clip_gradients",
    "conv2d_forward",
    "conv2d_output_dim",
    "init_uniform",
]


class ShapeMismatch(ValueError):
    pass


class NonFiniteInput(ValueError):
    pass


# Checked on every primitive input; catches divergence at the op that made it.
CHECK_FINITE = True

_tensor_ids = itertools.count()


class Tensor:
    """Dense n-d array of float64 with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "tid")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.tid = next(_tensor_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(()))

    def copy(self):
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self):
        return "Tensor(shape=%s, requires_grad=%s)" % (self.shape, self.requires_grad)

    # operator sugar; constants are lifted to constant tensors
    def __add__(self, other):
        return apply_primitive("add", [self, _lift(other)])

    def __radd__(self, other):
        return apply_primitive("add", [_lift(other), self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, _lift(other)])

    def __rsub__(self, other):
        return apply_primitive("sub", [_lift(other), self])

    def __mul__(self, other):
        return apply_primitive("mul", [self, _lift(other)])

    def __rmul__(self, other):
        return apply_primitive("mul", [_lift(other), self])

    def __neg__(self):
        return apply_primitive("mul", [self, _lift(-1.0)])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, _lift(other)])


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("kind", "inputs", "output", "backfn")

    def __init__(self, kind, inputs, output, backfn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backfn = backfn


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Nodes are appended in execution order, which is a topological order by
    construction; backward traverses them exactly once in reverse.
    """

    def __init__(self):
        self.nodes = []
        self._out_ids = set()

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()
        return False

    def record(self, kind, inputs, output, backfn):
        self.nodes.append(_Node(kind, inputs, output, backfn))
        self._out_ids.add(output.tid)

    def __len__(self):
        return len(self.nodes)


_tape_stack = []


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


def _check_finite(kind, inputs):
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteInput("non-finite input to primitive '%s'" % kind)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive forward/backward definitions


def _fw_add(a, b):
    out = a.data + b.data
    def back(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))
    return out, back


def _fw_sub(a, b):
    out = a.data - b.data
    def back(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))
    return out, back


def _fw_mul(a, b):
    out = a.data * b.data
    def back(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))
    return out, back


def _fw_matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("matmul expects 2-d operands, got %s @ %s"
                            % (a.data.shape, b.data.shape))
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul inner dims differ: %s @ %s"
                            % (a.data.shape, b.data.shape))
    out = a.data @ b.data
    def back(g):
        return (g @ b.data.T, a.data.T @ g)
    return out, back


def _fw_concat_last_axis(*ts):
    arrs = [t.data for t in ts]
    base = arrs[0].shape[:-1]
    for a in arrs[1:]:
        if a.shape[:-1] != base:
            raise ShapeMismatch("concat_last_axis needs matching leading dims: %s"
                                % ([a.shape for a in arrs],))
    out = np.concatenate(arrs, axis=-1)
    widths = [a.shape[-1] for a in arrs]
    offsets = np.cumsum([0] + widths)
    def back(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(arrs)))
    return out, back


def _fw_sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    def back(g):
        return (g * out * (1.0 - out),)
    return out, back


def _fw_tanh(a):
    out = np.tanh(a.data)
    def back(g):
        return (g * (1.0 - out * out),)
    return out, back


RELU_CLIP = 20.0


def _fw_relu_clipped(a):
    x = a.data
    out = np.clip(x, 0.0, RELU_CLIP)
    mask = (x > 0.0) & (x < RELU_CLIP)
    def back(g):
        return (g * mask,)
    return out, back


def _fw_softmax_rows(a):
    x = a.data
    if x.ndim != 2:
        raise ShapeMismatch("softmax_rows expects 2-d input, got %s" % (x.shape,))
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    def back(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)
    return out, back


def _fw_log_softmax_rows(a):
    x = a.data
    if x.ndim != 2:
        raise ShapeMismatch("log_softmax_rows expects 2-d input, got %s" % (x.shape,))
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    def back(g):
        return (g - sm * g.sum(axis=1, keepdims=True),)
    return out, back


def _fw_log(a):
    x = a.data
    if np.any(x <= 0.0):
        raise NonFiniteInput("log of non-positive value")
    out = np.log(x)
    def back(g):
        return (g / x,)
    return out, back


def _fw_softplus(a):
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    def back(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)
    return out, back


def _fw_rsqrt(a):
    x = a.data
    if np.any(x <= 0.0):
        raise NonFiniteInput("rsqrt of non-positive value")
    out = 1.0 / np.sqrt(x)
    def back(g):
        return (g * (-0.5) * out / x,)
    return out, back


def _fw_slice(a, axis=0, start=0, stop=None):
    x = a.data
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x[idx].copy()
    def back(g):
        gx = np.zeros_like(x)
        gx[idx] = g
        return (gx,)
    return out, back


def _fw_sum(a, axis=None, keepdims=False):
    x = a.data
    out = x.sum(axis=axis, keepdims=keepdims)
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)
    return out, back


def _fw_transpose(a, axes=None):
    x = a.data
    out = np.transpose(x, axes).copy()
    inv = None if axes is None else np.argsort(axes)
    def back(g):
        return (np.transpose(g, inv).copy(),)
    return out, back


def _fw_reshape(a, shape=None):
    x = a.data
    out = x.reshape(shape).copy()
    def back(g):
        return (g.reshape(x.shape),)
    return out, back


def _fw_stack_rows(*ts):
    arrs = [t.data for t in ts]
    out = np.stack(arrs, axis=0)
    def back(g):
        return tuple(g[i] for i in range(len(arrs)))
    return out, back


def _fw_take_rows(a, indices=None):
    x = a.data
    idx = np.asarray(indices, dtype=np.intp)
    out = x[idx].copy()
    def back(g):
        gx = np.zeros_like(x)
        np.add.at(gx, idx, g)
        return (gx,)
    return out, back


def _fw_select_time(a, indices=None):
    # x: [time, batch, feat] -> out[b] = x[indices[b], b]
    x = a.data
    idx = np.asarray(indices, dtype=np.intp)
    cols = np.arange(x.shape[1])
    out = x[idx, cols].copy()
    def back(g):
        gx = np.zeros_like(x)
        gx[idx, cols] = g
        return (gx,)
    return out, back


def _fw_permute_time(a, perm=None):
    # x: [time, batch, feat]; out[t, b] = x[perm[t, b], b]
    x = a.data
    p = np.asarray(perm, dtype=np.intp)
    cols = np.arange(x.shape[1])[None, :]
    out = x[p, cols].copy()
    def back(g):
        gx = np.zeros_like(x)
        np.add.at(gx, (p, cols), g)
        return (gx,)
    return out, back


_PRIMITIVES = {
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "matmul": _fw_matmul,
    "concat_last_axis": _fw_concat_last_axis,
    "sigmoid": _fw_sigmoid,
    "tanh": _fw_tanh,
    "relu_clipped": _fw_relu_clipped,
    "softmax_rows": _fw_softmax_rows,
    "log_softmax_rows": _fw_log_softmax_rows,
    "log": _fw_log,
    "softplus": _fw_softplus,
    "rsqrt": _fw_rsqrt,
    "slice": _fw_slice,
    "sum": _fw_sum,
    "transpose": _fw_transpose,
    "reshape": _fw_reshape,
    "stack_rows": _fw_stack_rows,
    "take_rows": _fw_take_rows,
    "select_time": _fw_select_time,
    "permute_time": _fw_permute_time,
}


def apply_primitive(kind, inputs, **params):
    """Apply a named primitive to input tensors, recording a tape node.

    A node is recorded when a tape is active and any input requires
    gradients; the output then requires gradients as well.
    """
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise ValueError("unknown primitive kind %r" % kind)
    if CHECK_FINITE:
        _check_finite(kind, inputs)
    try:
        out_data, backfn = fn(*inputs, **params)
    except ValueError as e:
        if isinstance(e, (ShapeMismatch, NonFiniteInput)):
            raise
        raise ShapeMismatch("%s: %s (shapes %s)"
                            % (kind, e, [t.data.shape for t in inputs])) from e
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, list(inputs), out, backfn)
    return out


def record_custom(kind, inputs, out_data, backfn):
    """Register a custom-differentiated op (used by conv2d and the CTC loss)."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(kind, list(inputs), out, backfn)
    return out


def backward(tape, loss):
    """Accumulate d(loss)/d(leaf) into each leaf tensor's grad.

    Intermediate adjoints live in a per-call table, so calling backward
    twice on the same tape adds the gradient twice to the leaves (never
    double-counts through retained intermediates).
    """
    if loss.size != 1:
        raise ValueError("backward needs a scalar loss, got shape %s" % (loss.shape,))
    if loss.tid not in tape._out_ids:
        raise ValueError("loss tensor was not produced through this tape")
    adjoint = {loss: np.ones_like(loss.data)}
    produced = tape._out_ids
    for node in reversed(tape.nodes):
        g = adjoint.pop(node.output, None)
        if g is None:
            continue
        gs = node.backfn(g.reshape(node.output.data.shape))
        for t, gi in zip(node.inputs, gs):
            if gi is None:
                continue
            acc = adjoint.get(t)
            adjoint[t] = gi if acc is None else acc + gi
    for t, g in adjoint.items():
        # whatever is left was never an output: a leaf of this tape
        if t.requires_grad and t.tid not in produced:
            t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# optimizers


class OptimizerState:
    """SGD or Adam state; Adam keeps bias-corrected per-parameter moments."""

    def __init__(self, kind="adam", learning_rate=1e-3,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError("optimizer kind must be 'sgd' or 'adam'")
        self.kind = kind
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {}
        self._v = {}


def optimizer_step(state, params):
    """One update over `params`; every param must carry a finite grad.

    Gradients are zeroed after the step.
    """
    for p in params:
        if p.grad is None:
            raise ValueError("optimizer_step: parameter has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteInput("optimizer_step: non-finite gradient")
    state.step_count += 1
    if state.kind == "sgd":
        for p in params:
            p.data -= state.learning_rate * p.grad
    else:
        t = state.step_count
        b1, b2 = state.beta1, state.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p in params:
            key = id(p)
            m = state._m.get(key)
            if m is None:
                m = state._m[key] = np.zeros_like(p.data)
                state._v[key] = np.zeros_like(p.data)
            v = state._v[key]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * (p.grad * p.grad)
            p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    for p in params:
        p.grad = None
    return state


def clip_gradients(params, max_norm=5.0):
    """Scale all grads so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def init_uniform(rng, shape, fan_in, requires_grad=True):
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# 2-d convolution (freq x time), strided with zero padding


def conv2d_output_dim(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


_col_index_cache = {}


def _conv_geometry(in_shape, kf, kt, sf, st, pf, pt):
    """Flat gather indices mapping padded input -> column matrix."""
    key = (in_shape, kf, kt, sf, st, pf, pt)
    hit = _col_index_cache.get(key)
    if hit is not None:
        return hit
    c, f, t = in_shape
    fp, tp = f + 2 * pf, t + 2 * pt
    fo = conv2d_output_dim(f, kf, sf, pf)
    to = conv2d_output_dim(t, kt, st, pt)
    # index [fo*to, c*kf*kt] into a flattened [c, fp, tp] padded input
    f0 = (np.arange(fo) * sf)[:, None, None, None, None]
    t0 = (np.arange(to) * st)[None, :, None, None, None]
    ci = np.arange(c)[None, None, :, None, None]
    fi = np.arange(kf)[None, None, None, :, None]
    ti = np.arange(kt)[None, None, None, None, :]
    flat = (ci * fp + f0 + fi) * tp + (t0 + ti)
    flat = flat.reshape(fo * to, c * kf * kt)
    out = (flat, fo, to, fp, tp)
    _col_index_cache[key] = out
    return out


def conv2d_forward(inp, weights, bias, stride, padding):
    """2-d convolution over [channels, freq, time] (or a batched 4-d input).

    weights: [out_c, in_c, kf, kt]; bias: [out_c]; stride (sf, st);
    padding (pf, pt). Output dims follow floor((n + 2p - k)/s) + 1.
    """
    squeeze = False
    x = inp.data
    if x.ndim == 3:
        x = x[None]
        squeeze = True
    if x.ndim != 4:
        raise ShapeMismatch("conv2d expects [channels, freq, time] input, got %s"
                            % (inp.data.shape,))
    b, c, f, t = x.shape
    oc, ic, kf, kt = weights.data.shape
    if ic != c:
        raise ShapeMismatch("conv2d channel mismatch: input %d, weights %d" % (c, ic))
    sf, st = stride
    pf, pt = padding
    if f + 2 * pf < kf or t + 2 * pt < kt:
        raise ShapeMismatch("conv2d kernel (%d,%d) larger than padded input (%d,%d)"
                            % (kf, kt, f + 2 * pf, t + 2 * pt))
    if CHECK_FINITE:
        _check_finite("conv2d", [inp, weights, bias])
    flat_idx, fo, to, fp, tp = _conv_geometry((c, f, t), kf, kt, sf, st, pf, pt)
    xp = np.zeros((b, c, fp, tp))
    xp[:, :, pf:pf + f, pt:pt + t] = x
    cols = xp.reshape(b, -1)[:, flat_idx]            # [b, fo*to, c*kf*kt]
    wmat = weights.data.reshape(oc, -1)              # [oc, c*kf*kt]
    out = cols @ wmat.T + bias.data                  # [b, fo*to, oc]
    out = out.transpose(0, 2, 1).reshape(b, oc, fo, to)

    def back(g):
        if g.ndim == 3:
            gg = g[None]
        else:
            gg = g
        gcols = gg.reshape(b, oc, fo * to).transpose(0, 2, 1)  # [b, fo*to, oc]
        gw = np.einsum("bpo,bpk->ok", gcols, cols).reshape(weights.data.shape)
        gb = gcols.sum(axis=(0, 1))
        dcols = gcols @ wmat                                    # [b, fo*to, c*kf*kt]
        gxp = np.zeros((b, c * fp * tp))
        for i in range(b):
            np.add.at(gxp[i], flat_idx.ravel(), dcols[i].ravel())
        gx = gxp.reshape(b, c, fp, tp)[:, :, pf:pf + f, pt:pt + t]
        if squeeze:
            gx = gx[0]
        return (gx, gw, gb)

    out_data = out[0] if squeeze else out
    return record_custom("conv2d", [inp, weights, bias], out_data, back)
