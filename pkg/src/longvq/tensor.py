"""Array substrate with reverse-mode differentiation.

Values are numpy arrays wrapped in ``Tensor`` nodes that record, for each
operation, the parent nodes and a vector-Jacobian closure. ``backward()``
replays the tape in reverse topological order. Every public operation
validates that its output is finite and raises ``NumericsError`` naming the
offending op otherwise.

Precision is a process-wide setting (float32 for training, float64 for
oracle and gradient tests); use ``set_precision`` or the ``precision``
context manager before creating tensors.

Shape conventions used throughout the package: sequences are (L, d) or
batched (B, L, d); matrices are row-major.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor", "NumericsError", "set_precision", "get_dtype", "precision",
    "no_grad", "tensor", "param", "grad", "finite_diff", "zero_grads",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "stack", "gather_rows", "tsum", "tmean", "sigmoid", "silu", "relu", "phi_relu2",
    "phi_laplace", "texp", "tlog", "softmax_rows", "cross_entropy",
    "conv_causal", "conv_causal_channels", "band_bias_add", "layer_norm",
    "scale_norm", "batch_norm", "dropout", "set_backward_fault",
    "LAPLACE_MU", "LAPLACE_SIGMA",
]

_DTYPE = np.float32
_CHECK_FINITE = True
_NO_GRAD = False
_FAULT_OP = None

# elementwise laplace attention function: 0.5*(1+erf((x-mu)/(sigma*sqrt(2))))
LAPLACE_MU = float(np.sqrt(0.5))
LAPLACE_SIGMA = float(np.sqrt(0.25 / np.pi))


class NumericsError(RuntimeError):
    """Raised when an operation produces NaN/Inf or is numerically invalid."""


def set_precision(kind):
    """Select process-wide float precision: 'float32' or 'float64'."""
    global _DTYPE
    if kind in ("float32", np.float32, 32):
        _DTYPE = np.float32
    elif kind in ("float64", np.float64, 64):
        _DTYPE = np.float64
    else:
        raise ValueError(f"unknown precision {kind!r}")


def get_dtype():
    return _DTYPE


class precision:
    """Context manager scoping the process precision."""

    def __init__(self, kind):
        self.kind = kind
        self._saved = None

    def __enter__(self):
        self._saved = _DTYPE
        set_precision(self.kind)
        return self

    def __exit__(self, *exc):
        set_precision(self._saved)
        return False


class no_grad:
    """Context manager disabling tape recording (forward values only)."""

    def __enter__(self):
        global _NO_GRAD
        self._saved = _NO_GRAD
        _NO_GRAD = True
        return self

    def __exit__(self, *exc):
        global _NO_GRAD
        _NO_GRAD = self._saved
        return False


def set_backward_fault(op_name):
    """Test hook: flip the sign of one op's backward. None disables."""
    global _FAULT_OP
    _FAULT_OP = op_name


def _check(data, op):
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by op '{op}'")
    return data


class Tensor:
    """A tape node holding a numpy array.

    Treat ``data`` as immutable once the node is produced; only the
    optimizer mutates parameter arrays, between passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"

    def item(self):
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed=None):
        """Reverse-mode sweep from this node; accumulates into .grad."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(_toposort(self)):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not (p.requires_grad or p._vjp is not None):
                    continue
                g = np.asarray(g, dtype=p.data.dtype)
                p.grad = g if p.grad is None else p.grad + g


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data):
    """Wrap data as a constant (non-tracked) tensor at current precision."""
    return Tensor(data)


def param(data, name=None):
    """Wrap data as a trainable parameter."""
    return Tensor(data, requires_grad=True, name=name)


def _tracked(parents):
    if _NO_GRAD:
        return False
    return any(p.requires_grad or p._vjp is not None for p in parents)


def make_op(data, parents, vjp, op_name):
    """Build a tape node; vjp(g) returns per-parent gradients (or None)."""
    _check(data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    if _tracked(parents):
        out._parents = tuple(parents)
        if _FAULT_OP == op_name:
            out._vjp = lambda g: tuple(
                None if gi is None else -gi for gi in vjp(g))
        else:
            out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape))
                 if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.data.shape),
                              _unbroadcast(g, b.data.shape)), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.data.shape),
                              _unbroadcast(-g, b.data.shape)), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.data.shape),
                              _unbroadcast(g * a.data, b.data.shape)), "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.data.shape),
                              _unbroadcast(-g * out / b.data, b.data.shape)),
                   "div")


def neg(a):
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    """Matrix product on the last two axes, leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors with ndim >= 2")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return make_op(out, (a, b), vjp, "matmul")


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    old = a.data.shape
    return make_op(a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(old),), "reshape")


def stack(tensors, axis=0):
    """Stack equal-shaped tensors along a new axis."""
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_op(out, tuple(tensors), vjp, "stack")


def gather_rows(table, idx):
    """table[idx] for a 2-D table and integer index array of any shape."""
    idx = np.asarray(idx)
    if table.ndim != 2:
        raise ValueError("gather_rows expects a 2-D table")
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return make_op(out, (table,), vjp, "gather_rows")


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return make_op(np.asarray(out, dtype=a.data.dtype), (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def sigmoid(a):
    s = expit(a.data)
    return make_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a):
    """x * sigmoid(x), the self-gated activation."""
    s = expit(a.data)
    out = a.data * s
    return make_op(out, (a,),
                   lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


def relu(a):
    m = a.data > 0
    return make_op(np.where(m, a.data, 0.0), (a,),
                   lambda g: (g * m,), "relu")


def phi_relu2(a):
    """relu(x)^2, the squared-rectifier attention function."""
    r = np.maximum(a.data, 0.0)
    return make_op(r * r, (a,), lambda g: (g * 2.0 * r,), "relu2")


def _laplace_np(x):
    return 0.5 * (1.0 + erf((x - LAPLACE_MU) / (LAPLACE_SIGMA * np.sqrt(2.0))))


def _laplace_deriv_np(x):
    z = (x - LAPLACE_MU) / LAPLACE_SIGMA
    return np.exp(-0.5 * z * z) / (LAPLACE_SIGMA * np.sqrt(2.0 * np.pi))


def phi_laplace(a):
    """Smooth CDF-shaped attention function, bounded in [0, 1]."""
    return make_op(_laplace_np(a.data), (a,),
                   lambda g: (g * _laplace_deriv_np(a.data),), "laplace")


def texp(a):
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def tlog(a):
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ---------------------------------------------------------------------------
# rows of scores -> rows of weights

def softmax_rows(a, mask=None):
    """Row-stable softmax over the last axis.

    mask: optional boolean array (True = allowed). Disallowed entries get
    zero weight; each row must keep at least one allowed entry.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise NumericsError("softmax_rows: fully masked row")
        neg = np.finfo(x.dtype).min / 4
        x = np.where(mask, x, neg)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (p * g).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return make_op(p, (a,), vjp, "softmax_rows")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets.

    logits: (N, C); targets: (N,) ints. Stable log-sum-exp; gradient is
    (softmax - onehot)/N.
    """
    x = logits.data
    t = np.asarray(targets)
    if x.ndim != 2 or t.shape != (x.shape[0],):
        raise ValueError("cross_entropy expects (N, C) logits and (N,) targets")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    n = x.shape[0]
    loss = (lse - x[np.arange(n), t]).mean()

    def vjp(g):
        p = e / z
        p[np.arange(n), t] -= 1.0
        return (g * p / n,)

    return make_op(np.asarray(loss, dtype=x.dtype), (logits,), vjp,
                   "cross_entropy")


# ---------------------------------------------------------------------------
# causal convolution via FFT

def _next_pow2(n):
    return 1 << (int(n - 1)).bit_length()


def _fft_causal(kern, sig, axis, L):
    n = _next_pow2(2 * L)
    kf = np.fft.rfft(kern, n=n, axis=axis)
    sf = np.fft.rfft(sig, n=n, axis=axis)
    full = np.fft.irfft(kf * sf, n=n, axis=axis)
    sl = [slice(None)] * full.ndim
    sl[axis] = slice(0, L)
    return np.ascontiguousarray(full[tuple(sl)], dtype=np.result_type(kern, sig))


def conv_causal(kernel, signal):
    """Causal 1-D convolution: out[t] = sum_{j<=t} kernel[j]*signal[t-j].

    Computed with a zero-padded FFT of length >= 2L. Kernel and signal
    must share length L >= 1.
    """
    kernel, signal = _as_tensor(kernel), _as_tensor(signal)
    if kernel.ndim != 1 or signal.ndim != 1:
        raise ValueError("conv_causal expects 1-D kernel and signal")
    L = kernel.data.shape[0]
    if signal.data.shape[0] != L or L < 1:
        raise ValueError(
            f"conv_causal length mismatch: kernel {L}, signal {signal.data.shape[0]}")
    _check(kernel.data, "conv_causal(kernel)")
    _check(signal.data, "conv_causal(signal)")
    out = _fft_causal(kernel.data, signal.data, 0, L)

    def vjp(g):
        gr = g[::-1]
        dk = _fft_causal(signal.data, gr, 0, L)[::-1]
        ds = _fft_causal(kernel.data, gr, 0, L)[::-1]
        return dk.copy(), ds.copy()

    return make_op(out, (kernel, signal), vjp, "conv_causal")


def conv_causal_channels(kernels, x):
    """Per-channel causal convolution of a batched sequence.

    kernels: (d, L); x: (B, L, d). Channel c of every batch element is
    convolved with kernels[c].
    """
    kernels, x = _as_tensor(kernels), _as_tensor(x)
    B, L, d = x.data.shape
    if kernels.data.shape != (d, L):
        raise ValueError(
            f"kernel bank shape {kernels.data.shape} != ({d}, {L})")
    kt = kernels.data.T  # (L, d)
    out = _fft_causal(kt[None], x.data, 1, L)

    def vjp(g):
        gr = g[:, ::-1, :]
        ds = _fft_causal(kt[None], gr, 1, L)[:, ::-1, :]
        dk_full = _fft_causal(x.data, gr, 1, L)[:, ::-1, :]  # (B, L, d)
        dk = dk_full.sum(axis=0).T
        return np.ascontiguousarray(dk), np.ascontiguousarray(ds)

    return make_op(out, (kernels, x), vjp, "conv_causal_channels")


# ---------------------------------------------------------------------------
# banded relative-position bias

def _band_diagonals(L, w, causal):
    """Index arrays per relative offset delta with |delta| <= w."""
    out = []
    lo = 0 if causal else -w
    for delta in range(lo, w + 1):
        i = np.arange(max(0, delta), L + min(0, delta))
        out.append((delta, i, i - delta))
    return out


def band_bias_add(scores, bias, w, causal):
    """Add learnable per-offset biases on the band |i-j| <= w.

    scores: (..., L, L) logits; bias: (2w+1,) indexed by offset i-j from
    -w..w. In causal mode only offsets >= 0 are touched.
    """
    L = scores.data.shape[-1]
    if bias.data.shape != (2 * w + 1,):
        raise ValueError(f"bias must have shape ({2 * w + 1},)")
    out = scores.data.copy()
    diags = _band_diagonals(L, w, causal)
    for delta, i, j in diags:
        out[..., i, j] += bias.data[delta + w]

    def vjp(g):
        db = np.zeros_like(bias.data)
        for delta, i, j in diags:
            db[delta + w] = g[..., i, j].sum()
        return g, db

    return make_op(out, (scores, bias), vjp, "band_bias_add")


# ---------------------------------------------------------------------------
# normalizers

def layer_norm(x, gain, bias, eps=1e-5):
    """Per-position normalization over the channel (last) axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = xn * gain.data + bias.data
    d = x.data.shape[-1]

    def vjp(g):
        gxn = g * gain.data
        dx = inv * (gxn - gxn.mean(axis=-1, keepdims=True)
                    - xn * (gxn * xn).mean(axis=-1, keepdims=True))
        dgain = _unbroadcast(g * xn, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        return dx, dgain, dbias

    return make_op(out, (x, gain, bias), vjp, "layer_norm")


def scale_norm(x, g_scalar, eps=1e-6):
    """Per-position rescale to norm g: g * y / (||y|| + eps)."""
    nrm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True)) + eps
    xn = x.data / nrm
    out = g_scalar.data * xn

    def vjp(g):
        gg = np.asarray((g * xn).sum(), dtype=x.data.dtype).reshape(
            g_scalar.data.shape)
        gx = g_scalar.data * g
        dot = (gx * x.data).sum(axis=-1, keepdims=True)
        # d||y||/dy = y/||y||; nrm carries the +eps so ||y|| = nrm - eps
        dx = gx / nrm - x.data * dot / (nrm * nrm * (nrm - eps) + 1e-30)
        return dx, gg

    return make_op(out, (x, g_scalar), vjp, "scale_norm")


def batch_norm(x, gain, bias, running, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over (batch x length).

    x: (B, L, C). ``running`` is a dict with 'mean' and 'var' arrays of
    shape (C,), updated in place during training and used verbatim in
    eval mode.
    """
    if training:
        mu = x.data.mean(axis=(0, 1))
        var = x.data.var(axis=(0, 1))
        running["mean"] = (1 - momentum) * running["mean"] + momentum * mu
        running["var"] = (1 - momentum) * running["var"] + momentum * var
    else:
        mu = running["mean"]
        var = running["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xn = (x.data - mu) * inv
    out = xn * gain.data + bias.data

    def vjp(g):
        gxn = g * gain.data
        if training:
            dx = inv * (gxn - gxn.mean(axis=(0, 1))
                        - xn * (gxn * xn).mean(axis=(0, 1)))
        else:
            dx = gxn * inv
        dgain = (g * xn).sum(axis=(0, 1))
        dbias = g.sum(axis=(0, 1))
        return dx, dgain, dbias

    return make_op(out, (x, gain, bias), vjp, "batch_norm")


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when rate == 0 or not training."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.uniform(x.data.shape) < keep).astype(x.data.dtype) / keep
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# gradient plumbing

def zero_grads(params):
    for p in params:
        p.grad = None


def grad(loss, params):
    """Reverse-mode gradients of a scalar loss for each parameter.

    Disconnected parameters yield explicit zero arrays.
    """
    zero_grads(params)
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in params]


def finite_diff(loss_fn, params, eps=1e-5):
    """Central-difference gradients, one coordinate at a time.

    loss_fn() may return a float or a scalar Tensor computed from the
    current param values. Run under float64 precision for meaningful
    comparisons.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def ev():
        val = loss_fn()
        return float(val.data) if isinstance(val, Tensor) else float(val)

    out = []
    for p in params:
        g = np.zeros_like(p.data)
        for i in range(p.data.size):
            orig = p.data.flat[i]
            p.data.flat[i] = orig + eps
            hi = ev()
            p.data.flat[i] = orig - eps
            lo = ev()
            p.data.flat[i] = orig
            g.flat[i] = (hi - lo) / (2.0 * eps)
        out.append(g)
    return out
