"""Small dense-tensor engine used to train the noise network.

Everything is float64 numpy. :func:`conv1d_forward` takes channel-major
``(channels, length)`` tensors; tape ops and the network work on batched
channel-last ``(batch, length, channels)`` arrays.

Gradients come from an explicit :class:`Tape`: every forward op appends a
record holding the inputs it needs, and :meth:`Tape.backward` replays the
records in reverse.
"""

from collections import OrderedDict

import numpy as np


class ShapeError(ValueError):
    """Array shapes do not fit the operation."""


class TapeError(RuntimeError):
    """Backward requested on a tape with nothing recorded."""


class NonFiniteError(FloatingPointError):
    """A NaN or inf showed up where finite numbers are required."""


def _check_conv(x, kernel, bias):
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be (C_out, C_in, k), got {kernel.shape}")
    c_out, c_in, k = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if x.ndim != 3 or x.shape[2] != c_in:
        raise ShapeError(f"input {x.shape} does not carry the {c_in} channels the kernel expects")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")


def conv1d_forward(x, kernel, bias):
    """Same-length 1-D convolution (cross-correlation) with zero padding.

    ``x`` is channel-major, (C_in, L) or (B, C_in, L), and so is the result:
    ``out[c, l] = bias[c] + sum_{i, j} kernel[c, i, j] * xpad[i, l + j]``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    if xb.ndim != 3:
        raise ShapeError(f"expected (C, L) or (B, C, L) input, got shape {x.shape}")
    xb = xb.transpose(0, 2, 1)
    _check_conv(xb, kernel, bias)
    out = _conv_fwd(xb, kernel, bias)[0].transpose(0, 2, 1)
    return out[0] if squeeze else out


# Internally activations are channel-last, (B, L, C), so that the channel
# contraction is one contiguous matmul. Convolutions that widen the channel
# count gather input windows; ones that narrow it multiply first and
# shift-add the outputs, which keeps the temporary smaller. Zero padding is
# implicit: out-of-range taps are simply skipped.

def _shifted_add(dst, src, s):
    """``dst[:, l] += src[:, l + s]`` wherever both indices are valid."""
    length = dst.shape[1]
    if s > 0:
        dst[:, :length - s] += src[:, s:]
    elif s < 0:
        dst[:, -s:] += src[:, :length + s]
    else:
        dst += src


def _conv_fwd(x, kernel, bias):
    b, length, c_in = x.shape
    c_out, _, k = kernel.shape
    pad = (k - 1) // 2
    if c_in <= c_out:
        cols = np.zeros((b, length, k, c_in))
        for j in range(k):
            _shifted_add(cols[:, :, j, :], x, j - pad)
        w = kernel.transpose(2, 1, 0).reshape(k * c_in, c_out)
        out = (cols.reshape(-1, k * c_in) @ w).reshape(b, length, c_out)
        cache = ("gather", cols)
    else:
        w = kernel.transpose(1, 2, 0).reshape(c_in, k * c_out)
        z = (x.reshape(-1, c_in) @ w).reshape(b, length, k, c_out)
        out = z[:, :, pad, :].copy()
        for j in range(k):
            if j != pad:
                _shifted_add(out, z[:, :, j, :], j - pad)
        cache = ("shift", x)
    out += bias
    return out, cache


def _conv_bwd(grad, x_shape, kernel, cache):
    b, length, c_in = x_shape
    c_out, _, k = kernel.shape
    pad = (k - 1) // 2
    g2 = grad.reshape(-1, c_out)
    dbias = g2.sum(axis=0)
    mode, saved = cache
    if mode == "gather":
        w = kernel.transpose(2, 1, 0).reshape(k * c_in, c_out)
        dw = saved.reshape(-1, k * c_in).T @ g2
        dkernel = dw.reshape(k, c_in, c_out).transpose(2, 1, 0)
        dcols = (g2 @ w.T).reshape(b, length, k, c_in)
        dx = np.zeros(x_shape)
        for j in range(k):
            _shifted_add(dx, dcols[:, :, j, :], pad - j)
    else:
        w = kernel.transpose(1, 2, 0).reshape(c_in, k * c_out)
        dz = np.zeros((b, length, k, c_out))
        for j in range(k):
            _shifted_add(dz[:, :, j, :], grad, pad - j)
        dz = dz.reshape(-1, k * c_out)
        dkernel = (saved.reshape(-1, c_in).T @ dz).reshape(c_in, k, c_out).transpose(2, 0, 1)
        dx = (dz @ w.T).reshape(x_shape)
    return dx, dkernel, dbias


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def dense_forward(x, weight, bias):
    """``x @ weight.T + bias`` for ``x`` of shape (B, D_in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"dense layer mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return x @ weight.T + bias


def film(h, scale_bias):
    """Channelwise ``h * (1 + s) + b`` for channel-last ``h`` (B, L, C);
    ``scale_bias = [s | b]`` is (B, 2C)."""
    c = h.shape[2]
    if scale_bias.shape != (h.shape[0], 2 * c):
        raise ShapeError(f"conditioning shape {scale_bias.shape} does not match {h.shape}")
    return h * (1.0 + scale_bias[:, None, :c]) + scale_bias[:, None, c:]


class ParamStore:
    """Named float64 parameter arrays plus same-shaped gradient buffers."""

    def __init__(self):
        self._params = OrderedDict()
        self._grads = OrderedDict()

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def grad(self, name):
        return self._grads[name]

    def zero_grad(self):
        for g in self._grads.values():
            g.fill(0.0)

    @property
    def size(self):
        return sum(p.size for p in self._params.values())

    def flat(self):
        return np.concatenate([p.ravel() for p in self._params.values()])

    def load_flat(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.size:
            raise ShapeError(f"expected {self.size} values, got {values.size}")
        offset = 0
        for p in self._params.values():
            p[...] = values[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def copy(self):
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.copy())
        return out


class Var:
    """A value produced on a tape. ``param`` is set for parameter leaves."""

    __slots__ = ("value", "index", "param")

    def __init__(self, value, index, param=None):
        self.value = value
        self.index = index
        self.param = param

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Records forward ops so that gradients can be replayed in reverse.

    A tape is single-use: call the forward helpers, then :meth:`backward`
    once. Parameter gradients are accumulated into the store's buffers.
    """

    def __init__(self, params):
        self.params = params
        self._records = []
        self._count = 0
        self._grads = None

    def _new(self, value, param=None):
        var = Var(value, self._count, param)
        self._count += 1
        return var

    def input(self, value):
        return self._new(np.asarray(value, dtype=np.float64))

    def param(self, name):
        return self._new(self.params[name], param=name)

    def conv1d(self, x, kernel, bias):
        _check_conv(x.value, kernel.value, bias.value)
        value, conv_cache = _conv_fwd(x.value, kernel.value, bias.value)
        out = self._new(value)
        self._records.append(("conv1d", out, (x, kernel, bias), (x.value.shape, conv_cache)))
        return out

    def relu(self, x):
        mask = x.value > 0
        out = self._new(np.where(mask, x.value, 0.0))
        self._records.append(("relu", out, (x,), mask))
        return out

    def dense(self, x, weight, bias):
        out = self._new(dense_forward(x.value, weight.value, bias.value))
        self._records.append(("dense", out, (x, weight, bias), None))
        return out

    def film(self, h, scale_bias):
        out = self._new(film(h.value, scale_bias.value))
        self._records.append(("film", out, (h, scale_bias), None))
        return out

    def sq_error(self, pred, target):
        """Sum over everything of ``(target - pred)**2``; target is a constant."""
        target = np.asarray(target, dtype=np.float64)
        if target.shape != pred.shape:
            raise ShapeError(f"target {target.shape} vs prediction {pred.shape}")
        diff = pred.value - target
        out = self._new(np.array(np.sum(diff * diff)))
        self._records.append(("sq_error", out, (pred,), diff))
        return out

    def backward(self, output, grad=None):
        """Propagate ``grad`` (default 1 for scalars) from ``output`` to every leaf."""
        if not self._records:
            raise TapeError("backward called before any forward op was recorded")
        if self._grads is not None:
            raise TapeError("tape already replayed; record a new forward pass")
        if grad is None:
            grad = np.ones_like(output.value)
        grads = {output.index: np.asarray(grad, dtype=np.float64)}

        def acc(var, g):
            if var.index in grads:
                grads[var.index] = grads[var.index] + g
            else:
                grads[var.index] = g

        for kind, out, inputs, cache in reversed(self._records):
            g = grads.get(out.index)
            if g is None:
                continue
            if kind == "conv1d":
                x, kernel, bias = inputs
                x_shape, conv_cache = cache
                dx, dk, db = _conv_bwd(g, x_shape, kernel.value, conv_cache)
                acc(x, dx)
                acc(kernel, dk)
                acc(bias, db)
            elif kind == "relu":
                acc(inputs[0], np.where(cache, g, 0.0))
            elif kind == "dense":
                x, weight, bias = inputs
                acc(x, g @ weight.value)
                acc(weight, g.T @ x.value)
                acc(bias, g.sum(axis=0))
            elif kind == "film":
                h, sb = inputs
                c = h.value.shape[2]
                acc(h, g * (1.0 + sb.value[:, None, :c]))
                acc(sb, np.concatenate([(g * h.value).sum(axis=1), g.sum(axis=1)], axis=1))
            elif kind == "sq_error":
                acc(inputs[0], 2.0 * cache * g)

        for kind, out, inputs, cache in self._records:
            for var in inputs:
                if var.param is not None and var.index in grads:
                    self.params.grad(var.param)[...] += grads.pop(var.index)
        self._grads = grads

    def grad(self, var):
        """Gradient with respect to a non-parameter leaf (e.g. the network input)."""
        if self._grads is None:
            raise TapeError("call backward first")
        return self._grads.get(var.index, np.zeros_like(var.value))


class Adam:
    """Adaptive-moment optimizer with bias correction.

    ``step`` consumes the gradients in the store and zeroes them.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self):
        for name in self.params:
            if not np.all(np.isfinite(self.params.grad(name))):
                raise NonFiniteError(f"non-finite gradient in {name!r} at step {self.t + 1}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = self.params.grad(name)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.params.zero_grad()
