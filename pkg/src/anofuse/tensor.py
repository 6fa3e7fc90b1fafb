"""Dense float64 tensor kernels with reverse-mode automatic differentiation.

Everything downstream (adapters, encoder blocks, fusion gateway, losses)
is composed from the primitives here. All arrays are double precision and
all kernels are pure functions of their inputs, so results are
deterministic for a fixed seed. Gradients are produced by `grad()` and are
validated against central finite differences in the test suite.

Layout conventions: token sequences are (B, L, C), spatial feature maps
are (B, C, H, W).
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import ConfigurationError, ShapeError, TrainingError

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph recording (pure forward eval)."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


class Tensor:
    """A float64 array plus optional autodiff bookkeeping.

    Leaf tensors created with ``trainable=True`` accumulate gradients in
    ``.grad`` after a backward pass. Interior nodes keep parent links and
    a vector-Jacobian-product closure.
    """

    __slots__ = ("data", "grad", "requires_grad", "trainable", "name", "_parents", "_vjp")

    def __init__(self, data, trainable=False, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.trainable = bool(trainable)
        self.requires_grad = bool(trainable)
        self.name = name
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = " trainable" if self.trainable else ""
        return f"Tensor(shape={self.data.shape}{flag} name={self.name!r})"

    # operator sugar; scalars and ndarrays are promoted to constant tensors
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

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __pow__(self, c):
        return pow_const(self, c)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return slice_tensor(self, idx)

    def backward(self):
        """Reverse-mode sweep from this scalar; accumulates into leaf .grad."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] += pg
                    else:
                        grads[id(parent)] = pg
            elif node.trainable:
                node.grad = g if node.grad is None else node.grad + g
        # anything left unpopped is a trainable leaf reached directly
        for node in order:
            g = grads.pop(id(node), None)
            if g is not None and node.trainable:
                node.grad = g if node.grad is None else node.grad + g


def parameter(data, trainable=True, name=""):
    """Create a leaf ParamTensor (rank <= 4), trainable or frozen."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 4:
        raise ShapeError(f"parameter rank {arr.ndim} > 4 for {name!r}")
    return Tensor(arr, trainable=trainable, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, vjp):
    # fast constructor: interior results are always float64 ndarrays already
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.trainable = False
    out.name = ""
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def add(a, b):
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    return _node(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def pow_const(a, c):
    c = float(c)
    return _node(a.data ** c, (a,),
                 lambda g: (g * c * a.data ** (c - 1.0),))


def exp(a):
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out_data = np.tanh(a.data)
    return _node(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def sqrt(a):
    out_data = np.sqrt(a.data)
    return _node(out_data, (a,), lambda g: (g / (2.0 * out_data),))


def maximum_const(a, c):
    """Elementwise max against a scalar floor; gradient passes where a > c."""
    c = float(c)
    return _node(np.maximum(a.data, c), (a,),
                 lambda g: (g * (a.data > c),))


def clip(a, lo, hi):
    """Clamp into [lo, hi]; gradient is zero where the clamp binds."""
    lo, hi = float(lo), float(hi)

    def vjp(g):
        return (g * ((a.data > lo) & (a.data < hi)),)
    return _node(np.minimum(np.maximum(a.data, lo), hi), (a,), vjp)


def tsum(a, axis=None, keepdims=False):
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)
    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


# ---------------------------------------------------------------------------
# shape movement


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


_INV_AXES = {}


def transpose(a, axes):
    inv = _INV_AXES.get(axes)
    if inv is None:
        inv = _INV_AXES[axes] = tuple(int(i) for i in np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def slice_tensor(a, idx):
    """Basic slicing only (no fancy indexing), so the VJP is a plain scatter."""
    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        return (buf,)
    return _node(a.data[idx], (a,), vjp)


def matmul(a, b):
    """np.matmul for operands of rank >= 2, with batch broadcasting."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")

    def vjp(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(da, a.data.shape), _unbroadcast(db, b.data.shape))
    return _node(np.matmul(a.data, b.data), (a, b), vjp)


# ---------------------------------------------------------------------------
# neural primitives


def softmax(a, axis=-1):
    """Numerically stable softmax (max-subtraction) along `axis`."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - inner),)
    return _node(out_data, (a,), vjp)


def softmax_vec(v, temperature=1.0):
    """Softmax of a vector of logits at a given temperature.

    Outputs are positive, sum to one, and are invariant under adding a
    constant to every logit.
    """
    if temperature <= 0:
        raise ConfigurationError(f"softmax temperature must be positive, got {temperature}")
    if isinstance(v, Tensor):
        return softmax(v * (1.0 / temperature), axis=-1)
    v = np.asarray(v, dtype=np.float64)
    shifted = v / temperature - (v / temperature).max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(a, eps=1e-5):
    """LayerNorm over the last axis, no affine parameters."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(var + eps)
    y = xc * r

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (r * (g - gm - y * gym),)
    return _node(y, (a,), vjp)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a):
    """tanh-form GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    out_data = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)
    return _node(out_data, (a,), vjp)


def linear(x, w):
    """Per-token projection of a (B, L, Cin) sequence by a (Cin, Cout) matrix."""
    if w.data.ndim != 2:
        raise ShapeError(f"linear weight must be rank 2, got {w.data.ndim}")
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"channel mismatch: input has {x.data.shape[-1]}, weight expects {w.data.shape[0]}")
    return matmul(x, w)


# ---------------------------------------------------------------------------
# sequence <-> spatial reshape operators


def reshape_seq_to_2d(x, grid):
    """(B, L, C) tokens to a (B, C, H, W) map, row-major patch order."""
    h, w = grid
    b, l, c = x.data.shape if isinstance(x, Tensor) else np.asarray(x).shape
    if l != h * w:
        raise ShapeError(f"sequence length {l} != grid {h}x{w}")
    if isinstance(x, Tensor):
        return transpose(reshape(x, (b, h, w, c)), (0, 3, 1, 2))
    return np.asarray(x).reshape(b, h, w, c).transpose(0, 3, 1, 2)


def reshape_2d_to_seq(x):
    """Exact inverse of reshape_seq_to_2d."""
    if isinstance(x, Tensor):
        b, c, h, w = x.data.shape
        return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))
    b, c, h, w = np.asarray(x).shape
    return np.asarray(x).transpose(0, 2, 3, 1).reshape(b, h * w, c)


# ---------------------------------------------------------------------------
# convolution


def conv2d_same(x, w):
    """k x k convolution with zero 'same' padding, no bias, odd k only.

    x: (B, Cin, H, W), w: (Cout, Cin, k, k). Implemented as im2col + matmul;
    the backward pass scatters column gradients back (col2im).
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError("conv2d_same expects (B,Cin,H,W) input and (Cout,Cin,k,k) kernel")
    cout, cin, k, k2 = wd.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {k}")
    if cin != xd.shape[1]:
        raise ShapeError(f"channel mismatch: input {xd.shape[1]}, kernel {cin}")

    b, _, h, wdt = xd.shape
    if k == 1:
        # pointwise conv is a plain channel mix
        y = np.matmul(wd.reshape(cout, cin), xd.reshape(b, cin, h * wdt)).reshape(b, cout, h, wdt)

        def vjp1(g):
            gm = g.reshape(b, cout, h * wdt)
            dw = np.einsum("bop,bkp->ok", gm, xd.reshape(b, cin, h * wdt)).reshape(wd.shape)
            dx = np.matmul(wd.reshape(cout, cin).T, gm).reshape(xd.shape)
            return (dx, dw)
        return _node(y, (x, w), vjp1)

    p = (k - 1) // 2
    xp = np.zeros((b, cin, h + 2 * p, wdt + 2 * p), dtype=np.float64)
    xp[:, :, p:p + h, p:p + wdt] = xd
    # windows view (B, Cin, k, k, H, W); index [.., i, j, h, w] = xp[.., i+h, j+w]
    win = np.lib.stride_tricks.sliding_window_view(xp, (h, wdt), axis=(2, 3))
    cols = win.reshape(b, cin * k * k, h * wdt).transpose(0, 2, 1)
    wflat = wd.reshape(cout, cin * k * k)
    y = np.matmul(cols, wflat.T).transpose(0, 2, 1).reshape(b, cout, h, wdt)

    def vjp(g):
        gm = g.reshape(b, cout, h * wdt).transpose(0, 2, 1)           # (B, HW, Cout)
        dw = np.einsum("bpo,bpk->ok", gm, cols).reshape(wd.shape)
        dcols = np.matmul(gm, wflat)                                  # (B, HW, Cin*k*k)
        dcols = dcols.transpose(0, 2, 1).reshape(b, cin, k, k, h, wdt)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + wdt] += dcols[:, :, i, j]
        dx = dxp[:, :, p:p + h, p:p + wdt] if p else dxp
        return (dx, dw)
    return _node(y, (x, w), vjp)


# ---------------------------------------------------------------------------
# pooling, similarity, upsampling


def gap(x):
    """Global average pool over the token axis of a (B, L, C) sequence."""
    if isinstance(x, Tensor):
        if x.data.ndim != 3:
            raise ShapeError("gap expects a (B, L, C) sequence")
        return tmean(x, axis=1)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError("gap expects a (B, L, C) sequence")
    return x.mean(axis=1)


def cosine_sim(a, b):
    """Cosine similarity of two vectors; 0 (with a warning) on zero norms."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("zero-norm input to cosine_sim; returning 0", RuntimeWarning)
        return 0.0
    return float((a @ b) / (na * nb))


# floor applied to norms inside differentiable cosine paths; far below any
# realistic feature norm, so it never perturbs gradients
NORM_FLOOR = 1e-30


_BILINEAR_CACHE = {}


def bilinear_matrix(src_hw, dst_hw):
    """Interpolation matrix A with vec(out) = A @ vec(src), corner-aligned."""
    sh, sw = src_hw
    dh, dw = dst_hw
    if dh < sh or dw < sw:
        raise ShapeError(f"upsample target {dst_hw} smaller than source {src_hw}")
    cached = _BILINEAR_CACHE.get((sh, sw, dh, dw))
    if cached is not None:
        return cached

    def axis_weights(n_src, n_dst):
        w = np.zeros((n_dst, n_src))
        if n_src == 1:
            w[:, 0] = 1.0
            return w
        scale = (n_src - 1) / (n_dst - 1) if n_dst > 1 else 0.0
        for i in range(n_dst):
            pos = i * scale
            lo = min(int(np.floor(pos)), n_src - 2)
            frac = pos - lo
            w[i, lo] = 1.0 - frac
            w[i, lo + 1] = frac
        return w

    wy = axis_weights(sh, dh)
    wx = axis_weights(sw, dw)
    out = np.kron(wy, wx)
    _BILINEAR_CACHE[(sh, sw, dh, dw)] = out
    return out


def bilinear_upsample(m, target):
    """Upsample a single-channel map (or (B, H, W) batch) to `target`."""
    tensor_in = isinstance(m, Tensor)
    data = m.data if tensor_in else np.asarray(m, dtype=np.float64)
    batched = data.ndim == 3
    src_hw = data.shape[-2:]
    a = bilinear_matrix(src_hw, target)
    if tensor_in:
        b = data.shape[0] if batched else 1
        flat = reshape(m, (b, src_hw[0] * src_hw[1], 1))
        out = matmul(Tensor(a), flat)  # (b, dh*dw, 1) via broadcast
        out = reshape(out, (b, target[0], target[1]))
        return out if batched else reshape(out, target)
    flat = data.reshape(-1, src_hw[0] * src_hw[1]).T
    out_shape = (data.shape[0],) + tuple(target) if batched else tuple(target)
    return (a @ flat).T.reshape(out_shape)


# ---------------------------------------------------------------------------
# gradients


def grad(loss, params):
    """Gradients of a scalar loss for every trainable tensor in `params`.

    `params` maps names to Tensors. Frozen entries get no gradient. Raises
    TrainingError (with a data snapshot of `params`) on a non-finite loss.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ShapeError("grad() wants a scalar loss Tensor")
    if not np.isfinite(loss.data):
        snapshot = {k: v.data.copy() for k, v in params.items()}
        raise TrainingError(f"non-finite loss {float(loss.data)}", snapshot=snapshot)
    for p in params.values():
        p.grad = None
    loss.backward()
    out = {}
    for name, p in params.items():
        if p.trainable:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            out[name] = g
    return out
