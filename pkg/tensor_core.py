"""
Minimal differentiable tensor kernels
Reverse-mode autodiff over a recorded tape, the conv/sampling/softmax kernels
the pipeline needs, a named parameter store and SGD with momentum.
"""
import numpy as np

from errors import ContractViolation


def _as_array(data):
    arr = np.asarray(data)
    # float64 is kept for gradient checks; everything else is stored as float32
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Dense rank <= 4 array with an optional gradient slot"""

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=''):
        self.data = _as_array(data)
        if self.data.ndim > 4:
            raise ContractViolation(f"Tensor rank {self.data.ndim} exceeds 4")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    @classmethod
    def zeros(cls, shape, dtype=np.float32):
        return cls(np.zeros(shape, dtype=dtype))

    def _tape(self):
        """Operations reachable from this tensor, in forward (topological) order"""
        order, seen = [], set()
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad=None):
        if not self.requires_grad:
            raise ContractViolation("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation(f"backward() needs an explicit grad for shape {self.shape}")
            grad = np.ones_like(self.data)
        _accumulate(self, np.asarray(grad))
        for node in reversed(self._tape()):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    grad = grad.astype(tensor.data.dtype, copy=False)
    if grad.shape != tensor.shape:
        raise ContractViolation(f"Gradient shape {grad.shape} does not match tensor shape {tensor.shape}")
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def _result(data, parents, backward, op):
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _dtype_of(*tensors):
    return np.result_type(*[t.data.dtype for t in tensors])


# --------------------------------
# Elementwise and structural ops
# --------------------------------
def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_dtype = _dtype_of(a, b)
    data = (a.data + b.data).astype(out_dtype)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _result(data, (a, b), backward, 'add')


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_dtype = _dtype_of(a, b)
    data = (a.data * b.data).astype(out_dtype)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _result(data, (a, b), backward, 'mul')


def scale(a, factor):
    data = (a.data * factor).astype(a.data.dtype)

    def backward(g):
        _accumulate(a, g * factor)
    return _result(data, (a,), backward, 'scale')


def relu(a):
    active = a.data > 0
    data = np.where(active, a.data, 0).astype(a.data.dtype)

    def backward(g):
        _accumulate(a, g * active)
    return _result(data, (a,), backward, 'relu')


def sigmoid(a):
    # tanh form never overflows and gives sigmoid(0) == 0.5 exactly
    data = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(a.data.dtype)

    def backward(g):
        _accumulate(a, g * data * (1.0 - data))
    return _result(data, (a,), backward, 'sigmoid')


def reshape(a, shape):
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))
    return _result(data, (a,), backward, 'reshape')


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out_dtype = _dtype_of(*tensors)
    data = np.concatenate([t.data.astype(out_dtype) for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(index)])
    return _result(data, tensors, backward, 'concat')


def total(a):
    """Sum of all entries as a shape-(1,) tensor, accumulated in float64"""
    data = np.array([np.sum(a.data, dtype=np.float64)], dtype=a.data.dtype)

    def backward(g):
        _accumulate(a, np.broadcast_to(g.reshape(()), a.shape))
    return _result(data, (a,), backward, 'sum')


def mean(a, axis=None):
    if axis is None:
        return scale(total(a), 1.0 / a.data.size)
    axes = axis if isinstance(axis, tuple) else (axis,)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    data = np.sum(a.data, axis=axes, dtype=np.float64).astype(a.data.dtype) / np.asarray(count, dtype=a.data.dtype)

    def backward(g):
        expanded = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(expanded, a.shape) / count)
    return _result(data, (a,), backward, 'mean')


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_dtype = _dtype_of(a, b)
    data = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(out_dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        _accumulate(a, g64 @ b.data.astype(np.float64).T)
        _accumulate(b, a.data.astype(np.float64).T @ g64)
    return _result(data, (a, b), backward, 'matmul')


def l2_normalize(a):
    """Unit-norm copy of a vector; callers check the norm for degeneracy first"""
    norm = float(np.sqrt(np.sum(a.data.astype(np.float64) ** 2)))
    data = (a.data / norm).astype(a.data.dtype)

    def backward(g):
        projection = float(np.sum(data.astype(np.float64) * g))
        _accumulate(a, (g - data * projection) / norm)
    return _result(data, (a,), backward, 'l2_normalize')


def vector_norm(a):
    return float(np.sqrt(np.sum(a.data.astype(np.float64) ** 2)))


# --------------------------------
# Convolution
# --------------------------------
def conv_output_size(size, kernel, stride, dilation, padding):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(x, kernel, stride, dilation, padding, out_h, out_w):
    channels = x.shape[0]
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((channels, kernel, kernel, out_h, out_w), dtype=np.float64)
    for ki in range(kernel):
        for kj in range(kernel):
            y0, x0 = ki * dilation, kj * dilation
            cols[:, ki, kj] = padded[:, y0:y0 + stride * (out_h - 1) + 1:stride,
                                     x0:x0 + stride * (out_w - 1) + 1:stride]
    return cols.reshape(channels * kernel * kernel, out_h * out_w), padded.shape


def _col2im(dcols, padded_shape, kernel, stride, dilation, padding, out_h, out_w, height, width):
    channels = padded_shape[0]
    dcols = dcols.reshape(channels, kernel, kernel, out_h, out_w)
    grad = np.zeros(padded_shape, dtype=np.float64)
    for ki in range(kernel):
        for kj in range(kernel):
            y0, x0 = ki * dilation, kj * dilation
            grad[:, y0:y0 + stride * (out_h - 1) + 1:stride,
                 x0:x0 + stride * (out_w - 1) + 1:stride] += dcols[:, ki, kj]
    return grad[:, padding:padding + height, padding:padding + width]


def conv2d(x, weights, bias, stride=1, dilation=1, padding=0):
    """Cross-correlation of a CxHxW map with OxCxKxK weights, zero padded"""
    if x.data.ndim != 3 or weights.data.ndim != 4:
        raise ContractViolation(f"conv2d expects CxHxW input and OxCxKxK weights, got {x.shape} and {weights.shape}")
    channels, height, width = x.shape
    out_channels, in_channels, kernel, kernel_w = weights.shape
    if in_channels != channels:
        raise ContractViolation(f"conv2d channel mismatch: input has {channels}, weights expect {in_channels}")
    if kernel != kernel_w or kernel % 2 == 0:
        raise ContractViolation(f"conv2d needs a square odd kernel, got {kernel}x{kernel_w}")
    if bias.shape != (out_channels,):
        raise ContractViolation(f"conv2d bias shape {bias.shape} != ({out_channels},)")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ContractViolation(f"conv2d stride={stride} dilation={dilation} padding={padding} out of range")
    out_h = conv_output_size(height, kernel, stride, dilation, padding)
    out_w = conv_output_size(width, kernel, stride, dilation, padding)
    if out_h <= 0 or out_w <= 0:
        raise ContractViolation(f"conv2d output would be empty for input {height}x{width}")

    out_dtype = _dtype_of(x, weights, bias)
    cols, padded_shape = _im2col(x.data, kernel, stride, dilation, padding, out_h, out_w)
    w2 = weights.data.reshape(out_channels, -1).astype(np.float64)
    out = w2 @ cols + bias.data.astype(np.float64)[:, None]
    data = out.reshape(out_channels, out_h, out_w).astype(out_dtype)

    def backward(g):
        g2 = g.reshape(out_channels, -1).astype(np.float64)
        _accumulate(weights, (g2 @ cols.T).reshape(weights.shape))
        _accumulate(bias, g2.sum(axis=1))
        if x.requires_grad:
            dcols = w2.T @ g2
            _accumulate(x, _col2im(dcols, padded_shape, kernel, stride, dilation, padding,
                                   out_h, out_w, height, width))
    return _result(data, (x, weights, bias), backward, 'conv2d')


# --------------------------------
# Bilinear sampling
# --------------------------------
def _bilinear_corners(points, height, width):
    x, y = points[:, 0], points[:, 1]
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    corners = []
    for dx, dy, weight in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                           (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi <= width - 1) & (yi >= 0) & (yi <= height - 1)
        xi = np.clip(xi, 0, width - 1).astype(np.int64)
        yi = np.clip(yi, 0, height - 1).astype(np.int64)
        corners.append((yi * width + xi, np.where(valid, weight, 0.0)))
    return corners


def bilinear_sample(feature_map, points):
    """Sample a CxHxW map at (x, y) points; zero outside [0, W-1]x[0, H-1].

    points has shape (..., 2); the result has shape (C, ...).
    Differentiable with respect to the map values only.
    """
    if feature_map.data.ndim != 3:
        raise ContractViolation(f"bilinear_sample expects a CxHxW map, got {feature_map.shape}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 2:
        raise ContractViolation(f"points must end in an (x, y) axis, got shape {pts.shape}")
    out_shape = pts.shape[:-1]
    pts = pts.reshape(-1, 2)
    channels, height, width = feature_map.shape
    flat = feature_map.data.reshape(channels, -1)
    corners = _bilinear_corners(pts, height, width)
    out = np.zeros((channels, pts.shape[0]), dtype=np.float64)
    for index, weight in corners:
        out += flat[:, index] * weight
    data = out.reshape((channels,) + out_shape).astype(feature_map.data.dtype)

    def backward(g):
        g2 = g.reshape(channels, -1).astype(np.float64)
        grad = np.zeros((channels, height * width), dtype=np.float64)
        for index, weight in corners:
            np.add.at(grad, (slice(None), index), g2 * weight)
        _accumulate(feature_map, grad.reshape(channels, height, width))
    return _result(data, (feature_map,), backward, 'bilinear_sample')


# --------------------------------
# Softmax and losses
# --------------------------------
def spatial_softmax(logits):
    """Softmax over every entry of the tensor (the MxM positions of a 1xMxM map)"""
    z = logits.data.astype(np.float64)
    e = np.exp(z - z.max())
    s = e / e.sum()
    data = s.astype(logits.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        _accumulate(logits, s * (g64 - np.sum(g64 * s)))
    return _result(data, (logits,), backward, 'spatial_softmax')


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under row-wise softmax of NxK logits"""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_prob = z - log_norm
    n = z.shape[0]
    loss = -log_prob[np.arange(n), labels].mean()
    data = np.array([loss], dtype=logits.data.dtype)

    def backward(g):
        probs = np.exp(log_prob)
        probs[np.arange(n), labels] -= 1.0
        _accumulate(logits, probs * (float(g.reshape(-1)[0]) / n))
    return _result(data, (logits,), backward, 'softmax_cross_entropy')


def bce_with_logits(logits, targets):
    """Mean pixel-wise binary cross-entropy of sigmoid(logits) against targets in [0, 1]"""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ContractViolation(f"bce targets shape {t.shape} != logits shape {logits.shape}")
    x = logits.data.astype(np.float64)
    per_pixel = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    data = np.array([per_pixel.mean()], dtype=logits.data.dtype)

    def backward(g):
        probs = 0.5 * (1.0 + np.tanh(0.5 * x))
        _accumulate(logits, (probs - t) * (float(g.reshape(-1)[0]) / t.size))
    return _result(data, (logits,), backward, 'bce_with_logits')


# --------------------------------
# Parameters and optimizer
# --------------------------------
class ParamStore:
    """Named trainable tensors, a frozen-key set and per-key momentum buffers"""

    def __init__(self):
        self.params = {}
        self.frozen = set()
        self.momentum = {}

    def add(self, name, array, dtype=np.float32):
        if name in self.params:
            raise ContractViolation(f"Parameter {name!r} already registered")
        tensor = Tensor(np.asarray(array, dtype=dtype), requires_grad=True, op='param')
        self.params[name] = tensor
        self.momentum[name] = Tensor(np.zeros_like(tensor.data))
        return tensor

    def add_conv(self, name, out_channels, in_channels, kernel, rng):
        """Register name.w with Kaiming fan-in scaling and a zero name.b"""
        fan_in = in_channels * kernel * kernel
        self.add(f'{name}.w', rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                         (out_channels, in_channels, kernel, kernel)))
        self.add(f'{name}.b', np.zeros(out_channels))

    def __getitem__(self, name):
        try:
            return self.params[name]
        except KeyError:
            raise ContractViolation(f"Unknown parameter {name!r}") from None

    def __contains__(self, name):
        return name in self.params

    def keys(self):
        return sorted(self.params)

    def freeze(self, *prefixes):
        """Freeze every key starting with one of the prefixes; returns the frozen keys"""
        hits = {k for k in self.params for p in prefixes if p and k.startswith(p)}
        self.frozen |= hits
        return sorted(hits)

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.grad = np.zeros_like(tensor.data)

    def clear_grad(self):
        for tensor in self.params.values():
            tensor.grad = None

    def count(self):
        return int(sum(t.data.size for t in self.params.values()))

    def snapshot(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def astype(self, dtype):
        """Copy of the store with parameters cast to dtype (float64 for gradient checks)"""
        clone = ParamStore()
        for key in self.keys():
            clone.add(key, self.params[key].data, dtype=dtype)
        clone.frozen = set(self.frozen)
        return clone

    def detached(self):
        """Store sharing the same arrays with recording switched off, for inference"""
        clone = ParamStore()
        for key in self.keys():
            clone.params[key] = Tensor(self.params[key].data, op='param')
        clone.frozen = set(self.params)
        return clone


def sgd_momentum_step(store, lr, momentum=0.9, weight_decay=5e-4):
    """v <- momentum*v + grad + weight_decay*w ; w <- w - lr*v. Frozen keys are untouched."""
    trainable = [k for k in store.keys() if k not in store.frozen]
    missing = [k for k in trainable if store.params[k].grad is None]
    if missing:
        raise ContractViolation(f"Missing gradient for parameters: {', '.join(missing)}")
    for key in trainable:
        param = store.params[key]
        buffer = store.momentum[key]
        w = param.data.astype(np.float64)
        v = momentum * buffer.data.astype(np.float64) + param.grad.astype(np.float64) + weight_decay * w
        buffer.data = v.astype(param.data.dtype)
        param.data = (w - lr * v).astype(param.data.dtype)
    store.clear_grad()
    return store


# --------------------------------
# Finite-difference oracle
# --------------------------------
def numerical_gradient(loss_fn, tensor, eps=1e-3, indices=None):
    """Central differences of a scalar loss_fn() with respect to tensor.data entries"""
    # perturb in place through a flat view
    tensor.data = np.ascontiguousarray(tensor.data)
    flat = tensor.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in positions:
        original = flat[i]
        flat[i] = original + eps
        plus = loss_fn().item()
        flat[i] = original - eps
        minus = loss_fn().item()
        flat[i] = original
        grad[i] = (plus - minus) / (2 * eps)
    return grad.reshape(tensor.shape)


def check_gradients(loss_fn, tensors, eps=1e-3, max_entries=None, seed=0):
    """Max relative error between analytic and numerical gradients.

    The error of each tensor is max|analytic - numeric| divided by
    max(max|numeric|, 1e-8), i.e. relative to the gradient's scale.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        indices = None
        if max_entries is not None and t.data.size > max_entries:
            indices = sorted(rng.choice(t.data.size, size=max_entries, replace=False).tolist())
        n = numerical_gradient(loss_fn, t, eps=eps, indices=indices)
        a_flat, n_flat = a.reshape(-1).astype(np.float64), n.reshape(-1)
        if indices is not None:
            a_flat, n_flat = a_flat[indices], n_flat[indices]
        scale_ = max(float(np.max(np.abs(n_flat))), 1e-8)
        worst = max(worst, float(np.max(np.abs(a_flat - n_flat))) / scale_)
    return worst
