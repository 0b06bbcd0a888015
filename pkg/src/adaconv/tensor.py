"""Layer primitives with exact backward passes.

Tensors are plain numpy arrays laid out as (batch, channels, height, width).
Each primitive comes as a pair of functions (forward, backward) and a thin
layer class that owns parameters, caches activations and collects gradients.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, StateError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected a rank-3 or rank-4 tensor, got dims {list(x.shape)}")
    return x, False


def conv_output_size(size, k, stride):
    return (size - k) // stride + 1


def _windows(x, kh, kw, stride):
    sh, sw = stride
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]


def conv2d(x, weight, bias, stride=(1, 1)):
    """Valid cross-correlation of ``x`` with ``weight`` plus per-channel bias.

    Accepts (C, H, W) or (N, C, H, W) input; output rank follows the input.
    """
    x, squeeze = _as_batch(x)
    out_ch, in_ch, kh, kw = weight.shape
    if x.shape[1] != in_ch:
        raise ShapeError(
            f"input dims {list(x.shape)} do not match weight dims {list(weight.shape)}"
        )
    oh = conv_output_size(x.shape[2], kh, stride[0])
    ow = conv_output_size(x.shape[3], kw, stride[1])
    if oh < 1 or ow < 1:
        raise ConfigError(
            f"convolution of {list(x.shape)} with {kh}x{kw} stride {tuple(stride)} "
            "yields an empty output"
        )
    if kh == 1 and kw == 1 and tuple(stride) == (1, 1):
        out = np.einsum("nchw,oc->nohw", x, weight[:, :, 0, 0], optimize=True)
    else:
        win = _windows(x, kh, kw, stride)[:, :, :oh, :ow]
        out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias[None, :, None, None]
    return out[0] if squeeze else np.ascontiguousarray(out)


def conv2d_backward(dout, x, weight, stride=(1, 1)):
    """Return (d_input, d_weight, d_bias) for :func:`conv2d`."""
    x, squeeze = _as_batch(x)
    dout, _ = _as_batch(dout)
    out_ch, in_ch, kh, kw = weight.shape
    sh, sw = stride
    oh, ow = dout.shape[2], dout.shape[3]
    d_bias = dout.sum(axis=(0, 2, 3))
    if kh == 1 and kw == 1 and tuple(stride) == (1, 1):
        w2 = weight[:, :, 0, 0]
        d_weight = np.einsum("nohw,nchw->oc", dout, x, optimize=True)[:, :, None, None]
        dx = np.einsum("nohw,oc->nchw", dout, w2, optimize=True)
    else:
        win = _windows(x, kh, kw, stride)[:, :, :oh, :ow]
        d_weight = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(dout, weight, axes=([1], [0]))  # N, oh, ow, C, kh, kw
        dx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += dcols[:, :, :, :, i, j].transpose(
                    0, 3, 1, 2
                )
    if squeeze:
        dx = dx[0]
    return dx, d_weight.astype(weight.dtype, copy=False), d_bias


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    # subgradient at 0 is 0
    return dout * (x > 0)


def batch_norm(x, gamma, beta, running_mean, running_var, train,
               momentum=BN_MOMENTUM, eps=BN_EPSILON):
    """Per-channel batch normalization.

    In train phase the batch statistics are used and the running statistics
    (updated in place) move towards them by an exponential moving average.
    Returns ``(out, cache)``; the cache feeds :func:`batch_norm_backward`.
    """
    x, squeeze = _as_batch(x)
    if train:
        if x.shape[0] < 2:
            raise ConfigError(f"batch norm in train phase needs batch size >= 2, got {x.shape[0]}")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std, gamma, train)
    return (out[0] if squeeze else out), cache


def batch_norm_backward(dout, cache):
    """Return (d_input, d_gamma, d_beta)."""
    xhat, inv_std, gamma, train = cache
    dout, squeeze = _as_batch(dout)
    d_gamma = (dout * xhat).sum(axis=(0, 2, 3))
    d_beta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if train:
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        dx = (inv_std[None, :, None, None] / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
    else:
        dx = dxhat * inv_std[None, :, None, None]
    return (dx[0] if squeeze else dx), d_gamma, d_beta


def spatial_softmax(x, axis=1):
    """Softmax over ``axis``; max-subtraction keeps extreme logits finite."""
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def spatial_softmax_backward(dout, y, axis=1):
    return y * (dout - (dout * y).sum(axis=axis, keepdims=True))


class Layer:
    """Minimal layer protocol: forward/backward plus named params and grads."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a cached forward pass")
        return self._cache


class Conv2D(Layer):
    def __init__(self, weight, bias, stride=(1, 1)):
        super().__init__()
        self.params = {"weight": weight, "bias": bias}
        self.stride = tuple(stride)

    @property
    def kernel_size(self):
        return self.params["weight"].shape[2:]

    def forward(self, x, train=False):
        self._cache = x
        return conv2d(x, self.params["weight"], self.params["bias"], self.stride)

    def backward(self, dout):
        x = self._cached()
        dx, dw, db = conv2d_backward(dout, x, self.params["weight"], self.stride)
        self.grads = {"weight": dw, "bias": db}
        return dx


class ReLU(Layer):
    def forward(self, x, train=False):
        self._cache = x
        return relu(x)

    def backward(self, dout):
        return relu_backward(dout, self._cached())


class BatchNorm(Layer):
    def __init__(self, channels, dtype=np.float32, momentum=BN_MOMENTUM, eps=BN_EPSILON):
        super().__init__()
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.buffers = {
            "running_mean": np.zeros(channels, dtype),
            "running_var": np.ones(channels, dtype),
        }
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, train=False):
        out, self._cache = batch_norm(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            train, self.momentum, self.eps,
        )
        return out

    def backward(self, dout):
        dx, dg, db = batch_norm_backward(dout, self._cached())
        self.grads = {"gamma": dg, "beta": db}
        return dx


class SpatialSoftmax(Layer):
    def forward(self, x, train=False):
        y = spatial_softmax(x)
        self._cache = y
        return y

    def backward(self, dout):
        return spatial_softmax_backward(dout, self._cached())


def _projection_loss(shape, dtype, seed):
    proj = np.random.default_rng(seed).standard_normal(shape).astype(dtype)

    def loss(out):
        return float((out * proj).sum()), proj

    return loss


def check_gradients(model, x, perturbation=1e-6, loss=None, train=True,
                    max_entries=None, seed=0, floor=1e-8, scale_floor=1e-3):
    """Compare analytic gradients with central finite differences.

    ``model`` follows the :class:`Layer` protocol (``KernelNet`` does too).
    ``loss`` maps the model output to ``(value, d_output)``; by default a
    fixed random projection of the output is used. Every input element and
    parameter entry is perturbed unless ``max_entries`` caps the number of
    entries sampled per array. Returns the maximum relative error
    ``|a - n| / max(|a|, |n|, f)`` where ``f`` is the larger of ``floor`` and
    ``scale_floor`` times the array's largest analytic gradient, so entries
    with negligible gradients are not judged on roundoff alone.
    """
    if not 1e-7 <= perturbation <= 1e-3:
        raise ValueError(f"perturbation {perturbation} outside [1e-7, 1e-3]")
    saved = {id(b): b.copy() for b in _buffers(model)}

    def restore():
        for b in _buffers(model):
            b[...] = saved[id(b)]

    out = model.forward(x, train=train)
    if loss is None:
        loss = _projection_loss(out.shape, out.dtype, seed)
    _, dout = loss(out)
    dx = model.backward(dout)
    restore()

    targets = [(x, dx)]
    grads = _grads(model)
    for name, p in _params(model):
        targets.append((p, grads[name]))

    def evaluate():
        value = loss(model.forward(x, train=train))[0]
        restore()
        return value

    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for array, analytic in targets:
        flat = array.reshape(-1)
        if flat.base is None and array.size:
            raise ValueError("arrays under check must be writable views")
        idx = np.arange(array.size)
        if max_entries is not None and array.size > max_entries:
            idx = rng.choice(array.size, size=max_entries, replace=False)
        a_flat = np.asarray(analytic).reshape(-1)
        denom_floor = max(floor, scale_floor * float(np.abs(a_flat).max(initial=0.0)))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + perturbation
            plus = evaluate()
            flat[i] = orig - perturbation
            minus = evaluate()
            flat[i] = orig
            num = (plus - minus) / (2 * perturbation)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), denom_floor)
            worst = max(worst, err)
    return worst


def _layers(model):
    return getattr(model, "layers", [model])


def _params(model):
    for li, layer in enumerate(_layers(model)):
        for name, p in layer.params.items():
            yield (li, name), p


def _grads(model):
    return {(li, name): g for li, layer in enumerate(_layers(model)) for name, g in layer.grads.items()}


def _buffers(model):
    for layer in _layers(model):
        yield from layer.buffers.values()
