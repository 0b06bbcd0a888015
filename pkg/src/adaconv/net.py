"""The kernel-estimation network and its checkpoint format."""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, StateError
from .tensor import BatchNorm, Conv2D, ReLU, SpatialSoftmax, conv_output_size

MAGIC = b"ADKN"
VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture parameters.

    ``conv_sizes`` has one entry per stride-1 convolution; the last one is the
    1x1 layer producing the ``k * 2k`` kernel logits, so it has one more entry
    than ``conv_widths``. The first ``down_conv_count`` convolutions are each
    followed by a 2x2 stride-2 down-convolution.
    """

    receptive_field: int
    patch_size: int
    down_conv_count: int
    conv_widths: tuple
    conv_sizes: tuple

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        object.__setattr__(self, "conv_sizes", tuple(int(s) for s in self.conv_sizes))

    @classmethod
    def paper(cls):
        return cls(79, 41, 3, (32, 64, 128, 256, 2048), (7, 5, 5, 3, 4, 1))

    @classmethod
    def desk(cls):
        return cls(23, 11, 1, (16, 32, 512), (7, 5, 4, 1))

    @property
    def kernel_length(self):
        return self.patch_size * 2 * self.patch_size

    @property
    def stride_factor(self):
        return 2 ** self.down_conv_count

    @property
    def pad(self):
        return (self.receptive_field - 1) // 2

    def layer_specs(self):
        """Ordered layer descriptions: (kind, out_ch, size, stride, bn, relu)."""
        n = len(self.conv_sizes)
        specs = []
        for i, size in enumerate(self.conv_sizes):
            out_ch = self.conv_widths[i] if i < len(self.conv_widths) else self.kernel_length
            specs.append(("conv", out_ch, size, 1, i < n - 2, i < n - 1))
            if i < self.down_conv_count:
                specs.append(("down-conv", out_ch, 2, 2, False, True))
        return specs

    def shape_chain(self):
        """Symbolic (channels, extent) after each conv layer; validates the chain."""
        r, k = self.receptive_field, self.patch_size
        if r % 2 == 0 or k % 2 == 0 or k > r or k < 1:
            raise ConfigError(f"receptive field {r} and patch size {k} must be odd with k <= R")
        if len(self.conv_sizes) != len(self.conv_widths) + 1:
            raise ConfigError(
                f"{len(self.conv_sizes)} conv sizes need {len(self.conv_sizes) - 1} widths, "
                f"got {len(self.conv_widths)}"
            )
        if not 0 <= self.down_conv_count <= len(self.conv_sizes) - 1:
            raise ConfigError(f"down-conv count {self.down_conv_count} out of range")
        chain = []
        ch, extent = 6, r
        for idx, (kind, out_ch, size, stride, _, _) in enumerate(self.layer_specs()):
            new = conv_output_size(extent, size, stride)
            if new < 1:
                raise ConfigError(
                    f"layer {idx} ({kind} {size}x{size}): input extent {extent} too small"
                )
            last = idx == len(self.layer_specs()) - 1
            if last and (size != 1 or extent != 1):
                raise ConfigError(
                    f"layer {idx} ({kind} {size}x{size}): final layer must be 1x1 on a 1x1 input, "
                    f"got extent {extent}"
                )
            ch, extent = out_ch, new
            chain.append((kind, ch, extent))
        return chain


@dataclass
class KernelPair:
    k1: np.ndarray
    k2: np.ndarray

    @classmethod
    def from_kernel(cls, kernel):
        k = kernel.shape[-2]
        return cls(kernel[..., :k], kernel[..., k:])

    @property
    def kernel(self):
        return np.concatenate([self.k1, self.k2], axis=-1)


def _xavier(rng, out_ch, in_ch, size, dtype):
    fan_in = in_ch * size * size
    fan_out = out_ch * size * size
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(out_ch, in_ch, size, size)).astype(dtype)


class KernelNet:
    """Fully convolutional kernel estimator followed by a spatial softmax.

    ``forward`` maps a (N, 6, R, R) batch to (N, k, 2k) kernels; larger inputs
    go through ``forward_field`` and give one kernel per output location.
    """

    def __init__(self, config, layers):
        self.config = config
        self.layers = layers
        self._out_hw = None

    @property
    def dtype(self):
        return self.layers[0].params["weight"].dtype

    def parameters(self):
        """Yield (name, array) for every trainable parameter."""
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{i}.{name}", p

    def gradients(self):
        return {f"{i}.{n}": g for i, layer in enumerate(self.layers) for n, g in layer.grads.items()}

    def state_tensors(self):
        """Parameters and buffers in checkpoint order."""
        out = []
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                out += [layer.params["weight"], layer.params["bias"]]
            elif isinstance(layer, BatchNorm):
                out += [layer.params["gamma"], layer.params["beta"],
                        layer.buffers["running_mean"], layer.buffers["running_var"]]
        return out

    def astype(self, dtype):
        clone = build_network(self.config, dtype=dtype)
        for dst, src in zip(clone.state_tensors(), self.state_tensors()):
            dst[...] = src
        return clone

    def logits(self, x, train=False):
        for layer in self.layers[:-1]:
            x = layer.forward(x, train=train)
        return x

    def forward_field(self, x, train=False):
        """Kernels for every output location: (N, h, w, k, 2k)."""
        y = self.layers[-1].forward(self.logits(x, train), train=train)
        n, c, h, w = y.shape
        self._out_hw = (h, w)
        k = self.config.patch_size
        return y.transpose(0, 2, 3, 1).reshape(n, h, w, k, 2 * k)

    def forward(self, x, train=False):
        r = self.config.receptive_field
        if x.ndim != 4 or x.shape[1:] != (6, r, r):
            raise ShapeError(f"expected input dims [N, 6, {r}, {r}], got {list(x.shape)}")
        return self.forward_field(x, train)[:, 0, 0]

    def backward(self, d_kernel):
        """Backpropagate d(loss)/d(kernel); fills each layer's ``grads``."""
        if self._out_hw is None:
            raise StateError("backward called without a cached forward pass")
        k = self.config.patch_size
        h, w = self._out_hw
        if d_kernel.ndim == 3:
            d_kernel = d_kernel[:, None, None]
        n = d_kernel.shape[0]
        dy = d_kernel.reshape(n, h, w, 2 * k * k).transpose(0, 3, 1, 2)
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def build_network(config, dtype=np.float32):
    """Allocate layers for ``config`` (weights zero, BN at identity)."""
    config.shape_chain()
    layers = []
    in_ch = 6
    for kind, out_ch, size, stride, bn, act in config.layer_specs():
        w = np.zeros((out_ch, in_ch, size, size), dtype)
        layers.append(Conv2D(w, np.zeros(out_ch, dtype), (stride, stride)))
        if bn:
            layers.append(BatchNorm(out_ch, dtype))
        if act:
            layers.append(ReLU())
        in_ch = out_ch
    layers.append(SpatialSoftmax())
    return KernelNet(config, layers)


def init_network(config, seed=0, dtype=np.float32):
    """Xavier-uniform weights, zero biases, BN gamma 1 / beta 0."""
    net = build_network(config, dtype)
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if isinstance(layer, Conv2D):
            o, i, s, _ = layer.params["weight"].shape
            layer.params["weight"][...] = _xavier(rng, o, i, s, dtype)
    return net


def stack_inputs(r1, r2):
    """Concatenate two (3, R, R) patches, or batches of them, along channels."""
    return np.concatenate([r1, r2], axis=-3)


def forward_kernel(net, r1, r2, train=False):
    r = net.config.receptive_field
    if r1.shape != (3, r, r) or r2.shape != (3, r, r):
        raise ShapeError(f"receptive patches must be [3, {r}, {r}], got {list(r1.shape)} and {list(r2.shape)}")
    x = stack_inputs(r1, r2)[None].astype(net.dtype, copy=False)
    return KernelPair.from_kernel(net.forward(x, train=train)[0])


# checkpoint encoding

def write_tensor(fh, array):
    array = np.ascontiguousarray(array, dtype="<f4")
    fh.write(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
    fh.write(array.tobytes())


def read_tensor(fh):
    head = fh.read(4)
    if len(head) != 4:
        raise FormatError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank}")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(dims)) if rank else 1
    data = fh.read(4 * count)
    if len(data) != 4 * count:
        raise FormatError(f"truncated tensor data: expected {4 * count} bytes, got {len(data)}")
    return np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)


def save_checkpoint(net, path):
    cfg = net.config
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        header = [VERSION, cfg.receptive_field, cfg.patch_size, cfg.down_conv_count,
                  len(cfg.conv_widths), *cfg.conv_widths, len(cfg.conv_sizes), *cfg.conv_sizes]
        fh.write(struct.pack(f"<{len(header)}I", *header))
        for t in net.state_tensors():
            write_tensor(fh, t)


def _read_u32s(fh, n):
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise FormatError("truncated checkpoint header")
    return struct.unpack(f"<{n}I", raw)


def load_checkpoint(path):
    """Rebuild a network from a checkpoint; raises instead of returning partial state."""
    with open(Path(path), "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError(f"{path}: bad magic, not a kernel-net checkpoint")
        (version,) = _read_u32s(fh, 1)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        r, k, d, nw = _read_u32s(fh, 4)
        widths = _read_u32s(fh, nw)
        (ns,) = _read_u32s(fh, 1)
        sizes = _read_u32s(fh, ns)
        config = NetworkConfig(r, k, d, widths, sizes)
        net = build_network(config, np.float32)
        for i, dst in enumerate(net.state_tensors()):
            src = read_tensor(fh)
            if src.shape != dst.shape:
                raise ConfigError(
                    f"{path}: tensor {i} has dims {list(src.shape)}, config expects {list(dst.shape)}"
                )
            dst[...] = src
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last tensor")
    return net
