"""A small deterministic network engine with manual backpropagation.

Tensors are plain float64 numpy arrays laid out height x width x channels.
A :class:`Network` is an ordered list of layers; :meth:`Network.forward`
returns every intermediate activation and :meth:`Network.backward` consumes
that list, so layers keep no hidden state between the two passes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from conslab.errors import NumericError, StructuralError


@dataclass
class Param:
    """A learnable tensor with its gradient and Adam moment buffers."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class Layer:
    kind = "layer"
    params: Tuple[Param, ...] = ()

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train, rng):
        raise NotImplementedError

    def backward(self, x, y, g, need_param_grads):
        raise NotImplementedError


class Dense(Layer):
    """Affine map over the last axis (a 1x1 convolution on image tensors)."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.n_in, self.n_out = n_in, n_out
        self.W = Param(glorot(rng, (n_in, n_out), n_in, n_out))
        self.b = Param(np.zeros(n_out))
        self.params = (self.W, self.b)

    def out_shape(self, in_shape):
        if in_shape[-1] != self.n_in:
            raise StructuralError(f"dense expects last dim {self.n_in}, got {in_shape}")
        return tuple(in_shape[:-1]) + (self.n_out,)

    def forward(self, x, train, rng):
        self.out_shape(x.shape)
        return x @ self.W.value + self.b.value

    def backward(self, x, y, g, need_param_grads):
        if need_param_grads:
            x2 = x.reshape(-1, self.n_in)
            g2 = g.reshape(-1, self.n_out)
            self.W.grad += x2.T @ g2
            self.b.grad += g2.sum(axis=0)
        return g @ self.W.value.T


class Conv3x3(Layer):
    """3x3 convolution with zero padding 1 and stride 1 or 2."""

    kind = "conv3x3"

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1):
        if stride not in (1, 2):
            raise StructuralError(f"stride must be 1 or 2, got {stride}")
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.W = Param(glorot(rng, (3, 3, c_in, c_out), 9 * c_in, 9 * c_out))
        self.b = Param(np.zeros(c_out))
        self.params = (self.W, self.b)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.c_in:
            raise StructuralError(f"conv expects (H, W, {self.c_in}), got {tuple(in_shape)}")
        H, W = in_shape[:2]
        s = self.stride
        return ((H - 1) // s + 1, (W - 1) // s + 1, self.c_out)

    def _cols(self, x):
        Ho, Wo, _ = self.out_shape(x.shape)
        s = self.stride
        win = sliding_window_view(_pad1(x), (3, 3), axis=(0, 1))[::s, ::s]  # (Ho, Wo, C, 3, 3)
        return win.transpose(0, 1, 3, 4, 2).reshape(Ho * Wo, 9 * self.c_in), Ho, Wo

    def _wmat(self):
        return self.W.value.reshape(9 * self.c_in, self.c_out)

    def forward(self, x, train, rng):
        cols, Ho, Wo = self._cols(x)
        out = cols @ self._wmat() + self.b.value
        return out.reshape(Ho, Wo, self.c_out)

    def backward(self, x, y, g, need_param_grads):
        Ho, Wo, _ = g.shape
        g2 = g.reshape(Ho * Wo, self.c_out)
        if need_param_grads:
            cols, _, _ = self._cols(x)
            self.W.grad += (cols.T @ g2).reshape(self.W.shape)
            self.b.grad += g2.sum(axis=0)
        H, W = x.shape[:2]
        if self.stride == 1:
            # correlation of the output grad with the flipped kernel
            win = sliding_window_view(_pad1(g), (3, 3), axis=(0, 1)).transpose(0, 1, 3, 4, 2)
            wf = self.W.value[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * self.c_out, self.c_in)
            return (win.reshape(H * W, 9 * self.c_out) @ wf).reshape(H, W, self.c_in)
        s = self.stride
        gcols = (g2 @ self._wmat().T).reshape(Ho, Wo, 3, 3, self.c_in)
        gp = np.zeros((H + 2, W + 2, self.c_in))
        for dy in range(3):
            for dx in range(3):
                gp[dy : dy + s * (Ho - 1) + 1 : s, dx : dx + s * (Wo - 1) + 1 : s, :] += gcols[:, :, dy, dx, :]
        return gp[1:-1, 1:-1, :]


def _pad1(x):
    out = np.zeros((x.shape[0] + 2, x.shape[1] + 2, x.shape[2]))
    out[1:-1, 1:-1] = x
    return out


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, rng):
        return np.maximum(x, 0.0)

    def backward(self, x, y, g, need_param_grads):
        return g * (x > 0)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, train, rng):
        return np.tanh(x)

    def backward(self, x, y, g, need_param_grads):
        return g * (1.0 - y * y)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train, rng):
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    def backward(self, x, y, g, need_param_grads):
        return g * y * (1.0 - y)


class SoftmaxPerPixel(Layer):
    kind = "softmax"

    def forward(self, x, train, rng):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def backward(self, x, y, g, need_param_grads):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))


class GaussianNoise(Layer):
    """Additive N(0, std^2) noise in training mode; identity in eval mode."""

    kind = "noise"

    def __init__(self, std: float):
        if std < 0:
            raise StructuralError("noise std must be >= 0")
        self.std = std

    def forward(self, x, train, rng):
        if not train or self.std == 0:
            return x
        if rng is None:
            raise StructuralError("GaussianNoise in train mode needs an rng")
        return x + rng.normal(0.0, self.std, size=x.shape)

    def backward(self, x, y, g, need_param_grads):
        return g


class Network:
    def __init__(self, layers: Sequence[Layer], name: str = "net"):
        self.layers = list(layers)
        self.name = name

    @property
    def params(self) -> List[Param]:
        return [p for layer in self.layers for p in layer.params]

    def forward(self, x, train: bool = False, rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
        """Return ``[x, out_0, out_1, ...]``; the last entry is the network output."""
        acts = [np.asarray(x, dtype=np.float64)]
        for layer in self.layers:
            acts.append(layer.forward(acts[-1], train, rng))
        return acts

    def __call__(self, x, train=False, rng=None):
        return self.forward(x, train, rng)[-1]

    def backward(self, acts: Sequence[np.ndarray], output_grad, need_param_grads: bool = True):
        """Accumulate parameter gradients and return the input gradient."""
        if len(acts) != len(self.layers) + 1:
            raise StructuralError("activation list does not match this network")
        g = np.asarray(output_grad, dtype=np.float64)
        if g.shape != acts[-1].shape:
            raise StructuralError(f"output grad shape {g.shape} != output shape {acts[-1].shape}")
        for i in range(len(self.layers) - 1, -1, -1):
            x, y = acts[i], acts[i + 1]
            if self.layers[i].out_shape(x.shape) != y.shape:
                raise StructuralError(f"stale activations at layer {i}")
            g = self.layers[i].backward(x, y, g, need_param_grads)
        return g

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0


def adam_step(
    params: Sequence[Param],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_hat: float = 1e-8,
):
    """Bias-corrected Adam update of each param in place; grads are zeroed."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError("non-finite gradient")
    for p in params:
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps_hat)
        p.grad[...] = 0.0


def finite_diff_check(
    net: Network,
    x: np.ndarray,
    scalar_loss: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    h: float = 1e-5,
    grad_transform: Optional[Callable[[List[np.ndarray]], None]] = None,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between backprop and central-difference grads.

    ``scalar_loss`` maps the network output to ``(value, d value / d output)``.
    The network is evaluated in eval mode.  ``grad_transform`` may edit the
    list of analytic gradients in place before comparison (fault injection).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-8 < h < 1e-3:
        raise ValueError("h must lie in (1e-8, 1e-3)")
    saved = [p.grad.copy() for p in net.params]
    net.zero_grad()
    acts = net.forward(x)
    _, gout = scalar_loss(acts[-1])
    net.backward(acts, gout)
    analytic = [p.grad.copy() for p in net.params]
    for p, g in zip(net.params, saved):
        p.grad[...] = g
    if grad_transform is not None:
        grad_transform(analytic)

    worst = 0.0
    for p, ga in zip(net.params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar_loss(net(x))[0]
            flat[i] = orig - h
            fm = scalar_loss(net(x))[0]
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


# --- checkpoint file -------------------------------------------------------
#
# header:  magic b"CLNN", u16 version, u32 layer count
# layer:   u16 name length, utf-8 name, u32 param count
# param:   u8 ndim, u32 dims[ndim], float64 little-endian data (row-major)

MAGIC = b"CLNN"
VERSION = 1


def save_checkpoint(path, networks: Sequence[Network]):
    entries = [(f"{net.name}.{i}.{layer.kind}", layer) for net in networks for i, layer in enumerate(net.layers)]
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(entries)))
        for name, layer in entries:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<I", len(layer.params)))
            for p in layer.params:
                fh.write(struct.pack("<B", p.value.ndim))
                fh.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
                fh.write(p.value.astype("<f8").tobytes())


def load_checkpoint(path, networks: Sequence[Network]):
    """Fill the parameters of ``networks`` (same architecture) from ``path``."""
    entries = [(f"{net.name}.{i}.{layer.kind}", layer) for net in networks for i, layer in enumerate(net.layers)]
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise StructuralError("not a checkpoint file")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise StructuralError(f"unsupported checkpoint version {version}")
    if count != len(entries):
        raise StructuralError(f"checkpoint has {count} layers, model has {len(entries)}")
    off = 10
    for name, layer in entries:
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        stored = data[off : off + n].decode()
        off += n
        if stored != name:
            raise StructuralError(f"layer mismatch: checkpoint {stored!r}, model {name!r}")
        (np_,) = struct.unpack_from("<I", data, off)
        off += 4
        if np_ != len(layer.params):
            raise StructuralError(f"param count mismatch at {name}")
        for p in layer.params:
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            if tuple(shape) != p.value.shape:
                raise StructuralError(f"shape mismatch at {name}: {shape} vs {p.value.shape}")
            size = int(np.prod(shape)) * 8
            p.value[...] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=off).reshape(shape)
            off += size
