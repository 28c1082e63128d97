"""
Reverse-mode automatic differentiation on numpy arrays.

Only the operators the U-Net generator and the PatchGAN discriminator need:
convolution and transposed convolution (im2col), activations, instance
normalization, channel concatenation, the L1/L2/BCE losses and elementwise
arithmetic. Everything is float64. Adam and a single-file checkpoint format
live here too.
"""

import json
import struct
import logging
import threading
from contextlib import contextmanager
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InvalidArgumentError, NumericError, ImageIOError, ImageParseError

logger = logging.getLogger('cdplab')

CHECKPOINT_MAGIC = b'CDPCKPT1'

_grad_mode = threading.local()


@contextmanager
def no_grad():
    """Build no graph inside the block (inference); per thread"""
    previous = getattr(_grad_mode, 'disabled', False)
    _grad_mode.disabled = True
    try:
        yield
    finally:
        _grad_mode.disabled = previous


class Tensor:
    """n-dimensional value node; NCHW layout for images"""

    __slots__ = ('data', 'grad', 'requires_grad', '_parents', '_backward', 'op')

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op='leaf'):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Trainable leaf"""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _check_finite(values: np.ndarray, op: str):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite value produced by {op}")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    requires_grad = not getattr(_grad_mode, 'disabled', False) and any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate d loss / d leaf into .grad of every requires_grad leaf"""
    if loss.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            _check_finite(parent_grad, f"backward of {node.op}")
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad


# Elementwise arithmetic: tensors of identical shape, or a tensor and a scalar.

def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise InvalidArgumentError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, 'add')
        return _node(a.data + b.data, (a, b), lambda g: (g, g), 'add')
    return _node(a.data + float(b), (a,), lambda g: (g,), 'add')


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, 'sub')
        return _node(a.data - b.data, (a, b), lambda g: (g, -g), 'sub')
    return _node(a.data - float(b), (a,), lambda g: (g,), 'sub')


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, 'mul')
        return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), 'mul')
    scale = float(b)
    return _node(a.data * scale, (a,), lambda g: (g * scale,), 'mul')


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, 'div')
        out = a.data / b.data
        return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), 'div')
    scale = float(b)
    return _node(a.data / scale, (a,), lambda g: (g / scale,), 'div')


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), 'neg')


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,), 'reciprocal')


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), 'square')


def tensor_sum(a: Tensor) -> Tensor:
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),), 'sum')


def tensor_mean(a: Tensor) -> Tensor:
    n = a.size
    return _node(np.array(a.data.mean()), (a,), lambda g: (np.full_like(a.data, g / n),), 'mean')


# Activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), 'relu')


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise InvalidArgumentError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    scale = np.where(x.data > 0, 1.0, slope)
    return _node(x.data * scale, (x,), lambda g: (g * scale,), 'leaky_relu')


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), 'sigmoid')


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), 'tanh')


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over H and W (no affine)"""
    if eps <= 0:
        raise InvalidArgumentError(f"instance_norm eps must be > 0, got {eps}")
    if x.data.ndim != 4:
        raise InvalidArgumentError(f"instance_norm expects NCHW, got shape {x.shape}")
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std

    def backward_fn(g):
        g_mean = g.mean(axis=(2, 3), keepdims=True)
        gx_mean = (g * x_hat).mean(axis=(2, 3), keepdims=True)
        return (inv_std * (g - g_mean - x_hat * gx_mean),)

    return _node(x_hat, (x,), backward_fn, 'instance_norm')


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise InvalidArgumentError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _node(out, (a, b), lambda g: (g[:, :split], g[:, split:]), 'concat_channels')


# Convolutions (im2col over a strided view, col2im by scatter-add per kernel tap)

def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    s_n, s_c, s_h, s_w = x.strides
    patches = as_strided(
        x, shape=(n, c, k, k, h_out, w_out),
        strides=(s_n, s_c, s_h, s_w, stride * s_h, stride * s_w), writeable=False,
    )
    return patches.reshape(n, c * k * k, h_out * w_out)


def _col2im(cols: np.ndarray, shape: Tuple[int, int, int, int], k: int, stride: int,
            h_out: int, w_out: int) -> np.ndarray:
    n, c = shape[:2]
    cols = cols.reshape(n, c, k, k, h_out, w_out)
    out = np.zeros(shape, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += cols[:, :, i, j]
    return out


def _check_conv_args(stride: int, padding: int):
    if stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise InvalidArgumentError(f"padding must be >= 0, got {padding}")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """x [N,C,H,W] * kernel [F,C,k,k] -> [N,F,H',W'], H' = (H + 2p - k) // s + 1"""
    _check_conv_args(stride, padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1] \
            or kernel.shape[2] != kernel.shape[3]:
        raise InvalidArgumentError(f"conv2d: input {x.shape} does not fit kernel {kernel.shape}")
    n, c, h, w = x.shape
    f, _, k, _ = kernel.shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise InvalidArgumentError(f"conv2d: input {x.shape} smaller than kernel {kernel.shape}")
    if bias is not None and bias.shape != (f,):
        raise InvalidArgumentError(f"conv2d: bias shape {bias.shape} does not match {f} filters")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(padded, k, stride)
    w_mat = kernel.data.reshape(f, -1)
    out = np.matmul(w_mat, cols)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(n, f, h_out, w_out)

    def backward_fn(g):
        g_mat = g.reshape(n, f, h_out * w_out)
        grad_kernel = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        grad_cols = np.matmul(w_mat.T, g_mat)
        grad_padded = _col2im(grad_cols, padded.shape, k, stride, h_out, w_out)
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w]
        grad_bias = g_mat.sum(axis=(0, 2)) if bias is not None else None
        return grad_x, grad_kernel, grad_bias

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _node(out, parents, backward_fn, 'conv2d')


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """x [N,C,H,W] with kernel [C,F,k,k] -> [N,F,H',W'], H' = (H - 1) * s - 2p + k"""
    _check_conv_args(stride, padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[0] \
            or kernel.shape[2] != kernel.shape[3]:
        raise InvalidArgumentError(f"conv2d_transpose: input {x.shape} does not fit kernel {kernel.shape}")
    n, c, h, w = x.shape
    _, f, k, _ = kernel.shape
    h_full = (h - 1) * stride + k
    w_full = (w - 1) * stride + k
    h_out = h_full - 2 * padding
    w_out = w_full - 2 * padding
    if h_out < 1 or w_out < 1:
        raise InvalidArgumentError(f"conv2d_transpose: padding {padding} leaves no output for {x.shape}")
    if bias is not None and bias.shape != (f,):
        raise InvalidArgumentError(f"conv2d_transpose: bias shape {bias.shape} does not match {f} filters")

    x_mat = x.data.reshape(n, c, h * w)
    w_mat = kernel.data.reshape(c, f * k * k)
    cols = np.matmul(w_mat.T, x_mat)
    full = _col2im(cols, (n, f, h_full, w_full), k, stride, h, w)
    out = full[:, :, padding:padding + h_out, padding:padding + w_out]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward_fn(g):
        g_full = np.zeros((n, f, h_full, w_full), dtype=np.float64)
        g_full[:, :, padding:padding + h_out, padding:padding + w_out] = g
        g_cols = _im2col(g_full, k, stride)
        grad_x = np.matmul(w_mat, g_cols).reshape(x.shape)
        grad_kernel = np.matmul(x_mat, g_cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        grad_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_kernel, grad_bias

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _node(np.ascontiguousarray(out), parents, backward_fn, 'conv2d_transpose')


# Losses (scalar outputs). Targets may be tensors or plain arrays.

def _target_data(target, like: Tensor, op: str) -> np.ndarray:
    data = target.data if isinstance(target, Tensor) else np.broadcast_to(
        np.asarray(target, dtype=np.float64), like.shape)
    if data.shape != like.shape:
        raise InvalidArgumentError(f"{op}: shape mismatch {like.shape} vs {data.shape}")
    return data


def l1_loss(a: Tensor, b) -> Tensor:
    """mean |a - b|; subgradient 0 where a == b"""
    b_data = _target_data(b, a, 'l1_loss')
    diff = a.data - b_data
    n = diff.size

    def backward_fn(g):
        grad = g * np.sign(diff) / n
        return grad, -grad

    parents = (a, b) if isinstance(b, Tensor) else (a,)
    return _node(np.array(np.abs(diff).mean()), parents, backward_fn, 'l1_loss')


def mse_loss(a: Tensor, b) -> Tensor:
    b_data = _target_data(b, a, 'mse_loss')
    diff = a.data - b_data
    n = diff.size

    def backward_fn(g):
        grad = 2.0 * g * diff / n
        return grad, -grad

    parents = (a, b) if isinstance(b, Tensor) else (a,)
    return _node(np.array((diff * diff).mean()), parents, backward_fn, 'mse_loss')


def bce_loss(p: Tensor, target, eps: float = 1e-7) -> Tensor:
    """mean of -[t log p + (1 - t) log(1 - p)] with p clamped to [eps, 1 - eps]"""
    t = _target_data(target, p, 'bce_loss')
    clipped = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)
    n = clipped.size
    log_p = np.log(clipped)
    log_q = np.log(1.0 - clipped)
    value = -(t * log_p + (1.0 - t) * log_q).mean()

    def backward_fn(g):
        grad_p = -g * (t / clipped - (1.0 - t) / (1.0 - clipped)) * inside / n
        grad_t = -g * (log_p - log_q) / n
        return grad_p, grad_t

    parents = (p, target) if isinstance(target, Tensor) else (p,)
    return _node(np.array(value), parents, backward_fn, 'bce_loss')


# Modules

class Module:
    """Container of named parameters and sub-modules"""

    def forward(self, *args):
        raise NotImplementedError

    def __call__(self, *args):
        return self.forward(*args)

    def named_parameters(self, prefix: str = '') -> List[Tuple[str, Parameter]]:
        named = []
        for name, value in self.__dict__.items():
            if isinstance(value, Parameter):
                named.append((prefix + name, value))
            elif isinstance(value, Module):
                named.extend(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        named.extend(item.named_parameters(f"{prefix}{name}.{index}."))
        return named

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        named = self.named_parameters()
        missing = [name for name, _ in named if name not in state]
        if missing:
            raise InvalidArgumentError(f"State is missing parameters: {', '.join(missing)}")
        for name, p in named:
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise InvalidArgumentError(f"Parameter {name}: shape {value.shape} vs {p.shape}")
            p.data = value.copy()


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng: Optional[np.random.Generator] = None, init_std=0.02):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0.0, init_std, (out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng: Optional[np.random.Generator] = None, init_std=0.02):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0.0, init_std, (in_channels, out_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)


# Adam

@dataclass
class AdamState:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
              state: AdamState) -> Tuple[List[np.ndarray], AdamState]:
    """One bias-corrected Adam update; a missing gradient counts as zero"""
    if len(params) != len(grads):
        raise InvalidArgumentError(f"adam_step: {len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise InvalidArgumentError("adam_step: optimizer state does not match the parameter list")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise InvalidArgumentError(f"adam_step: gradient shape {g.shape} vs parameter {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        updated.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
    return updated, state


class Adam:
    """Adam over a fixed parameter list"""

    def __init__(self, params: Sequence[Parameter], learning_rate=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        updated, self.state = adam_step([p.data for p in self.params],
                                        [p.grad for p in self.params], self.state)
        for p, value in zip(self.params, updated):
            p.data = value

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# Checkpoints: magic, header length (<u8), JSON header, little-endian float64 blocks.

def save_checkpoint(path, module: Module, header: Dict):
    path = Path(path)
    named = module.named_parameters()
    header = dict(header)
    header['parameters'] = [{'name': name, 'shape': list(p.shape)} for name, p in named]
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack('<Q', len(header_bytes)))
            f.write(header_bytes)
            for _, p in named:
                f.write(np.ascontiguousarray(p.data, dtype='<f8').tobytes())
    except OSError as e:
        raise ImageIOError(f"Could not write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> Tuple[Dict, 'OrderedDict[str, np.ndarray]']:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ImageIOError(f"Could not read checkpoint {path}: {e}") from e

    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ImageParseError(path, 0, 'not a checkpoint file')
    offset = len(CHECKPOINT_MAGIC)
    if len(raw) < offset + 8:
        raise ImageParseError(path, offset, 'truncated header length')
    (header_len,) = struct.unpack_from('<Q', raw, offset)
    offset += 8
    try:
        header = json.loads(raw[offset:offset + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ImageParseError(path, offset, f'bad header ({e})') from e
    offset += header_len

    state = OrderedDict()
    for entry in header.get('parameters', []):
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ImageParseError(path, offset, f"truncated block for {entry['name']}")
        state[entry['name']] = np.frombuffer(raw, dtype='<f8', count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise ImageParseError(path, offset, 'trailing bytes after parameter blocks')
    return header, state


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-3,
                       indices: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """Central differences of a scalar-valued closure w.r.t. entries of tensor"""
    grad = np.zeros_like(tensor.data)
    positions = indices if indices is not None else list(np.ndindex(*tensor.shape))
    for index in positions:
        original = tensor.data[index]
        tensor.data[index] = original + h
        plus = fn().item()
        tensor.data[index] = original - h
        minus = fn().item()
        tensor.data[index] = original
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


def gradient_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3,
                   max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between backward() and central differences"""
    for t in tensors:
        t.zero_grad()
    fn().backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        positions = list(np.ndindex(*t.shape))
        if max_entries is not None and len(positions) > max_entries:
            picks = rng.choice(len(positions), size=max_entries, replace=False)
            positions = [positions[i] for i in sorted(picks)]
        numeric = numerical_gradient(fn, t, h, positions)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        for index in positions:
            scale = max(abs(analytic[index]), abs(numeric[index]))
            if scale < 1e-12:
                continue
            worst = max(worst, abs(analytic[index] - numeric[index]) / scale)
    return worst
