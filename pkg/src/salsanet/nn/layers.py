"""
Stateful layer wrappers around :mod:`salsanet.nn.functional`.

Each module caches what its backward pass needs during ``forward`` and
stores parameter gradients in ``grads`` during ``backward``.  A module is
meant to be called once per forward/backward pair.
"""

from __future__ import annotations

import enum
import os
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import functional as F

DEBUG = os.environ.get("SALSANET_DEBUG", "") not in ("", "0")


class NonFiniteError(FloatingPointError):
    pass


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


def set_debug(flag: bool) -> None:
    """Enable a finiteness check on every module output."""
    global DEBUG
    DEBUG = flag


class Module:
    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.children: Dict[str, "Module"] = {}

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def __call__(self, x, mode: Mode = Mode.INFER, rng=None):
        out = self.forward(x, mode, rng)
        if DEBUG and not np.isfinite(out).all():
            raise NonFiniteError(f"{type(self).__name__} produced non-finite values")
        return out

    def forward(self, x, mode, rng):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _walk(self, attr: str, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for k, v in getattr(self, attr).items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child._walk(attr, f"{prefix}{name}.")

    def named_parameters(self):
        return self._walk("params")

    def named_grads(self):
        return self._walk("grads")

    def named_buffers(self):
        return self._walk("buffers")

    def state_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.named_parameters()) | dict(self.named_buffers())

    def _slots(self, prefix: str = ""):
        for store in ("params", "buffers"):
            for k in getattr(self, store):
                yield prefix + k, self, store, k
        for name, child in self.children.items():
            yield from child._slots(f"{prefix}{name}.")

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        slots = {name: (m, store, k) for name, m, store, k in self._slots()}
        missing = set(slots) - set(state)
        extra = set(state) - set(slots)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, (m, store, k) in slots.items():
            cur = getattr(m, store)[k]
            new = np.asarray(state[name])
            if new.shape != cur.shape:
                raise F.ShapeError(f"{name}: checkpoint shape {new.shape} != model shape {cur.shape}")
            getattr(m, store)[k] = new.astype(cur.dtype).copy()

    def astype(self, dtype) -> "Module":
        for _, m, store, k in self._slots():
            getattr(m, store)[k] = getattr(m, store)[k].astype(dtype)
        return self

    def zero_grads(self):
        for m in self.modules():
            m.grads = {}

    def modules(self):
        yield self
        for child in self.children.values():
            yield from child.modules()


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, rng=None, bias: bool = True,
                 stride: int = 1, pad: Optional[int] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.params["weight"] = _he_normal(rng, (c_out, c_in, k, k), c_in * k * k)
        if bias:
            self.params["bias"] = np.zeros(c_out, dtype=np.float32)

    def forward(self, x, mode, rng):
        self._x = x
        return F.conv2d(x, self.params["weight"], self.params.get("bias"), self.stride, self.pad)

    def backward(self, grad):
        gx, gw, gb = F.conv2d_backward(grad, self._x, self.params["weight"], self.stride,
                                       self.pad, bias="bias" in self.params)
        self.grads["weight"] = gw
        if gb is not None:
            self.grads["bias"] = gb
        return gx


class TransposedConv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng=None, bias: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        # kernel 2 / stride 2: each output pixel sees exactly one input pixel per channel
        self.params["weight"] = _he_normal(rng, (c_in, c_out, 2, 2), c_in)
        if bias:
            self.params["bias"] = np.zeros(c_out, dtype=np.float32)

    def forward(self, x, mode, rng):
        self._x = x
        return F.transposed_conv2d(x, self.params["weight"], self.params.get("bias"))

    def backward(self, grad):
        gx, gw, gb = F.transposed_conv2d_backward(grad, self._x, self.params["weight"],
                                                  bias="bias" in self.params)
        self.grads["weight"] = gw
        if gb is not None:
            self.grads["bias"] = gb
        return gx


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=np.float32)
        self.params["beta"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float32)

    def forward(self, x, mode, rng):
        p, b = self.params, self.buffers
        if mode is Mode.TRAIN:
            out, self._cache, mean, var = F.batch_norm_train(x, p["gamma"], p["beta"], self.eps)
            m = self.momentum
            dt = b["running_mean"].dtype
            b["running_mean"] = (m * b["running_mean"] + (1 - m) * mean).astype(dt)
            b["running_var"] = (m * b["running_var"] + (1 - m) * var).astype(dt)
            self._train = True
        else:
            out, self._cache = F.batch_norm_infer(x, p["gamma"], p["beta"], b["running_mean"],
                                                  b["running_var"], self.eps)
            self._train = False
        return out

    def backward(self, grad):
        if self._train:
            gx, gg, gb = F.batch_norm_train_backward(grad, self._cache)
            self.grads["gamma"], self.grads["beta"] = gg, gb
            return gx
        return F.batch_norm_infer_backward(grad, self._cache)[0]


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.1):
        super().__init__()
        self.slope = slope

    def forward(self, x, mode, rng):
        self._x = x
        return F.leaky_relu(x, self.slope)

    def backward(self, grad):
        return F.leaky_relu_backward(grad, self._x, self.slope)


class MaxPool2(Module):
    def forward(self, x, mode, rng):
        out, self._arg = F.max_pool2(x)
        return out

    def backward(self, grad):
        return F.max_pool2_backward(grad, self._arg)


class Dropout(Module):
    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, mode, rng):
        out, self._mask = F.dropout(x, self.p, rng, mode is Mode.TRAIN)
        return out

    def backward(self, grad):
        return F.dropout_backward(grad, self._mask)


class Sequential(Module):
    def __init__(self, *named: Tuple[str, Module]):
        super().__init__()
        for name, m in named:
            self.add(name, m)

    def forward(self, x, mode, rng):
        for m in self.children.values():
            x = m(x, mode, rng)
        return x

    def backward(self, grad):
        for m in reversed(list(self.children.values())):
            grad = m.backward(grad)
        return grad


def conv_bn_act(c_in: int, c_out: int, rng, slope: float = 0.1, momentum: float = 0.99) -> Sequential:
    # bias is redundant in front of batch norm
    return Sequential(("conv", Conv2d(c_in, c_out, 3, rng, bias=False)),
                      ("bn", BatchNorm2d(c_out, momentum)),
                      ("act", LeakyReLU(slope)))
